//! Hop-count shortest paths and the road-segment/trajectory weight vector.
//!
//! For a trajectory `τ` with origin `o` and destination `d`, a segment `s`
//! gets weight `|τ| / (|τ'| + D(s, τ))`, where `|τ'|` is the segment count
//! of the route `o ⇝ s ⇝ d` built from two shortest paths (with `s` counted
//! once) and `D(s, τ)` is the fewest hops from `s` to any segment of `τ`.
//! Weights are clamped to 1, cut to zero below a threshold, and stored in
//! fixed point with six decimals so they survive a file round trip exactly.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{RoadNetwork, SegmentId, Trajectory, TrajectoryCorpus};
use crate::error::{Error, Result};

pub const DEFAULT_RST_THRESHOLD: f64 = 0.5;

/// Fixed-point scale of stored weights.
pub const WEIGHT_SCALE: f64 = 1_000_000.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopDistanceField {
    pub source: SegmentId,
    /// `None` marks an unreachable segment.
    pub dist: Vec<Option<u32>>,
}

impl HopDistanceField {
    pub fn get(&self, s: SegmentId) -> Option<u32> {
        self.dist[s]
    }
}

#[derive(Clone, Copy)]
enum Direction {
    Forward,
    Backward,
}

/// Multi-source Dijkstra with unit edge weights.
fn unit_dijkstra(network: &RoadNetwork, sources: &[SegmentId], dir: Direction) -> Vec<Option<u32>> {
    let n = network.num_segments();
    let mut dist = vec![None; n];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        if dist[s].is_none() {
            dist[s] = Some(0);
            heap.push(Reverse((0u32, s)));
        }
    }
    while let Some(Reverse((d, u))) = heap.pop() {
        if dist[u].is_some_and(|best| d > best) {
            continue;
        }
        let next = match dir {
            Direction::Forward => network.out_neighbors(u),
            Direction::Backward => network.in_neighbors(u),
        };
        for &v in next {
            let nd = d + 1;
            if dist[v].is_none_or(|cur| nd < cur) {
                dist[v] = Some(nd);
                heap.push(Reverse((nd, v)));
            }
        }
    }
    dist
}

/// Hops along directed edges from `source` to every segment.
pub fn hop_distances_from(network: &RoadNetwork, source: SegmentId) -> HopDistanceField {
    HopDistanceField {
        source,
        dist: unit_dijkstra(network, &[source], Direction::Forward),
    }
}

/// Hops from every segment to `target`.
pub fn hop_distances_to(network: &RoadNetwork, target: SegmentId) -> HopDistanceField {
    HopDistanceField {
        source: target,
        dist: unit_dijkstra(network, &[target], Direction::Backward),
    }
}

/// For every segment, the fewest hops needed to reach any of `targets`.
pub fn hop_distances_to_set(network: &RoadNetwork, targets: &[SegmentId]) -> Vec<Option<u32>> {
    unit_dijkstra(network, targets, Direction::Backward)
}

/// Sparse weight vector of one trajectory, in fixed point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RSTWeightVector {
    #[serde(rename = "id")]
    pub trajectory_id: String,
    /// `(segment, round(weight × 10⁶))`, ascending by segment, no zeros.
    pub nz: Vec<(SegmentId, u32)>,
}

impl RSTWeightVector {
    pub fn weight(&self, s: SegmentId) -> f64 {
        self.nz
            .binary_search_by_key(&s, |&(k, _)| k)
            .map_or(0.0, |i| self.nz[i].1 as f64 / WEIGHT_SCALE)
    }

    /// Nonzero weights as reals.
    pub fn iter(&self) -> impl Iterator<Item = (SegmentId, f64)> + '_ {
        self.nz.iter().map(|&(s, w)| (s, w as f64 / WEIGHT_SCALE))
    }

    pub fn is_zero(&self) -> bool {
        self.nz.is_empty()
    }

    pub fn dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (s, w) in self.iter() {
            out[s] = w;
        }
        out
    }

    /// Weight 1 on each distinct segment of the trajectory.
    pub fn indicator(traj: &Trajectory) -> Self {
        let mut segs = traj.segments.clone();
        segs.sort_unstable();
        segs.dedup();
        Self {
            trajectory_id: traj.id.clone(),
            nz: segs.into_iter().map(|s| (s, WEIGHT_SCALE as u32)).collect(),
        }
    }
}

/// Unquantized weight of one segment given the three distance ingredients.
/// Returns `None` when any distance is infinite.
pub fn rst_raw_weight(
    traj_len: usize,
    from_origin: Option<u32>,
    to_destination: Option<u32>,
    to_trajectory: Option<u32>,
) -> Option<f64> {
    let (a, b, d) = (from_origin?, to_destination?, to_trajectory?);
    let detour_len = a as u64 + b as u64 + 1;
    Some((traj_len as f64 / (detour_len + d as u64) as f64).min(1.0))
}

/// Quantizes a weight, applying the threshold on the unquantized value.
pub fn quantize_weight(w: f64, threshold: f64) -> u32 {
    if w < threshold {
        0
    } else {
        (w * WEIGHT_SCALE).round() as u32
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "weight threshold {threshold} outside [0, 1)"
        )));
    }
    Ok(())
}

fn assemble(
    network: &RoadNetwork,
    traj: &Trajectory,
    from_origin: &[Option<u32>],
    to_destination: &[Option<u32>],
    threshold: f64,
) -> RSTWeightVector {
    let to_traj = hop_distances_to_set(network, &traj.segments);
    let nz = (0..network.num_segments())
        .filter_map(|s| {
            let w = rst_raw_weight(traj.len(), from_origin[s], to_destination[s], to_traj[s])?;
            let q = quantize_weight(w, threshold);
            (q > 0).then_some((s, q))
        })
        .collect();
    RSTWeightVector {
        trajectory_id: traj.id.clone(),
        nz,
    }
}

pub fn rst_weight_vector(network: &RoadNetwork, traj: &Trajectory, threshold: f64) -> Result<RSTWeightVector> {
    check_threshold(threshold)?;
    if traj.is_empty() {
        return Err(Error::InvalidTrajectory(traj.id.clone(), "empty trajectory".into()));
    }
    let from_origin = hop_distances_from(network, traj.origin()).dist;
    let to_destination = hop_distances_to(network, traj.destination()).dist;
    Ok(assemble(network, traj, &from_origin, &to_destination, threshold))
}

/// Weight vectors for a whole corpus, in corpus order. Distance fields for
/// trajectory endpoints are computed once and shared.
pub fn rst_weights_for_corpus(
    network: &RoadNetwork,
    corpus: &TrajectoryCorpus,
    threshold: f64,
) -> Result<Vec<RSTWeightVector>> {
    check_threshold(threshold)?;
    if let Some(t) = corpus.iter().find(|t| t.is_empty()) {
        return Err(Error::InvalidTrajectory(t.id.clone(), "empty trajectory".into()));
    }
    let origins: HashSet<SegmentId> = corpus.iter().map(Trajectory::origin).collect();
    let dests: HashSet<SegmentId> = corpus.iter().map(Trajectory::destination).collect();
    let forward: HashMap<SegmentId, Vec<Option<u32>>> = origins
        .into_par_iter()
        .map(|o| (o, hop_distances_from(network, o).dist))
        .collect();
    let backward: HashMap<SegmentId, Vec<Option<u32>>> = dests
        .into_par_iter()
        .map(|d| (d, hop_distances_to(network, d).dist))
        .collect();
    Ok(corpus
        .trajectories()
        .par_iter()
        .map(|t| {
            assemble(
                network,
                t,
                &forward[&t.origin()],
                &backward[&t.destination()],
                threshold,
            )
        })
        .collect())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightRecord {
    id: String,
    nz: Vec<(u64, u64)>,
}

/// One `{"id": ..., "nz": [[segment, weight×10⁶], ...]}` line per vector.
pub fn write_rst_weights(weights: &[RSTWeightVector], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in weights {
        let line = serde_json::to_string(v).expect("serializable");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rst_weights(path: impl AsRef<Path>) -> Result<Vec<RSTWeightVector>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        let rec: WeightRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let mut nz = Vec::with_capacity(rec.nz.len());
        for (s, w) in rec.nz {
            if w == 0 || w > WEIGHT_SCALE as u64 {
                return Err(parse(format!("weight {w} for segment {s} outside (0, 10^6]")));
            }
            nz.push((s as usize, w as u32));
        }
        if nz.windows(2).any(|p| p[0].0 >= p[1].0) {
            return Err(parse("segments must be strictly ascending".into()));
        }
        out.push(RSTWeightVector {
            trajectory_id: rec.id,
            nz,
        });
    }
    Ok(out)
}
