//! Synthetic grid cities: a labelled road network plus timestamped
//! trajectories, so every stage runs without external data.
//!
//! Intersections sit on a `rows × cols` grid. Each street between
//! neighbouring intersections yields two directed segments, and segment
//! `u→v` feeds every segment leaving `v` (U-turns included, so the graph
//! is strongly connected).
//!
//! Road types come in bands. Every third grid line is an arterial (last
//! type); the remaining types split local streets by orientation and by
//! position along the perpendicular axis.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::LogNormal;
use serde::{Deserialize, Serialize};

use crate::data::{passes_filter, RoadNetwork, SegmentId, SegmentMeta, Trajectory, TrajectoryCorpus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OdPolicy {
    /// Origin and destination segments drawn uniformly.
    Uniform,
    /// A fraction of trips start and end near a few fixed hotspot segments.
    Hotspots { count: usize, fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CityConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub num_road_types: usize,
    /// Mean speed of each type in km/h.
    pub speed_by_type: Vec<f64>,
    pub block_length_m: f64,
    /// Log-scale σ of per-segment speed noise.
    pub speed_noise: f64,
    /// Log-scale σ of the per-trip speed factor.
    pub trip_speed_noise: f64,
    pub num_trajectories: usize,
    pub od_pairs: OdPolicy,
    /// Probability of a random deviation at each step.
    pub route_noise: f64,
    /// Departure times are uniform over this many seconds.
    pub time_span_s: f64,
    pub seed: u64,
}

impl Default for CityConfig {
    fn default() -> Self {
        Self {
            grid_rows: 8,
            grid_cols: 8,
            num_road_types: 5,
            speed_by_type: vec![25.0, 30.0, 35.0, 40.0, 60.0],
            block_length_m: 200.0,
            speed_noise: 0.1,
            trip_speed_noise: 0.1,
            num_trajectories: 2000,
            od_pairs: OdPolicy::Uniform,
            route_noise: 0.05,
            time_span_s: 7.0 * 86_400.0,
            seed: 0,
        }
    }
}

impl CityConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.grid_rows < 2 || self.grid_cols < 2 {
            return bad(format!("grid must be at least 2×2, got {}×{}", self.grid_rows, self.grid_cols));
        }
        if self.num_road_types < 2 {
            return bad("num_road_types must be at least 2".into());
        }
        if self.speed_by_type.len() != self.num_road_types {
            return bad(format!(
                "speed_by_type has {} entries for {} road types",
                self.speed_by_type.len(),
                self.num_road_types
            ));
        }
        if self.speed_by_type.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("speeds must be positive".into());
        }
        if !(self.block_length_m > 0.0) || !(self.time_span_s >= 0.0) {
            return bad("block_length_m and time_span_s must be positive".into());
        }
        if !(self.speed_noise >= 0.0) || !(self.trip_speed_noise >= 0.0) {
            return bad("noise scales must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.route_noise) {
            return bad(format!("route_noise must lie in [0, 1], got {}", self.route_noise));
        }
        if let OdPolicy::Hotspots { count, fraction } = self.od_pairs {
            if count < 2 || !(0.0..=1.0).contains(&fraction) {
                return bad("hotspots need count ≥ 2 and fraction in [0, 1]".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Orientation {
    Horizontal,
    Vertical,
}

fn is_arterial(line: usize) -> bool {
    line % 3 == 1
}

/// Band label of a street. `line` is the row (horizontal) or column
/// (vertical) it runs along, `extent` the number of such lines.
fn road_type(orient: Orientation, line: usize, extent: usize, num_types: usize) -> u32 {
    let arterial = (num_types - 1) as u32;
    if is_arterial(line) {
        return arterial;
    }
    let locals = num_types - 1;
    let horizontal_bands = locals.div_ceil(2);
    let vertical_bands = locals - horizontal_bands;
    let band = |bands: usize| (line * bands / extent).min(bands - 1);
    match orient {
        Orientation::Horizontal => band(horizontal_bands) as u32,
        Orientation::Vertical if vertical_bands == 0 => band(horizontal_bands) as u32,
        Orientation::Vertical => (horizontal_bands + band(vertical_bands)) as u32,
    }
}

/// A grid city before conversion to a [`RoadNetwork`].
struct Grid {
    /// Directed segment endpoints as intersection indices.
    ends: Vec<(usize, usize)>,
    meta: Vec<SegmentMeta>,
}

fn build_grid(cfg: &CityConfig, rng: &mut ChaCha8Rng) -> Grid {
    let (rows, cols) = (cfg.grid_rows, cfg.grid_cols);
    let node = |r: usize, c: usize| r * cols + c;
    let mut streets = Vec::new();
    for r in 0..rows {
        for c in 0..cols - 1 {
            streets.push((node(r, c), node(r, c + 1), Orientation::Horizontal, r, rows));
        }
    }
    for c in 0..cols {
        for r in 0..rows - 1 {
            streets.push((node(r, c), node(r + 1, c), Orientation::Vertical, c, cols));
        }
    }
    let noise = LogNormal::new(0.0, cfg.speed_noise).expect("validated σ");
    let mut ends = Vec::with_capacity(2 * streets.len());
    let mut meta = Vec::with_capacity(2 * streets.len());
    for (a, b, orient, line, extent) in streets {
        let label = road_type(orient, line, extent, cfg.num_road_types);
        let length_m = cfg.block_length_m * rng.random_range(0.9..1.1);
        for (u, v) in [(a, b), (b, a)] {
            let speed = cfg.speed_by_type[label as usize] * noise.sample(rng);
            meta.push(SegmentMeta {
                id: ends.len(),
                length_m,
                label: Some(label),
                avg_speed: Some(speed),
            });
            ends.push((u, v));
        }
    }
    Grid { ends, meta }
}

pub fn generate_network(cfg: &CityConfig) -> Result<RoadNetwork> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grid = build_grid(cfg, &mut rng);
    let mut leaving: Vec<Vec<SegmentId>> = vec![Vec::new(); cfg.grid_rows * cfg.grid_cols];
    for (s, &(u, _)) in grid.ends.iter().enumerate() {
        leaving[u].push(s);
    }
    let edges: Vec<(SegmentId, SegmentId)> = grid
        .ends
        .iter()
        .enumerate()
        .flat_map(|(s, &(_, v))| leaving[v].iter().map(move |&t| (s, t)))
        .collect();
    RoadNetwork::new(grid.meta, &edges)
}

/// Seconds to traverse a segment at its mean speed.
pub fn traversal_time(seg: &SegmentMeta) -> f64 {
    let kmh = seg.avg_speed.unwrap_or(30.0);
    seg.length_m / (kmh / 3.6)
}

/// Lexicographic `(hops, seconds)` cost from every segment to `target`.
/// Hops count transitions, so the target itself costs `(0, 0)`.
pub fn costs_to(network: &RoadNetwork, target: SegmentId) -> Vec<(u32, f64)> {
    let n = network.num_segments();
    let mut best = vec![(u32::MAX, f64::INFINITY); n];
    best[target] = (0, 0.0);
    // Ordered by (hops, seconds); seconds stored as ordered bits (non-negative).
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((0u32, 0u64, target)));
    while let Some(Reverse((h, tb, s))) = heap.pop() {
        let t = f64::from_bits(tb);
        if (h, t) > best[s] {
            continue;
        }
        // Reaching `s` from predecessor `p` costs one hop plus the time on `p`.
        for &p in network.in_neighbors(s) {
            let cand = (h + 1, t + traversal_time(network.segment(p)));
            if cand < best[p] {
                best[p] = cand;
                heap.push(Reverse((cand.0, cand.1.to_bits(), p)));
            }
        }
    }
    best
}

/// Next hop from `cur` on a lexicographically cheapest route, ties to the
/// smaller id.
fn next_hop(network: &RoadNetwork, cur: SegmentId, costs: &[(u32, f64)]) -> SegmentId {
    let mut best = None;
    for &n in network.out_neighbors(cur) {
        let c = costs[n];
        if best.is_none_or(|(bc, bn)| c < bc || (c == bc && n < bn)) {
            best = Some((c, n));
        }
    }
    best.expect("strongly connected grid").1
}

/// Route from `origin` to `dest`: follows the cheapest next hop, but with
/// probability `noise` per step takes a random non-U-turn neighbour first.
fn route<R: Rng>(
    network: &RoadNetwork,
    origin: SegmentId,
    dest: SegmentId,
    costs: &[(u32, f64)],
    reverse_of: &[SegmentId],
    noise: f64,
    rng: &mut R,
) -> Vec<SegmentId> {
    let limit = 4 * network.num_segments();
    let mut path = vec![origin];
    let mut cur = origin;
    while cur != dest && path.len() < limit {
        let next = if noise > 0.0 && rng.random_bool(noise) {
            let options: Vec<SegmentId> = network
                .out_neighbors(cur)
                .iter()
                .copied()
                .filter(|&n| n != reverse_of[cur])
                .collect();
            options[rng.random_range(0..options.len())]
        } else {
            next_hop(network, cur, costs)
        };
        path.push(next);
        cur = next;
    }
    path
}

/// The opposite direction of every segment.
fn reverse_segments(network: &RoadNetwork) -> Vec<SegmentId> {
    // Paired segments are generated consecutively: 2k and 2k+1.
    (0..network.num_segments()).map(|s| s ^ 1).collect()
}

fn sample_od<R: Rng>(n: usize, policy: &OdPolicy, hotspots: &[SegmentId], rng: &mut R) -> (SegmentId, SegmentId) {
    loop {
        let (o, d) = match policy {
            OdPolicy::Hotspots { fraction, .. } if rng.random_bool(*fraction) => (
                hotspots[rng.random_range(0..hotspots.len())],
                hotspots[rng.random_range(0..hotspots.len())],
            ),
            _ => (rng.random_range(0..n), rng.random_range(0..n)),
        };
        if o != d {
            return (o, d);
        }
    }
}

/// Samples trips until `num_trajectories` pass the trajectory filter.
/// Entry times accumulate `length / (speed · trip factor)`.
pub fn generate_trajectories(network: &RoadNetwork, cfg: &CityConfig) -> Result<TrajectoryCorpus> {
    cfg.validate()?;
    let n = network.num_segments();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_616a);
    let trip_noise = LogNormal::new(0.0, cfg.trip_speed_noise).expect("validated σ");
    let reverse_of = reverse_segments(network);
    let hotspots: Vec<SegmentId> = match cfg.od_pairs {
        OdPolicy::Hotspots { count, .. } => (0..count).map(|_| rng.random_range(0..n)).collect(),
        OdPolicy::Uniform => Vec::new(),
    };
    let mut cost_cache: Vec<Option<Vec<(u32, f64)>>> = vec![None; n];
    let mut out = Vec::with_capacity(cfg.num_trajectories);
    let mut attempts = 0usize;
    while out.len() < cfg.num_trajectories {
        attempts += 1;
        if attempts > 100 * cfg.num_trajectories.max(1) {
            return Err(Error::InvalidArgument(
                "city too small to produce trajectories passing the filter".into(),
            ));
        }
        let (o, d) = sample_od(n, &cfg.od_pairs, &hotspots, &mut rng);
        let costs = cost_cache[d].get_or_insert_with(|| costs_to(network, d));
        let path = route(network, o, d, costs, &reverse_of, cfg.route_noise, &mut rng);
        let factor = trip_noise.sample(&mut rng);
        let mut t = rng.random_range(0.0..=cfg.time_span_s);
        let mut stamps = Vec::with_capacity(path.len());
        for &s in &path {
            stamps.push(t);
            t += traversal_time(network.segment(s)) / factor;
        }
        let traj = Trajectory::new(format!("T{:06}", out.len()), path).with_timestamps(stamps);
        if passes_filter(&traj) {
            out.push(traj);
        }
    }
    TrajectoryCorpus::new(out)
}
