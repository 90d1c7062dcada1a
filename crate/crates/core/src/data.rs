//! Road network and trajectory corpus types, their line-delimited file
//! formats, and corpus filtering.
//!
//! Network file: one JSON object per line, either a segment record
//! `{"seg": 0, "length_m": 120.0, "label": 2, "avg_speed": 31.5}` or an edge
//! record `{"from": 0, "to": 1}`. Trajectory file: one
//! `{"id": "t1", "segments": [0, 1, 2], "timestamps": [0.0, 10.0, 20.0]}` per
//! line, `timestamps` may be `null`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense 0-based segment index.
pub type SegmentId = usize;

/// Minimum number of segments a trajectory needs to survive filtering.
pub const MIN_TRAJECTORY_SEGMENTS: usize = 3;
/// Minimum trip duration in seconds to survive filtering.
pub const MIN_TRAJECTORY_DURATION_S: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub id: SegmentId,
    pub length_m: f64,
    pub label: Option<u32>,
    pub avg_speed: Option<f64>,
}

/// Directed graph of road segments. Adjacency is binary and stored as sorted
/// out- and in-neighbour lists.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    segments: Vec<SegmentMeta>,
    out_adj: Vec<Vec<SegmentId>>,
    in_adj: Vec<Vec<SegmentId>>,
}

impl RoadNetwork {
    /// Builds a network from segment metadata (ids must be `0..n` in order)
    /// and a list of directed edges. Duplicate edges collapse.
    pub fn new(segments: Vec<SegmentMeta>, edges: &[(SegmentId, SegmentId)]) -> Result<Self> {
        for (i, s) in segments.iter().enumerate() {
            if s.id != i {
                return Err(Error::NonContiguousIds {
                    expected: i,
                    found: s.id as u64,
                });
            }
            if !(s.length_m >= 0.0 && s.length_m.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "segment {i} has invalid length {}",
                    s.length_m
                )));
            }
            if let Some(v) = s.avg_speed {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "segment {i} has invalid average speed {v}"
                    )));
                }
            }
        }
        let n = segments.len();
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        for &(from, to) in edges {
            for id in [from, to] {
                if id >= n {
                    return Err(Error::DanglingSegment {
                        id: id as u64,
                        num_segments: n,
                    });
                }
            }
            out_adj[from].push(to);
            in_adj[to].push(from);
        }
        for list in out_adj.iter_mut().chain(in_adj.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self {
            segments,
            out_adj,
            in_adj,
        })
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn num_edges(&self) -> usize {
        self.out_adj.iter().map(Vec::len).sum()
    }

    pub fn segments(&self) -> &[SegmentMeta] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> &SegmentMeta {
        &self.segments[id]
    }

    /// Segments `j` with `A_S[i, j] = 1`.
    pub fn out_neighbors(&self, i: SegmentId) -> &[SegmentId] {
        &self.out_adj[i]
    }

    /// Segments `j` with `A_S[j, i] = 1`.
    pub fn in_neighbors(&self, i: SegmentId) -> &[SegmentId] {
        &self.in_adj[i]
    }

    pub fn has_edge(&self, i: SegmentId, j: SegmentId) -> bool {
        self.out_adj[i].binary_search(&j).is_ok()
    }

    pub fn edges(&self) -> impl Iterator<Item = (SegmentId, SegmentId)> + '_ {
        self.out_adj
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&j| (i, j)))
    }

    /// Largest label present plus one, or 0 when no segment is labelled.
    pub fn num_label_classes(&self) -> usize {
        self.segments
            .iter()
            .filter_map(|s| s.label)
            .max()
            .map_or(0, |m| m as usize + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub segments: Vec<SegmentId>,
    #[serde(default)]
    pub timestamps: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, segments: Vec<SegmentId>) -> Self {
        Self {
            id: id.into(),
            segments,
            timestamps: None,
        }
    }

    pub fn with_timestamps(mut self, timestamps: Vec<f64>) -> Self {
        self.timestamps = Some(timestamps);
        self
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn origin(&self) -> SegmentId {
        self.segments[0]
    }

    pub fn destination(&self) -> SegmentId {
        self.segments[self.segments.len() - 1]
    }

    /// Last timestamp minus first, when timestamps are present.
    pub fn duration(&self) -> Option<f64> {
        match self.timestamps.as_deref() {
            Some([first, .., last]) => Some(last - first),
            Some([_]) => Some(0.0),
            _ => None,
        }
    }

    /// Checks the trajectory invariants against a network.
    pub fn validate(&self, network: &RoadNetwork) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidTrajectory(
                self.id.clone(),
                "trajectory has no segments".into(),
            ));
        }
        if let Some(&bad) = self
            .segments
            .iter()
            .find(|&&s| s >= network.num_segments())
        {
            return Err(Error::UnknownSegment {
                trajectory: self.id.clone(),
                id: bad as u64,
            });
        }
        if let Some(ts) = &self.timestamps {
            if ts.len() != self.segments.len() {
                return Err(Error::TimestampMismatch {
                    trajectory: self.id.clone(),
                    segments: self.segments.len(),
                    timestamps: ts.len(),
                });
            }
            if ts.iter().any(|t| !t.is_finite()) || ts.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::InvalidTrajectory(
                    self.id.clone(),
                    "timestamps must be finite and nondecreasing".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryCorpus {
    trajectories: Vec<Trajectory>,
}

impl TrajectoryCorpus {
    /// Builds a corpus, rejecting duplicate ids.
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(trajectories.len());
        for t in &trajectories {
            if !seen.insert(t.id.as_str()) {
                return Err(Error::DuplicateTrajectory(t.id.clone()));
            }
        }
        Ok(Self { trajectories })
    }

    /// Builds a corpus and validates every trajectory against `network`.
    pub fn validated(trajectories: Vec<Trajectory>, network: &RoadNetwork) -> Result<Self> {
        for t in &trajectories {
            t.validate(network)?;
        }
        Self::new(trajectories)
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn get(&self, i: usize) -> &Trajectory {
        &self.trajectories[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trajectory> {
        self.trajectories.iter()
    }
}

/// Keeps trajectories with at least three segments that last at least a
/// minute. Trajectories without timestamps pass the duration test.
pub fn filter_trajectories(corpus: &TrajectoryCorpus) -> TrajectoryCorpus {
    TrajectoryCorpus {
        trajectories: corpus
            .iter()
            .filter(|t| passes_filter(t))
            .cloned()
            .collect(),
    }
}

pub fn passes_filter(t: &Trajectory) -> bool {
    t.len() >= MIN_TRAJECTORY_SEGMENTS
        && t.duration().is_none_or(|d| d >= MIN_TRAJECTORY_DURATION_S)
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct SegmentRecord {
    seg: u64,
    length_m: f64,
    #[serde(default)]
    label: Option<u32>,
    #[serde(default)]
    avg_speed: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    from: u64,
    to: u64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum NetworkRecord {
    Segment(SegmentRecord),
    Edge(EdgeRecord),
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Iterates `(line_number, line)` over non-blank lines.
fn records(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String)>> + '_> {
    let reader = open(path)?;
    Ok(reader
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| match line {
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(Ok((i + 1, l))),
            Err(e) => Some(Err(Error::io(path, e))),
        }))
}

pub fn load_road_network(path: impl AsRef<Path>) -> Result<RoadNetwork> {
    let path = path.as_ref();
    let mut segs: Vec<(usize, SegmentRecord)> = Vec::new();
    let mut edges: Vec<(usize, u64, u64)> = Vec::new();
    for rec in records(path)? {
        let (line, text) = rec?;
        let parsed: NetworkRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line,
            message: e.to_string(),
        })?;
        match parsed {
            NetworkRecord::Segment(s) => segs.push((line, s)),
            NetworkRecord::Edge(e) => edges.push((line, e.from, e.to)),
        }
    }
    segs.sort_by_key(|(_, s)| s.seg);
    let mut segments = Vec::with_capacity(segs.len());
    for (expected, (line, s)) in segs.into_iter().enumerate() {
        if s.seg != expected as u64 {
            if s.seg < expected as u64 {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line,
                    message: format!("duplicate segment id {}", s.seg),
                });
            }
            return Err(Error::NonContiguousIds {
                expected,
                found: s.seg,
            });
        }
        if !(s.length_m >= 0.0) {
            return Err(Error::Parse {
                path: path.to_owned(),
                line,
                message: format!("negative length {}", s.length_m),
            });
        }
        segments.push(SegmentMeta {
            id: expected,
            length_m: s.length_m,
            label: s.label,
            avg_speed: s.avg_speed,
        });
    }
    let n = segments.len();
    let mut pairs = Vec::with_capacity(edges.len());
    for (_, from, to) in edges {
        for id in [from, to] {
            if id >= n as u64 {
                return Err(Error::DanglingSegment { id, num_segments: n });
            }
        }
        pairs.push((from as usize, to as usize));
    }
    RoadNetwork::new(segments, &pairs)
}

pub fn write_road_network(network: &RoadNetwork, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let emit = |w: &mut BufWriter<File>, line: String| {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))
    };
    for s in network.segments() {
        let rec = SegmentRecord {
            seg: s.id as u64,
            length_m: s.length_m,
            label: s.label,
            avg_speed: s.avg_speed,
        };
        emit(&mut w, serde_json::to_string(&rec).expect("serializable"))?;
    }
    for (from, to) in network.edges() {
        let rec = EdgeRecord {
            from: from as u64,
            to: to as u64,
        };
        emit(&mut w, serde_json::to_string(&rec).expect("serializable"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    id: String,
    segments: Vec<u64>,
    #[serde(default)]
    timestamps: Option<Vec<f64>>,
}

pub fn load_trajectories(path: impl AsRef<Path>, network: &RoadNetwork) -> Result<TrajectoryCorpus> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for rec in records(path)? {
        let (line, text) = rec?;
        let r: TrajectoryRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line,
            message: e.to_string(),
        })?;
        if let Some(&bad) = r
            .segments
            .iter()
            .find(|&&s| s >= network.num_segments() as u64)
        {
            return Err(Error::UnknownSegment {
                trajectory: r.id,
                id: bad,
            });
        }
        let t = Trajectory {
            id: r.id,
            segments: r.segments.into_iter().map(|s| s as usize).collect(),
            timestamps: r.timestamps,
        };
        t.validate(network)?;
        out.push(t);
    }
    TrajectoryCorpus::new(out)
}

pub fn write_trajectories(corpus: &TrajectoryCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for t in corpus.iter() {
        let line = serde_json::to_string(t).expect("serializable");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: usize) -> SegmentMeta {
        SegmentMeta {
            id,
            length_m: 100.0,
            label: None,
            avg_speed: None,
        }
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    const THREE: &str = r#"{"seg": 0, "length_m": 10.0, "label": 1, "avg_speed": 30.0}
{"seg": 1, "length_m": 20.0, "label": null, "avg_speed": null}
{"seg": 2, "length_m": 30.0}
"#;

    #[test]
    fn loads_three_segments_two_edges() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{THREE}{{\"from\": 0, \"to\": 1}}\n{{\"from\": 1, \"to\": 2}}\n");
        let net = load_road_network(write(&dir, "n.jsonl", &body)).unwrap();
        assert_eq!(net.num_segments(), 3);
        assert_eq!(net.num_edges(), 2);
        assert!(net.has_edge(0, 1) && net.has_edge(1, 2) && !net.has_edge(0, 2));
        assert_eq!(net.segment(0).label, Some(1));
        assert_eq!(net.segment(2).avg_speed, None);
    }

    #[test]
    fn empty_edge_section() {
        let dir = tempfile::tempdir().unwrap();
        let net = load_road_network(write(&dir, "n.jsonl", THREE)).unwrap();
        assert_eq!(net.num_edges(), 0);
    }

    #[test]
    fn dangling_edge_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{THREE}{{\"from\": 0, \"to\": 9}}\n");
        match load_road_network(write(&dir, "n.jsonl", &body)) {
            Err(Error::DanglingSegment { id: 9, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_contiguous_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let gap = "{\"seg\": 0, \"length_m\": 1.0}\n{\"seg\": 2, \"length_m\": 1.0}\n";
        assert!(matches!(
            load_road_network(write(&dir, "gap.jsonl", gap)),
            Err(Error::NonContiguousIds { expected: 1, found: 2 })
        ));
        let bad = "{\"seg\": 0, \"length_m\": 1.0}\n\n{\"seg\": oops}\n";
        match load_road_network(write(&dir, "bad.jsonl", bad)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn path_net() -> RoadNetwork {
        RoadNetwork::new((0..3).map(meta).collect(), &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn trajectory_loading() {
        let dir = tempfile::tempdir().unwrap();
        let net = path_net();
        let ok = write(&dir, "t.jsonl", "{\"id\": \"t1\", \"segments\": [0, 1, 2]}\n");
        let corpus = load_trajectories(ok, &net).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.get(0).len(), 3);

        let mismatch = write(
            &dir,
            "m.jsonl",
            "{\"id\": \"t1\", \"segments\": [0, 1, 2], \"timestamps\": [0.0, 1.0]}\n",
        );
        assert!(matches!(
            load_trajectories(mismatch, &net),
            Err(Error::TimestampMismatch { segments: 3, timestamps: 2, .. })
        ));

        let unknown = write(&dir, "u.jsonl", "{\"id\": \"t1\", \"segments\": [0, 7]}\n");
        assert!(matches!(
            load_trajectories(unknown, &net),
            Err(Error::UnknownSegment { id: 7, .. })
        ));

        let dup = write(
            &dir,
            "d.jsonl",
            "{\"id\": \"a\", \"segments\": [0]}\n{\"id\": \"a\", \"segments\": [1]}\n",
        );
        assert!(matches!(
            load_trajectories(dup, &net),
            Err(Error::DuplicateTrajectory(_))
        ));
    }

    #[test]
    fn filter_rules() {
        let two = Trajectory::new("a", vec![0, 1]);
        let kept = Trajectory::new("b", vec![0, 1, 2]).with_timestamps(vec![0.0, 60.0, 120.0]);
        let short = Trajectory::new("c", vec![0, 1, 2, 1, 2]).with_timestamps(vec![0.0, 5.0, 10.0, 20.0, 30.0]);
        let untimed = Trajectory::new("d", vec![2, 1, 0]);
        let corpus = TrajectoryCorpus::new(vec![two, kept, short, untimed]).unwrap();
        let f = filter_trajectories(&corpus);
        let ids: Vec<_> = f.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, ["b", "d"]);
        assert_eq!(filter_trajectories(&f), f);
    }

    #[test]
    fn exactly_sixty_seconds_is_kept() {
        let t = Trajectory::new("a", vec![0, 1, 2]).with_timestamps(vec![10.0, 40.0, 70.0]);
        assert!(passes_filter(&t));
    }
}
