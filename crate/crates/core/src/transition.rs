//! Trajectory-derived transition statistics and the contextual neighbour
//! sets used as road-road positives.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::data::{RoadNetwork, SegmentId, TrajectoryCorpus};
use crate::error::{Error, Result};

/// Default binarization threshold on row-normalized counts.
pub const DEFAULT_TRANSITION_THRESHOLD: f64 = 0.02;

/// Sparse count matrix `M_T`; `M_T[i, j]` counts how often `j` immediately
/// follows `i` across the corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionCounts {
    rows: Vec<Vec<(SegmentId, u64)>>,
}

impl TransitionCounts {
    pub fn zeros(n: usize) -> Self {
        Self {
            rows: vec![Vec::new(); n],
        }
    }

    /// Builds from `(row, col, count)` triples; zero counts are dropped and
    /// repeated coordinates add up.
    pub fn from_triples(n: usize, triples: impl IntoIterator<Item = (SegmentId, SegmentId, u64)>) -> Result<Self> {
        let mut map: HashMap<(SegmentId, SegmentId), u64> = HashMap::new();
        for (i, j, c) in triples {
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!(
                    "entry ({i}, {j}) outside a {n}x{n} matrix"
                )));
            }
            if c > 0 {
                *map.entry((i, j)).or_default() += c;
            }
        }
        Ok(Self::from_map(n, map))
    }

    fn from_map(n: usize, map: HashMap<(SegmentId, SegmentId), u64>) -> Self {
        let mut rows = vec![Vec::new(); n];
        for ((i, j), c) in map {
            rows[i].push((j, c));
        }
        for r in &mut rows {
            r.sort_unstable();
        }
        Self { rows }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: SegmentId) -> &[(SegmentId, u64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: SegmentId, j: SegmentId) -> u64 {
        let row = &self.rows[i];
        row.binary_search_by_key(&j, |&(c, _)| c)
            .map_or(0, |k| row[k].1)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn total(&self) -> u64 {
        self.rows.iter().flatten().map(|&(_, c)| c).sum()
    }

    pub fn triples(&self) -> impl Iterator<Item = (SegmentId, SegmentId, u64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(j, c)| (i, j, c)))
    }
}

/// Binary transition adjacency `A_T` and the threshold it was cut at.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionAdjacency {
    rows: Vec<Vec<SegmentId>>,
    threshold: f64,
}

impl TransitionAdjacency {
    pub fn from_rows(rows: Vec<Vec<SegmentId>>, threshold: f64) -> Self {
        let mut rows = rows;
        for r in &mut rows {
            r.sort_unstable();
            r.dedup();
        }
        Self { rows, threshold }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn neighbors(&self, i: SegmentId) -> &[SegmentId] {
        &self.rows[i]
    }

    pub fn contains(&self, i: SegmentId, j: SegmentId) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

/// Counts consecutive segment pairs over the corpus.
pub fn build_transition_counts(num_segments: usize, corpus: &TrajectoryCorpus) -> TransitionCounts {
    let map = corpus
        .trajectories()
        .par_iter()
        .fold(HashMap::new, |mut acc: HashMap<(SegmentId, SegmentId), u64>, t| {
            for w in t.segments.windows(2) {
                *acc.entry((w[0], w[1])).or_default() += 1;
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
            a
        });
    TransitionCounts::from_map(num_segments, map)
}

/// Row-normalizes the counts and keeps entries whose share of their row is
/// at least `threshold`.
pub fn binarize_transition(counts: &TransitionCounts, threshold: f64) -> Result<TransitionAdjacency> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "transition threshold {threshold} outside [0, 1]"
        )));
    }
    let rows = counts
        .rows
        .iter()
        .map(|row| {
            let sum: u64 = row.iter().map(|&(_, c)| c).sum();
            if sum == 0 {
                return Vec::new();
            }
            row.iter()
                .filter(|&&(_, c)| c as f64 / sum as f64 >= threshold)
                .map(|&(j, _)| j)
                .collect()
        })
        .collect();
    Ok(TransitionAdjacency { rows, threshold })
}

/// Structural and transitional neighbours of `s`, excluding `s`, ascending.
pub fn context_set(network: &RoadNetwork, trans: &TransitionAdjacency, s: SegmentId) -> Vec<SegmentId> {
    let mut out: Vec<SegmentId> = network
        .out_neighbors(s)
        .iter()
        .chain(trans.neighbors(s))
        .copied()
        .filter(|&j| j != s)
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Context sets for every segment.
#[derive(Debug, Clone)]
pub struct ContextGraph {
    sets: Vec<Vec<SegmentId>>,
}

impl ContextGraph {
    pub fn new(network: &RoadNetwork, trans: &TransitionAdjacency) -> Self {
        Self {
            sets: (0..network.num_segments())
                .map(|s| context_set(network, trans, s))
                .collect(),
        }
    }

    /// Context from structure alone (no trajectory statistics).
    pub fn structural(network: &RoadNetwork) -> Self {
        let empty = TransitionAdjacency::from_rows(vec![Vec::new(); network.num_segments()], 1.0);
        Self::new(network, &empty)
    }

    pub fn context(&self, s: SegmentId) -> &[SegmentId] {
        &self.sets[s]
    }

    pub fn contains(&self, s: SegmentId, j: SegmentId) -> bool {
        self.sets[s].binary_search(&j).is_ok()
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Writes `rows,cols,nnz` followed by one `row,col,value` line per nonzero.
pub fn write_sparse(
    path: impl AsRef<Path>,
    dim: usize,
    triples: impl IntoIterator<Item = (usize, usize, u64)>,
) -> Result<()> {
    let path = path.as_ref();
    let triples: Vec<_> = triples.into_iter().collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{dim},{dim},{}", triples.len()).map_err(io)?;
    for (i, j, v) in triples {
        writeln!(w, "{i},{j},{v}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a sparse-matrix file; returns the (square) dimension and triples.
pub fn read_sparse(path: impl AsRef<Path>) -> Result<(usize, Vec<(usize, usize, u64)>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_owned(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(parse_err(1, "missing header".into())),
    };
    let head: Vec<usize> = header
        .split(',')
        .map(|f| f.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(1, e.to_string()))?;
    let [rows, cols, nnz] = head[..] else {
        return Err(parse_err(1, "header must be rows,cols,nnz".into()));
    };
    if rows != cols {
        return Err(parse_err(1, format!("expected a square matrix, got {rows}x{cols}")));
    }
    let mut triples = Vec::with_capacity(nnz);
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(parse_err(i + 1, "expected row,col,value".into()));
        }
        let r: usize = f[0].parse().map_err(|e: std::num::ParseIntError| parse_err(i + 1, e.to_string()))?;
        let c: usize = f[1].parse().map_err(|e: std::num::ParseIntError| parse_err(i + 1, e.to_string()))?;
        let v: u64 = f[2].parse().map_err(|e: std::num::ParseIntError| parse_err(i + 1, e.to_string()))?;
        if r >= rows || c >= cols {
            return Err(parse_err(i + 1, format!("entry ({r}, {c}) out of bounds")));
        }
        triples.push((r, c, v));
    }
    if triples.len() != nnz {
        return Err(parse_err(1, format!("header declares {nnz} entries, found {}", triples.len())));
    }
    Ok((rows, triples))
}

pub fn write_counts(counts: &TransitionCounts, path: impl AsRef<Path>) -> Result<()> {
    write_sparse(path, counts.dim(), counts.triples())
}

pub fn read_counts(path: impl AsRef<Path>) -> Result<TransitionCounts> {
    let (n, triples) = read_sparse(path)?;
    TransitionCounts::from_triples(n, triples)
}

pub fn write_adjacency(adj: &TransitionAdjacency, path: impl AsRef<Path>) -> Result<()> {
    let triples = adj
        .rows
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().map(move |&j| (i, j, 1u64)));
    write_sparse(path, adj.dim(), triples)
}

/// Reads an adjacency file. The threshold is not stored in the file and is
/// supplied by the caller.
pub fn read_adjacency(path: impl AsRef<Path>, threshold: f64) -> Result<TransitionAdjacency> {
    let (n, triples) = read_sparse(path)?;
    let mut rows = vec![Vec::new(); n];
    for (i, j, v) in triples {
        if v != 0 {
            rows[i].push(j);
        }
    }
    Ok(TransitionAdjacency::from_rows(rows, threshold))
}
