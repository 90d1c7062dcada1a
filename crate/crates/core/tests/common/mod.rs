//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use astro_float::{BigFloat, Consts, RoundingMode};
use jclr::data::{RoadNetwork, SegmentMeta, Trajectory, TrajectoryCorpus};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const INF: u64 = u64::MAX / 4;

/// Random directed graph with edge probability `p`, no self loops.
pub fn random_network(n: usize, p: f64, rng: &mut ChaCha8Rng) -> RoadNetwork {
    let mut edges = vec![];
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    let segs = (0..n)
        .map(|id| SegmentMeta {
            id,
            length_m: 100.0,
            label: None,
            avg_speed: None,
        })
        .collect();
    RoadNetwork::new(segs, &edges).unwrap()
}

/// Random walk of up to `max_len` segments following edges; stops early at
/// a dead end.
pub fn random_walk(net: &RoadNetwork, max_len: usize, id: &str, rng: &mut ChaCha8Rng) -> Trajectory {
    let mut segs = vec![rng.random_range(0..net.num_segments())];
    let target = rng.random_range(1..=max_len);
    while segs.len() < target {
        let out = net.out_neighbors(*segs.last().unwrap());
        if out.is_empty() {
            break;
        }
        segs.push(out[rng.random_range(0..out.len())]);
    }
    Trajectory::new(id, segs)
}

/// All-pairs hop distances by Floyd–Warshall over the dense adjacency.
pub fn floyd_warshall(net: &RoadNetwork) -> Vec<Vec<u64>> {
    let n = net.num_segments();
    let mut d = vec![vec![INF; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
        for j in 0..n {
            if i != j && net.has_edge(i, j) {
                row[j] = 1;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

/// Dense fixed-point weight vector: `round(10⁶·w)` where
/// `w = min(1, |τ| / (|τ'| + D))`, zero when unreachable or below threshold.
pub fn rst_oracle(dist: &[Vec<u64>], traj: &Trajectory, threshold: f64) -> Vec<u32> {
    let n = dist.len();
    let (o, dst) = (traj.segments[0], *traj.segments.last().unwrap());
    (0..n)
        .map(|s| {
            let detour = dist[o][s] + dist[s][dst] + 1;
            let d = traj.segments.iter().map(|&j| dist[s][j]).min().unwrap();
            if dist[o][s] >= INF || dist[s][dst] >= INF || d >= INF {
                return 0;
            }
            let w = (traj.len() as f64 / (detour + d) as f64).min(1.0);
            if w < threshold {
                0
            } else {
                (w * 1e6).round() as u32
            }
        })
        .collect()
}

/// Dense consecutive-pair counts.
pub fn pair_counts(n: usize, corpus: &TrajectoryCorpus) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; n]; n];
    for t in corpus.iter() {
        for k in 1..t.len() {
            m[t.segments[k - 1]][t.segments[k]] += 1;
        }
    }
    m
}

/// Dense binarisation: share of the row total at least `t`.
pub fn binarize_oracle(m: &[Vec<u64>], t: f64) -> Vec<Vec<bool>> {
    m.iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            row.iter().map(|&c| c > 0 && c as f64 / total as f64 >= t).collect()
        })
        .collect()
}

/// Random corpus of arbitrary (not necessarily connected) segment sequences.
pub fn random_corpus(n: usize, rng: &mut ChaCha8Rng) -> TrajectoryCorpus {
    let count = rng.random_range(0..30);
    let trajs = (0..count)
        .map(|i| {
            let len = rng.random_range(1..10);
            Trajectory::new(format!("t{i}"), (0..len).map(|_| rng.random_range(0..n)).collect())
        })
        .collect();
    TrajectoryCorpus::new(trajs).unwrap()
}

const PREC: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

/// `mean_pos(−ln(1 + e^{−s})) − mean_neg(ln(1 + eˢ))` in 256-bit arithmetic.
pub fn js_mi_reference(pos: &[f64], neg: &[f64], cc: &mut Consts) -> f64 {
    let one = BigFloat::from_f64(1.0, PREC);
    let mut softplus_big = |x: f64| {
        let e = BigFloat::from_f64(x, PREC).exp(PREC, RM, cc);
        one.add(&e, PREC, RM).ln(PREC, RM, cc)
    };
    let mut p = BigFloat::from_f64(0.0, PREC);
    for &s in pos {
        p = p.sub(&softplus_big(-s), PREC, RM);
    }
    let mut n = BigFloat::from_f64(0.0, PREC);
    for &s in neg {
        n = n.add(&softplus_big(s), PREC, RM);
    }
    let p = p.div(&BigFloat::from_f64(pos.len() as f64, PREC), PREC, RM);
    let n = n.div(&BigFloat::from_f64(neg.len() as f64, PREC), PREC, RM);
    p.sub(&n, PREC, RM).to_string().parse().expect("decimal rendering")
}

pub fn dot(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|k| a[[i, k]] * b[[j, k]]).sum()
}

pub fn plain_softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Unweighted road-trajectory loss: on-trajectory segments are positives,
/// the sampled segments are negatives.
pub fn unweighted_cross_loss(h_s: &Array2<f64>, traj: &Array2<f64>, trajs: &[Trajectory], negatives: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for (i, t) in trajs.iter().enumerate() {
        let mut segs = t.segments.clone();
        segs.sort_unstable();
        segs.dedup();
        let pos = segs.iter().map(|&s| -plain_softplus(-dot(h_s, s, traj, i))).sum::<f64>() / segs.len() as f64;
        let neg = negatives[i].iter().map(|&s| plain_softplus(dot(h_s, s, traj, i))).sum::<f64>()
            / negatives[i].len() as f64;
        total -= pos - neg;
    }
    total / trajs.len() as f64
}
