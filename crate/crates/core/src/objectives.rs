//! Jensen-Shannon mutual-information estimator and the three contrastive
//! losses (road-road, trajectory-trajectory, weighted road-trajectory).
//!
//! Every loss has a value-only form and a `*_grad` form that also
//! accumulates `scale · ∂L/∂embedding` into caller-owned buffers.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SegmentId, Trajectory};
use crate::error::{Error, Result};
use crate::rst::RSTWeightVector;
use crate::transition::ContextGraph;

pub fn pair_score(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    assert_eq!(x.len(), y.len(), "pair_score dimension");
    x.dot(&y)
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `mean_pos(−sp(−s)) − mean_neg(sp(s))`.
pub fn js_mi(pos_scores: &[f64], neg_scores: &[f64]) -> f64 {
    assert!(!pos_scores.is_empty() && !neg_scores.is_empty(), "js_mi needs both score sets");
    let pos = pos_scores.iter().map(|&s| -softplus(-s)).sum::<f64>() / pos_scores.len() as f64;
    let neg = neg_scores.iter().map(|&s| softplus(s)).sum::<f64>() / neg_scores.len() as f64;
    pos - neg
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ss: f64,
    pub lambda_tt: f64,
    pub lambda_st: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ss: 0.1,
            lambda_tt: 0.1,
            lambda_st: 0.8,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_ss: f64, lambda_tt: f64, lambda_st: f64) -> Result<Self> {
        let w = Self {
            lambda_ss,
            lambda_tt,
            lambda_st,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_ss, self.lambda_tt, self.lambda_st];
        if all.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::InvalidArgument(format!("loss weights must lie in [0, 1], got {all:?}")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("loss weights must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// Renormalised weights with the component `which` removed.
    pub fn without(&self, which: LossTerm) -> Result<Self> {
        let (mut ss, mut tt, mut st) = (self.lambda_ss, self.lambda_tt, self.lambda_st);
        match which {
            LossTerm::RoadRoad => ss = 0.0,
            LossTerm::TrajTraj => tt = 0.0,
            LossTerm::RoadTraj => st = 0.0,
        }
        let sum = ss + tt + st;
        if sum <= 0.0 {
            return Err(Error::InvalidArgument("ablation leaves no active loss".into()));
        }
        Self::new(ss / sum, tt / sum, st / sum)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    RoadRoad,
    TrajTraj,
    RoadTraj,
}

/// Model variants for the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoRoadRoad,
    NoTrajTraj,
    NoRoadTraj,
    /// Road-trajectory positives weighted by the on-trajectory indicator.
    NoRstWeight,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoRoadRoad,
        Ablation::NoTrajTraj,
        Ablation::NoRoadTraj,
        Ablation::NoRstWeight,
    ];

    pub fn loss_weights(self, base: LossWeights) -> Result<LossWeights> {
        match self {
            Ablation::Full | Ablation::NoRstWeight => Ok(base),
            Ablation::NoRoadRoad => base.without(LossTerm::RoadRoad),
            Ablation::NoTrajTraj => base.without(LossTerm::TrajTraj),
            Ablation::NoRoadTraj => base.without(LossTerm::RoadTraj),
        }
    }

    pub fn indicator_weights(self) -> bool {
        self == Ablation::NoRstWeight
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoRoadRoad => "no_road_road",
            Ablation::NoTrajTraj => "no_traj_traj",
            Ablation::NoRoadTraj => "no_road_traj",
            Ablation::NoRstWeight => "no_rst_weight",
        }
    }
}

pub fn total_loss(l_ss: f64, l_tt: f64, l_st: f64, w: &LossWeights) -> f64 {
    w.lambda_ss * l_ss + w.lambda_tt * l_tt + w.lambda_st * l_st
}

/// One road anchor: its context positives and sampled negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadContrast {
    pub anchor: SegmentId,
    pub positives: Vec<SegmentId>,
    pub negatives: Vec<SegmentId>,
}

/// One trajectory against segments: weighted positives and `w = 0` negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossContrast {
    /// Row of the trajectory in the batch.
    pub traj: usize,
    pub positives: Vec<(SegmentId, f64)>,
    pub negatives: Vec<SegmentId>,
}

/// Everything the three losses consume for one minibatch. Trajectory pairs
/// are implicit: row `i` of the original embeddings pairs with row `i` of
/// the view embeddings; every other view row is a negative.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchContrastPlan {
    pub road: Vec<RoadContrast>,
    pub cross: Vec<CrossContrast>,
    /// Normalise each weighted positive sum by this instead of `Σw`.
    pub cross_norm: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct PlanOptions {
    pub negative_pool: usize,
    /// Replace weights by the on-trajectory indicator.
    pub indicator_weights: bool,
    /// Divide weighted positives by `|S|` rather than `Σw`.
    pub literal_cross_norm: bool,
    pub num_segments: usize,
    pub road: bool,
    pub cross: bool,
}

/// Uniform sample without replacement of up to `k` items from `pool`.
fn sample_from<R: Rng + ?Sized>(pool: &[SegmentId], k: usize, rng: &mut R) -> Vec<SegmentId> {
    if pool.len() <= k {
        return pool.to_vec();
    }
    sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// Builds the contrast plan for a batch. `road_set` is the batch's road
/// vertex set `R`; `weights[i]` belongs to `trajs[i]`.
pub fn plan_batch<R: Rng + ?Sized>(
    context: &ContextGraph,
    road_set: &[SegmentId],
    trajs: &[&Trajectory],
    weights: &[&RSTWeightVector],
    opts: &PlanOptions,
    rng: &mut R,
) -> BatchContrastPlan {
    assert_eq!(trajs.len(), weights.len(), "one weight vector per trajectory");
    let mut plan = BatchContrastPlan {
        cross_norm: opts.literal_cross_norm.then_some(opts.num_segments as f64),
        ..Default::default()
    };
    if opts.road {
        for &s in road_set {
            let ctx = context.context(s);
            if ctx.is_empty() {
                continue;
            }
            let mut pool: Vec<SegmentId> = road_set
                .iter()
                .copied()
                .filter(|&j| j != s && !context.contains(s, j))
                .collect();
            if pool.is_empty() {
                pool = (0..opts.num_segments)
                    .filter(|&j| j != s && !context.contains(s, j))
                    .collect();
            }
            if pool.is_empty() {
                continue;
            }
            plan.road.push(RoadContrast {
                anchor: s,
                positives: ctx.to_vec(),
                negatives: sample_from(&pool, opts.negative_pool, rng),
            });
        }
    }
    if opts.cross {
        for (i, (traj, w)) in trajs.iter().zip(weights).enumerate() {
            let w = if opts.indicator_weights || w.is_zero() {
                RSTWeightVector::indicator(traj)
            } else {
                (*w).clone()
            };
            let positives: Vec<(SegmentId, f64)> = w.iter().filter(|&(_, v)| v > 0.0).collect();
            let support: HashSet<SegmentId> = positives.iter().map(|&(s, _)| s).collect();
            let mut pool: Vec<SegmentId> = road_set.iter().copied().filter(|s| !support.contains(s)).collect();
            if pool.is_empty() {
                pool = (0..opts.num_segments).filter(|s| !support.contains(s)).collect();
            }
            plan.cross.push(CrossContrast {
                traj: i,
                positives,
                negatives: sample_from(&pool, opts.negative_pool, rng),
            });
        }
    }
    plan
}

/// `g[i] += c·x[j]` and `g[j] += c·x[i]` for a score `x[i]·x[j]`.
fn accumulate_pair(g: &mut Array2<f64>, x: &Array2<f64>, i: usize, j: usize, c: f64) {
    g.row_mut(i).scaled_add(c, &x.row(j));
    g.row_mut(j).scaled_add(c, &x.row(i));
}

/// `L_SS`, accumulating `scale · ∂L/∂H_S` into `d_h_s` when given.
pub fn loss_ss_grad(h_s: &Array2<f64>, plan: &BatchContrastPlan, scale: f64, mut d_h_s: Option<&mut Array2<f64>>) -> f64 {
    if plan.road.is_empty() {
        return 0.0;
    }
    let n = plan.road.len() as f64;
    let mut total = 0.0;
    for rc in &plan.road {
        let a = h_s.row(rc.anchor);
        let np = rc.positives.len() as f64;
        let nn = rc.negatives.len() as f64;
        let mut pos = 0.0;
        let mut neg = 0.0;
        for &p in &rc.positives {
            let s = a.dot(&h_s.row(p));
            pos -= softplus(-s);
            if let Some(g) = d_h_s.as_deref_mut() {
                accumulate_pair(g, h_s, rc.anchor, p, -scale * sigmoid(-s) / (np * n));
            }
        }
        for &q in &rc.negatives {
            let s = a.dot(&h_s.row(q));
            neg += softplus(s);
            if let Some(g) = d_h_s.as_deref_mut() {
                accumulate_pair(g, h_s, rc.anchor, q, scale * sigmoid(s) / (nn * n));
            }
        }
        total += pos / np - neg / nn;
    }
    -total / n
}

pub fn loss_ss(h_s: &Array2<f64>, plan: &BatchContrastPlan) -> f64 {
    loss_ss_grad(h_s, plan, 1.0, None)
}

/// `L_TT` over originals (rows of `orig`) and their views (rows of `views`).
pub fn loss_tt_grad(
    orig: &Array2<f64>,
    views: &Array2<f64>,
    scale: f64,
    mut grads: Option<(&mut Array2<f64>, &mut Array2<f64>)>,
) -> Result<f64> {
    let b = orig.nrows();
    assert_eq!(b, views.nrows(), "one view per trajectory");
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let scores = orig.dot(&views.t());
    let nn = (b - 1) as f64;
    let bn = b as f64;
    let mut total = 0.0;
    for i in 0..b {
        let mut neg = 0.0;
        for j in 0..b {
            let s = scores[[i, j]];
            let c = if i == j {
                total -= softplus(-s);
                -scale * sigmoid(-s) / bn
            } else {
                neg += softplus(s);
                scale * sigmoid(s) / (nn * bn)
            };
            if let Some((d_orig, d_views)) = grads.as_mut() {
                d_orig.row_mut(i).scaled_add(c, &views.row(j));
                d_views.row_mut(j).scaled_add(c, &orig.row(i));
            }
        }
        total -= neg / nn;
    }
    Ok(-total / bn)
}

pub fn loss_tt(orig: &Array2<f64>, views: &Array2<f64>) -> Result<f64> {
    loss_tt_grad(orig, views, 1.0, None)
}

/// RS-T weighted `L_ST` between segment rows of `h_s` and trajectory rows
/// of `traj`.
pub fn loss_st_weighted_grad(
    h_s: &Array2<f64>,
    traj: &Array2<f64>,
    plan: &BatchContrastPlan,
    scale: f64,
    mut grads: Option<(&mut Array2<f64>, &mut Array2<f64>)>,
) -> f64 {
    if plan.cross.is_empty() {
        return 0.0;
    }
    let n = plan.cross.len() as f64;
    let mut total = 0.0;
    for cc in &plan.cross {
        let t = traj.row(cc.traj);
        let norm = plan
            .cross_norm
            .unwrap_or_else(|| cc.positives.iter().map(|&(_, w)| w).sum());
        let mut pos = 0.0;
        if norm > 0.0 {
            for &(s, w) in &cc.positives {
                let x = h_s.row(s).dot(&t);
                pos -= w * softplus(-x);
                if let Some((d_h, d_t)) = grads.as_mut() {
                    let c = -scale * w * sigmoid(-x) / (norm * n);
                    d_h.row_mut(s).scaled_add(c, &t);
                    d_t.row_mut(cc.traj).scaled_add(c, &h_s.row(s));
                }
            }
            pos /= norm;
        }
        let mut neg = 0.0;
        if !cc.negatives.is_empty() {
            let nn = cc.negatives.len() as f64;
            for &s in &cc.negatives {
                let x = h_s.row(s).dot(&t);
                neg += softplus(x);
                if let Some((d_h, d_t)) = grads.as_mut() {
                    let c = scale * sigmoid(x) / (nn * n);
                    d_h.row_mut(s).scaled_add(c, &t);
                    d_t.row_mut(cc.traj).scaled_add(c, &h_s.row(s));
                }
            }
            neg /= nn;
        }
        total += pos - neg;
    }
    -total / n
}

pub fn loss_st_weighted(h_s: &Array2<f64>, traj: &Array2<f64>, plan: &BatchContrastPlan) -> f64 {
    loss_st_weighted_grad(h_s, traj, plan, 1.0, None)
}
