//! Central-difference verification of the analytic gradients on small
//! random instances.
//!
//! ReLU and LeakyReLU make the objective piecewise smooth. A difference
//! quotient is only compared when both perturbed points share the
//! activation pattern of the base point; otherwise the step shrinks
//! tenfold, and a parameter that still straddles a kink after
//! [`MAX_REFINEMENTS`] is counted in `kinks` rather than compared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_objective, road_set, PreparedBatch};
use crate::augment::{noisy_view, AugmentConfig};
use crate::data::{RoadNetwork, SegmentMeta, Trajectory};
use crate::encoders::{GatGraph, Hyper, ModelParams};
use crate::error::Result;
use crate::objectives::{plan_batch, LossWeights, PlanOptions};
use crate::rst::{rst_weight_vector, RSTWeightVector, DEFAULT_RST_THRESHOLD};
use crate::transition::ContextGraph;

pub const MAX_REFINEMENTS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub num_segments: usize,
    pub d: usize,
    pub heads: usize,
    pub gat_layers: usize,
    pub trans_layers: usize,
    pub num_trajectories: usize,
    pub max_traj_len: usize,
    pub step: f64,
    /// Lower bound of the relative-error denominator, in units of
    /// `max(1, |loss|)`; difference-quotient noise grows with `|loss|`.
    pub denominator_floor: f64,
    pub tolerance: f64,
    pub loss_weights: LossWeights,
    /// Indicator weights instead of RS-T weights.
    pub indicator_weights: bool,
    /// Scale of the parameters; larger values exercise saturation.
    pub init_scale: f64,
    /// Zero every GAT attention vector, making attention uniform.
    pub zero_attention: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            num_segments: 12,
            d: 8,
            heads: 4,
            gat_layers: 2,
            trans_layers: 4,
            num_trajectories: 4,
            max_traj_len: 6,
            step: 1e-6,
            denominator_floor: 1e-4,
            tolerance: 1e-5,
            loss_weights: LossWeights::default(),
            indicator_weights: false,
            init_scale: 1.0,
            zero_attention: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub loss: f64,
    pub passed: bool,
}

/// A small network, parameters, and a fixed minibatch.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub network: RoadNetwork,
    pub graph: GatGraph,
    pub params: ModelParams,
    pub batch: PreparedBatch,
}

/// Ring plus random chords, so every node reaches every other.
fn random_network<R: Rng>(n: usize, rng: &mut R) -> RoadNetwork {
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    for _ in 0..n {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            edges.push((a, b));
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
    RoadNetwork::new(segs, &edges).expect("valid random network")
}

fn random_walk<R: Rng>(net: &RoadNetwork, len: usize, rng: &mut R) -> Vec<usize> {
    let mut walk = vec![rng.random_range(0..net.num_segments())];
    while walk.len() < len {
        let nb = net.out_neighbors(*walk.last().unwrap());
        walk.push(nb[rng.random_range(0..nb.len())]);
    }
    walk
}

pub fn random_instance(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let network = random_network(cfg.num_segments, &mut rng);
    let graph = GatGraph::new(&network);
    let hyper = Hyper {
        num_segments: cfg.num_segments,
        d: cfg.d,
        heads: cfg.heads,
        gat_layers: cfg.gat_layers,
        trans_layers: cfg.trans_layers,
        d_ff: 4 * cfg.d,
        max_seq_len: 128,
    };
    let mut params = ModelParams::init(rng.random(), hyper)?;
    if cfg.init_scale != 1.0 {
        params.scale(cfg.init_scale);
    }
    // Perturb the layer-norm affine terms away from their (1, 0) start.
    for l in &mut params.encoder {
        for v in l.ln1_gain.iter_mut().chain(l.ln2_gain.iter_mut()) {
            *v += rng.random_range(-0.3..0.3);
        }
        for v in l.ln1_bias.iter_mut().chain(l.ln2_bias.iter_mut()) {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    if cfg.zero_attention {
        for layer in &mut params.gat {
            for h in &mut layer.heads {
                h.a.fill(0.0);
            }
        }
    }
    let trajs: Vec<Trajectory> = (0..cfg.num_trajectories)
        .map(|i| {
            let len = rng.random_range(3..=cfg.max_traj_len.max(3));
            Trajectory::new(format!("t{i}"), random_walk(&network, len, &mut rng))
        })
        .collect();
    let aug = AugmentConfig::default();
    let views: Vec<Vec<usize>> = trajs
        .iter()
        .map(|t| noisy_view(&network, t, &aug, &mut rng).0.segments)
        .collect();
    let weights: Vec<RSTWeightVector> = trajs
        .iter()
        .map(|t| rst_weight_vector(&network, t, DEFAULT_RST_THRESHOLD))
        .collect::<Result<_>>()?;
    let context = ContextGraph::structural(&network);
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let wrefs: Vec<&RSTWeightVector> = weights.iter().collect();
    let roads = road_set(&refs, 512, &mut rng);
    let opts = PlanOptions {
        negative_pool: cfg.num_trajectories,
        indicator_weights: cfg.indicator_weights,
        literal_cross_norm: false,
        num_segments: cfg.num_segments,
        road: true,
        cross: true,
    };
    let plan = plan_batch(&context, &roads, &refs, &wrefs, &opts, &mut rng);
    Ok(GradCheckInstance {
        network,
        graph,
        params,
        batch: PreparedBatch {
            originals: trajs.into_iter().map(|t| t.segments).collect(),
            views,
            plan,
        },
    })
}

/// Checks every parameter of a random instance drawn from `seed`.
pub fn grad_check(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let inst = random_instance(seed, cfg)?;
    check_instance(&inst, cfg, seed)
}

pub fn check_instance(inst: &GradCheckInstance, cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let w = &cfg.loss_weights;
    let (parts, grads, state) = evaluate_objective(&inst.params, &inst.graph, &inst.batch, w, None, true)?;
    let grads = grads.expect("finite loss yields gradients");
    let base_pattern = state.activation_pattern();
    let eval = |p: &ModelParams| -> Result<(f64, bool)> {
        let (parts, _, st) = evaluate_objective(p, &inst.graph, &inst.batch, w, None, false)?;
        Ok((parts.total, st.activation_pattern() == base_pattern))
    };

    let analytic = grads.to_flat();
    let base = inst.params.to_flat();
    let names: Vec<(String, usize)> = inst
        .params
        .tensors()
        .iter()
        .flat_map(|t| (0..t.data.len()).map(move |i| (t.name.clone(), i)))
        .collect();

    let results: Vec<Result<Option<(usize, f64, f64)>>> = (0..base.len())
        .into_par_iter()
        .map_init(
            || inst.params.clone(),
            |p, k| {
                let mut h = cfg.step;
                for _ in 0..=MAX_REFINEMENTS {
                    let mut flat = base.clone();
                    flat[k] = base[k] + h;
                    p.assign_flat(&flat);
                    let (fp, same_p) = eval(p)?;
                    flat[k] = base[k] - h;
                    p.assign_flat(&flat);
                    let (fm, same_m) = eval(p)?;
                    if same_p && same_m {
                        let numeric = (fp - fm) / (2.0 * h);
                        return Ok(Some((k, analytic[k], numeric)));
                    }
                    h /= 10.0;
                }
                Ok(None)
            },
        )
        .collect();

    let mut report = GradCheckReport {
        seed,
        checked: 0,
        kinks: 0,
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        loss: parts.total,
        passed: false,
    };
    let floor = cfg.denominator_floor * parts.total.abs().max(1.0);
    for r in results {
        match r? {
            None => report.kinks += 1,
            Some((k, a, n)) => {
                report.checked += 1;
                let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
                if err >= report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst_tensor = names[k].0.clone();
                    report.worst_index = names[k].1;
                    report.analytic = a;
                    report.numeric = n;
                }
            }
        }
    }
    report.passed = report.max_rel_err < cfg.tolerance;
    Ok(report)
}
