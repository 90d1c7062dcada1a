//! Minibatch training of the joint objective.

pub mod adam;
pub mod checkpoint;
pub mod grad_check;

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{noisy_view, AugmentConfig};
use crate::data::{RoadNetwork, SegmentId, Trajectory, TrajectoryCorpus};
use crate::encoders::{backward, encode_segments, gat_forward, Dropout, ForwardState, GatGraph, Hyper, ModelParams, OutputGrads};
use crate::error::{Error, Result};
use crate::objectives::{
    loss_ss_grad, loss_st_weighted_grad, loss_tt_grad, plan_batch, total_loss, Ablation, BatchContrastPlan, LossWeights,
    PlanOptions,
};
use crate::rst::{RSTWeightVector, DEFAULT_RST_THRESHOLD};
use crate::transition::{binarize_transition, build_transition_counts, ContextGraph, DEFAULT_TRANSITION_THRESHOLD};

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_VERSION};
pub use grad_check::{grad_check, GradCheckConfig, GradCheckReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub heads: usize,
    pub gat_layers: usize,
    pub trans_layers: usize,
    /// Feed-forward width; `4d` when absent.
    pub d_ff: Option<usize>,
    pub max_seq_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss_weights: LossWeights,
    pub ablation: Ablation,
    pub seed: u64,
    pub transition_threshold: f64,
    pub rst_threshold: f64,
    pub dropout: f64,
    /// Negatives per anchor; the batch size when absent.
    pub negative_pool: Option<usize>,
    /// Cap on the per-batch road vertex set.
    pub road_set_cap: usize,
    pub clip_norm: f64,
    /// Normalise weighted road-trajectory positives by `|S|`.
    pub literal_cross_norm: bool,
    /// Worker threads; the global pool when absent.
    pub threads: Option<usize>,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 128,
            heads: 4,
            gat_layers: 2,
            trans_layers: 4,
            d_ff: None,
            max_seq_len: 128,
            batch_size: 256,
            epochs: 10,
            learning_rate: 1e-3,
            loss_weights: LossWeights::default(),
            ablation: Ablation::Full,
            seed: 0,
            transition_threshold: DEFAULT_TRANSITION_THRESHOLD,
            rst_threshold: DEFAULT_RST_THRESHOLD,
            dropout: 0.1,
            negative_pool: None,
            road_set_cap: 512,
            clip_norm: 5.0,
            literal_cross_norm: false,
            threads: None,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn hyper(&self, num_segments: usize) -> Hyper {
        Hyper {
            num_segments,
            d: self.d,
            heads: self.heads,
            gat_layers: self.gat_layers,
            trans_layers: self.trans_layers,
            d_ff: self.d_ff.unwrap_or(4 * self.d),
            max_seq_len: self.max_seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.d == 0 || self.heads == 0 || self.batch_size == 0 || self.max_seq_len == 0 || self.road_set_cap == 0 {
            return bad("sizes must be positive");
        }
        if self.d % self.heads != 0 {
            return bad("d must be divisible by heads");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.negative_pool == Some(0) {
            return bad("negative_pool must be positive");
        }
        self.loss_weights.validate()?;
        self.augment.validate()?;
        self.hyper(1).validate()
    }

    /// Weights after applying the ablation.
    pub fn effective_weights(&self) -> Result<LossWeights> {
        self.ablation.loss_weights(self.loss_weights)
    }
}

/// Loss values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_ss: f64,
    pub l_tt: f64,
    pub l_st: f64,
    pub total: f64,
}

/// A fully specified minibatch: sequences, views, and contrast plan.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub originals: Vec<Vec<SegmentId>>,
    pub views: Vec<Vec<SegmentId>>,
    pub plan: BatchContrastPlan,
}

/// Evaluates the weighted objective; with `want_grad` also returns exact
/// parameter gradients. `dropout_seeds` holds one seed per sequence
/// (originals then views); `None` runs in evaluation mode.
pub fn evaluate_objective(
    params: &ModelParams,
    graph: &GatGraph,
    batch: &PreparedBatch,
    weights: &LossWeights,
    dropout: Option<(f64, &[u64])>,
    want_grad: bool,
) -> Result<(LossParts, Option<ModelParams>, ForwardState)> {
    let d = params.hyper.d;
    let b = batch.originals.len();
    let (h_s, gat) = gat_forward(params, graph);
    let need_seqs = weights.lambda_tt > 0.0 || weights.lambda_st > 0.0;
    let need_views = weights.lambda_tt > 0.0;
    let mut seqs: Vec<&[SegmentId]> = Vec::new();
    if need_seqs {
        seqs.extend(batch.originals.iter().map(Vec::as_slice));
    }
    if need_views {
        seqs.extend(batch.views.iter().map(Vec::as_slice));
    }
    let encoded: Vec<_> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, segs)| match dropout {
            Some((rate, seeds)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
                let mut dr = Dropout { rate, rng: &mut rng };
                encode_segments(params, &h_s, segs, Some(&mut dr))
            }
            None => encode_segments(params, &h_s, segs, None),
        })
        .collect();
    let mut emb = Array2::zeros((seqs.len(), d));
    let mut traces = Vec::with_capacity(seqs.len());
    for (i, (h, tr)) in encoded.into_iter().enumerate() {
        emb.row_mut(i).assign(&h);
        traces.push(tr);
    }
    let orig = if need_seqs { emb.slice(s![..b, ..]).to_owned() } else { Array2::zeros((0, d)) };
    let views = if need_views { emb.slice(s![b.., ..]).to_owned() } else { Array2::zeros((0, d)) };

    let mut d_h_s = Array2::zeros(h_s.raw_dim());
    let mut d_orig = Array2::zeros(orig.raw_dim());
    let mut d_views = Array2::zeros(views.raw_dim());
    let mut parts = LossParts::default();
    if weights.lambda_ss > 0.0 {
        parts.l_ss = loss_ss_grad(&h_s, &batch.plan, weights.lambda_ss, want_grad.then_some(&mut d_h_s));
    }
    if weights.lambda_tt > 0.0 {
        let g = want_grad.then_some((&mut d_orig, &mut d_views));
        parts.l_tt = loss_tt_grad(&orig, &views, weights.lambda_tt, g)?;
    }
    if weights.lambda_st > 0.0 {
        let g = want_grad.then_some((&mut d_h_s, &mut d_orig));
        parts.l_st = loss_st_weighted_grad(&h_s, &orig, &batch.plan, weights.lambda_st, g);
    }
    parts.total = total_loss(parts.l_ss, parts.l_tt, parts.l_st, weights);

    let state = ForwardState {
        h_s,
        gat,
        sequences: traces,
    };
    let grads = if want_grad && parts.total.is_finite() {
        let mut d_traj = Array2::zeros((seqs.len(), d));
        if need_seqs {
            d_traj.slice_mut(s![..b, ..]).assign(&d_orig);
        }
        if need_views {
            d_traj.slice_mut(s![b.., ..]).assign(&d_views);
        }
        Some(backward(params, graph, &state, &OutputGrads { d_h_s, d_traj }))
    } else {
        None
    };
    Ok((parts, grads, state))
}

/// Static structures shared by every step.
#[derive(Debug, Clone)]
pub struct TrainingSetup {
    pub graph: GatGraph,
    pub context: ContextGraph,
}

impl TrainingSetup {
    pub fn new(network: &RoadNetwork, corpus: &TrajectoryCorpus, transition_threshold: f64) -> Result<Self> {
        let counts = build_transition_counts(network.num_segments(), corpus);
        let trans = binarize_transition(&counts, transition_threshold)?;
        Ok(Self {
            graph: GatGraph::new(network),
            context: ContextGraph::new(network, &trans),
        })
    }
}

/// One logged optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_ss: f64,
    pub l_tt: f64,
    pub l_st: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// Mean total loss of each epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut acc: Vec<(f64, usize)> = Vec::new();
        for r in &self.steps {
            if acc.len() <= r.epoch {
                acc.resize(r.epoch + 1, (0.0, 0));
            }
            acc[r.epoch].0 += r.total;
            acc[r.epoch].1 += 1;
        }
        acc.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for r in &self.steps {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let steps = csv::Reader::from_reader(file)
            .deserialize()
            .collect::<std::result::Result<Vec<StepRecord>, _>>()?;
        Ok(Self { steps })
    }
}

pub struct TrainOutput {
    pub params: ModelParams,
    pub log: TrainLog,
}

/// Batches of shuffled indices; a trailing singleton joins the previous
/// batch so every batch has a negative for the trajectory contrast.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Trains from a fresh initialisation.
pub fn train(
    network: &RoadNetwork,
    corpus: &TrajectoryCorpus,
    rst_weights: &[RSTWeightVector],
    config: &TrainConfig,
) -> Result<TrainOutput> {
    let params = ModelParams::init(config.seed, config.hyper(network.num_segments()))?;
    train_from(network, corpus, rst_weights, config, params, None)
}

/// Trains starting from `params`, optionally streaming the loss log.
pub fn train_from(
    network: &RoadNetwork,
    corpus: &TrajectoryCorpus,
    rst_weights: &[RSTWeightVector],
    config: &TrainConfig,
    params: ModelParams,
    progress: Option<&mut (dyn Write + Send)>,
) -> Result<TrainOutput> {
    config.validate()?;
    let run = || train_inner(network, corpus, rst_weights, config, params, progress);
    match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

fn train_inner(
    network: &RoadNetwork,
    corpus: &TrajectoryCorpus,
    rst_weights: &[RSTWeightVector],
    config: &TrainConfig,
    mut params: ModelParams,
    mut progress: Option<&mut (dyn Write + Send)>,
) -> Result<TrainOutput> {
    if corpus.len() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let expected = config.hyper(network.num_segments());
    if params.hyper != expected {
        return Err(Error::ShapeMismatch(format!(
            "initial parameters {:?} do not match configuration {:?}",
            params.hyper, expected
        )));
    }
    let weights = config.effective_weights()?;
    let by_id: HashMap<&str, &RSTWeightVector> = rst_weights.iter().map(|w| (w.trajectory_id.as_str(), w)).collect();
    let traj_weights: Vec<&RSTWeightVector> = corpus
        .iter()
        .map(|t| {
            by_id
                .get(t.id.as_str())
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("no RS-T weights for trajectory {}", t.id)))
        })
        .collect::<Result<_>>()?;
    let setup = TrainingSetup::new(network, corpus, config.transition_threshold)?;
    let trajs = corpus.trajectories();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.augment.rng_seed ^ config.seed.rotate_left(32));
    let mut opt = Adam::new(&params, config.learning_rate);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for idx in batches(&order, config.batch_size) {
            let batch_trajs: Vec<&Trajectory> = idx.iter().map(|&i| &trajs[i]).collect();
            let batch_w: Vec<&RSTWeightVector> = idx.iter().map(|&i| traj_weights[i]).collect();
            let views: Vec<Vec<SegmentId>> = batch_trajs
                .iter()
                .map(|t| noisy_view(network, t, &config.augment, &mut aug_rng).0.segments)
                .collect();
            let road_set = road_set(&batch_trajs, config.road_set_cap, &mut rng);
            let opts = PlanOptions {
                negative_pool: config.negative_pool.unwrap_or(config.batch_size),
                indicator_weights: config.ablation.indicator_weights(),
                literal_cross_norm: config.literal_cross_norm,
                num_segments: network.num_segments(),
                road: weights.lambda_ss > 0.0,
                cross: weights.lambda_st > 0.0,
            };
            let plan = plan_batch(&setup.context, &road_set, &batch_trajs, &batch_w, &opts, &mut rng);
            let batch = PreparedBatch {
                originals: batch_trajs.iter().map(|t| t.segments.clone()).collect(),
                views,
                plan,
            };
            let seeds: Vec<u64> = (0..2 * idx.len()).map(|_| rng.random()).collect();
            let dropout = (config.dropout > 0.0).then_some((config.dropout, seeds.as_slice()));
            let (parts, grads, _) = evaluate_objective(&params, &setup.graph, &batch, &weights, dropout, true)?;
            let Some(mut grads) = grads.filter(|_| parts.total.is_finite()) else {
                return Err(Error::NonFiniteLoss { step });
            };
            let norm = grads.global_norm();
            if norm > config.clip_norm {
                grads.scale(config.clip_norm / norm);
            }
            opt.step(&mut params, &grads);
            let rec = StepRecord {
                step,
                epoch,
                l_ss: parts.l_ss,
                l_tt: parts.l_tt,
                l_st: parts.l_st,
                total: parts.total,
            };
            if let Some(w) = progress.as_deref_mut() {
                let _ = writeln!(w, "step {step} epoch {epoch} total {:.6}", parts.total);
            }
            log.steps.push(rec);
            step += 1;
        }
    }
    Ok(TrainOutput { params, log })
}

/// Sorted union of the batch's segments, uniformly subsampled to `cap`.
pub fn road_set<R: Rng + ?Sized>(trajs: &[&Trajectory], cap: usize, rng: &mut R) -> Vec<SegmentId> {
    let all: Vec<SegmentId> = trajs
        .iter()
        .flat_map(|t| t.segments.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if all.len() <= cap {
        return all;
    }
    let mut picked: Vec<SegmentId> = sample(rng, all.len(), cap).into_iter().map(|i| all[i]).collect();
    picked.sort_unstable();
    picked
}
