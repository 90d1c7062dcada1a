//! Downstream evaluations on frozen embeddings: road-type classification,
//! speed inference, trajectory similarity search and travel-time estimation.

pub mod metrics;
pub mod probes;

use std::fmt;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{detour, AugmentConfig};
use crate::data::{RoadNetwork, Trajectory, TrajectoryCorpus};
use crate::encoders::{embed_trajectories, EmbeddingMatrix, ModelParams};
use crate::error::{Error, Result};
use metrics::{f1_scores, rank_metrics, rank_of, regression_errors, HIT_RATIO_K};
use probes::{LinearProbe, MlpConfig, MlpRegressor, SoftmaxProbe};

pub const DEFAULT_FOLDS: usize = 5;
pub const LINEAR_PROBE_EPOCHS: usize = 200;
pub const LINEAR_PROBE_LR: f64 = 1e-2;
pub const MLP_EPOCHS: usize = 200;
pub const MLP_LR: f64 = 1e-3;
pub const MLP_BATCH: usize = 64;
pub const TTE_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
}

fn metric(name: &str, value: f64) -> Metric {
    Metric {
        name: name.into(),
        value,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: Vec<Metric>,
    /// Per-fold metrics; empty for single-split tasks.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<Vec<Metric>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_fingerprint: Option<String>,
}

impl EvalReport {
    fn new(task: &str, metrics: Vec<Metric>) -> Self {
        Self {
            task: task.into(),
            metrics,
            folds: Vec::new(),
            config_fingerprint: None,
        }
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.config_fingerprint = Some(fingerprint.into());
        self
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    /// One JSON object, no trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.task)?;
        for m in &self.metrics {
            writeln!(f, "  {:<12} {:>12.6}", m.name, m.value)?;
        }
        for (i, fold) in self.folds.iter().enumerate() {
            let cells: Vec<String> = fold.iter().map(|m| format!("{}={:.4}", m.name, m.value)).collect();
            writeln!(f, "  fold {i}: {}", cells.join(" "))?;
        }
        if let Some(fp) = &self.config_fingerprint {
            writeln!(f, "  config {fp}")?;
        }
        Ok(())
    }
}

/// Fold index per sample. Each class is shuffled and dealt round-robin, so
/// every fold holds ⌊n_c/k⌋ or ⌈n_c/k⌉ samples of class c.
pub fn stratified_folds(labels: &[u32], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = labels.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let mut fold = vec![0; labels.len()];
    let mut offset = 0;
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] as usize == c).collect();
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            fold[i] = (offset + j) % k;
        }
        // Continue dealing where the previous class stopped to balance fold sizes.
        offset += members.len();
    }
    fold
}

/// Fold index per sample from a plain shuffle.
pub fn shuffled_folds(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (j, &i) in order.iter().enumerate() {
        fold[i] = j % k;
    }
    fold
}

fn split(fold: &[usize], f: usize) -> (Vec<usize>, Vec<usize>) {
    (0..fold.len()).partition(|&i| fold[i] != f)
}

/// Linear + softmax probe with stratified k-fold cross-validation over the
/// labelled rows of `h_s`. Reports fold means of Mi-F1 and Ma-F1.
pub fn eval_road_classification(h_s: &EmbeddingMatrix, labels: &[Option<u32>], folds: usize, seed: u64) -> Result<EvalReport> {
    if labels.len() != h_s.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} embeddings",
            labels.len(),
            h_s.nrows()
        )));
    }
    if folds < 2 {
        return Err(Error::InvalidArgument(format!("folds must be at least 2, got {folds}")));
    }
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    let y: Vec<u32> = rows.iter().map(|&i| labels[i].unwrap()).collect();
    if y.is_empty() {
        return Err(Error::Eval("no labelled segments".into()));
    }
    let num_classes = y.iter().map(|&c| c as usize + 1).max().unwrap();
    for c in 0..num_classes {
        let n = y.iter().filter(|&&l| l as usize == c).count();
        if n > 0 && n < folds {
            return Err(Error::Eval(format!("class {c} has {n} samples, fewer than {folds} folds")));
        }
    }
    let x = h_s.select(Axis(0), &rows);
    let fold = stratified_folds(&y, folds, seed);
    let per_fold: Vec<Result<(f64, f64)>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let (train, test) = split(&fold, f);
            let ytr: Vec<u32> = train.iter().map(|&i| y[i]).collect();
            let yte: Vec<u32> = test.iter().map(|&i| y[i]).collect();
            let probe = SoftmaxProbe::train(
                x.select(Axis(0), &train).view(),
                &ytr,
                num_classes,
                LINEAR_PROBE_EPOCHS,
                LINEAR_PROBE_LR,
            );
            f1_scores(&yte, &probe.predict(x.select(Axis(0), &test).view()), num_classes)
        })
        .collect();
    let per_fold = per_fold.into_iter().collect::<Result<Vec<_>>>()?;
    let k = folds as f64;
    let mi = per_fold.iter().map(|p| p.0).sum::<f64>() / k;
    let ma = per_fold.iter().map(|p| p.1).sum::<f64>() / k;
    let mut report = EvalReport::new("road_classification", vec![metric("Mi-F1", mi), metric("Ma-F1", ma)]);
    report.folds = per_fold
        .iter()
        .map(|&(mi, ma)| vec![metric("Mi-F1", mi), metric("Ma-F1", ma)])
        .collect();
    Ok(report)
}

/// Least-squares probe with k-fold cross-validation. MAE and RMSE are
/// computed over the pooled out-of-fold predictions.
pub fn eval_speed_inference(h_s: &EmbeddingMatrix, speeds: &[Option<f64>], folds: usize, seed: u64) -> Result<EvalReport> {
    if speeds.len() != h_s.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} speeds for {} embeddings",
            speeds.len(),
            h_s.nrows()
        )));
    }
    if folds < 2 {
        return Err(Error::InvalidArgument(format!("folds must be at least 2, got {folds}")));
    }
    let rows: Vec<usize> = (0..speeds.len()).filter(|&i| speeds[i].is_some()).collect();
    let d = h_s.ncols();
    if rows.len() < d + 1 {
        return Err(Error::Eval(format!(
            "{} labelled segments cannot determine {} coefficients",
            rows.len(),
            d + 1
        )));
    }
    let y: Vec<f64> = rows.iter().map(|&i| speeds[i].unwrap()).collect();
    let x = h_s.select(Axis(0), &rows);
    let fold = shuffled_folds(rows.len(), folds, seed);
    let mut pred = vec![0.0; rows.len()];
    let mut report_folds = Vec::with_capacity(folds);
    for f in 0..folds {
        let (train, test) = split(&fold, f);
        let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let probe = LinearProbe::fit(x.select(Axis(0), &train).view(), &ytr)?;
        let p = probe.predict(x.select(Axis(0), &test).view());
        let yte: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        let (mae, rmse) = regression_errors(&yte, &p)?;
        report_folds.push(vec![metric("MAE", mae), metric("RMSE", rmse)]);
        for (&i, v) in test.iter().zip(p) {
            pred[i] = v;
        }
    }
    let (mae, rmse) = regression_errors(&y, &pred)?;
    let mut report = EvalReport::new("speed_inference", vec![metric("MAE", mae), metric("RMSE", rmse)]);
    report.folds = report_folds;
    Ok(report)
}

/// Mean speed in km/h per segment over timestamped traversals. Timestamps
/// are entry times, so the last segment of each trajectory has no
/// traversal time and is skipped.
pub fn speeds_from_traversals(network: &RoadNetwork, corpus: &TrajectoryCorpus) -> Vec<Option<f64>> {
    let n = network.num_segments();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for t in corpus.iter() {
        let Some(ts) = t.timestamps.as_deref() else {
            continue;
        };
        for (i, w) in ts.windows(2).enumerate() {
            let dt = w[1] - w[0];
            if dt > 0.0 {
                let s = t.segments[i];
                sum[s] += network.segment(s).length_m / dt * 3.6;
                count[s] += 1;
            }
        }
    }
    sum.into_iter()
        .zip(count)
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect()
}

/// Query/database layout for similarity search. `database` holds every
/// non-query trajectory followed by the detoured twins; `targets[q]` is the
/// database row of the twin of `queries[q]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchFixture {
    pub queries: Vec<Trajectory>,
    pub database: Vec<Trajectory>,
    pub targets: Vec<usize>,
}

/// Samples `num_queries` trajectories whose detour applies. Candidates whose
/// detour falls through are replaced by further draws.
pub fn build_search_fixture(
    network: &RoadNetwork,
    corpus: &TrajectoryCorpus,
    num_queries: usize,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<SearchFixture> {
    if num_queries == 0 {
        return Err(Error::InvalidArgument("num_queries must be positive".into()));
    }
    if corpus.len() <= num_queries {
        return Err(Error::Eval(format!(
            "database of {} trajectories is not larger than {num_queries} queries",
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let mut is_query = vec![false; corpus.len()];
    let mut queries = Vec::with_capacity(num_queries);
    let mut twins = Vec::with_capacity(num_queries);
    for &i in &order {
        if queries.len() == num_queries {
            break;
        }
        let out = detour(network, corpus.get(i), cfg, &mut rng);
        if out.applied {
            is_query[i] = true;
            queries.push(corpus.get(i).clone());
            twins.push(out.trajectory);
        }
    }
    if queries.len() < num_queries {
        return Err(Error::Eval(format!(
            "only {} of {num_queries} queries admit a detour",
            queries.len()
        )));
    }
    let mut database: Vec<Trajectory> = corpus
        .iter()
        .zip(&is_query)
        .filter(|(_, &q)| !q)
        .map(|(t, _)| t.clone())
        .collect();
    let base = database.len();
    database.extend(twins);
    Ok(SearchFixture {
        queries,
        database,
        targets: (base..base + num_queries).collect(),
    })
}

/// 1-based rank of each target under dot-product scores.
pub fn similarity_ranks(queries: &Array2<f64>, database: &Array2<f64>, targets: &[usize]) -> Vec<usize> {
    let scores = queries.dot(&database.t());
    scores
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(row, &t)| rank_of(row.as_slice().expect("row-major scores"), t))
        .collect()
}

pub fn eval_search_fixture(params: &ModelParams, h_s: &EmbeddingMatrix, fixture: &SearchFixture) -> Result<EvalReport> {
    let q = embed_trajectories(params, h_s, &fixture.queries);
    let db = embed_trajectories(params, h_s, &fixture.database);
    let ranks = similarity_ranks(&q, &db, &fixture.targets);
    let (mr, hr) = rank_metrics(&ranks, HIT_RATIO_K)?;
    Ok(EvalReport::new(
        "similarity_search",
        vec![metric("MR", mr), metric("HR@10", hr)],
    ))
}

pub fn eval_similarity_search(
    params: &ModelParams,
    h_s: &EmbeddingMatrix,
    network: &RoadNetwork,
    database: &TrajectoryCorpus,
    num_queries: usize,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<EvalReport> {
    let fixture = build_search_fixture(network, database, num_queries, cfg, seed)?;
    eval_search_fixture(params, h_s, &fixture)
}

/// Travel-time regression from trajectory embeddings with a
/// `d → d → d/2 → 1` perceptron. Trajectories are ordered by departure time
/// and the earliest `train_fraction` are used for training.
pub fn eval_travel_time_embeddings(
    emb: &Array2<f64>,
    corpus: &TrajectoryCorpus,
    train_fraction: f64,
    seed: u64,
) -> Result<EvalReport> {
    if emb.nrows() != corpus.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings for {} trajectories",
            emb.nrows(),
            corpus.len()
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut items = Vec::with_capacity(corpus.len());
    for (i, t) in corpus.iter().enumerate() {
        let ts = t
            .timestamps
            .as_deref()
            .ok_or_else(|| Error::Eval(format!("trajectory {} has no timestamps", t.id)))?;
        items.push((ts[0], i, t.duration().unwrap()));
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n_train = ((items.len() as f64) * train_fraction).round() as usize;
    if n_train == 0 || n_train == items.len() {
        return Err(Error::Eval(format!("{} trajectories are too few to split", items.len())));
    }
    let (train, test) = items.split_at(n_train);
    let rows = |s: &[(f64, usize, f64)]| -> Vec<usize> { s.iter().map(|x| x.1).collect() };
    let ytr: Vec<f64> = train.iter().map(|x| x.2).collect();
    let yte: Vec<f64> = test.iter().map(|x| x.2).collect();
    let d = emb.ncols();
    let cfg = MlpConfig {
        epochs: MLP_EPOCHS,
        lr: MLP_LR,
        batch_size: MLP_BATCH,
        seed,
    };
    let mlp = MlpRegressor::train(emb.select(Axis(0), &rows(train)).view(), &ytr, [d, (d / 2).max(1)], &cfg);
    let pred = mlp.predict(emb.select(Axis(0), &rows(test)).view());
    let (mae, rmse) = regression_errors(&yte, &pred)?;
    let mean = ytr.iter().sum::<f64>() / ytr.len() as f64;
    let (base_mae, _) = regression_errors(&yte, &vec![mean; yte.len()])?;
    Ok(EvalReport::new(
        "travel_time",
        vec![metric("MAE", mae), metric("RMSE", rmse), metric("baseline_MAE", base_mae)],
    ))
}

pub fn eval_travel_time(
    params: &ModelParams,
    h_s: &EmbeddingMatrix,
    corpus: &TrajectoryCorpus,
    train_fraction: f64,
    seed: u64,
) -> Result<EvalReport> {
    let emb = embed_trajectories(params, h_s, corpus.trajectories());
    eval_travel_time_embeddings(&emb, corpus, train_fraction, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_folds_balance_each_class() {
        let labels: Vec<u32> = (0..53).map(|i| (i % 3) as u32).collect();
        let fold = stratified_folds(&labels, 5, 7);
        for c in 0..3 {
            let mut counts = [0usize; 5];
            for (i, &l) in labels.iter().enumerate() {
                if l == c {
                    counts[fold[i]] += 1;
                }
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "class {c}: {counts:?}");
        }
        assert_eq!(fold, stratified_folds(&labels, 5, 7));
        assert_ne!(fold, stratified_folds(&labels, 5, 8));
    }

    #[test]
    fn classification_rejects_rare_class() {
        let h = Array2::<f64>::zeros((12, 2));
        let mut labels = vec![Some(0); 12];
        labels[0] = Some(1);
        assert!(eval_road_classification(&h, &labels, 5, 0).is_err());
    }

    #[test]
    fn report_round_trips_through_json() {
        let r = EvalReport::new("x", vec![metric("MAE", 1.5)]).with_fingerprint("abc");
        let back: EvalReport = serde_json::from_str(&r.to_json_line()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.metric("MAE"), Some(1.5));
        assert!(r.to_string().contains("MAE"));
    }

    #[test]
    fn similarity_ranks_break_ties_by_row() {
        let q = ndarray::array![[1.0, 0.0]];
        let db = ndarray::array![[1.0, 0.0], [2.0, 0.0], [1.0, 5.0], [1.0, 0.0]];
        assert_eq!(similarity_ranks(&q, &db, &[0]), vec![2]);
        assert_eq!(similarity_ranks(&q, &db, &[3]), vec![4]);
    }
}
