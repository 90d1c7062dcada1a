//! One function per pipeline stage. Each reads only the files named in
//! `[paths]` for its inputs and writes only its declared outputs.

use std::fs;
use std::path::Path;

use jclr::data::{load_road_network, load_trajectories, write_road_network, write_trajectories, RoadNetwork, TrajectoryCorpus};
use jclr::encoders::{embed_corpus, embed_segments, EmbeddingMatrix, GatGraph, ModelParams};
use jclr::eval::{
    eval_road_classification, eval_similarity_search, eval_speed_inference, eval_travel_time, speeds_from_traversals,
    EvalReport,
};
use jclr::objectives::LossWeights;
use jclr::rst::{read_rst_weights, rst_weights_for_corpus, write_rst_weights};
use jclr::synth::{generate_network, generate_trajectories};
use jclr::trainer::{grad_check, load_checkpoint_for, save_checkpoint, train_from, TrainConfig, TrainOutput};
use jclr::transition::{binarize_transition, build_transition_counts, write_adjacency, write_counts};

use crate::config::{PipelineConfig, SpeedSource};
use crate::CliError;

type Out = Result<(), CliError>;

fn ensure_parent(path: &Path) -> Out {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir)
            .map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display()))),
        _ => Ok(()),
    }
}

/// Fails with a missing-input error before any work is done.
fn require(path: &Path, what: &str) -> Out {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Input(format!("missing {what}: {} not found", path.display())))
    }
}

fn load_network(cfg: &PipelineConfig) -> Result<RoadNetwork, CliError> {
    require(&cfg.paths.network, "road network")?;
    Ok(load_road_network(&cfg.paths.network)?)
}

fn load_corpus(cfg: &PipelineConfig, net: &RoadNetwork) -> Result<TrajectoryCorpus, CliError> {
    require(&cfg.paths.trajectories, "trajectory file")?;
    Ok(load_trajectories(&cfg.paths.trajectories, net)?)
}

fn load_model(cfg: &PipelineConfig, net: &RoadNetwork) -> Result<ModelParams, CliError> {
    require(&cfg.paths.checkpoint, "checkpoint")?;
    Ok(load_checkpoint_for(&cfg.paths.checkpoint, &cfg.train.hyper(net.num_segments()))?)
}

/// Header `id,e0,…,e{d−1}`, then one row per item.
pub fn write_embeddings(path: &Path, ids: &[String], emb: &EmbeddingMatrix) -> Out {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut header = vec!["id".to_string()];
    header.extend((0..emb.ncols()).map(|k| format!("e{k}")));
    let write_err = |e: csv::Error| CliError::Input(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(write_err)?;
    for (id, row) in ids.iter().zip(emb.rows()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(write_err)?;
    }
    w.flush().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn emit_report(cfg: &PipelineConfig, report: EvalReport) -> Out {
    let report = report.with_fingerprint(cfg.fingerprint());
    print!("{report}");
    let path = cfg.paths.report_dir.join(format!("{}.json", report.task));
    ensure_parent(&path)?;
    fs::write(&path, report.to_json_line() + "\n")
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn gen_city(cfg: &PipelineConfig) -> Out {
    let net = generate_network(&cfg.city)?;
    let corpus = generate_trajectories(&net, &cfg.city)?;
    ensure_parent(&cfg.paths.network)?;
    ensure_parent(&cfg.paths.trajectories)?;
    write_road_network(&net, &cfg.paths.network)?;
    write_trajectories(&corpus, &cfg.paths.trajectories)?;
    println!(
        "{} segments, {} edges, {} trajectories",
        net.num_segments(),
        net.num_edges(),
        corpus.len()
    );
    Ok(())
}

pub fn build_transition(cfg: &PipelineConfig) -> Out {
    let net = load_network(cfg)?;
    let corpus = load_corpus(cfg, &net)?;
    let counts = build_transition_counts(net.num_segments(), &corpus);
    let adj = binarize_transition(&counts, cfg.train.transition_threshold)?;
    ensure_parent(&cfg.paths.transition_counts)?;
    ensure_parent(&cfg.paths.transition)?;
    write_counts(&counts, &cfg.paths.transition_counts)?;
    write_adjacency(&adj, &cfg.paths.transition)?;
    println!(
        "{} distinct transitions, {} kept at threshold {}",
        counts.nnz(),
        adj.nnz(),
        cfg.train.transition_threshold
    );
    Ok(())
}

pub fn compute_rst(cfg: &PipelineConfig) -> Out {
    let net = load_network(cfg)?;
    let corpus = load_corpus(cfg, &net)?;
    let weights = rst_weights_for_corpus(&net, &corpus, cfg.train.rst_threshold)?;
    ensure_parent(&cfg.paths.rst)?;
    write_rst_weights(&weights, &cfg.paths.rst)?;
    let mean_support = weights.iter().map(|w| w.nz.len()).sum::<usize>() as f64 / weights.len().max(1) as f64;
    println!("{} weight vectors, mean support {mean_support:.1} segments", weights.len());
    Ok(())
}

fn train_with(
    net: &RoadNetwork,
    corpus: &TrajectoryCorpus,
    cfg: &TrainConfig,
    rst_path: &Path,
    verbose: bool,
) -> Result<TrainOutput, CliError> {
    require(rst_path, "RS-T weight file")?;
    let rst = read_rst_weights(rst_path)?;
    let mut stderr = std::io::stderr();
    let progress: Option<&mut (dyn std::io::Write + Send)> = if verbose { Some(&mut stderr) } else { None };
    Ok(train_from(
        net,
        corpus,
        &rst,
        cfg,
        ModelParams::init(cfg.seed, cfg.hyper(net.num_segments()))?,
        progress,
    )?)
}

pub fn train_cmd(cfg: &PipelineConfig, verbose: bool) -> Out {
    let net = load_network(cfg)?;
    let corpus = load_corpus(cfg, &net)?;
    let out = train_with(&net, &corpus, &cfg.train, &cfg.paths.rst, verbose)?;
    ensure_parent(&cfg.paths.checkpoint)?;
    ensure_parent(&cfg.paths.loss_log)?;
    save_checkpoint(&out.params, &cfg.paths.checkpoint)?;
    out.log.write_csv(&cfg.paths.loss_log)?;
    for (e, m) in out.log.epoch_means().iter().enumerate() {
        println!("epoch {e}: mean loss {m:.6}");
    }
    Ok(())
}

pub fn embed(cfg: &PipelineConfig) -> Out {
    let net = load_network(cfg)?;
    let params = load_model(cfg, &net)?;
    let corpus = load_corpus(cfg, &net)?;
    let h_s = embed_segments(&params, &GatGraph::new(&net));
    let seg_ids: Vec<String> = (0..net.num_segments()).map(|s| s.to_string()).collect();
    write_embeddings(&cfg.paths.segment_embeddings, &seg_ids, &h_s)?;
    let traj_ids: Vec<String> = corpus.iter().map(|t| t.id.clone()).collect();
    write_embeddings(&cfg.paths.trajectory_embeddings, &traj_ids, &embed_corpus(&params, &h_s, &corpus))?;
    println!("{} segment and {} trajectory embeddings", net.num_segments(), corpus.len());
    Ok(())
}

fn segment_embeddings(cfg: &PipelineConfig) -> Result<(RoadNetwork, ModelParams, EmbeddingMatrix), CliError> {
    let net = load_network(cfg)?;
    let params = load_model(cfg, &net)?;
    let h_s = embed_segments(&params, &GatGraph::new(&net));
    Ok((net, params, h_s))
}

pub fn eval_road_clf(cfg: &PipelineConfig) -> Out {
    let (net, _, h_s) = segment_embeddings(cfg)?;
    let labels: Vec<Option<u32>> = net.segments().iter().map(|s| s.label).collect();
    emit_report(cfg, eval_road_classification(&h_s, &labels, cfg.eval.folds, cfg.eval.seed)?)
}

pub fn eval_speed(cfg: &PipelineConfig) -> Out {
    let (net, _, h_s) = segment_embeddings(cfg)?;
    let speeds = match cfg.eval.speed_source {
        SpeedSource::Metadata => net.segments().iter().map(|s| s.avg_speed).collect(),
        SpeedSource::Traversals => speeds_from_traversals(&net, &load_corpus(cfg, &net)?),
    };
    emit_report(cfg, eval_speed_inference(&h_s, &speeds, cfg.eval.folds, cfg.eval.seed)?)
}

pub fn eval_sim_search(cfg: &PipelineConfig) -> Out {
    let (net, params, h_s) = segment_embeddings(cfg)?;
    let corpus = load_corpus(cfg, &net)?;
    let report = eval_similarity_search(
        &params,
        &h_s,
        &net,
        &corpus,
        cfg.eval.num_queries,
        &cfg.augment,
        cfg.eval.seed,
    )?;
    emit_report(cfg, report)
}

pub fn eval_tte(cfg: &PipelineConfig) -> Out {
    let (net, params, h_s) = segment_embeddings(cfg)?;
    let corpus = load_corpus(cfg, &net)?;
    emit_report(
        cfg,
        eval_travel_time(&params, &h_s, &corpus, cfg.eval.tte_train_fraction, cfg.eval.seed)?,
    )
}

pub fn grad_check_cmd(cfg: &PipelineConfig) -> Out {
    let gc = &cfg.grad_check;
    let mut lines = String::new();
    let mut failed = Vec::new();
    for seed in gc.first_seed..gc.first_seed + gc.seeds {
        let r = grad_check(&gc.instance, seed)?;
        println!(
            "seed {seed}: {} params, max rel err {:.3e} ({} #{}), {} kinks, {}",
            r.checked,
            r.max_rel_err,
            r.worst_tensor,
            r.worst_index,
            r.kinks,
            if r.passed { "ok" } else { "FAILED" }
        );
        if !r.passed {
            failed.push(seed);
        }
        lines.push_str(&serde_json::to_string(&r).expect("report serialises"));
        lines.push('\n');
    }
    ensure_parent(&cfg.paths.grad_check_report)?;
    fs::write(&cfg.paths.grad_check_report, lines)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", cfg.paths.grad_check_report.display())))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed for seeds {failed:?}")))
    }
}

#[derive(serde::Serialize)]
struct SweepRow {
    lambda_ss: f64,
    lambda_tt: f64,
    lambda_st: f64,
    mi_f1: f64,
    ma_f1: f64,
    mean_rank: f64,
    hr10: f64,
    config_fingerprint: String,
}

pub fn sweep_lambda(cfg: &PipelineConfig) -> Out {
    let net = load_network(cfg)?;
    let corpus = load_corpus(cfg, &net)?;
    let labels: Vec<Option<u32>> = net.segments().iter().map(|s| s.label).collect();
    let mut lines = String::new();
    println!("{:>8} {:>8} {:>8} {:>8} {:>8} {:>10} {:>8}", "λ_SS", "λ_TT", "λ_ST", "Mi-F1", "Ma-F1", "MR", "HR@10");
    for &l in &cfg.sweep.lambda_st {
        let rest = (1.0 - l) / 2.0;
        let mut point = cfg.clone();
        point.train.loss_weights = LossWeights::new(rest, rest, l)?;
        let out = train_with(&net, &corpus, &point.train, &cfg.paths.rst, false)?;
        let h_s = embed_segments(&out.params, &GatGraph::new(&net));
        let clf = eval_road_classification(&h_s, &labels, cfg.eval.folds, cfg.eval.seed)?;
        let sim = eval_similarity_search(
            &out.params,
            &h_s,
            &net,
            &corpus,
            cfg.eval.num_queries,
            &cfg.augment,
            cfg.eval.seed,
        )?;
        let row = SweepRow {
            lambda_ss: rest,
            lambda_tt: rest,
            lambda_st: l,
            mi_f1: clf.metric("Mi-F1").unwrap_or(f64::NAN),
            ma_f1: clf.metric("Ma-F1").unwrap_or(f64::NAN),
            mean_rank: sim.metric("MR").unwrap_or(f64::NAN),
            hr10: sim.metric("HR@10").unwrap_or(f64::NAN),
            config_fingerprint: point.fingerprint(),
        };
        println!(
            "{:>8.3} {:>8.3} {:>8.3} {:>8.4} {:>8.4} {:>10.2} {:>8.4}",
            row.lambda_ss, row.lambda_tt, row.lambda_st, row.mi_f1, row.ma_f1, row.mean_rank, row.hr10
        );
        lines.push_str(&serde_json::to_string(&row).expect("row serialises"));
        lines.push('\n');
    }
    ensure_parent(&cfg.paths.sweep)?;
    fs::write(&cfg.paths.sweep, lines)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", cfg.paths.sweep.display())))
}
