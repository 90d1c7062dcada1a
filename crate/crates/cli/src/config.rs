//! The pipeline configuration document: TOML sections, dotted `key=value`
//! overrides, and a fingerprint of the resolved document.

use std::path::{Path, PathBuf};

use jclr::augment::AugmentConfig;
use jclr::synth::CityConfig;
use jclr::trainer::{GradCheckConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedSource {
    /// Per-segment `avg_speed` from the network file.
    #[default]
    Metadata,
    /// Mean speed over timestamped traversals in the trajectory file.
    Traversals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    pub seed: u64,
    pub num_queries: usize,
    pub tte_train_fraction: f64,
    pub speed_source: SpeedSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: jclr::eval::DEFAULT_FOLDS,
            seed: 0,
            num_queries: 200,
            tte_train_fraction: jclr::eval::TTE_TRAIN_FRACTION,
            speed_source: SpeedSource::Metadata,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// λ_ST values; the other two weights split the remainder equally.
    pub lambda_st: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambda_st: vec![0.2, 0.4, 0.6, 0.8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSection {
    /// Seeds `first_seed .. first_seed + seeds` are checked.
    pub seeds: u64,
    pub first_seed: u64,
    pub instance: GradCheckConfig,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self {
            seeds: 20,
            first_seed: 0,
            instance: GradCheckConfig::default(),
        }
    }
}

/// Every file the pipeline reads or writes. Relative paths resolve against
/// the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub network: PathBuf,
    pub trajectories: PathBuf,
    pub transition_counts: PathBuf,
    pub transition: PathBuf,
    pub rst: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub segment_embeddings: PathBuf,
    pub trajectory_embeddings: PathBuf,
    /// One `<task>.json` report per evaluation.
    pub report_dir: PathBuf,
    pub grad_check_report: PathBuf,
    pub sweep: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let out = |name: &str| PathBuf::from("out").join(name);
        Self {
            network: out("network.jsonl"),
            trajectories: out("trajectories.jsonl"),
            transition_counts: out("transition_counts.csv"),
            transition: out("transition.csv"),
            rst: out("rst.jsonl"),
            checkpoint: out("model.ckpt"),
            loss_log: out("loss_log.csv"),
            segment_embeddings: out("segment_embeddings.csv"),
            trajectory_embeddings: out("trajectory_embeddings.csv"),
            report_dir: out("reports"),
            grad_check_report: out("grad_check.jsonl"),
            sweep: out("sweep.jsonl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub city: CityConfig,
    /// Training; its augmentation settings come from `[augment]`.
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
    pub grad_check: GradCheckSection,
    pub sweep: SweepConfig,
    pub paths: Paths,
}

/// Parses a right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override, creating intermediate tables.
pub fn apply_override(doc: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override key {key:?}")));
    }
    let mut table = doc;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("override {key:?}: `{}` is not a section", parts[..=i].join(".")))
        })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads the optional config file, applies overrides, and deserialises
/// with unknown keys rejected by their full dotted path.
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<Table>(&text)
                .map_err(|e| CliError::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    if doc
        .get("train")
        .and_then(Value::as_table)
        .is_some_and(|t| t.contains_key("augment"))
    {
        return Err(CliError::Config(
            "augmentation settings belong in [augment], not [train.augment]".into(),
        ));
    }
    let mut cfg: PipelineConfig = serde_path_to_error::deserialize(Value::Table(doc)).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("invalid configuration at `{path}`: {}", e.inner()))
    })?;
    cfg.train.augment = cfg.augment;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &PipelineConfig) -> Result<(), CliError> {
    let cfg_err = |e: jclr::Error| CliError::Config(e.to_string());
    cfg.city.validate().map_err(cfg_err)?;
    cfg.train.validate().map_err(cfg_err)?;
    if cfg.eval.folds < 2 || cfg.eval.num_queries == 0 {
        return Err(CliError::Config("eval.folds must be ≥ 2 and eval.num_queries ≥ 1".into()));
    }
    if !(cfg.eval.tte_train_fraction > 0.0 && cfg.eval.tte_train_fraction < 1.0) {
        return Err(CliError::Config("eval.tte_train_fraction must lie in (0, 1)".into()));
    }
    if cfg.sweep.lambda_st.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
        return Err(CliError::Config("sweep.lambda_st values must lie in [0, 1]".into()));
    }
    Ok(())
}

impl PipelineConfig {
    /// Canonical TOML rendering of the resolved configuration. The copy of
    /// `[augment]` held by the training settings is omitted, so the output
    /// is itself a valid config file.
    pub fn to_toml(&self) -> String {
        let mut doc = Table::try_from(self).expect("configuration serialises");
        if let Some(Value::Table(train)) = doc.get_mut("train") {
            train.remove("augment");
        }
        toml::to_string(&doc).expect("configuration serialises")
    }

    /// First 16 hex digits of the SHA-256 of the canonical rendering.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
