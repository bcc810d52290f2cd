//! Metrics, the EntityMean baseline, context and layer ablations, synthetic
//! databases and checkpoint evaluation.

mod ablation;
mod baseline;
mod metrics;
mod synth;

pub use ablation::{
    apply_context_ablation, matched_ablation_config, name_derangement, param_count, param_gap, AblationSpec,
    ContextAblation,
};
pub use baseline::entity_mean_baseline;
pub use metrics::{auroc, r2};
pub use synth::{generate_attached, generate_synthetic, Generator, SyntheticSpec};

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{forward, predict_probability, ModelError, ModelState};
use crate::sampler::{sample_context, ContextWindow, SamplerConfig, SamplerError};
use crate::store::{FeatureType, RelationalDatabase, Split, StoreError};
use crate::train::{config_hash, sha256_hex};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0}")]
    Metric(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("{0}")]
    Task(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "AUROC")]
    Auroc,
    #[serde(rename = "R2")]
    R2,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Auroc => "AUROC",
            Metric::R2 => "R2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub split: String,
    pub metric: Metric,
    pub value: f64,
    pub seed_count: usize,
    pub config_fingerprint: String,
    /// Predictor that produced the scores: `model` or `entity_mean`.
    pub predictor: String,
    /// Context ablations in effect, comma-separated; empty for none.
    pub ablation: String,
}

impl EvalReport {
    /// Fixed-width table row matching [`EvalReport::table_header`].
    pub fn table_row(&self) -> String {
        format!(
            "{:<16} {:<6} {:<12} {:<24} {:<6} {:>9.4} {:>7}",
            self.task,
            self.split,
            self.predictor,
            if self.ablation.is_empty() {
                "none"
            } else {
                &self.ablation
            },
            self.metric.to_string(),
            self.value,
            self.seed_count
        )
    }

    pub fn table_header() -> String {
        format!(
            "{:<16} {:<6} {:<12} {:<24} {:<6} {:>9} {:>7}",
            "task", "split", "predictor", "ablation", "metric", "value", "seeds"
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub context_length: usize,
    pub width_bound: usize,
    pub rng_seed: u64,
    /// Evaluate only the first this many seeds of the split.
    pub max_seeds: Option<usize>,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            context_length: 256,
            width_bound: 8,
            rng_seed: 0,
            max_seeds: None,
            workers: 1,
        }
    }
}

impl EvalConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            context_length: self.context_length,
            width_bound: self.width_bound,
            rng_seed: self.rng_seed,
        }
    }
}

/// Scores and ground truth behind a report, one entry per seed.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Probabilities for boolean tasks, de-normalized predictions for numeric tasks.
    pub scores: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Mean raw label over the active task's training rows.
pub fn train_label_mean(db: &RelationalDatabase) -> Result<f64, EvalError> {
    let task = db.active_task().ok_or(StoreError::NoActiveTask)?;
    let table = db.table(task.table);
    let values: Vec<f64> = db
        .seed_rows_for_task(Split::Train)?
        .iter()
        .filter_map(|s| table.cell(s.row.row, task.label_column.column as usize))
        .filter_map(|v| v.as_scalar())
        .collect();
    if values.is_empty() {
        return Err(EvalError::Task("task has no training rows".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Windows for the first seeds of `split`, one per seed, ablations applied.
pub fn eval_windows(
    db: &RelationalDatabase,
    split: Split,
    ablation: Option<&AblationSpec>,
    cfg: &EvalConfig,
) -> Result<Vec<ContextWindow>, EvalError> {
    let mut seeds = db.seed_rows_for_task(split)?;
    if let Some(n) = cfg.max_seeds {
        seeds.truncate(n);
    }
    let sampler = cfg.sampler();
    seeds
        .iter()
        .map(|s| {
            let w = sample_context(db, s, &sampler)?;
            Ok(match ablation {
                Some(a) => apply_context_ablation(db, &w, a),
                None => w,
            })
        })
        .collect()
}

fn metric_value(
    kind: FeatureType,
    scores: &[f64],
    targets: &[f64],
    train_mean: f64,
) -> Result<(Metric, f64), EvalError> {
    match kind {
        FeatureType::Boolean => {
            let labels: Vec<bool> = targets.iter().map(|&t| t > 0.5).collect();
            Ok((Metric::Auroc, auroc(scores, &labels)?))
        }
        _ => Ok((Metric::R2, r2(scores, targets, train_mean)?)),
    }
}

fn fingerprint(parts: &[String]) -> String {
    sha256_hex(parts.join("\n").as_bytes())
}

fn ablation_label(a: Option<&AblationSpec>) -> String {
    a.map(|a| a.context.iter().map(|c| c.name()).collect::<Vec<_>>().join(","))
        .unwrap_or_default()
}

fn true_label(db: &RelationalDatabase, w: &ContextWindow) -> f64 {
    db.table(w.seed.table)
        .cell(w.seed.row, w.target.column as usize)
        .and_then(|v| v.as_scalar())
        .expect("seed rows carry a label")
}

/// Runs the model on one window per seed of `split` and computes AUROC
/// (boolean task) or R2 (numeric task).
pub fn evaluate(
    state: &ModelState<f32>,
    db: &RelationalDatabase,
    split: Split,
    ablation: Option<&AblationSpec>,
    cfg: &EvalConfig,
) -> Result<Evaluation, EvalError> {
    let task = db.active_task().ok_or(StoreError::NoActiveTask)?.clone();
    state.stats.check_compatible(db).map_err(EvalError::Incompatible)?;
    if let Some(a) = ablation {
        if !a.layers.is_empty() {
            a.check_model(&state.config).map_err(EvalError::Incompatible)?;
        }
    }
    let label_stats = state
        .stats
        .get(task.label_column)
        .ok_or_else(|| EvalError::Incompatible("no statistics for the task label".into()))?
        .stats;
    let windows = eval_windows(db, split, ablation, cfg)?;
    let encoder = state.encoder();
    let score = |w: &ContextWindow| -> Result<f64, EvalError> {
        let enc = encoder.encode(db, w, Some(&task.name))?;
        let out = forward(state, &enc)?;
        let idx = out
            .seed_target
            .ok_or_else(|| EvalError::Task("seed target was not masked".into()))?;
        match task.label_type {
            FeatureType::Boolean => Ok(predict_probability(&out)?[idx]),
            _ => Ok(out.cells[idx].value as f64 * label_stats.std.max(crate::codec::STD_FLOOR) + label_stats.mean),
        }
    };
    let scores: Vec<f64> = if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| EvalError::Task(e.to_string()))?;
        pool.install(|| windows.par_iter().map(score).collect::<Result<_, _>>())?
    } else {
        windows.iter().map(score).collect::<Result<_, _>>()?
    };
    let targets: Vec<f64> = windows.iter().map(|w| true_label(db, w)).collect();
    let (metric, value) = metric_value(task.label_type, &scores, &targets, train_label_mean(db)?)?;
    let report = EvalReport {
        task: task.name.clone(),
        split: split.to_string(),
        metric,
        value,
        seed_count: scores.len(),
        config_fingerprint: fingerprint(&[
            config_hash(&state.config),
            serde_json::to_string(cfg).expect("eval config serializes"),
            serde_json::to_string(&ablation).expect("ablation serializes"),
        ]),
        predictor: "model".into(),
        ablation: ablation_label(ablation),
    };
    Ok(Evaluation {
        report,
        scores,
        targets,
    })
}

/// Scores every seed with [`entity_mean_baseline`].
pub fn evaluate_entity_mean(
    db: &RelationalDatabase,
    split: Split,
    ablation: Option<&AblationSpec>,
    cfg: &EvalConfig,
) -> Result<Evaluation, EvalError> {
    let task = db.active_task().ok_or(StoreError::NoActiveTask)?.clone();
    let fallback = train_label_mean(db)?;
    let windows = eval_windows(db, split, ablation, cfg)?;
    let scores: Vec<f64> = windows.iter().map(|w| entity_mean_baseline(w, fallback)).collect();
    let targets: Vec<f64> = windows.iter().map(|w| true_label(db, w)).collect();
    let (metric, value) = metric_value(task.label_type, &scores, &targets, fallback)?;
    let report = EvalReport {
        task: task.name.clone(),
        split: split.to_string(),
        metric,
        value,
        seed_count: scores.len(),
        config_fingerprint: fingerprint(&[
            "entity_mean".into(),
            serde_json::to_string(cfg).expect("eval config serializes"),
            serde_json::to_string(&ablation).expect("ablation serializes"),
        ]),
        predictor: "entity_mean".into(),
        ablation: ablation_label(ablation),
    };
    Ok(Evaluation {
        report,
        scores,
        targets,
    })
}
