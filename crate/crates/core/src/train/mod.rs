//! Masked-token training: batch construction, AdamW, the training loop,
//! checkpoints and the finite-difference gradient checker.

mod batch;
mod checkpoint;
mod gradcheck;
mod optim;

pub use batch::{apply_masking, draw_window, make_batch, TrainItem, TrainTask};
pub use checkpoint::{
    checkpoint_path, config_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, sha256_hex,
    Checkpoint, CheckpointError, LoadExpectations, FORMAT_VERSION,
};
pub use gradcheck::{
    batch_loss_and_grad, gradient_check, relative_error, CoordinateCheck, GradCheckReport, GradientFault,
    REL_ERROR_FLOOR,
};
pub use optim::{lr_at, AdamW, AdamWConfig, Schedule};

use std::ops::ControlFlow;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{loss_and_grad, ModelError, ModelParams, ModelState};
use crate::sampler::{SamplerConfig, SamplerError};
use crate::store::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(CheckpointError),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged {
        step: u64,
        loss: f64,
        last_good: Box<Checkpoint>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub schedule: Schedule,
    pub mask_probability: f64,
    pub rng_seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub context_length: usize,
    pub width_bound: usize,
    pub optimizer: AdamWConfig,
    /// Threads computing per-item gradients; results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_fraction: 0.2,
            schedule: Schedule::LinearWarmupDecay,
            mask_probability: 0.0,
            rng_seed: 0,
            checkpoint_every: 0,
            context_length: 256,
            width_bound: 8,
            optimizer: AdamWConfig::default(),
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: constant `1e-4`, no weight decay.
    pub fn fine_tune() -> Self {
        TrainConfig {
            peak_lr: 1e-4,
            schedule: Schedule::Constant,
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            context_length: self.context_length,
            width_bound: self.width_bound,
            rng_seed: self.rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.mask_probability) {
            return bad("mask_probability must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must be in [0, 1]");
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be finite and non-negative");
        }
        if self.workers == 0 {
            return bad("workers must be >= 1");
        }
        self.sampler().validate()?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

/// Per-item gradients summed in item order, plus the mean loss.
fn batch_gradient(
    state: &ModelState<f32>,
    items: &[TrainItem],
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, ModelParams<f32>), TrainError> {
    let count: usize = items.iter().map(|i| i.encoded.targets.len()).sum();
    if count == 0 {
        return Err(ModelError::NoMaskedCells.into());
    }
    let scale = 1.0 / count as f64;
    let one = |item: &TrainItem| -> Result<(f64, ModelParams<f32>), ModelError> {
        let mut g = state.params.zeros_like();
        let l = loss_and_grad(state, &item.encoded, scale, &mut g)?;
        Ok((l, g))
    };
    let parts: Vec<Result<_, ModelError>> = match pool {
        Some(p) => p.install(|| items.par_iter().map(one).collect()),
        None => items.iter().map(one).collect(),
    };
    let mut grads = state.params.zeros_like();
    let mut total = 0.0;
    for part in parts {
        let (l, g) = part?;
        total += l;
        grads.add_assign(&g);
    }
    Ok((total * scale, grads))
}

/// Runs `cfg.steps` optimizer steps starting from `start`.
///
/// `optimizer` continues a previous run; `None` starts fresh moments (as when
/// fine-tuning from a pretrained checkpoint). `observer` sees every step
/// after its update and may stop training early.
pub fn train(
    start: ModelState<f32>,
    optimizer: Option<AdamW<f32>>,
    tasks: &[TrainTask],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepRecord, &Checkpoint) -> ControlFlow<()>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(TrainError::Config("at least one training task is required".into()));
    }
    let pool = if cfg.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| TrainError::Config(e.to_string()))?,
        )
    } else {
        None
    };
    log::info!(
        "training {} params for {} steps, adam betas ({}, {}), eps {}, clip {}",
        start.params.param_count(),
        cfg.steps,
        cfg.optimizer.beta1,
        cfg.optimizer.beta2,
        cfg.optimizer.eps,
        cfg.optimizer.clip_norm
    );
    let optimizer = optimizer.unwrap_or_else(|| AdamW::new(cfg.optimizer, &start.params));
    let mut ck = Checkpoint {
        step: 0,
        state: start,
        optimizer: Some(optimizer),
    };
    let started = Instant::now();
    let sampler = cfg.sampler();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let items = make_batch(
            tasks,
            &sampler,
            cfg.mask_probability,
            cfg.batch_size,
            cfg.rng_seed,
            step as u64,
        )?;
        let (loss, grads) = match batch_gradient(&ck.state, &items, pool.as_ref()) {
            Ok(v) => v,
            Err(TrainError::Model(ModelError::NonFinite(_))) => (f64::NAN, ck.state.params.zeros_like()),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                step: step as u64,
                loss,
                last_good: Box::new(ck),
            });
        }
        let lr = lr_at(cfg.schedule, cfg.peak_lr, cfg.warmup_fraction, step, cfg.steps);
        let opt = ck.optimizer.as_mut().expect("optimizer present during training");
        let grad_norm = opt.step(&mut ck.state.params, &grads, lr);
        ck.step += 1;
        let rec = StepRecord {
            step: ck.step,
            loss,
            lr,
            grad_norm,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log.push(rec.clone());
        if observer(&rec, &ck).is_break() {
            break;
        }
    }
    Ok(TrainOutcome { checkpoint: ck, log })
}

/// Tracks the checkpoint with the best validation metric (higher is better).
#[derive(Default)]
pub struct BestCheckpoint {
    pub metric: Option<f64>,
    pub checkpoint: Option<Checkpoint>,
}

impl BestCheckpoint {
    /// Keeps `ck` if `metric` beats the current best; ties keep the earlier one.
    pub fn offer(&mut self, metric: f64, ck: &Checkpoint) -> bool {
        if self.metric.is_none_or(|m| metric > m) {
            self.metric = Some(metric);
            self.checkpoint = Some(ck.clone());
            true
        } else {
            false
        }
    }
}
