use std::sync::Arc;

use rand::Rng;

use super::TrainError;
use crate::eval::{apply_context_ablation, AblationSpec};
use crate::model::{EncodedWindow, WindowEncoder};
use crate::rng;
use crate::sampler::{sample_context, ContextWindow, SamplerConfig};
use crate::store::{ColumnRef, RelationalDatabase, Seed, Split};

/// One source of training seeds: a database, its encoder and the seeds of one
/// split for either a task table or an autocomplete column.
#[derive(Clone)]
pub struct TrainTask {
    pub name: String,
    pub db: RelationalDatabase,
    pub encoder: Arc<WindowEncoder>,
    pub seeds: Vec<Seed>,
    /// Context ablation applied to every sampled window before masking.
    pub context_ablation: Option<AblationSpec>,
}

impl TrainTask {
    /// Seeds of the database's active task in `split`.
    pub fn from_active_task(
        db: RelationalDatabase,
        encoder: Arc<WindowEncoder>,
        split: Split,
    ) -> Result<TrainTask, TrainError> {
        let name = db
            .active_task()
            .map(|t| t.name.clone())
            .ok_or_else(|| TrainError::Data("database has no active task".into()))?;
        let seeds = db.seed_rows_for_task(split)?;
        Ok(TrainTask {
            name,
            db,
            encoder,
            seeds,
            context_ablation: None,
        })
    }

    /// Autocomplete seeds for one feature column.
    pub fn autocomplete(
        db: RelationalDatabase,
        encoder: Arc<WindowEncoder>,
        column: ColumnRef,
        split: Split,
        train_cutoff: i64,
        val_cutoff: i64,
    ) -> Result<TrainTask, TrainError> {
        let seeds = db.autocomplete_seeds(column, split, train_cutoff, val_cutoff)?;
        let name = format!("{}.{}", db.table_name(column.table), db.column_name(column));
        Ok(TrainTask {
            name,
            db,
            encoder,
            seeds,
            context_ablation: None,
        })
    }

    /// Trains on ablated contexts, as when fine-tuning under a context ablation.
    pub fn with_context_ablation(mut self, spec: AblationSpec) -> TrainTask {
        self.context_ablation = Some(spec);
        self
    }
}

#[derive(Clone, Debug)]
pub struct TrainItem {
    pub task: usize,
    pub window: ContextWindow,
    pub encoded: EncodedWindow,
}

/// Masks each unmasked numeric/boolean cell of `window` independently with
/// probability `p`. The seed's target cell is already masked by the sampler.
pub fn apply_masking(window: &mut ContextWindow, p: f64, rng: &mut impl Rng) -> usize {
    let mut added = 0;
    if p <= 0.0 {
        return 0;
    }
    for tok in window.tokens.iter_mut() {
        if !tok.is_masked && tok.feature_type().is_maskable() && rng.random_bool(p) {
            tok.is_masked = true;
            added += 1;
        }
    }
    added
}

/// Draws one window for batch slot `(step, index)`: a task chosen uniformly,
/// a seed chosen uniformly from it, the sampled context and extra masking.
pub fn draw_window(
    tasks: &[TrainTask],
    sampler: &SamplerConfig,
    mask_probability: f64,
    rng_seed: u64,
    step: u64,
    index: u64,
) -> Result<(usize, ContextWindow), TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::Config("at least one training task is required".into()));
    }
    let mut r = rng::stream(rng_seed, &[0xba7c, step, index]);
    let t = r.random_range(0..tasks.len());
    let task = &tasks[t];
    if task.seeds.is_empty() {
        return Err(TrainError::Data(format!("task `{}` has no training seeds", task.name)));
    }
    let seed = task.seeds[r.random_range(0..task.seeds.len())];
    let cfg = SamplerConfig {
        rng_seed: rng::mix(rng_seed, &[step, index]),
        ..*sampler
    };
    let mut window = sample_context(&task.db, &seed, &cfg)?;
    if let Some(spec) = &task.context_ablation {
        window = apply_context_ablation(&task.db, &window, spec);
    }
    apply_masking(&mut window, mask_probability, &mut r);
    Ok((t, window))
}

pub fn make_batch(
    tasks: &[TrainTask],
    sampler: &SamplerConfig,
    mask_probability: f64,
    batch_size: usize,
    rng_seed: u64,
    step: u64,
) -> Result<Vec<TrainItem>, TrainError> {
    if !(0.0..1.0).contains(&mask_probability) {
        return Err(TrainError::Config(format!(
            "mask probability {mask_probability} must be in [0, 1)"
        )));
    }
    (0..batch_size as u64)
        .map(|i| {
            let (task, window) = draw_window(tasks, sampler, mask_probability, rng_seed, step, i)?;
            let t = &tasks[task];
            let encoded = t.encoder.encode(&t.db, &window, Some(&t.name))?;
            Ok(TrainItem { task, window, encoded })
        })
        .collect()
}
