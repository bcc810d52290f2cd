use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use log::info;
use reltrans::codec::{fit_norm_stats, HashingEmbedder, NormStats, TextEmbedder};
use reltrans::eval::{
    evaluate, evaluate_entity_mean, generate_synthetic, matched_ablation_config, param_gap, AblationSpec,
    ContextAblation, EvalReport, SyntheticSpec,
};
use reltrans::model::{ModelConfig, ModelState, WindowEncoder};
use reltrans::sampler::{sample_context, ContextWindow};
use reltrans::store::{write_database, RelationalDatabase, Split, Value};
use reltrans::train::{
    apply_masking, checkpoint_path, gradient_check, load_checkpoint, save_checkpoint, train as run_training,
    BestCheckpoint, Checkpoint, LoadExpectations, TrainError, TrainTask,
};
use serde_json::json;

use crate::config::{Overrides, RunConfig};
use crate::data::{load_dir, load_with_task};
use crate::error::Failure;
use crate::{AblateCmd, EvalCmd, GradcheckCmd, IngestArgs, SampleArgs, SynthArgs, TrainCmd};

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn train_cutoff(db: &RelationalDatabase) -> i64 {
    db.active_task().map_or(i64::MAX, |t| t.train_cutoff)
}

fn encoder(db: &RelationalDatabase, embedder: Arc<dyn TextEmbedder>) -> (Arc<NormStats>, Arc<WindowEncoder>) {
    let stats = Arc::new(fit_norm_stats(db, train_cutoff(db)));
    (stats.clone(), Arc::new(WindowEncoder::new(stats, embedder)))
}

pub fn ingest(a: IngestArgs) -> Result<()> {
    let loaded = load_dir(&a.data, a.schema.as_deref())?;
    let db = &loaded.db;
    let mut tables = Vec::new();
    for t in db.tables() {
        let timed = t.time_column().is_some();
        println!(
            "table {:<20} rows {:>8}  timestamp {}",
            t.name(),
            t.len(),
            if timed { "yes" } else { "no" }
        );
        tables.push(json!({ "name": t.name(), "rows": t.len(), "timestamped": timed }));
    }
    println!("links {}", db.num_links());
    let mut tasks = Vec::new();
    for task in &loaded.tasks {
        let attached = db.clone().attach_task_table(task).map_err(Failure::data)?;
        let mut counts = serde_json::Map::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let n = attached.seed_rows_for_task(split).map_err(Failure::data)?.len();
            counts.insert(split.to_string(), n.into());
        }
        println!(
            "task  {:<20} {}",
            task.name(),
            serde_json::Value::Object(counts.clone())
        );
        tasks.push(json!({ "name": task.name(), "splits": counts }));
    }
    if let Some(out) = &a.out {
        write_database(db, &loaded.tasks, out).map_err(Failure::data)?;
        let summary = json!({ "tables": tables, "links": db.num_links(), "tasks": tasks });
        write_json(&out.join("summary.json"), &summary)?;
        info!("wrote {}", out.display());
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec::new(a.spec);
    spec.rng_seed = a.seed;
    if let Some(v) = a.entities {
        spec.entities = v;
    }
    if let Some(v) = a.groups {
        spec.groups = v;
    }
    if let Some(v) = a.rows_per_entity {
        spec.rows_per_entity = v;
    }
    if let Some(v) = a.noise {
        spec.noise = v;
    }
    let (db, task) = generate_synthetic(&spec).map_err(Failure::config)?;
    write_database(&db, std::slice::from_ref(&task), &a.out).map_err(Failure::data)?;
    write_json(&a.out.join("spec.json"), &serde_json::to_value(&spec)?)?;
    info!(
        "wrote {} ({} rows, task `{}` with {} rows)",
        a.out.display(),
        db.num_rows(),
        task.name(),
        task.rows.len()
    );
    Ok(())
}

fn render(v: &Value) -> String {
    match v {
        Value::Text(t) => t.replace(['\t', '\n'], " "),
        other => other.to_string(),
    }
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let db = load_with_task(&a.db, a.task.as_deref())?;
    let cfg = reltrans::sampler::SamplerConfig {
        context_length: a.context_length,
        width_bound: a.width_bound,
        rng_seed: a.seed,
    };
    cfg.validate().map_err(Failure::config)?;
    let seeds = db.seed_rows_for_task(a.split).map_err(Failure::data)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(out, "window\tposition\ttable\trow\tcolumn\ttype\tmasked\tvalue")?;
    for (w_idx, seed) in seeds.iter().take(a.count).enumerate() {
        let w = sample_context(&db, seed, &cfg).map_err(Failure::data)?;
        for (pos, t) in w.tokens.iter().enumerate() {
            let value = if t.is_masked { "?".to_string() } else { render(&t.value) };
            writeln!(
                out,
                "{w_idx}\t{pos}\t{}\t{}\t{}\t{}\t{}\t{value}",
                db.table_name(t.row.table),
                db.key(t.row),
                db.column_name(t.column),
                t.feature_type().name(),
                t.is_masked
            )?;
        }
        if let Some(dir) = &a.mask_dir {
            write_masks(dir, w_idx, &w)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn write_masks(dir: &Path, index: usize, w: &ContextWindow) -> Result<()> {
    fs::create_dir_all(dir)?;
    let masks = reltrans::attention::build_masks(w);
    for kind in reltrans::attention::AttentionKind::ALL {
        let path = dir.join(format!("window-{index}.{}.pgm", kind.short_name()));
        fs::write(&path, masks.get(kind).to_pgm()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn embedder_for(cfg: &ModelConfig) -> Arc<dyn TextEmbedder> {
    Arc::new(HashingEmbedder::new(cfg.d_text))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path, &LoadExpectations::default())
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(Failure::data)
}

fn write_reports(out: &Path, reports: &[EvalReport]) -> Result<()> {
    let path = out.join("report.jsonl");
    let mut f = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    for r in reports {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    println!("{}", EvalReport::table_header());
    for r in reports {
        println!("{}", r.table_row());
    }
    Ok(())
}

struct Prepared {
    tasks: Vec<TrainTask>,
    stats: Arc<NormStats>,
}

fn prepare_tasks(dbs: &[RelationalDatabase], embedder: Arc<dyn TextEmbedder>) -> Result<Prepared> {
    let mut tasks = Vec::new();
    let mut first_stats = None;
    for db in dbs {
        let (stats, enc) = encoder(db, embedder.clone());
        first_stats.get_or_insert(stats);
        tasks.push(TrainTask::from_active_task(db.clone(), enc, Split::Train).map_err(Failure::data)?);
    }
    Ok(Prepared {
        tasks,
        stats: first_stats.ok_or_else(|| Failure::config(anyhow!("no database given")))?,
    })
}

/// Trains with JSONL logging, periodic checkpoints and optional validation.
fn train_into(
    out: &Path,
    start: ModelState<f32>,
    optimizer: Option<reltrans::train::AdamW<f32>>,
    prepared: &Prepared,
    cfg: &RunConfig,
    val_every: Option<usize>,
) -> Result<Checkpoint> {
    let seed = cfg.train.rng_seed;
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut best = BestCheckpoint::default();
    let mut failure: Option<anyhow::Error> = None;
    let val_db = &prepared.tasks[0].db;
    let total = cfg.train.steps as u64;
    let every = cfg.train.checkpoint_every as u64;
    let result = run_training(start, optimizer, &prepared.tasks, &cfg.train, &mut |rec, ck| {
        let mut step = || -> Result<()> {
            writeln!(log, "{}", serde_json::to_string(rec)?)?;
            if rec.step % 50 == 0 || rec.step == total {
                info!(
                    "step {} loss {:.5} lr {:.3e} grad norm {:.3}",
                    rec.step, rec.loss, rec.lr, rec.grad_norm
                );
            }
            if every > 0 && rec.step % every == 0 && rec.step != total {
                save_checkpoint(&checkpoint_path(out, seed, rec.step), ck)?;
            }
            if let Some(n) = val_every.filter(|&n| n > 0) {
                if rec.step % n as u64 == 0 || rec.step == total {
                    let ev = evaluate(&ck.state, val_db, Split::Val, None, &cfg.eval)?;
                    info!(
                        "step {} validation {} {:.4}",
                        rec.step, ev.report.metric, ev.report.value
                    );
                    if best.offer(ev.report.value, ck) {
                        save_checkpoint(&out.join("best.ckpt"), ck)?;
                    }
                }
            }
            Ok(())
        };
        match step() {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                failure = Some(e);
                ControlFlow::Break(())
            }
        }
    });
    log.flush()?;
    if let Some(e) = failure {
        return Err(e);
    }
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::Diverged { step, loss, last_good }) => {
            let path = out
                .join(format!("run-{seed}"))
                .join(format!("diverged-step-{}.ckpt", last_good.step));
            save_checkpoint(&path, &last_good)?;
            return Err(Failure::numeric(anyhow!(
                "training diverged at step {step} (loss {loss}); last good checkpoint saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let ck = outcome.checkpoint;
    save_checkpoint(&checkpoint_path(out, seed, ck.step), &ck)?;
    save_checkpoint(&out.join("final.ckpt"), &ck)?;
    Ok(ck)
}

pub fn train(a: TrainCmd) -> Result<()> {
    let overrides = Overrides {
        common: &a.common,
        model: Some(&a.model),
        train: Some(&a.train),
        eval: Some(&a.eval),
    };
    let mut cfg = overrides.resolve(RunConfig::default())?;
    let dbs =
        a.db.iter()
            .map(|d| load_with_task(d, a.task.as_deref()))
            .collect::<Result<Vec<_>>>()?;
    let from = a.init.as_deref().or(a.resume.as_deref()).map(load_ckpt).transpose()?;
    if let Some(ck) = &from {
        if ck.state.config != cfg.model {
            info!("model config taken from the checkpoint");
        }
        cfg.model = ck.state.config.clone();
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let fp = cfg.echo(&a.out)?;
    let embedder = from
        .as_ref()
        .map_or_else(|| embedder_for(&cfg.model), |ck| ck.state.embedder.clone());
    let prepared = prepare_tasks(&dbs, embedder.clone())?;
    let (start, optimizer) = match from {
        Some(ck) => {
            let mut state = ck.state;
            // Weights carry over; statistics follow the database being trained on.
            state.stats = prepared.stats.clone();
            let opt = if a.resume.is_some() { ck.optimizer } else { None };
            (state, opt)
        }
        None => {
            let mut r = reltrans::rng::stream(cfg.init_seed(), &[0x1217]);
            let mut state = ModelState::new(cfg.model.clone(), (*prepared.stats).clone(), &mut r)?;
            state.embedder = embedder;
            (state, None)
        }
    };
    info!("config {fp}, {} parameters", start.params.param_count());
    let ck = train_into(&a.out, start, optimizer, &prepared, &cfg, a.val_every)?;
    info!(
        "finished at step {}; checkpoint {}",
        ck.step,
        a.out.join("final.ckpt").display()
    );
    Ok(())
}

fn eval_state(ck: Checkpoint, db: &RelationalDatabase, refit: bool) -> ModelState<f32> {
    let mut state = ck.state;
    if refit {
        state.stats = Arc::new(fit_norm_stats(db, train_cutoff(db)));
    }
    state
}

pub fn eval(a: EvalCmd) -> Result<()> {
    let overrides = Overrides {
        common: &a.common,
        model: None,
        train: None,
        eval: Some(&a.eval),
    };
    let cfg = overrides.resolve(RunConfig::default())?;
    let db = load_with_task(&a.db, a.task.as_deref())?;
    cfg.echo(&a.out)?;
    let spec = (!a.ablation.is_empty()).then(|| AblationSpec::context(&a.ablation));
    let mut reports = Vec::new();
    if !a.baseline_only {
        let path = a
            .checkpoint
            .as_deref()
            .ok_or_else(|| Failure::config(anyhow!("--checkpoint is required")))?;
        let state = eval_state(load_ckpt(path)?, &db, a.refit_stats);
        reports.push(evaluate(&state, &db, a.split, spec.as_ref(), &cfg.eval)?.report);
    }
    if a.baseline || a.baseline_only {
        reports.push(evaluate_entity_mean(&db, a.split, spec.as_ref(), &cfg.eval)?.report);
    }
    write_reports(&a.out, &reports)
}

pub fn ablate(a: AblateCmd) -> Result<()> {
    let overrides = Overrides {
        common: &a.common,
        model: None,
        train: Some(&a.train),
        eval: Some(&a.eval),
    };
    let mut cfg = overrides.resolve(RunConfig::default())?;
    let db = load_with_task(&a.db, a.task.as_deref())?;
    let ck = load_ckpt(&a.checkpoint)?;
    cfg.model = ck.state.config.clone();
    cfg.echo(&a.out)?;
    let embedder = ck.state.embedder.clone();
    let state = eval_state(ck, &db, a.refit_stats);

    let contexts = if a.context.is_empty() {
        vec![
            ContextAblation::ShuffleNames,
            ContextAblation::DropSelfLabels,
            ContextAblation::DropOtherLabels,
        ]
    } else {
        a.context.clone()
    };
    let mut reports = vec![evaluate(&state, &db, a.split, None, &cfg.eval)?.report];
    let prepared = prepare_tasks(std::slice::from_ref(&db), embedder.clone())?;
    for c in contexts {
        let spec = AblationSpec {
            shuffle_seed: cfg.eval.rng_seed,
            ..AblationSpec::context(&[c])
        };
        let tuned = if a.retrain {
            let dir = a.out.join(format!("context-{}", c.name()));
            cfg.echo(&dir)?;
            let tasks = prepared
                .tasks
                .iter()
                .map(|t| t.clone().with_context_ablation(spec.clone()))
                .collect();
            let ablated = Prepared {
                tasks,
                stats: prepared.stats.clone(),
            };
            Some(train_into(&dir, state.clone(), None, &ablated, &cfg, None)?.state)
        } else {
            None
        };
        reports.push(evaluate(tuned.as_ref().unwrap_or(&state), &db, a.split, Some(&spec), &cfg.eval)?.report);
    }

    for &kind in &a.remove_layer {
        let model = matched_ablation_config(&state.config, &[kind]);
        info!(
            "without {}: {} layers, parameter gap {:.2}%",
            kind.short_name(),
            model.layers,
            100.0 * param_gap(&state.config, &model)
        );
        let dir = a.out.join(format!("without-{}", kind.short_name()));
        fs::create_dir_all(&dir)?;
        let run_cfg = RunConfig {
            model: model.clone(),
            ..cfg.clone()
        };
        run_cfg.echo(&dir)?;
        let mut r = reltrans::rng::stream(run_cfg.init_seed(), &[0x1217]);
        let mut start = ModelState::new(model, (*prepared.stats).clone(), &mut r)?;
        start.embedder = embedder.clone();
        let trained = train_into(&dir, start, None, &prepared, &run_cfg, None)?;
        let layers = AblationSpec {
            layers: [kind].into(),
            ..AblationSpec::default()
        };
        let mut report = evaluate(&trained.state, &db, a.split, Some(&layers), &cfg.eval)?.report;
        report.ablation = format!("without_{}", kind.short_name());
        reports.push(report);
    }
    write_reports(&a.out, &reports)
}

pub fn gradcheck(a: GradcheckCmd) -> Result<()> {
    let base = RunConfig {
        model: ModelConfig {
            d_text: 64,
            ..ModelConfig::sized(2, 32, 4)
        },
        train: reltrans::train::TrainConfig {
            context_length: 24,
            width_bound: 4,
            ..Default::default()
        },
        ..RunConfig::default()
    };
    let overrides = Overrides {
        common: &a.common,
        model: Some(&a.model),
        train: None,
        eval: None,
    };
    let cfg = overrides.resolve(base)?;
    if a.epsilon.is_nan() || a.epsilon <= 0.0 || a.batch == 0 || !(0.0..1.0).contains(&a.mask_prob) {
        return Err(Failure::config(anyhow!(
            "epsilon must be positive, batch >= 1, mask-prob in [0, 1)"
        )));
    }
    let db = match &a.db {
        Some(dir) => load_with_task(dir, a.task.as_deref())?,
        None => {
            let spec = SyntheticSpec {
                entities: 60,
                rng_seed: cfg.init_seed(),
                ..SyntheticSpec::new(reltrans::eval::Generator::CopyParentFeature)
            };
            reltrans::eval::generate_attached(&spec).map_err(Failure::config)?
        }
    };
    let stats = fit_norm_stats(&db, train_cutoff(&db));
    let mut r = reltrans::rng::stream(cfg.init_seed(), &[0x1217]);
    let state: ModelState<f64> = ModelState::<f32>::new(cfg.model.clone(), stats, &mut r)?.cast();
    let enc = state.encoder();
    let sampler = cfg.train.sampler();
    let mut mr = reltrans::rng::stream(cfg.init_seed(), &[0x3a5c]);
    let task_name = db.active_task().map(|t| t.name.clone());
    let batch = db
        .seed_rows_for_task(Split::Train)
        .map_err(Failure::data)?
        .iter()
        .take(a.batch)
        .map(|s| {
            let mut w = sample_context(&db, s, &sampler)?;
            apply_masking(&mut w, a.mask_prob, &mut mr);
            Ok(enc.encode(&db, &w, task_name.as_deref())?)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = gradient_check(&state, &batch, a.epsilon, a.coords, cfg.init_seed(), None)?;
    let worst = report.worst();
    let summary = json!({
        "max_rel_error": report.max_rel_error,
        "coordinates": report.checks.len(),
        "tensors_covered": report.tensors_covered,
        "tensors_total": report.tensors_total,
        "parameters": state.params.param_count(),
        "epsilon": a.epsilon,
        "worst": worst.map(|c| json!({ "tensor": c.tensor, "index": c.index, "analytic": c.analytic, "numeric": c.numeric })),
        "config_fingerprint": cfg.fingerprint(),
    });
    match &a.out {
        Some(p) => write_json(p, &summary)?,
        None => println!("{}", serde_json::to_string_pretty(&summary)?),
    }
    if report.max_rel_error > a.tolerance {
        let w = worst.expect("non-empty check");
        return Err(Failure::numeric(anyhow!(
            "max relative error {:.3e} exceeds {:.1e} at {}[{}]",
            report.max_rel_error,
            a.tolerance,
            w.tensor,
            w.index
        )));
    }
    Ok(())
}
