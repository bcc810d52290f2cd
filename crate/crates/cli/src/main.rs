mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reltrans::attention::AttentionKind;
use reltrans::eval::{ContextAblation, Generator};
use reltrans::store::Split;

use config::{parse_kind, CommonArgs, EvalArgs, ModelArgs, TrainArgs};

/// Relational transformer: ingest multi-table databases, sample temporal
/// context windows, train by masked cell prediction and evaluate.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
/// failure (divergence or gradient check failure).
#[derive(Parser, Debug)]
#[command(name = "reltrans", version)]
struct Cli {
    #[command(subcommand)]
    pub(crate) command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a schema file and CSV tables, print a summary and optionally
    /// write a canonical copy.
    Ingest(IngestArgs),
    /// Generate a synthetic database with a task table.
    Synth(SynthArgs),
    /// Sample context windows and write their tokens as TSV.
    Sample(SampleArgs),
    /// Train a model by masked cell prediction.
    Train(TrainCmd),
    /// Evaluate a checkpoint (or the entity-mean baseline) on a task split.
    Eval(EvalCmd),
    /// Run context ablations on a checkpoint and parameter-matched layer ablations.
    Ablate(AblateCmd),
    /// Compare analytic gradients with central finite differences in f64.
    Gradcheck(GradcheckCmd),
}

#[derive(Args, Debug)]
pub(crate) struct IngestArgs {
    /// Directory with one CSV per table (and per task).
    #[arg(long, value_name = "DIR")]
    pub(crate) data: PathBuf,
    /// Schema file; defaults to <data>/schema.txt.
    #[arg(long, value_name = "FILE")]
    pub(crate) schema: Option<PathBuf>,
    /// Write the validated database (schema.txt, CSVs, summary.json) here.
    #[arg(long, value_name = "DIR")]
    pub(crate) out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub(crate) struct SynthArgs {
    /// Generator: copy_parent_feature, entity_constant_label or seasonal_label
    /// (short forms copy, constant, seasonal).
    #[arg(long)]
    pub(crate) spec: Generator,
    #[arg(long)]
    pub(crate) entities: Option<usize>,
    /// Group rows the entities link to (0 = one per 20 entities).
    #[arg(long)]
    pub(crate) groups: Option<usize>,
    #[arg(long)]
    pub(crate) rows_per_entity: Option<usize>,
    /// Label flip probability, or noise std for seasonal_label.
    #[arg(long)]
    pub(crate) noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub(crate) seed: u64,
    #[arg(long, value_name = "DIR")]
    pub(crate) out: PathBuf,
}

#[derive(Args, Debug)]
pub(crate) struct SampleArgs {
    #[arg(long, value_name = "DIR")]
    pub(crate) db: PathBuf,
    /// Task to seed windows from; required when the database declares several.
    #[arg(long)]
    pub(crate) task: Option<String>,
    #[arg(long, default_value = "test")]
    pub(crate) split: Split,
    /// Number of windows (first seeds of the split).
    #[arg(long, default_value_t = 5)]
    pub(crate) count: usize,
    #[arg(long, default_value_t = 256)]
    pub(crate) context_length: usize,
    #[arg(long, default_value_t = 8)]
    pub(crate) width_bound: usize,
    #[arg(long, default_value_t = 0)]
    pub(crate) seed: u64,
    /// TSV output file; stdout when absent.
    #[arg(long, value_name = "FILE")]
    pub(crate) out: Option<PathBuf>,
    /// Also write the four attention masks of each window as PGM images here.
    #[arg(long, value_name = "DIR")]
    pub(crate) mask_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub(crate) struct TrainCmd {
    /// Database directory; repeat to train on several databases.
    #[arg(long, value_name = "DIR", required = true)]
    pub(crate) db: Vec<PathBuf>,
    #[arg(long)]
    pub(crate) task: Option<String>,
    /// Output directory for config, log and checkpoints.
    #[arg(long, value_name = "DIR")]
    pub(crate) out: PathBuf,
    /// Start from this checkpoint's weights with a fresh optimizer (fine-tuning).
    #[arg(long, value_name = "FILE", conflicts_with = "resume")]
    pub(crate) init: Option<PathBuf>,
    /// Continue a run from this checkpoint, optimizer moments included.
    #[arg(long, value_name = "FILE")]
    pub(crate) resume: Option<PathBuf>,
    /// Evaluate the validation split every N steps and keep best.ckpt (first database).
    #[arg(long, value_name = "N")]
    pub(crate) val_every: Option<usize>,
    #[command(flatten)]
    pub(crate) common: CommonArgs,
    #[command(flatten)]
    pub(crate) model: ModelArgs,
    #[command(flatten)]
    pub(crate) train: TrainArgs,
    #[command(flatten)]
    pub(crate) eval: EvalArgs,
}

#[derive(Args, Debug)]
pub(crate) struct EvalCmd {
    #[arg(long, value_name = "DIR")]
    pub(crate) db: PathBuf,
    #[arg(long)]
    pub(crate) task: Option<String>,
    /// Checkpoint to evaluate; optional with --baseline-only.
    #[arg(long, value_name = "FILE")]
    pub(crate) checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub(crate) split: Split,
    /// Context ablations: shuffle_names, drop_self_labels, drop_other_labels.
    #[arg(long, value_delimiter = ',')]
    pub(crate) ablation: Vec<ContextAblation>,
    /// Also report the entity-mean baseline.
    #[arg(long)]
    pub(crate) baseline: bool,
    /// Report only the entity-mean baseline.
    #[arg(long)]
    pub(crate) baseline_only: bool,
    /// Refit normalization statistics on this database (zero-shot transfer).
    #[arg(long)]
    pub(crate) refit_stats: bool,
    /// Output directory for report.jsonl and the resolved config.
    #[arg(long, value_name = "DIR")]
    pub(crate) out: PathBuf,
    #[command(flatten)]
    pub(crate) common: CommonArgs,
    #[command(flatten)]
    pub(crate) eval: EvalArgs,
}

#[derive(Args, Debug)]
pub(crate) struct AblateCmd {
    #[arg(long, value_name = "DIR")]
    pub(crate) db: PathBuf,
    #[arg(long)]
    pub(crate) task: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub(crate) checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub(crate) split: Split,
    /// Context ablations to run (default: each one alone).
    #[arg(long, value_delimiter = ',')]
    pub(crate) context: Vec<ContextAblation>,
    /// Attention sublayers to ablate by retraining a parameter-matched model.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    pub(crate) remove_layer: Vec<AttentionKind>,
    /// Fine-tune a copy of the checkpoint on each ablated context before evaluating it.
    #[arg(long)]
    pub(crate) retrain: bool,
    #[arg(long)]
    pub(crate) refit_stats: bool,
    #[arg(long, value_name = "DIR")]
    pub(crate) out: PathBuf,
    #[command(flatten)]
    pub(crate) common: CommonArgs,
    #[command(flatten)]
    pub(crate) train: TrainArgs,
    #[command(flatten)]
    pub(crate) eval: EvalArgs,
}

#[derive(Args, Debug)]
pub(crate) struct GradcheckCmd {
    /// Database directory; a small synthetic database when absent.
    #[arg(long, value_name = "DIR")]
    pub(crate) db: Option<PathBuf>,
    #[arg(long)]
    pub(crate) task: Option<String>,
    /// Coordinates to compare (spread over every tensor).
    #[arg(long, default_value_t = 200)]
    pub(crate) coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub(crate) epsilon: f64,
    /// Windows in the checked batch.
    #[arg(long, default_value_t = 3)]
    pub(crate) batch: usize,
    /// Fail (exit 4) when the max relative error exceeds this.
    #[arg(long, default_value_t = 1e-5)]
    pub(crate) tolerance: f64,
    /// Extra masking probability for the checked batch.
    #[arg(long, default_value_t = 0.3)]
    pub(crate) mask_prob: f64,
    /// JSON report file; stdout when absent.
    #[arg(long, value_name = "FILE")]
    pub(crate) out: Option<PathBuf>,
    #[command(flatten)]
    pub(crate) common: CommonArgs,
    #[command(flatten)]
    pub(crate) model: ModelArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Synth(a) => commands::synth(a),
        Command::Sample(a) => commands::sample(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(error::exit_code(&e) as u8)
        }
    }
}
