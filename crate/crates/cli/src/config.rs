use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use reltrans::attention::{AttentionKind, NormPlacement};
use reltrans::eval::EvalConfig;
use reltrans::model::ModelConfig;
use reltrans::train::{Schedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::Failure;

/// Fully resolved settings of one run: defaults, then the config file, then flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; when set it replaces the train and eval seeds.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML file with [model], [train] and [eval] tables; flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master RNG seed for initialization, batching and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for batch gradients and evaluation (1 = sequential).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Context window length in cells.
    #[arg(long)]
    pub context_length: Option<usize>,
    /// Maximum children followed per visited row.
    #[arg(long)]
    pub width_bound: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// MLP hidden width; defaults to 4 x d_model when d_model is given.
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// Dimension of the text embedder.
    #[arg(long)]
    pub d_text: Option<usize>,
    /// Normalization placement: post or pre.
    #[arg(long, value_parser = parse_norm)]
    pub norm: Option<NormPlacement>,
    /// Attention sublayers to leave out: col, feat, nbr, full (comma-separated).
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    pub without: Vec<AttentionKind>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    /// linear-warmup-decay or constant.
    #[arg(long, value_parser = parse_schedule)]
    pub schedule: Option<Schedule>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Probability of masking each extra numeric/boolean cell.
    #[arg(long)]
    pub mask_prob: Option<f64>,
    /// Checkpoint every this many steps (0 = final only).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalArgs {
    /// Evaluate only the first this many seeds of a split.
    #[arg(long)]
    pub max_seeds: Option<usize>,
}

/// Flag groups a subcommand accepts; groups it does not take stay `None`.
pub struct Overrides<'a> {
    pub common: &'a CommonArgs,
    pub model: Option<&'a ModelArgs>,
    pub train: Option<&'a TrainArgs>,
    pub eval: Option<&'a EvalArgs>,
}

fn parse_norm(s: &str) -> Result<NormPlacement, String> {
    match s {
        "post" => Ok(NormPlacement::Post),
        "pre" => Ok(NormPlacement::Pre),
        other => Err(format!("unknown norm placement `{other}` (post or pre)")),
    }
}

pub fn parse_kind(s: &str) -> Result<AttentionKind, String> {
    AttentionKind::parse(s).ok_or_else(|| format!("unknown attention type `{s}` (col, feat, nbr, full)"))
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    match s {
        "linear-warmup-decay" => Ok(Schedule::LinearWarmupDecay),
        "constant" => Ok(Schedule::Constant),
        other => Err(format!("unknown schedule `{other}`")),
    }
}

macro_rules! set {
    ($src:expr, $flag:ident => $($dst:expr),+) => {
        if let Some(v) = $src.$flag { $($dst = v;)+ }
    };
}

impl Overrides<'_> {
    /// Resolves defaults < config file < flags, starting from `base`.
    pub fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let c = self.common;
        let mut cfg = match &c.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))
                    .map_err(Failure::config)?;
                toml::from_str::<RunConfig>(&text)
                    .with_context(|| format!("parsing config {}", path.display()))
                    .map_err(Failure::config)?
            }
            None => base,
        };
        if c.seed.is_some() {
            cfg.seed = c.seed;
        }
        set!(c, workers => cfg.train.workers, cfg.eval.workers);
        set!(c, context_length => cfg.train.context_length, cfg.eval.context_length);
        set!(c, width_bound => cfg.train.width_bound, cfg.eval.width_bound);
        if let Some(m) = self.model {
            set!(m, layers => cfg.model.layers);
            if let Some(d) = m.d_model {
                cfg.model.d_model = d;
                cfg.model.mlp_hidden = 4 * d;
            }
            set!(m, mlp_hidden => cfg.model.mlp_hidden);
            set!(m, heads => cfg.model.heads);
            set!(m, d_text => cfg.model.d_text);
            set!(m, norm => cfg.model.norm);
            for &k in &m.without {
                cfg.model.attention.set(k, false);
            }
        }
        if let Some(t) = self.train {
            set!(t, steps => cfg.train.steps);
            set!(t, batch_size => cfg.train.batch_size);
            set!(t, lr => cfg.train.peak_lr);
            set!(t, warmup_fraction => cfg.train.warmup_fraction);
            set!(t, schedule => cfg.train.schedule);
            set!(t, weight_decay => cfg.train.optimizer.weight_decay);
            set!(t, mask_prob => cfg.train.mask_probability);
            set!(t, checkpoint_every => cfg.train.checkpoint_every);
        }
        if let Some(e) = self.eval {
            if e.max_seeds.is_some() {
                cfg.eval.max_seeds = e.max_seeds;
            }
        }
        if let Some(s) = cfg.seed {
            cfg.train.rng_seed = s;
            cfg.eval.rng_seed = s;
        }
        cfg.model.validate().map_err(Failure::config)?;
        cfg.train.validate().map_err(Failure::config)?;
        cfg.eval.sampler().validate().map_err(Failure::config)?;
        if cfg.eval.workers == 0 {
            return Err(Failure::config(anyhow::anyhow!("workers must be >= 1")));
        }
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn init_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.rng_seed)
    }

    /// sha256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        reltrans::train::sha256_hex(json.as_bytes())
    }

    /// Writes `config.toml` and `config.sha256` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<String> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = toml::to_string(self).context("serializing resolved config")?;
        std::fs::write(dir.join("config.toml"), text)?;
        let fp = self.fingerprint();
        std::fs::write(dir.join("config.sha256"), format!("{fp}\n"))?;
        Ok(fp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_file_and_the_seed_fans_out() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 9\n[model]\nlayers = 3\nheads = 2\n[train]\nsteps = 7\n").unwrap();
        let common = CommonArgs {
            config: Some(path),
            workers: Some(2),
            ..Default::default()
        };
        let model = ModelArgs {
            d_model: Some(32),
            ..Default::default()
        };
        let train = TrainArgs {
            steps: Some(11),
            ..Default::default()
        };
        let o = Overrides {
            common: &common,
            model: Some(&model),
            train: Some(&train),
            eval: None,
        };
        let cfg = o.resolve(RunConfig::default()).unwrap();
        assert_eq!(
            (
                cfg.model.layers,
                cfg.model.heads,
                cfg.model.d_model,
                cfg.model.mlp_hidden
            ),
            (3, 2, 32, 128)
        );
        assert_eq!(cfg.train.steps, 11);
        assert_eq!((cfg.train.rng_seed, cfg.eval.rng_seed), (9, 9));
        assert_eq!((cfg.train.workers, cfg.eval.workers), (2, 2));

        let echoed = dir.path().join("echo");
        let fp = cfg.echo(&echoed).unwrap();
        let back: RunConfig = toml::from_str(&std::fs::read_to_string(echoed.join("config.toml")).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), fp);
    }
}
