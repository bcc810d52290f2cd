use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::model::ModelConfig;
use crate::rng;
use crate::sampler::{ContextWindow, NameMap};
use crate::store::RelationalDatabase;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextAblation {
    ShuffleNames,
    DropSelfLabels,
    DropOtherLabels,
}

impl std::str::FromStr for ContextAblation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shuffle_names" => Ok(ContextAblation::ShuffleNames),
            "drop_self_labels" => Ok(ContextAblation::DropSelfLabels),
            "drop_other_labels" => Ok(ContextAblation::DropOtherLabels),
            other => Err(format!("unknown context ablation `{other}`")),
        }
    }
}

impl ContextAblation {
    pub fn name(self) -> &'static str {
        match self {
            ContextAblation::ShuffleNames => "shuffle_names",
            ContextAblation::DropSelfLabels => "drop_self_labels",
            ContextAblation::DropOtherLabels => "drop_other_labels",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub context: BTreeSet<ContextAblation>,
    pub layers: BTreeSet<AttentionKind>,
    /// Seed of the name derangement.
    pub shuffle_seed: u64,
}

impl AblationSpec {
    pub fn context(items: &[ContextAblation]) -> Self {
        AblationSpec {
            context: items.iter().copied().collect(),
            ..AblationSpec::default()
        }
    }

    /// Layer ablations must agree with the model's sublayer flags.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<(), String> {
        for kind in AttentionKind::ALL {
            if self.layers.contains(&kind) == cfg.attention.get(kind) {
                return Err(format!(
                    "layer ablation set does not match the model: {} attention is {}",
                    kind.short_name(),
                    if cfg.attention.get(kind) { "present" } else { "absent" }
                ));
            }
        }
        Ok(())
    }
}

/// Seeded derangement over the union of table and column names: every name
/// maps to a different one.
pub fn name_derangement(db: &RelationalDatabase, seed: u64) -> NameMap {
    let mut names = BTreeSet::new();
    for t in db.tables() {
        names.insert(t.name().to_string());
        for c in &t.schema().columns {
            names.insert(c.name.clone());
        }
    }
    let names: Vec<String> = names.into_iter().collect();
    let n = names.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[0x5a77]);
    // Sattolo's algorithm draws a uniform single cycle, hence no fixed points.
    for i in (1..n).rev() {
        let j = r.random_range(0..i);
        perm.swap(i, j);
    }
    names
        .iter()
        .enumerate()
        .map(|(i, name)| (name.clone(), names[perm[i]].clone()))
        .collect()
}

/// Applies the context ablations of `spec` to a sampled window. Removed
/// label tokens are not replaced by other cells.
pub fn apply_context_ablation(db: &RelationalDatabase, window: &ContextWindow, spec: &AblationSpec) -> ContextWindow {
    let mut out = window.clone();
    if spec.context.contains(&ContextAblation::ShuffleNames) {
        out.renames = Some(Arc::new(name_derangement(db, spec.shuffle_seed)));
    }
    let drop_self = spec.context.contains(&ContextAblation::DropSelfLabels);
    let drop_other = spec.context.contains(&ContextAblation::DropOtherLabels);
    if drop_self || drop_other {
        let keep: Vec<bool> = window
            .tokens
            .iter()
            .map(|t| {
                if t.column != window.target || t.is_masked {
                    return true;
                }
                let own = window.entity_of(t) == window.seed_entity;
                !((own && drop_self) || (!own && drop_other))
            })
            .collect();
        out.tokens = window
            .tokens
            .iter()
            .zip(keep)
            .filter(|(_, k)| *k)
            .map(|(t, _)| t.clone())
            .collect();
    }
    out
}

/// Closed-form parameter count of a model config.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let embed = 3 * d + 2 * cfg.d_text * d + 2 * d;
    let attn = cfg.attention.enabled().len() * (4 * d * d + d);
    let mlp = 3 * d * cfg.mlp_hidden + d;
    embed + cfg.layers * (attn + mlp) + 2 * (d + 1)
}

/// Config with the given sublayers removed and the layer count chosen so
/// the parameter count is as close as possible to `base`'s.
pub fn matched_ablation_config(base: &ModelConfig, remove: &[AttentionKind]) -> ModelConfig {
    let mut flags = base.attention;
    for &k in remove {
        flags.set(k, false);
    }
    let target = param_count(base) as f64;
    let mut best = ModelConfig {
        attention: flags,
        ..base.clone()
    };
    let mut best_gap = f64::INFINITY;
    for layers in 1..=base.layers * 4 + 4 {
        let cand = ModelConfig {
            layers,
            attention: flags,
            ..base.clone()
        };
        let gap = (param_count(&cand) as f64 - target).abs();
        if gap < best_gap {
            best_gap = gap;
            best = cand;
        }
    }
    best
}

/// Relative parameter-count gap between two configs.
pub fn param_gap(a: &ModelConfig, b: &ModelConfig) -> f64 {
    let (pa, pb) = (param_count(a) as f64, param_count(b) as f64);
    (pa - pb).abs() / pa
}
