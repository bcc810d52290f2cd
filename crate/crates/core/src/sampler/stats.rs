use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::ContextWindow;
use crate::store::ColumnRef;

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> MeanSd {
        if values.is_empty() {
            return MeanSd::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanSd { mean, sd: var.sqrt() }
    }
}

/// Per-window counts of unmasked target-column cells, aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub self_labels: MeanSd,
    pub other_labels: MeanSd,
    pub unique_entities: MeanSd,
}

pub fn context_label_stats(windows: &[ContextWindow], target_column: ColumnRef) -> LabelStats {
    let mut selfs = Vec::with_capacity(windows.len());
    let mut others = Vec::with_capacity(windows.len());
    let mut uniques = Vec::with_capacity(windows.len());
    for w in windows {
        let mut own = 0usize;
        let mut other = 0usize;
        let mut entities = HashSet::new();
        for t in w.tokens.iter().filter(|t| t.column == target_column && !t.is_masked) {
            let e = w.entity_of(t);
            if e == w.seed_entity {
                own += 1;
            } else {
                other += 1;
            }
            entities.insert(e);
        }
        selfs.push(own as f64);
        others.push(other as f64);
        uniques.push(entities.len() as f64);
    }
    LabelStats {
        self_labels: MeanSd::of(&selfs),
        other_labels: MeanSd::of(&others),
        unique_entities: MeanSd::of(&uniques),
    }
}
