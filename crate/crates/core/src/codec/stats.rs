use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::store::{ColumnRef, FeatureType, RelationalDatabase};

/// Floor applied to standard deviations before dividing.
pub const STD_FLOOR: f64 = 1e-6;
/// Normalized values are clipped to `[-CLIP, CLIP]`.
pub const CLIP: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    /// Population standard deviation; may be 0 for constant columns.
    pub std: f64,
}

impl ColumnStats {
    pub const UNIT: ColumnStats = ColumnStats { mean: 0.0, std: 1.0 };

    fn of(values: &[f64]) -> Option<ColumnStats> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(ColumnStats { mean, std: var.sqrt() })
    }

    /// `(v - mean) / max(std, STD_FLOOR)`, clipped to `[-CLIP, CLIP]`.
    pub fn normalize(&self, v: f64) -> f64 {
        ((v - self.mean) / self.std.max(STD_FLOOR)).clamp(-CLIP, CLIP)
    }
}

/// Per-column statistics for numeric and boolean columns plus global datetime
/// statistics, all fitted on training-split rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub columns: BTreeMap<ColumnRef, ColumnEntry>,
    pub datetime: ColumnStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnEntry {
    pub table: String,
    pub column: String,
    pub kind: FeatureType,
    pub stats: ColumnStats,
}

impl NormStats {
    pub fn get(&self, column: ColumnRef) -> Option<&ColumnEntry> {
        self.columns.get(&column)
    }

    /// Verifies that every stored column still names the same table/column in `db`.
    pub fn check_compatible(&self, db: &RelationalDatabase) -> Result<(), String> {
        for (col, entry) in &self.columns {
            if (col.table as usize) >= db.num_tables() {
                return Err(format!("statistics reference missing table `{}`", entry.table));
            }
            let table = db.table(col.table);
            let name = table.schema().columns.get(col.column as usize).map(|c| c.name.as_str());
            if table.name() != entry.table || name != Some(entry.column.as_str()) {
                return Err(format!(
                    "statistics for `{}.{}` do not match the database schema",
                    entry.table, entry.column
                ));
            }
        }
        Ok(())
    }
}

/// Fits statistics on rows with timestamp `<= train_cutoff` and on untimed rows.
pub fn fit_norm_stats(db: &RelationalDatabase, train_cutoff: i64) -> NormStats {
    let mut columns = BTreeMap::new();
    let mut datetimes = Vec::new();
    for (tid, table) in db.tables().enumerate() {
        let train_rows: Vec<u32> = (0..table.len() as u32)
            .filter(|&r| table.timestamp(r).is_none_or(|ts| ts <= train_cutoff))
            .collect();
        for &(col, kind) in table.feature_columns() {
            let values: Vec<f64> = train_rows
                .iter()
                .filter_map(|&r| table.cell(r, col))
                .filter_map(|v| v.as_scalar())
                .collect();
            match kind {
                FeatureType::Numeric | FeatureType::Boolean => {
                    let stats = ColumnStats::of(&values).unwrap_or_else(|| {
                        log::warn!(
                            "column {}.{} has no training values; using mean 0, std 1",
                            table.name(),
                            table.schema().columns[col].name
                        );
                        ColumnStats::UNIT
                    });
                    columns.insert(
                        ColumnRef::new(tid as u32, col as u32),
                        ColumnEntry {
                            table: table.name().to_string(),
                            column: table.schema().columns[col].name.clone(),
                            kind,
                            stats,
                        },
                    );
                }
                FeatureType::Datetime => datetimes.extend(values),
                FeatureType::Text => {}
            }
        }
    }
    NormStats {
        columns,
        datetime: ColumnStats::of(&datetimes).unwrap_or(ColumnStats::UNIT),
    }
}
