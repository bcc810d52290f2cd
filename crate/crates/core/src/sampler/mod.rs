//! Context-window sampling: a bounded-width breadth-first traversal over F→P
//! and P→F links that never admits rows newer than the seed.

mod stats;

pub use stats::{context_label_stats, LabelStats, MeanSd};

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::store::{ColumnRef, FeatureType, RelationalDatabase, RowRef, Seed, TableId, Value};

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("invalid seed row {0}")]
    InvalidSeed(RowRef),
    #[error("seed row {0} has no timestamp")]
    UntimedSeed(RowRef),
    #[error("seed row {row}: target cell is missing or not maskable")]
    InvalidTarget { row: RowRef },
    #[error("invalid sampler config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Maximum number of cells in a window.
    pub context_length: usize,
    /// Maximum number of children (P→F links) followed from any row.
    pub width_bound: usize,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            context_length: 256,
            width_bound: 8,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.context_length == 0 {
            return Err(SamplerError::Config("context_length must be >= 1".into()));
        }
        if self.width_bound == 0 {
            return Err(SamplerError::Config("width_bound must be >= 1".into()));
        }
        Ok(())
    }
}

/// One cell of a context window.
#[derive(Clone, Debug, PartialEq)]
pub struct CellToken {
    /// True cell value. For masked tokens it is kept only as the training
    /// target and never reaches the encoder.
    pub value: Value,
    pub column: ColumnRef,
    pub row: RowRef,
    /// Rows referenced by this token's row; shared by all tokens of that row.
    pub out_links: Arc<[RowRef]>,
    pub is_masked: bool,
}

impl CellToken {
    pub fn table(&self) -> TableId {
        self.column.table
    }

    pub fn feature_type(&self) -> FeatureType {
        self.value.feature_type()
    }
}

/// Replacement names for schema phrases, applied before embedding.
pub type NameMap = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindow {
    pub tokens: Vec<CellToken>,
    pub seed: RowRef,
    pub seed_timestamp: i64,
    /// Column of the seed's masked target cell.
    pub target: ColumnRef,
    /// Entity the seed is about: the linked entity row for task seeds, the
    /// seed row itself otherwise.
    pub seed_entity: RowRef,
    /// Entity table of the active task when the seed is a task row.
    pub entity_table: Option<TableId>,
    /// Table/column renaming in effect for schema phrases.
    pub renames: Option<Arc<NameMap>>,
}

impl ContextWindow {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Entity a token's row belongs to, under the same rule as `seed_entity`.
    pub fn entity_of(&self, token: &CellToken) -> RowRef {
        match self.entity_table {
            Some(et) => token
                .out_links
                .iter()
                .copied()
                .find(|r| r.table == et)
                .unwrap_or(token.row),
            None => token.row,
        }
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_masked).count()
    }
}

/// Record of traversal decisions, used by property tests and debugging.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleTrace {
    /// Rows in visiting order.
    pub visited: Vec<RowRef>,
    /// Number of children pushed to the frontier when each visited row was explored.
    pub children_pushed: Vec<usize>,
    /// BFS depth of each visited row.
    pub hops: Vec<u32>,
}

#[derive(Clone, Copy)]
struct FrontierEntry {
    row: RowRef,
    hop: u32,
    via_parent_link: bool,
}

pub fn sample_context(
    db: &RelationalDatabase,
    seed: &Seed,
    cfg: &SamplerConfig,
) -> Result<ContextWindow, SamplerError> {
    sample_context_traced(db, seed, cfg).map(|(w, _)| w)
}

/// [`sample_context`] that also returns the traversal trace.
pub fn sample_context_traced(
    db: &RelationalDatabase,
    seed: &Seed,
    cfg: &SamplerConfig,
) -> Result<(ContextWindow, SampleTrace), SamplerError> {
    cfg.validate()?;
    if !db.contains(seed.row) || seed.target.table != seed.row.table {
        return Err(SamplerError::InvalidSeed(seed.row));
    }
    let seed_ts = db.timestamp(seed.row).ok_or(SamplerError::UntimedSeed(seed.row))?;
    let seed_table = db.table(seed.row.table);
    match seed_table.cell(seed.row.row, seed.target.column as usize) {
        Some(v) if v.feature_type().is_maskable() => {}
        _ => return Err(SamplerError::InvalidTarget { row: seed.row }),
    }

    let mut rng = rng::stream(cfg.rng_seed, &[u64::from(seed.row.table), u64::from(seed.row.row)]);
    let budget = cfg.context_length;
    let mut tokens: Vec<CellToken> = Vec::with_capacity(budget);
    let mut trace = SampleTrace::default();
    let mut visited: HashSet<RowRef> = HashSet::new();
    let mut frontier = vec![FrontierEntry {
        row: seed.row,
        hop: 0,
        via_parent_link: false,
    }];
    let mut candidates: Vec<usize> = Vec::new();

    while tokens.len() < budget && !frontier.is_empty() {
        candidates.clear();
        candidates.extend(
            frontier
                .iter()
                .enumerate()
                .filter(|(_, e)| e.via_parent_link)
                .map(|(i, _)| i),
        );
        if candidates.is_empty() {
            let min_hop = frontier.iter().map(|e| e.hop).min().expect("non-empty frontier");
            candidates.extend(
                frontier
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.hop == min_hop)
                    .map(|(i, _)| i),
            );
        }
        let pick = candidates[rng.random_range(0..candidates.len())];
        let entry = frontier.swap_remove(pick);
        if !visited.insert(entry.row) {
            continue;
        }

        let target = (entry.row == seed.row).then_some(seed.target);
        append_row_cells(db, entry.row, target, budget, &mut tokens);

        // Parents are normally older than their children; a parent stamped
        // after the seed is dropped rather than leaked.
        for &parent in db.out_links(entry.row) {
            if db.timestamp(parent).is_some_and(|ts| ts > seed_ts) {
                continue;
            }
            frontier.push(FrontierEntry {
                row: parent,
                hop: entry.hop + 1,
                via_parent_link: true,
            });
        }
        let children: Vec<RowRef> = db
            .in_links(entry.row)
            .iter()
            .copied()
            .filter(|&child| db.timestamp(child).is_none_or(|ts| ts <= seed_ts))
            .collect();
        let take = children.len().min(cfg.width_bound);
        let mut picked = index::sample(&mut rng, children.len(), take).into_vec();
        picked.sort_unstable();
        for i in picked {
            frontier.push(FrontierEntry {
                row: children[i],
                hop: entry.hop + 1,
                via_parent_link: false,
            });
        }
        trace.visited.push(entry.row);
        trace.children_pushed.push(take);
        trace.hops.push(entry.hop);
    }

    let entity_table = db
        .active_task()
        .filter(|t| t.table == seed.row.table)
        .map(|t| t.entity_table);
    let seed_entity = entity_table
        .and_then(|et| db.out_links(seed.row).iter().copied().find(|r| r.table == et))
        .unwrap_or(seed.row);
    Ok((
        ContextWindow {
            tokens,
            seed: seed.row,
            seed_timestamp: seed_ts,
            target: seed.target,
            seed_entity,
            entity_table,
            renames: None,
        },
        trace,
    ))
}

/// Appends the non-missing feature cells of `row` in schema order, truncated
/// to the remaining budget. A masked target cell is always kept.
fn append_row_cells(
    db: &RelationalDatabase,
    row: RowRef,
    target: Option<ColumnRef>,
    budget: usize,
    tokens: &mut Vec<CellToken>,
) {
    let table = db.table(row.table);
    let out_links: Arc<[RowRef]> = Arc::from(db.out_links(row));
    let remaining = budget - tokens.len();
    let cells: Vec<(usize, &Value)> = table
        .feature_columns()
        .iter()
        .zip(table.features(row.row))
        .filter_map(|(&(col, _), v)| v.as_ref().map(|v| (col, v)))
        .collect();
    let target_col = target.map(|t| t.column as usize);
    let keep_target = target_col.is_some() && cells.len() > remaining;
    let mut others_allowed = if keep_target { remaining - 1 } else { remaining };
    for (col, value) in cells {
        let is_target = Some(col) == target_col;
        // A kept target has its slot reserved; every other cell spends one.
        if !(is_target && keep_target) {
            if others_allowed == 0 {
                continue;
            }
            others_allowed -= 1;
        }
        tokens.push(CellToken {
            value: value.clone(),
            column: ColumnRef::new(row.table, col as u32),
            row,
            out_links: Arc::clone(&out_links),
            is_masked: is_target,
        });
    }
}
