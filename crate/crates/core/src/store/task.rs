use serde::{Deserialize, Serialize};

use super::database::Table;
use super::{
    ColumnRef, Datatype, FeatureType, RelationalDatabase, RowRef, Split, StoreError, TableId, TableSchema, TaskSchema,
    Value,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRow {
    /// Primary-key value of the linked entity row.
    pub entity: String,
    pub timestamp: i64,
    pub label: Value,
}

/// Forecasting labels linked to one entity table, split by timestamp cutoffs.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTable {
    pub schema: TaskSchema,
    pub rows: Vec<TaskRow>,
}

impl TaskTable {
    pub fn name(&self) -> &str {
        &self.schema.name
    }

    pub fn split_of(&self, row: &TaskRow) -> Split {
        Split::of_timestamp(row.timestamp, self.schema.train_cutoff, self.schema.val_cutoff)
    }

    fn table_schema(&self) -> TableSchema {
        let s = &self.schema;
        let mut pk = format!("{}_row", s.name);
        while [&s.entity_column, &s.time_column, &s.label_column].contains(&&pk) {
            pk.push('_');
        }
        let label_type = match s.label_type {
            FeatureType::Boolean => Datatype::Boolean,
            _ => Datatype::Numeric,
        };
        TableSchema::new(s.name.clone())
            .column(pk, Datatype::PrimaryKey)
            .column(
                s.entity_column.clone(),
                Datatype::ForeignKey {
                    table: s.entity_table.clone(),
                },
            )
            .timestamp_column(s.time_column.clone())
            .column(s.label_column.clone(), label_type)
    }
}

/// The attached task table, as seen by samplers and trainers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveTask {
    pub name: String,
    pub table: TableId,
    pub entity_table: TableId,
    pub label_column: ColumnRef,
    pub label_type: FeatureType,
    pub train_cutoff: i64,
    pub val_cutoff: i64,
}

/// Starting row of a context window together with the cell to mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seed {
    pub row: RowRef,
    pub target: ColumnRef,
}

impl RelationalDatabase {
    /// Appends `task` as an ordinary table whose rows link to their entity.
    pub fn attach_task_table(mut self, task: &TaskTable) -> Result<RelationalDatabase, StoreError> {
        if let Some(active) = self.active_task() {
            return Err(StoreError::TaskAlreadyActive {
                active: active.name.clone(),
            });
        }
        let s = &task.schema;
        let task_err = |message: String| StoreError::Task {
            task: s.name.clone(),
            message,
        };
        if s.label_type != FeatureType::Boolean && s.label_type != FeatureType::Numeric {
            return Err(task_err("label must be boolean or numeric".into()));
        }
        if s.train_cutoff > s.val_cutoff {
            return Err(task_err("train_cutoff must not exceed val_cutoff".into()));
        }
        let entity_table = self
            .table_id(&s.entity_table)
            .ok_or_else(|| StoreError::UnknownTable(s.entity_table.clone()))?;
        if self.table_id(&s.name).is_some() {
            return Err(task_err("name collides with an existing table".into()));
        }

        let schema = task.table_schema();
        let mut table: Table = self.build_task_table(schema);
        let entities = self.table(entity_table);
        let mut rows = Vec::with_capacity(task.rows.len());
        for (idx, row) in task.rows.iter().enumerate() {
            if row.label.feature_type() != s.label_type {
                return Err(StoreError::CellType {
                    table: s.name.clone(),
                    row: idx + 1,
                    column: s.label_column.clone(),
                    expected: s.label_type.name().to_string(),
                });
            }
            let parent = entities
                .row_by_key(&row.entity)
                .ok_or_else(|| StoreError::DanglingForeignKey {
                    table: s.name.clone(),
                    row: idx + 1,
                    column: s.entity_column.clone(),
                    key: row.entity.clone(),
                    target: s.entity_table.clone(),
                })?;
            rows.push((idx.to_string(), parent, row.timestamp, row.label.clone()));
        }
        table.fill_task_rows(rows);
        let tid = self.num_tables() as TableId;
        let active = ActiveTask {
            name: s.name.clone(),
            table: tid,
            entity_table,
            label_column: ColumnRef::new(tid, 3),
            label_type: s.label_type,
            train_cutoff: s.train_cutoff,
            val_cutoff: s.val_cutoff,
        };
        self.push_table(table, active);
        Ok(self)
    }

    /// Task rows in `split`, each with its label cell as the masking target.
    pub fn seed_rows_for_task(&self, split: Split) -> Result<Vec<Seed>, StoreError> {
        let task = self.active_task().ok_or(StoreError::NoActiveTask)?;
        let table = self.table(task.table);
        Ok((0..table.len() as u32)
            .filter(|&row| {
                let ts = table.timestamp(row).expect("task rows carry timestamps");
                Split::of_timestamp(ts, task.train_cutoff, task.val_cutoff) == split
            })
            .map(|row| Seed {
                row: RowRef::new(task.table, row),
                target: task.label_column,
            })
            .collect())
    }

    /// Autocomplete seeds: timestamped rows owning a non-missing cell of a
    /// numeric or boolean feature column, split by the given cutoffs.
    pub fn autocomplete_seeds(
        &self,
        column: ColumnRef,
        split: Split,
        train_cutoff: i64,
        val_cutoff: i64,
    ) -> Result<Vec<Seed>, StoreError> {
        let table = self.table(column.table);
        let unknown = || StoreError::UnknownColumn {
            table: table.name().to_string(),
            column: format!("#{}", column.column),
        };
        let ft = table.feature_type(column.column as usize).ok_or_else(unknown)?;
        if !ft.is_maskable() {
            return Err(StoreError::Task {
                task: format!("autocomplete {}.{}", table.name(), self.column_name(column)),
                message: "only numeric or boolean columns can be masked".into(),
            });
        }
        Ok((0..table.len() as u32)
            .filter(|&row| table.cell(row, column.column as usize).is_some())
            .filter(|&row| {
                table
                    .timestamp(row)
                    .is_some_and(|ts| Split::of_timestamp(ts, train_cutoff, val_cutoff) == split)
            })
            .map(|row| Seed {
                row: RowRef::new(column.table, row),
                target: column,
            })
            .collect())
    }
}

impl Table {
    pub(super) fn fill_task_rows(&mut self, rows: Vec<(String, u32, i64, Value)>) {
        let mut keys = Vec::with_capacity(rows.len());
        let mut fks = Vec::with_capacity(rows.len());
        let mut features = Vec::with_capacity(rows.len());
        let mut timestamps = Vec::with_capacity(rows.len());
        for (key, parent, ts, label) in rows {
            keys.push(key);
            fks.push(vec![Some(parent)]);
            features.push(vec![Some(Value::Datetime(ts)), Some(label)]);
            timestamps.push(Some(ts));
        }
        self.set_rows(keys, fks, features, timestamps);
    }
}
