use std::collections::HashMap;
use std::sync::Arc;

use super::{
    ActiveTask, ColumnRef, Datatype, FeatureType, RowRef, SchemaDescriptor, StoreError, TableId, TableSchema, Value,
};

/// One input cell handed to [`DatabaseBuilder::add_row`], in schema column order.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Missing,
    /// Primary- or foreign-key value.
    Key(String),
    Value(Value),
}

/// Column-resolved storage for one table.
#[derive(Clone, Debug)]
pub struct Table {
    schema: TableSchema,
    pk_column: usize,
    fk_columns: Vec<(usize, TableId)>,
    feature_columns: Vec<(usize, FeatureType)>,
    feature_slot: Vec<Option<usize>>,
    time_column: Option<usize>,
    keys: Vec<String>,
    key_index: HashMap<String, u32>,
    fks: Vec<Vec<Option<u32>>>,
    features: Vec<Vec<Option<Value>>>,
    timestamps: Vec<Option<i64>>,
}

impl Table {
    fn new(schema: TableSchema, table_ids: &HashMap<String, TableId>) -> Table {
        let mut pk_column = 0;
        let mut fk_columns = Vec::new();
        let mut feature_columns = Vec::new();
        let mut feature_slot = vec![None; schema.columns.len()];
        for (idx, col) in schema.columns.iter().enumerate() {
            match &col.datatype {
                Datatype::PrimaryKey => pk_column = idx,
                Datatype::ForeignKey { table } => fk_columns.push((idx, table_ids[table])),
                dt => {
                    feature_slot[idx] = Some(feature_columns.len());
                    feature_columns.push((idx, dt.feature_type().expect("feature column")));
                }
            }
        }
        let time_column = schema.timestamp.as_ref().and_then(|name| schema.column_index(name));
        Table {
            schema,
            pk_column,
            fk_columns,
            feature_columns,
            feature_slot,
            time_column,
            keys: Vec::new(),
            key_index: HashMap::new(),
            fks: Vec::new(),
            features: Vec::new(),
            timestamps: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.schema.name
    }

    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn primary_key_column(&self) -> usize {
        self.pk_column
    }

    /// `(schema column index, referenced table)` for each foreign-key column.
    pub fn foreign_key_columns(&self) -> &[(usize, TableId)] {
        &self.fk_columns
    }

    /// `(schema column index, type)` for each non-key column, in schema order.
    pub fn feature_columns(&self) -> &[(usize, FeatureType)] {
        &self.feature_columns
    }

    pub fn feature_type(&self, column: usize) -> Option<FeatureType> {
        self.feature_slot
            .get(column)
            .copied()
            .flatten()
            .map(|slot| self.feature_columns[slot].1)
    }

    pub fn time_column(&self) -> Option<usize> {
        self.time_column
    }

    pub fn key(&self, row: u32) -> &str {
        &self.keys[row as usize]
    }

    pub fn row_by_key(&self, key: &str) -> Option<u32> {
        self.key_index.get(key).copied()
    }

    pub fn timestamp(&self, row: u32) -> Option<i64> {
        self.timestamps[row as usize]
    }

    /// Resolved foreign keys of a row, aligned with [`Self::foreign_key_columns`].
    pub fn foreign_keys(&self, row: u32) -> &[Option<u32>] {
        &self.fks[row as usize]
    }

    /// Feature cells of a row, aligned with [`Self::feature_columns`].
    pub fn features(&self, row: u32) -> &[Option<Value>] {
        &self.features[row as usize]
    }

    pub(super) fn set_rows(
        &mut self,
        keys: Vec<String>,
        fks: Vec<Vec<Option<u32>>>,
        features: Vec<Vec<Option<Value>>>,
        timestamps: Vec<Option<i64>>,
    ) {
        self.key_index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i as u32)).collect();
        self.keys = keys;
        self.fks = fks;
        self.features = features;
        self.timestamps = timestamps;
    }

    /// Value of a feature cell addressed by schema column index.
    pub fn cell(&self, row: u32, column: usize) -> Option<&Value> {
        let slot = self.feature_slot.get(column).copied().flatten()?;
        self.features[row as usize][slot].as_ref()
    }
}

/// Immutable relational database with forward (F→P) and inverted (P→F) link indexes.
#[derive(Clone, Debug)]
pub struct RelationalDatabase {
    schema: SchemaDescriptor,
    tables: Vec<Arc<Table>>,
    out_links: Vec<Arc<Vec<Vec<RowRef>>>>,
    in_links: Vec<Arc<Vec<Vec<RowRef>>>>,
    task: Option<ActiveTask>,
}

impl RelationalDatabase {
    pub fn schema(&self) -> &SchemaDescriptor {
        &self.schema
    }

    pub fn tables(&self) -> impl Iterator<Item = &Table> {
        self.tables.iter().map(|t| t.as_ref())
    }

    pub fn num_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn table(&self, id: TableId) -> &Table {
        &self.tables[id as usize]
    }

    pub fn table_id(&self, name: &str) -> Option<TableId> {
        self.tables.iter().position(|t| t.name() == name).map(|i| i as TableId)
    }

    pub fn column_ref(&self, table: &str, column: &str) -> Result<ColumnRef, StoreError> {
        let tid = self
            .table_id(table)
            .ok_or_else(|| StoreError::UnknownTable(table.to_string()))?;
        let col = self
            .table(tid)
            .schema()
            .column_index(column)
            .ok_or_else(|| StoreError::UnknownColumn {
                table: table.to_string(),
                column: column.to_string(),
            })?;
        Ok(ColumnRef::new(tid, col as u32))
    }

    pub fn column_name(&self, col: ColumnRef) -> &str {
        &self.table(col.table).schema().columns[col.column as usize].name
    }

    pub fn table_name(&self, table: TableId) -> &str {
        self.table(table).name()
    }

    pub fn num_rows(&self) -> usize {
        self.tables.iter().map(|t| t.len()).sum()
    }

    /// Total number of F→P links (distinct parents per row, summed over rows).
    pub fn num_links(&self) -> usize {
        self.out_links
            .iter()
            .map(|t| t.iter().map(Vec::len).sum::<usize>())
            .sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = RowRef> + '_ {
        self.tables
            .iter()
            .enumerate()
            .flat_map(|(tid, t)| (0..t.len() as u32).map(move |row| RowRef::new(tid as TableId, row)))
    }

    pub fn contains(&self, r: RowRef) -> bool {
        (r.table as usize) < self.tables.len() && (r.row as usize) < self.tables[r.table as usize].len()
    }

    /// Rows referenced by `r`'s non-missing foreign keys, deduplicated, in FK column order.
    pub fn out_links(&self, r: RowRef) -> &[RowRef] {
        &self.out_links[r.table as usize][r.row as usize]
    }

    /// Rows whose out-links contain `r`, ordered by `(table, row)`.
    pub fn in_links(&self, r: RowRef) -> &[RowRef] {
        &self.in_links[r.table as usize][r.row as usize]
    }

    /// Row timestamp; `None` means the row is always visible.
    pub fn timestamp(&self, r: RowRef) -> Option<i64> {
        self.table(r.table).timestamp(r.row)
    }

    pub fn key(&self, r: RowRef) -> &str {
        self.table(r.table).key(r.row)
    }

    pub fn active_task(&self) -> Option<&ActiveTask> {
        self.task.as_ref()
    }

    pub(super) fn push_table(&mut self, table: Table, task: ActiveTask) {
        let tid = self.tables.len();
        let mut out: Vec<Vec<RowRef>> = Vec::with_capacity(table.len());
        for row in 0..table.len() as u32 {
            out.push(row_out_links(&table, row));
        }
        for (row, parents) in out.iter().enumerate() {
            for p in parents {
                Arc::make_mut(&mut self.in_links[p.table as usize])[p.row as usize]
                    .push(RowRef::new(tid as TableId, row as u32));
            }
        }
        self.in_links.push(Arc::new(vec![Vec::new(); table.len()]));
        self.out_links.push(Arc::new(out));
        self.schema.tables.push(table.schema.clone());
        self.tables.push(Arc::new(table));
        self.task = Some(task);
    }

    pub(super) fn build_task_table(&self, schema: TableSchema) -> Table {
        let ids = self.table_ids();
        Table::new(schema, &ids)
    }

    fn table_ids(&self) -> HashMap<String, TableId> {
        self.tables
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name().to_string(), i as TableId))
            .collect()
    }
}

fn row_out_links(table: &Table, row: u32) -> Vec<RowRef> {
    let mut links: Vec<RowRef> = Vec::with_capacity(table.fk_columns.len());
    for ((_, target), fk) in table.fk_columns.iter().zip(&table.fks[row as usize]) {
        if let Some(parent) = fk {
            let r = RowRef::new(*target, *parent);
            if !links.contains(&r) {
                links.push(r);
            }
        }
    }
    links
}

/// Accumulates typed rows and validates keys and links on [`build`](Self::build).
pub struct DatabaseBuilder {
    schema: SchemaDescriptor,
    rows: Vec<Vec<Vec<Cell>>>,
}

impl DatabaseBuilder {
    pub fn new(schema: SchemaDescriptor) -> Result<Self, StoreError> {
        schema.validate()?;
        let rows = vec![Vec::new(); schema.tables.len()];
        Ok(DatabaseBuilder { schema, rows })
    }

    pub fn schema(&self) -> &SchemaDescriptor {
        &self.schema
    }

    /// Appends a row; cells follow the table's schema column order.
    pub fn add_row(&mut self, table: &str, cells: Vec<Cell>) -> Result<(), StoreError> {
        let tid = self
            .schema
            .table_index(table)
            .ok_or_else(|| StoreError::UnknownTable(table.to_string()))?;
        let ts = &self.schema.tables[tid];
        let row = self.rows[tid].len() + 1;
        check_row(ts, row, &cells)?;
        self.rows[tid].push(cells);
        Ok(())
    }

    pub fn build(self) -> Result<RelationalDatabase, StoreError> {
        let ids: HashMap<String, TableId> = self
            .schema
            .tables
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i as TableId))
            .collect();
        let mut tables: Vec<Table> = self
            .schema
            .tables
            .iter()
            .map(|ts| Table::new(ts.clone(), &ids))
            .collect();

        // Keys first so that forward references between tables resolve.
        for (table, rows) in tables.iter_mut().zip(&self.rows) {
            for (idx, cells) in rows.iter().enumerate() {
                let key = match &cells[table.pk_column] {
                    Cell::Key(k) => k.clone(),
                    _ => {
                        return Err(StoreError::MissingPrimaryKey {
                            table: table.name().to_string(),
                            row: idx + 1,
                        })
                    }
                };
                if table.key_index.contains_key(&key) {
                    return Err(StoreError::DuplicatePrimaryKey {
                        table: table.name().to_string(),
                        row: idx + 1,
                        key,
                    });
                }
                table.key_index.insert(key.clone(), table.keys.len() as u32);
                table.keys.push(key);
            }
        }

        for tid in 0..tables.len() {
            let rows = &self.rows[tid];
            let mut fks = Vec::with_capacity(rows.len());
            let mut features = Vec::with_capacity(rows.len());
            let mut timestamps = Vec::with_capacity(rows.len());
            for (idx, cells) in rows.iter().enumerate() {
                let table = &tables[tid];
                let mut row_fks = Vec::with_capacity(table.fk_columns.len());
                for &(col, target) in &table.fk_columns {
                    match &cells[col] {
                        Cell::Key(k) => {
                            let parent = tables[target as usize].row_by_key(k).ok_or_else(|| {
                                StoreError::DanglingForeignKey {
                                    table: table.name().to_string(),
                                    row: idx + 1,
                                    column: table.schema.columns[col].name.clone(),
                                    key: k.clone(),
                                    target: tables[target as usize].name().to_string(),
                                }
                            })?;
                            row_fks.push(Some(parent));
                        }
                        _ => row_fks.push(None),
                    }
                }
                let row_features: Vec<Option<Value>> = table
                    .feature_columns
                    .iter()
                    .map(|&(col, _)| match &cells[col] {
                        Cell::Value(v) => Some(v.clone()),
                        _ => None,
                    })
                    .collect();
                let ts = table.time_column.and_then(|col| match &cells[col] {
                    Cell::Value(Value::Datetime(s)) => Some(*s),
                    _ => None,
                });
                fks.push(row_fks);
                features.push(row_features);
                timestamps.push(ts);
            }
            let table = &mut tables[tid];
            table.fks = fks;
            table.features = features;
            table.timestamps = timestamps;
        }

        let out_links: Vec<Vec<Vec<RowRef>>> = tables
            .iter()
            .map(|t| (0..t.len() as u32).map(|r| row_out_links(t, r)).collect())
            .collect();
        let mut in_links: Vec<Vec<Vec<RowRef>>> = tables.iter().map(|t| vec![Vec::new(); t.len()]).collect();
        for (tid, rows) in out_links.iter().enumerate() {
            for (row, parents) in rows.iter().enumerate() {
                for p in parents {
                    in_links[p.table as usize][p.row as usize].push(RowRef::new(tid as TableId, row as u32));
                }
            }
        }

        Ok(RelationalDatabase {
            schema: self.schema,
            tables: tables.into_iter().map(Arc::new).collect(),
            out_links: out_links.into_iter().map(Arc::new).collect(),
            in_links: in_links.into_iter().map(Arc::new).collect(),
            task: None,
        })
    }
}

fn check_row(ts: &TableSchema, row: usize, cells: &[Cell]) -> Result<(), StoreError> {
    if cells.len() != ts.columns.len() {
        return Err(StoreError::Arity {
            table: ts.name.clone(),
            row,
            expected: ts.columns.len(),
            found: cells.len(),
        });
    }
    for (col, cell) in ts.columns.iter().zip(cells) {
        let ok = match (&col.datatype, cell) {
            (Datatype::PrimaryKey, Cell::Key(_)) => true,
            (Datatype::PrimaryKey, Cell::Missing) => {
                return Err(StoreError::MissingPrimaryKey {
                    table: ts.name.clone(),
                    row,
                })
            }
            (Datatype::ForeignKey { .. }, Cell::Key(_) | Cell::Missing) => true,
            (dt, Cell::Missing) => !dt.is_key(),
            (dt, Cell::Value(v)) => dt.feature_type() == Some(v.feature_type()),
            _ => false,
        };
        if !ok {
            return Err(StoreError::CellType {
                table: ts.name.clone(),
                row,
                column: col.name.clone(),
                expected: col.datatype.to_string(),
            });
        }
    }
    Ok(())
}
