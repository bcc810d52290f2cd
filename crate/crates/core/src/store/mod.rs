//! Relational storage: schemas, immutable row stores with link indexes, task
//! tables and temporal splits.

mod database;
mod load;
mod schema;
mod task;
mod types;

pub use database::{Cell, DatabaseBuilder, RelationalDatabase, Table};
pub use load::{load_database, load_schema_file, load_task_table, write_database, write_task_table};
pub use schema::{ColumnSchema, SchemaDescriptor, SchemaFile, TableSchema, TaskSchema};
pub use task::{ActiveTask, Seed, TaskRow, TaskTable};
pub use types::{ColumnRef, Datatype, FeatureType, RowRef, Split, TableId, Value};

use std::path::PathBuf;

use chrono::{DateTime, NaiveDate, NaiveDateTime};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing data file for table `{table}`: {path}")]
    MissingFile { table: String, path: PathBuf },
    #[error("schema line {line}: {message}")]
    SchemaParse { line: usize, message: String },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("table `{table}`: header {found:?} does not match schema columns {expected:?}")]
    HeaderMismatch {
        table: String,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("table `{table}` row {row}: malformed record: {message}")]
    Csv { table: String, row: usize, message: String },
    #[error("table `{table}` row {row} column `{column}`: cannot parse `{value}` as {expected}")]
    Coercion {
        table: String,
        row: usize,
        column: String,
        value: String,
        expected: String,
    },
    #[error("table `{table}` row {row}: duplicate primary key `{key}`")]
    DuplicatePrimaryKey { table: String, row: usize, key: String },
    #[error("table `{table}` row {row}: missing primary key")]
    MissingPrimaryKey { table: String, row: usize },
    #[error("table `{table}` row {row} column `{column}`: dangling foreign key `{key}` (no such row in `{target}`)")]
    DanglingForeignKey {
        table: String,
        row: usize,
        column: String,
        key: String,
        target: String,
    },
    #[error("table `{table}` row {row}: expected {expected} cells, got {found}")]
    Arity {
        table: String,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("table `{table}` row {row} column `{column}`: cell does not match declared type {expected}")]
    CellType {
        table: String,
        row: usize,
        column: String,
        expected: String,
    },
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown column `{table}.{column}`")]
    UnknownColumn { table: String, column: String },
    #[error("unknown split `{0}` (expected train, val or test)")]
    UnknownSplit(String),
    #[error("task table `{active}` is already attached; only one task table may be active")]
    TaskAlreadyActive { active: String },
    #[error("no task table attached")]
    NoActiveTask,
    #[error("task `{task}`: {message}")]
    Task { task: String, message: String },
}

/// Parses ISO-8601 datetimes (`YYYY-MM-DD`, `YYYY-MM-DDTHH:MM:SS[.f]`, with
/// optional `Z` or offset) into seconds since the Unix epoch.
pub fn parse_datetime(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
    ] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

/// Formats seconds since the epoch as `YYYY-MM-DDTHH:MM:SSZ`.
pub fn format_datetime(secs: i64) -> String {
    match DateTime::from_timestamp(secs, 0) {
        Some(dt) => dt.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        None => secs.to_string(),
    }
}
