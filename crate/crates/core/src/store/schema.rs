//! Schema descriptor and its line-oriented text format.
//!
//! ```text
//! # comment
//! table users
//!   user_id pk
//!   age numeric
//!   signup datetime timestamp
//! table orders
//!   order_id pk
//!   user_id fk -> users
//!   price numeric
//!
//! task churn
//!   user_id fk -> users
//!   ts datetime timestamp
//!   churned boolean label
//!   train_cutoff 2021-01-01T00:00:00Z
//!   val_cutoff 2021-06-01T00:00:00Z
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{format_datetime, parse_datetime, Datatype, FeatureType, StoreError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub datatype: Datatype,
}

impl ColumnSchema {
    pub fn new(name: impl Into<String>, datatype: Datatype) -> Self {
        ColumnSchema {
            name: name.into(),
            datatype,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnSchema>,
    /// Name of the datetime column that carries the row timestamp.
    pub timestamp: Option<String>,
}

impl TableSchema {
    pub fn new(name: impl Into<String>) -> Self {
        TableSchema {
            name: name.into(),
            columns: Vec::new(),
            timestamp: None,
        }
    }

    pub fn column(mut self, name: impl Into<String>, datatype: Datatype) -> Self {
        self.columns.push(ColumnSchema::new(name, datatype));
        self
    }

    pub fn timestamp_column(mut self, name: impl Into<String>) -> Self {
        let name = name.into();
        self.columns.push(ColumnSchema::new(name.clone(), Datatype::Datetime));
        self.timestamp = Some(name);
        self
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn primary_key(&self) -> Option<usize> {
        self.columns.iter().position(|c| c.datatype == Datatype::PrimaryKey)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDescriptor {
    pub tables: Vec<TableSchema>,
}

impl SchemaDescriptor {
    pub fn new(tables: Vec<TableSchema>) -> Self {
        SchemaDescriptor { tables }
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    /// Checks name uniqueness, primary keys, foreign-key targets and timestamp designations.
    pub fn validate(&self) -> Result<(), StoreError> {
        let mut names = HashSet::new();
        for table in &self.tables {
            if !names.insert(table.name.as_str()) {
                return Err(StoreError::Schema(format!("duplicate table name `{}`", table.name)));
            }
        }
        for table in &self.tables {
            let mut cols = HashSet::new();
            for col in &table.columns {
                if !cols.insert(col.name.as_str()) {
                    return Err(StoreError::Schema(format!(
                        "duplicate column `{}` in table `{}`",
                        col.name, table.name
                    )));
                }
                if let Datatype::ForeignKey { table: target } = &col.datatype {
                    if !names.contains(target.as_str()) {
                        return Err(StoreError::Schema(format!(
                            "column `{}.{}` references unknown table `{target}`",
                            table.name, col.name
                        )));
                    }
                }
            }
            let pks = table
                .columns
                .iter()
                .filter(|c| c.datatype == Datatype::PrimaryKey)
                .count();
            if pks != 1 {
                return Err(StoreError::Schema(format!(
                    "table `{}` must have exactly one primary key column, found {pks}",
                    table.name
                )));
            }
            if let Some(ts) = &table.timestamp {
                match table.columns.iter().find(|c| &c.name == ts) {
                    Some(c) if c.datatype == Datatype::Datetime => {}
                    Some(_) => {
                        return Err(StoreError::Schema(format!(
                            "timestamp column `{}.{ts}` must be a datetime",
                            table.name
                        )))
                    }
                    None => {
                        return Err(StoreError::Schema(format!(
                            "timestamp column `{}.{ts}` does not exist",
                            table.name
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Declaration of a task table: one entity link, one timestamp, one label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchema {
    pub name: String,
    pub entity_column: String,
    pub entity_table: String,
    pub time_column: String,
    pub label_column: String,
    pub label_type: FeatureType,
    pub train_cutoff: i64,
    pub val_cutoff: i64,
}

/// Parsed contents of a schema descriptor file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SchemaFile {
    pub schema: SchemaDescriptor,
    pub tasks: Vec<TaskSchema>,
}

enum Block {
    Table(TableSchema),
    Task(PartialTask),
}

#[derive(Default)]
struct PartialTask {
    name: String,
    line: usize,
    entity: Option<(String, String)>,
    time: Option<String>,
    label: Option<(String, FeatureType)>,
    train_cutoff: Option<i64>,
    val_cutoff: Option<i64>,
}

impl PartialTask {
    fn finish(self) -> Result<TaskSchema, StoreError> {
        let err = |m: &str| StoreError::SchemaParse {
            line: self.line,
            message: format!("task `{}`: {m}", self.name),
        };
        let (entity_column, entity_table) = self
            .entity
            .clone()
            .ok_or_else(|| err("missing entity `fk -> table` column"))?;
        let time_column = self
            .time
            .clone()
            .ok_or_else(|| err("missing `datetime timestamp` column"))?;
        let (label_column, label_type) = self.label.clone().ok_or_else(|| err("missing label column"))?;
        let train_cutoff = self.train_cutoff.ok_or_else(|| err("missing train_cutoff"))?;
        let val_cutoff = self.val_cutoff.ok_or_else(|| err("missing val_cutoff"))?;
        if train_cutoff > val_cutoff {
            return Err(err("train_cutoff must not exceed val_cutoff"));
        }
        Ok(TaskSchema {
            name: self.name,
            entity_column,
            entity_table,
            time_column,
            label_column,
            label_type,
            train_cutoff,
            val_cutoff,
        })
    }
}

fn parse_type(words: &[&str], line: usize) -> Result<(Datatype, &'static str), StoreError> {
    let bad = |m: String| StoreError::SchemaParse { line, message: m };
    match words {
        ["pk"] => Ok((Datatype::PrimaryKey, "")),
        ["fk", "->", table] => Ok((
            Datatype::ForeignKey {
                table: (*table).to_string(),
            },
            "",
        )),
        ["numeric", rest @ ..] | ["boolean", rest @ ..] | ["datetime", rest @ ..] | ["text", rest @ ..] => {
            let dt = match words[0] {
                "numeric" => Datatype::Numeric,
                "boolean" => Datatype::Boolean,
                "datetime" => Datatype::Datetime,
                _ => Datatype::Text,
            };
            match rest {
                [] => Ok((dt, "")),
                ["timestamp"] => Ok((dt, "timestamp")),
                ["label"] => Ok((dt, "label")),
                other => Err(bad(format!("unexpected markers {other:?}"))),
            }
        }
        other => Err(bad(format!("cannot parse column type {other:?}"))),
    }
}

impl SchemaFile {
    pub fn parse(text: &str) -> Result<SchemaFile, StoreError> {
        let mut out = SchemaFile::default();
        let mut current: Option<Block> = None;

        fn close(out: &mut SchemaFile, block: Option<Block>) -> Result<(), StoreError> {
            match block {
                Some(Block::Table(t)) => out.schema.tables.push(t),
                Some(Block::Task(t)) => out.tasks.push(t.finish()?),
                None => {}
            }
            Ok(())
        }

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let words: Vec<&str> = content.split_whitespace().collect();
            match words.as_slice() {
                ["table", name] => {
                    close(&mut out, current.take())?;
                    current = Some(Block::Table(TableSchema::new(*name)));
                }
                ["task", name] => {
                    close(&mut out, current.take())?;
                    current = Some(Block::Task(PartialTask {
                        name: (*name).to_string(),
                        line,
                        ..Default::default()
                    }));
                }
                [key @ ("train_cutoff" | "val_cutoff"), value] => match current.as_mut() {
                    Some(Block::Task(task)) => {
                        let ts = parse_datetime(value).ok_or_else(|| StoreError::SchemaParse {
                            line,
                            message: format!("invalid datetime `{value}`"),
                        })?;
                        if *key == "train_cutoff" {
                            task.train_cutoff = Some(ts);
                        } else {
                            task.val_cutoff = Some(ts);
                        }
                    }
                    _ => {
                        return Err(StoreError::SchemaParse {
                            line,
                            message: format!("`{key}` outside of a task block"),
                        })
                    }
                },
                [name, rest @ ..] => {
                    let (datatype, marker) = parse_type(rest, line)?;
                    match current.as_mut() {
                        Some(Block::Table(table)) => {
                            match marker {
                                "timestamp" => {
                                    if datatype != Datatype::Datetime {
                                        return Err(StoreError::SchemaParse {
                                            line,
                                            message: "timestamp marker requires a datetime column".into(),
                                        });
                                    }
                                    if table.timestamp.is_some() {
                                        return Err(StoreError::SchemaParse {
                                            line,
                                            message: format!("table `{}` has two timestamp columns", table.name),
                                        });
                                    }
                                    table.timestamp = Some((*name).to_string());
                                }
                                "label" => {
                                    return Err(StoreError::SchemaParse {
                                        line,
                                        message: "label marker is only valid in task blocks".into(),
                                    })
                                }
                                _ => {}
                            }
                            table.columns.push(ColumnSchema::new(*name, datatype));
                        }
                        Some(Block::Task(task)) => {
                            let dup = |what: &str| StoreError::SchemaParse {
                                line,
                                message: format!("task `{}` declares two {what} columns", task.name),
                            };
                            match (datatype, marker) {
                                (Datatype::ForeignKey { table }, _) => {
                                    if task.entity.is_some() {
                                        return Err(dup("entity"));
                                    }
                                    task.entity = Some(((*name).to_string(), table));
                                }
                                (Datatype::Datetime, "timestamp") => {
                                    if task.time.is_some() {
                                        return Err(dup("timestamp"));
                                    }
                                    task.time = Some((*name).to_string());
                                }
                                (dt @ (Datatype::Boolean | Datatype::Numeric), "label") => {
                                    if task.label.is_some() {
                                        return Err(dup("label"));
                                    }
                                    let ft = dt.feature_type().expect("feature type");
                                    task.label = Some(((*name).to_string(), ft));
                                }
                                (dt, m) => {
                                    return Err(StoreError::SchemaParse {
                                        line,
                                        message: format!(
                                            "task columns must be `fk -> t`, `datetime timestamp` or `boolean|numeric label`, got `{dt} {m}`"
                                        ),
                                    })
                                }
                            }
                        }
                        None => {
                            return Err(StoreError::SchemaParse {
                                line,
                                message: "column declared outside of a table block".into(),
                            })
                        }
                    }
                }
                [] => unreachable!(),
            }
        }
        close(&mut out, current.take())?;
        out.schema.validate()?;
        for task in &out.tasks {
            if out.schema.table_index(&task.entity_table).is_none() {
                return Err(StoreError::Schema(format!(
                    "task `{}` references unknown table `{}`",
                    task.name, task.entity_table
                )));
            }
        }
        Ok(out)
    }

    /// Renders back to the descriptor format; `parse(render(x)) == x`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for table in &self.schema.tables {
            let _ = writeln!(s, "table {}", table.name);
            for col in &table.columns {
                let marker = if table.timestamp.as_deref() == Some(col.name.as_str()) {
                    " timestamp"
                } else {
                    ""
                };
                let _ = writeln!(s, "  {} {}{}", col.name, col.datatype, marker);
            }
            s.push('\n');
        }
        for task in &self.tasks {
            let _ = writeln!(s, "task {}", task.name);
            let _ = writeln!(s, "  {} fk -> {}", task.entity_column, task.entity_table);
            let _ = writeln!(s, "  {} datetime timestamp", task.time_column);
            let _ = writeln!(s, "  {} {} label", task.label_column, task.label_type.name());
            let _ = writeln!(s, "  train_cutoff {}", format_datetime(task.train_cutoff));
            let _ = writeln!(s, "  val_cutoff {}", format_datetime(task.val_cutoff));
            s.push('\n');
        }
        s
    }
}
