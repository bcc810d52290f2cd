//! Delimited-file ingestion and export.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use super::{
    format_datetime, parse_datetime, Cell, DatabaseBuilder, Datatype, FeatureType, RelationalDatabase, SchemaFile,
    StoreError, TaskRow, TaskTable, Value,
};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_schema_file(path: &Path) -> Result<SchemaFile, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    SchemaFile::parse(&text)
}

fn table_path(data_dir: &Path, table: &str) -> PathBuf {
    data_dir.join(format!("{table}.csv"))
}

fn open_table(data_dir: &Path, table: &str) -> Result<csv::Reader<File>, StoreError> {
    let path = table_path(data_dir, table);
    if !path.is_file() {
        return Err(StoreError::MissingFile {
            table: table.to_string(),
            path,
        });
    }
    let file = File::open(&path).map_err(io_err(&path))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file))
}

fn check_header(reader: &mut csv::Reader<File>, table: &str, expected: Vec<String>) -> Result<(), StoreError> {
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| StoreError::Csv {
            table: table.to_string(),
            row: 0,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if found != expected {
        return Err(StoreError::HeaderMismatch {
            table: table.to_string(),
            expected,
            found,
        });
    }
    Ok(())
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "t" | "1" | "yes" | "y" => Some(true),
        "false" | "f" | "0" | "no" | "n" => Some(false),
        _ => None,
    }
}

fn coerce(field: &str, datatype: &Datatype, table: &str, row: usize, column: &str) -> Result<Cell, StoreError> {
    if field.is_empty() {
        return Ok(Cell::Missing);
    }
    let fail = |expected: &str| StoreError::Coercion {
        table: table.to_string(),
        row,
        column: column.to_string(),
        value: field.to_string(),
        expected: expected.to_string(),
    };
    Ok(match datatype {
        Datatype::PrimaryKey | Datatype::ForeignKey { .. } => Cell::Key(field.to_string()),
        Datatype::Numeric => {
            let v: f64 = field.trim().parse().map_err(|_| fail("numeric"))?;
            if !v.is_finite() {
                return Err(fail("finite numeric"));
            }
            Cell::Value(Value::Numeric(v))
        }
        Datatype::Boolean => Cell::Value(Value::Boolean(parse_bool(field.trim()).ok_or_else(|| fail("boolean"))?)),
        Datatype::Datetime => Cell::Value(Value::Datetime(
            parse_datetime(field).ok_or_else(|| fail("ISO-8601 datetime"))?,
        )),
        Datatype::Text => Cell::Value(Value::text(field)),
    })
}

/// Loads every table declared in `schema_file` from `<data_dir>/<table>.csv`.
pub fn load_database(schema_file: &Path, data_dir: &Path) -> Result<RelationalDatabase, StoreError> {
    let file = load_schema_file(schema_file)?;
    load_database_from(&file, data_dir)
}

pub(crate) fn load_database_from(file: &SchemaFile, data_dir: &Path) -> Result<RelationalDatabase, StoreError> {
    let mut builder = DatabaseBuilder::new(file.schema.clone())?;
    for table in &file.schema.tables {
        let mut reader = open_table(data_dir, &table.name)?;
        check_header(
            &mut reader,
            &table.name,
            table.columns.iter().map(|c| c.name.clone()).collect(),
        )?;
        for (idx, record) in reader.records().enumerate() {
            let row = idx + 1;
            let record = record.map_err(|e| StoreError::Csv {
                table: table.name.clone(),
                row,
                message: e.to_string(),
            })?;
            let cells = table
                .columns
                .iter()
                .zip(record.iter())
                .map(|(col, field)| coerce(field, &col.datatype, &table.name, row, &col.name))
                .collect::<Result<Vec<_>, _>>()?;
            builder.add_row(&table.name, cells)?;
        }
    }
    builder.build()
}

/// Loads the rows of task `name` from `<data_dir>/<name>.csv`.
pub fn load_task_table(file: &SchemaFile, data_dir: &Path, name: &str) -> Result<TaskTable, StoreError> {
    let schema = file
        .tasks
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| StoreError::UnknownTable(name.to_string()))?
        .clone();
    let mut reader = open_table(data_dir, name)?;
    check_header(
        &mut reader,
        name,
        vec![
            schema.entity_column.clone(),
            schema.time_column.clone(),
            schema.label_column.clone(),
        ],
    )?;
    let label_dt = match schema.label_type {
        FeatureType::Boolean => Datatype::Boolean,
        _ => Datatype::Numeric,
    };
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| StoreError::Csv {
            table: name.to_string(),
            row,
            message: e.to_string(),
        })?;
        let missing = |column: &str| StoreError::Coercion {
            table: name.to_string(),
            row,
            column: column.to_string(),
            value: String::new(),
            expected: "a non-missing value".into(),
        };
        let entity = record[0].to_string();
        if entity.is_empty() {
            return Err(missing(&schema.entity_column));
        }
        let timestamp = match coerce(&record[1], &Datatype::Datetime, name, row, &schema.time_column)? {
            Cell::Value(Value::Datetime(ts)) => ts,
            _ => return Err(missing(&schema.time_column)),
        };
        let label = match coerce(&record[2], &label_dt, name, row, &schema.label_column)? {
            Cell::Value(v) => v,
            _ => return Err(missing(&schema.label_column)),
        };
        rows.push(TaskRow {
            entity,
            timestamp,
            label,
        });
    }
    Ok(TaskTable { schema, rows })
}

fn render_value(v: &Value) -> String {
    match v {
        Value::Numeric(x) => format!("{x}"),
        Value::Boolean(b) => b.to_string(),
        Value::Datetime(s) => format_datetime(*s),
        Value::Text(t) => t.to_string(),
    }
}

/// Writes `schema.txt` (including task declarations) plus one CSV per table
/// and task. An attached task table is written only through `tasks`.
pub fn write_database(db: &RelationalDatabase, tasks: &[TaskTable], dir: &Path) -> Result<(), StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let active = db.active_task().map(|t| t.table);
    let mut file = SchemaFile::default();
    for (tid, table) in db.tables().enumerate() {
        if Some(tid as u32) == active {
            continue;
        }
        file.schema.tables.push(table.schema().clone());
        let path = table_path(dir, table.name());
        let mut w = csv::Writer::from_path(&path).map_err(|e| StoreError::Csv {
            table: table.name().to_string(),
            row: 0,
            message: e.to_string(),
        })?;
        let csv_err = |e: csv::Error| StoreError::Csv {
            table: table.name().to_string(),
            row: 0,
            message: e.to_string(),
        };
        w.write_record(table.schema().columns.iter().map(|c| c.name.as_str()))
            .map_err(csv_err)?;
        let fk_target: Vec<Option<u32>> = {
            let mut v = vec![None; table.schema().columns.len()];
            for &(col, target) in table.foreign_key_columns() {
                v[col] = Some(target);
            }
            v
        };
        for row in 0..table.len() as u32 {
            let mut fk_iter = table.foreign_keys(row).iter();
            let record: Vec<String> = table
                .schema()
                .columns
                .iter()
                .enumerate()
                .map(|(col, c)| match &c.datatype {
                    Datatype::PrimaryKey => table.key(row).to_string(),
                    Datatype::ForeignKey { .. } => match fk_iter.next().copied().flatten() {
                        Some(parent) => db.table(fk_target[col].expect("fk column")).key(parent).to_string(),
                        None => String::new(),
                    },
                    _ => table.cell(row, col).map(render_value).unwrap_or_default(),
                })
                .collect();
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    for task in tasks {
        write_task_table(task, dir)?;
        file.tasks.push(task.schema.clone());
    }
    let schema_path = dir.join("schema.txt");
    fs::write(&schema_path, file.render()).map_err(io_err(&schema_path))
}

pub fn write_task_table(task: &TaskTable, dir: &Path) -> Result<(), StoreError> {
    let path = table_path(dir, task.name());
    let csv_err = |e: csv::Error| StoreError::Csv {
        table: task.name().to_string(),
        row: 0,
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    let s = &task.schema;
    w.write_record([&s.entity_column, &s.time_column, &s.label_column])
        .map_err(csv_err)?;
    for row in &task.rows {
        w.write_record([
            row.entity.clone(),
            format_datetime(row.timestamp),
            render_value(&row.label),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&path))
}
