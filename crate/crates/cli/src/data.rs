use std::path::Path;

use anyhow::{anyhow, Context, Result};
use reltrans::store::{load_database, load_schema_file, load_task_table, RelationalDatabase, TaskTable};

use crate::error::Failure;

/// A database directory: `schema.txt` plus one CSV per table and task.
pub struct LoadedDb {
    pub db: RelationalDatabase,
    pub tasks: Vec<TaskTable>,
}

pub fn load_dir(dir: &Path, schema: Option<&Path>) -> Result<LoadedDb> {
    let schema_path = schema.map(Path::to_path_buf).unwrap_or_else(|| dir.join("schema.txt"));
    let file = load_schema_file(&schema_path)
        .with_context(|| format!("loading schema {}", schema_path.display()))
        .map_err(Failure::data)?;
    let db = load_database(&schema_path, dir)
        .with_context(|| format!("loading tables from {}", dir.display()))
        .map_err(Failure::data)?;
    let tasks = file
        .tasks
        .iter()
        .map(|t| load_task_table(&file, dir, &t.name))
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("loading task tables from {}", dir.display()))
        .map_err(Failure::data)?;
    Ok(LoadedDb { db, tasks })
}

/// Loads a database directory and attaches task `task` (or its only task).
pub fn load_with_task(dir: &Path, task: Option<&str>) -> Result<RelationalDatabase> {
    let loaded = load_dir(dir, None)?;
    let chosen = match task {
        Some(name) => loaded
            .tasks
            .iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| Failure::config(anyhow!("database {} has no task `{name}`", dir.display())))?,
        None => match loaded.tasks.as_slice() {
            [only] => only,
            [] => return Err(Failure::data(anyhow!("database {} declares no task", dir.display()))),
            many => {
                let names: Vec<&str> = many.iter().map(|t| t.name()).collect();
                return Err(Failure::config(anyhow!(
                    "several tasks ({}); pick one with --task",
                    names.join(", ")
                )));
            }
        },
    };
    loaded
        .db
        .attach_task_table(chosen)
        .with_context(|| format!("attaching task `{}`", chosen.name()))
        .map_err(Failure::data)
}
