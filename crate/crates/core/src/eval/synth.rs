use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::rng;
use crate::store::{
    Cell, DatabaseBuilder, Datatype, FeatureType, RelationalDatabase, SchemaDescriptor, TableSchema, TaskRow,
    TaskSchema, TaskTable, Value,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Boolean label equal to a boolean feature of the linked entity row.
    CopyParentFeature,
    /// Boolean label fixed per entity across its task rows.
    EntityConstantLabel,
    /// Numeric label: per-entity level plus a global seasonal term and noise.
    SeasonalLabel,
}

impl FromStr for Generator {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy_parent_feature" | "copy" => Ok(Generator::CopyParentFeature),
            "entity_constant_label" | "constant" => Ok(Generator::EntityConstantLabel),
            "seasonal_label" | "seasonal" => Ok(Generator::SeasonalLabel),
            other => Err(EvalError::Spec(format!("unknown generator `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub entities: usize,
    /// Number of group rows the entities link to; 0 means one per 20 entities.
    pub groups: usize,
    pub rows_per_entity: usize,
    pub time_range: i64,
    /// Label flip probability (boolean generators) or noise std (seasonal).
    pub noise: f64,
    pub rng_seed: u64,
}

impl SyntheticSpec {
    pub fn new(generator: Generator) -> Self {
        let (entities, rows_per_entity) = match generator {
            Generator::CopyParentFeature => (2000, 1),
            Generator::EntityConstantLabel => (500, 6),
            Generator::SeasonalLabel => (500, 6),
        };
        SyntheticSpec {
            generator,
            entities,
            groups: 0,
            rows_per_entity,
            time_range: 1_000_000,
            noise: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Spec(m.to_string()));
        if self.entities < 2 {
            return bad("at least two entities are required");
        }
        if self.rows_per_entity == 0 {
            return bad("rows_per_entity must be positive");
        }
        if self.generator == Generator::EntityConstantLabel && self.rows_per_entity < 3 {
            return bad("entity_constant_label needs at least three rows per entity");
        }
        if self.time_range < 10 * self.rows_per_entity as i64 {
            return bad("time_range too small for the requested rows");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        if self.generator != Generator::SeasonalLabel && self.noise > 0.5 {
            return bad("label flip probability must be at most 0.5");
        }
        Ok(())
    }

    fn group_count(&self) -> usize {
        if self.groups > 0 {
            self.groups
        } else {
            self.entities.div_ceil(20)
        }
    }

    pub fn task_name(&self) -> &'static str {
        match self.generator {
            Generator::CopyParentFeature => "copy",
            Generator::EntityConstantLabel => "constant",
            Generator::SeasonalLabel => "seasonal",
        }
    }
}

fn key(s: String) -> Cell {
    Cell::Key(s)
}

fn val(v: Value) -> Cell {
    Cell::Value(v)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(RelationalDatabase, TaskTable), EvalError> {
    spec.validate()?;
    let mut r = rng::stream(spec.rng_seed, &[0x5e, spec.generator as u64]);
    let n_groups = spec.group_count();
    let entity_feature = match spec.generator {
        Generator::CopyParentFeature => ("flag", Datatype::Boolean),
        Generator::EntityConstantLabel => ("tier", Datatype::Numeric),
        Generator::SeasonalLabel => ("segment", Datatype::Numeric),
    };
    let mut entities = TableSchema::new("entities")
        .column("entity_id", Datatype::PrimaryKey)
        .column("group_id", Datatype::ForeignKey { table: "groups".into() })
        .column(entity_feature.0, entity_feature.1);
    if spec.generator == Generator::CopyParentFeature {
        entities = entities.column("score", Datatype::Numeric);
    }
    let schema = SchemaDescriptor::new(vec![
        TableSchema::new("groups")
            .column("group_id", Datatype::PrimaryKey)
            .column("size", Datatype::Numeric),
        entities,
    ]);
    let mut b = DatabaseBuilder::new(schema)?;
    let group_of: Vec<usize> = (0..spec.entities).map(|_| r.random_range(0..n_groups)).collect();
    for g in 0..n_groups {
        let size = group_of.iter().filter(|&&x| x == g).count() as f64;
        b.add_row("groups", vec![key(format!("g{g}")), val(Value::Numeric(size))])?;
    }

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let t_max = spec.time_range;
    let mut rows = Vec::new();
    let (train_cutoff, val_cutoff);
    match spec.generator {
        Generator::CopyParentFeature => {
            for (e, &g) in group_of.iter().enumerate() {
                let flag = r.random_bool(0.5);
                let score: f64 = std_normal.sample(&mut r);
                b.add_row(
                    "entities",
                    vec![
                        key(format!("e{e}")),
                        key(format!("g{g}")),
                        val(Value::Boolean(flag)),
                        val(Value::Numeric(score)),
                    ],
                )?;
                for _ in 0..spec.rows_per_entity {
                    let flip = spec.noise > 0.0 && r.random_bool(spec.noise);
                    rows.push(TaskRow {
                        entity: format!("e{e}"),
                        timestamp: r.random_range(0..t_max),
                        label: Value::Boolean(flag != flip),
                    });
                }
            }
            train_cutoff = t_max * 7 / 10;
            val_cutoff = t_max * 85 / 100;
        }
        Generator::EntityConstantLabel => {
            let k = spec.rows_per_entity as i64;
            let slot = t_max / k;
            for (e, &g) in group_of.iter().enumerate() {
                let tier = r.random_range(1..=3) as f64;
                b.add_row(
                    "entities",
                    vec![key(format!("e{e}")), key(format!("g{g}")), val(Value::Numeric(tier))],
                )?;
                let label = r.random_bool(0.5);
                for j in 0..k {
                    let jitter = r.random_range(-(slot * 3 / 10)..=(slot * 3 / 10));
                    let flip = spec.noise > 0.0 && r.random_bool(spec.noise);
                    rows.push(TaskRow {
                        entity: format!("e{e}"),
                        timestamp: j * slot + slot / 2 + jitter,
                        label: Value::Boolean(label != flip),
                    });
                }
            }
            // The last row of each entity is test, the one before it validation.
            train_cutoff = (k - 2) * slot;
            val_cutoff = (k - 1) * slot;
        }
        Generator::SeasonalLabel => {
            let noise = Normal::new(0.0, spec.noise).expect("valid noise std");
            let period = t_max as f64 / 3.0;
            for (e, &g) in group_of.iter().enumerate() {
                let segment = r.random_range(1..=4) as f64;
                b.add_row(
                    "entities",
                    vec![key(format!("e{e}")), key(format!("g{g}")), val(Value::Numeric(segment))],
                )?;
                let level: f64 = std_normal.sample(&mut r);
                for _ in 0..spec.rows_per_entity {
                    let t = r.random_range(0..t_max);
                    let season = (std::f64::consts::TAU * t as f64 / period).sin();
                    rows.push(TaskRow {
                        entity: format!("e{e}"),
                        timestamp: t,
                        label: Value::Numeric(level + season + noise.sample(&mut r)),
                    });
                }
            }
            train_cutoff = t_max * 7 / 10;
            val_cutoff = t_max * 85 / 100;
        }
    }
    rows.sort_by_key(|row| row.timestamp);
    let label_type = match spec.generator {
        Generator::SeasonalLabel => FeatureType::Numeric,
        _ => FeatureType::Boolean,
    };
    let task = TaskTable {
        schema: TaskSchema {
            name: spec.task_name().into(),
            entity_column: "entity_id".into(),
            entity_table: "entities".into(),
            time_column: "time".into(),
            label_column: "label".into(),
            label_type,
            train_cutoff,
            val_cutoff,
        },
        rows,
    };
    Ok((b.build()?, task))
}

/// Generated database with its task table attached.
pub fn generate_attached(spec: &SyntheticSpec) -> Result<RelationalDatabase, EvalError> {
    let (db, task) = generate_synthetic(spec)?;
    Ok(db.attach_task_table(&task)?)
}
