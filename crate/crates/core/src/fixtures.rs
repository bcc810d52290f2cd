//! Small databases for tests and examples: the users/orders shop and a
//! generator of random temporal schemas and databases.

use rand::Rng;

use crate::rng;
use crate::store::{Cell, DatabaseBuilder, Datatype, RelationalDatabase, SchemaDescriptor, TableSchema, Value};

fn key(s: impl Into<String>) -> Cell {
    Cell::Key(s.into())
}

fn num(v: f64) -> Cell {
    Cell::Value(Value::Numeric(v))
}

/// Three users (age, name; untimed) and five orders (price, qty, placed_at).
pub fn shop() -> RelationalDatabase {
    let schema = SchemaDescriptor::new(vec![
        TableSchema::new("users")
            .column("user_id", Datatype::PrimaryKey)
            .column("age", Datatype::Numeric)
            .column("name", Datatype::Text),
        TableSchema::new("orders")
            .column("order_id", Datatype::PrimaryKey)
            .column("user_id", Datatype::ForeignKey { table: "users".into() })
            .column("price", Datatype::Numeric)
            .column("qty", Datatype::Numeric)
            .timestamp_column("placed_at"),
    ]);
    let mut b = DatabaseBuilder::new(schema).expect("valid schema");
    for (id, age, name) in [("u1", 34.0, "ann"), ("u2", 27.0, "bob"), ("u3", 51.0, "cid")] {
        b.add_row("users", vec![key(id), num(age), Cell::Value(Value::text(name))])
            .expect("row");
    }
    for (id, user, price, qty, ts) in [
        ("o1", "u1", 10.0, 1.0, 100),
        ("o2", "u1", 25.0, 2.0, 200),
        ("o3", "u2", 7.5, 1.0, 150),
        ("o4", "u2", 12.0, 3.0, 300),
        ("o5", "u3", 99.0, 1.0, 250),
    ] {
        b.add_row(
            "orders",
            vec![
                key(id),
                key(user),
                num(price),
                num(qty),
                Cell::Value(Value::Datetime(ts)),
            ],
        )
        .expect("row");
    }
    b.build().expect("valid database")
}

/// Parameters of [`random_database`].
#[derive(Clone, Copy, Debug)]
pub struct RandomDbSpec {
    pub max_tables: usize,
    pub max_rows: usize,
    pub time_range: i64,
}

impl Default for RandomDbSpec {
    fn default() -> Self {
        RandomDbSpec {
            max_tables: 5,
            max_rows: 30,
            time_range: 1_000,
        }
    }
}

/// Random schema (DAG of foreign keys, mixed datatypes, mostly timestamped
/// tables) populated with random rows. Deterministic in `seed`.
pub fn random_database(seed: u64, spec: RandomDbSpec) -> RelationalDatabase {
    let mut rng = rng::stream(seed, &[0xdb]);
    let n_tables = rng.random_range(2..=spec.max_tables.max(2));
    let mut tables = Vec::new();
    let mut fk_targets: Vec<Vec<usize>> = Vec::new();
    let mut feature_types: Vec<Vec<Datatype>> = Vec::new();
    let mut timed = Vec::new();
    for t in 0..n_tables {
        let mut ts = TableSchema::new(format!("t{t}")).column(format!("t{t}_id"), Datatype::PrimaryKey);
        let mut targets = Vec::new();
        if t > 0 {
            let n_fk = rng.random_range(0..=2usize.min(t + 1));
            for f in 0..n_fk {
                let target = rng.random_range(0..t);
                ts = ts.column(
                    format!("fk{f}"),
                    Datatype::ForeignKey {
                        table: format!("t{target}"),
                    },
                );
                targets.push(target);
            }
        }
        let mut feats = Vec::new();
        for c in 0..rng.random_range(1..=3) {
            let dt = match rng.random_range(0..4) {
                0 => Datatype::Numeric,
                1 => Datatype::Boolean,
                2 => Datatype::Text,
                _ => Datatype::Datetime,
            };
            ts = ts.column(format!("c{c}"), dt.clone());
            feats.push(dt);
        }
        let is_timed = rng.random_bool(0.75);
        if is_timed {
            ts = ts.timestamp_column("ts");
        }
        tables.push(ts);
        fk_targets.push(targets);
        feature_types.push(feats);
        timed.push(is_timed);
    }
    let mut b = DatabaseBuilder::new(SchemaDescriptor::new(tables)).expect("valid schema");
    let mut counts = Vec::new();
    for t in 0..n_tables {
        let n_rows = rng.random_range(1..=spec.max_rows.max(1));
        counts.push(n_rows);
        for r in 0..n_rows {
            let mut cells = vec![key(format!("{t}-{r}"))];
            for &target in &fk_targets[t] {
                if rng.random_bool(0.1) {
                    cells.push(Cell::Missing);
                } else {
                    let p = rng.random_range(0..counts[target]);
                    cells.push(key(format!("{target}-{p}")));
                }
            }
            for dt in &feature_types[t] {
                if rng.random_bool(0.15) {
                    cells.push(Cell::Missing);
                    continue;
                }
                cells.push(Cell::Value(match dt {
                    Datatype::Numeric => Value::Numeric(rng.random_range(-5.0..5.0)),
                    Datatype::Boolean => Value::Boolean(rng.random_bool(0.5)),
                    Datatype::Text => Value::text(["red", "green", "blue", "teal"][rng.random_range(0..4)]),
                    _ => Value::Datetime(rng.random_range(0..spec.time_range)),
                }));
            }
            if timed[t] {
                cells.push(Cell::Value(Value::Datetime(rng.random_range(0..spec.time_range))));
            }
            b.add_row(&format!("t{t}"), cells).expect("row");
        }
    }
    b.build().expect("valid database")
}

/// Every `(row, column)` that can seed a window: timestamped rows owning a
/// non-missing numeric or boolean cell.
pub fn maskable_seeds(db: &RelationalDatabase) -> Vec<crate::store::Seed> {
    let mut out = Vec::new();
    for r in db.rows() {
        if db.timestamp(r).is_none() {
            continue;
        }
        let table = db.table(r.table);
        for &(col, ft) in table.feature_columns() {
            if ft.is_maskable() && table.cell(r.row, col).is_some() {
                out.push(crate::store::Seed {
                    row: r,
                    target: crate::store::ColumnRef::new(r.table, col as u32),
                });
            }
        }
    }
    out
}
