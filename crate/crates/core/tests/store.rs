use std::path::{Path, PathBuf};

use proptest::prelude::*;
use reltrans::fixtures::{random_database, RandomDbSpec};
use reltrans::store::{
    load_database, load_schema_file, load_task_table, parse_datetime, write_database, Cell, DatabaseBuilder, Datatype,
    RelationalDatabase, RowRef, SchemaDescriptor, Split, StoreError, TableSchema, Value,
};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn load(name: &str) -> Result<RelationalDatabase, StoreError> {
    let dir = fixture(name);
    load_database(&dir.join("schema.txt"), &dir)
}

#[test]
fn loads_shop_fixture_from_csv() {
    let db = load("shop").unwrap();
    let users = db.table_id("users").unwrap();
    let orders = db.table_id("orders").unwrap();
    assert_eq!(db.table(users).len(), 3);
    assert_eq!(db.table(orders).len(), 5);
    let u = db.table(users);
    assert_eq!(u.cell(0, 1), Some(&Value::Numeric(34.0)));
    assert_eq!(u.cell(2, 1), None, "empty field is missing");
    assert_eq!(u.cell(1, 3), Some(&Value::Boolean(false)));
    assert_eq!(u.cell(2, 3), Some(&Value::Boolean(true)));
    assert_eq!(u.cell(0, 2), Some(&Value::text("Ann")));
    let o = db.table(orders);
    assert_eq!(o.timestamp(1), parse_datetime("2024-02-11"));
    assert_eq!(o.cell(3, 2), None);
    // o1 and o2 belong to u1.
    let u1 = RowRef::new(users, 0);
    assert_eq!(db.in_links(u1), &[RowRef::new(orders, 0), RowRef::new(orders, 1)]);
    assert_eq!(db.out_links(RowRef::new(orders, 4)), &[RowRef::new(users, 2)]);
    assert!(db.out_links(u1).is_empty());
}

#[test]
fn dangling_foreign_key_is_reported_with_coordinates() {
    let err = load("dangling").unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, StoreError::DanglingForeignKey { .. }), "{msg}");
    assert!(msg.contains("dangling foreign key"), "{msg}");
    assert!(msg.contains("orders") && msg.contains("u9"), "{msg}");
}

#[test]
fn header_only_table_loads_empty() {
    let db = load("empty_orders").unwrap();
    let orders = db.table_id("orders").unwrap();
    assert_eq!(db.table(orders).len(), 0);
    for r in db.rows() {
        assert!(db.in_links(r).is_empty());
    }
}

#[test]
fn task_table_attaches_with_temporal_splits() {
    let dir = fixture("shop");
    let file = load_schema_file(&dir.join("schema.txt")).unwrap();
    let task = load_task_table(&file, &dir, "spend").unwrap();
    let db = load("shop").unwrap().attach_task_table(&task).unwrap();
    let active = db.active_task().unwrap().clone();
    assert_eq!(active.name, "spend");
    assert_eq!(db.seed_rows_for_task(Split::Train).unwrap().len(), 1);
    assert_eq!(db.seed_rows_for_task(Split::Val).unwrap().len(), 2);
    assert_eq!(db.seed_rows_for_task(Split::Test).unwrap().len(), 1);
    // Each task row links to its entity exactly like a feature row would.
    let users = db.table_id("users").unwrap();
    assert_eq!(db.out_links(RowRef::new(active.table, 1)), &[RowRef::new(users, 0)]);
    assert!(db
        .in_links(RowRef::new(users, 0))
        .contains(&RowRef::new(active.table, 1)));
    assert!(matches!(
        db.clone().attach_task_table(&task),
        Err(StoreError::TaskAlreadyActive { .. })
    ));
}

/// The same rows built as an ordinary feature table give identical links and cells.
#[test]
fn task_table_matches_equivalent_feature_table() {
    let dir = fixture("shop");
    let file = load_schema_file(&dir.join("schema.txt")).unwrap();
    let task = load_task_table(&file, &dir, "spend").unwrap();
    let attached = load("shop").unwrap().attach_task_table(&task).unwrap();
    let active = attached.active_task().unwrap().clone();
    let task_schema = attached.table(active.table).schema().clone();

    let mut tables = load("shop").unwrap().schema().tables.clone();
    tables.push(task_schema.clone());
    let mut b = DatabaseBuilder::new(SchemaDescriptor::new(tables)).unwrap();
    let base = load("shop").unwrap();
    for t in base.tables() {
        for r in 0..t.len() as u32 {
            let cells = (0..t.schema().columns.len())
                .map(|c| match &t.schema().columns[c].datatype {
                    Datatype::PrimaryKey => Cell::Key(t.key(r).to_string()),
                    Datatype::ForeignKey { table } => {
                        let fk_cols = t.foreign_key_columns();
                        let slot = fk_cols.iter().position(|&(col, _)| col == c).unwrap();
                        match t.foreign_keys(r)[slot] {
                            Some(p) => Cell::Key(base.table(base.table_id(table).unwrap()).key(p).to_string()),
                            None => Cell::Missing,
                        }
                    }
                    _ => t.cell(r, c).cloned().map_or(Cell::Missing, Cell::Value),
                })
                .collect();
            b.add_row(t.name(), cells).unwrap();
        }
    }
    for (i, row) in task.rows.iter().enumerate() {
        b.add_row(
            &task_schema.name,
            vec![
                Cell::Key(i.to_string()),
                Cell::Key(row.entity.clone()),
                Cell::Value(Value::Datetime(row.timestamp)),
                Cell::Value(row.label.clone()),
            ],
        )
        .unwrap();
    }
    let plain = b.build().unwrap();
    assert_eq!(plain.num_rows(), attached.num_rows());
    for r in attached.rows() {
        assert_eq!(plain.out_links(r), attached.out_links(r), "{r:?}");
        assert_eq!(plain.in_links(r), attached.in_links(r), "{r:?}");
        assert_eq!(plain.timestamp(r), attached.timestamp(r));
        assert_eq!(
            plain.table(r.table).features(r.row),
            attached.table(r.table).features(r.row)
        );
    }
}

#[test]
fn write_then_load_round_trips() {
    let dir = fixture("shop");
    let file = load_schema_file(&dir.join("schema.txt")).unwrap();
    let task = load_task_table(&file, &dir, "spend").unwrap();
    let db = load("shop").unwrap();
    let out = tempfile::tempdir().unwrap();
    write_database(&db, std::slice::from_ref(&task), out.path()).unwrap();
    let again = load_database(&out.path().join("schema.txt"), out.path()).unwrap();
    let file2 = load_schema_file(&out.path().join("schema.txt")).unwrap();
    assert_eq!(load_task_table(&file2, out.path(), "spend").unwrap(), task);
    for r in db.rows() {
        assert_eq!(db.table(r.table).features(r.row), again.table(r.table).features(r.row));
        assert_eq!(db.out_links(r), again.out_links(r));
        assert_eq!(db.key(r), again.key(r));
    }
}

#[test]
fn coercion_errors_name_the_cell() {
    let schema = SchemaDescriptor::new(vec![TableSchema::new("t")
        .column("id", Datatype::PrimaryKey)
        .column("x", Datatype::Numeric)]);
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("schema.txt"),
        reltrans::store::SchemaFile { schema, tasks: vec![] }.render(),
    )
    .unwrap();
    std::fs::write(tmp.path().join("t.csv"), "id,x\na,1\nb,abc\n").unwrap();
    let err = load_database(&tmp.path().join("schema.txt"), tmp.path()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, StoreError::Coercion { .. }), "{msg}");
    assert!(
        msg.contains("row 2") && msg.contains("`x`") && msg.contains("abc"),
        "{msg}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn out_links_and_in_links_are_dual(seed in 0u64..10_000) {
        let db = random_database(seed, RandomDbSpec::default());
        for r in db.rows() {
            for &p in db.out_links(r) {
                prop_assert!(db.in_links(p).contains(&r));
            }
            for &c in db.in_links(r) {
                prop_assert!(db.out_links(c).contains(&r));
            }
        }
        let out_total: usize = db.rows().map(|r| db.out_links(r).len()).sum();
        let in_total: usize = db.rows().map(|r| db.in_links(r).len()).sum();
        prop_assert_eq!(out_total, in_total);
    }
}
