use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Declared type of a schema column.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Datatype {
    Numeric,
    Boolean,
    Datetime,
    Text,
    PrimaryKey,
    ForeignKey { table: String },
}

impl Datatype {
    /// The value type carried by a feature column, `None` for key columns.
    pub fn feature_type(&self) -> Option<FeatureType> {
        match self {
            Datatype::Numeric => Some(FeatureType::Numeric),
            Datatype::Boolean => Some(FeatureType::Boolean),
            Datatype::Datetime => Some(FeatureType::Datetime),
            Datatype::Text => Some(FeatureType::Text),
            Datatype::PrimaryKey | Datatype::ForeignKey { .. } => None,
        }
    }

    pub fn is_key(&self) -> bool {
        self.feature_type().is_none()
    }
}

impl fmt::Display for Datatype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Datatype::Numeric => f.write_str("numeric"),
            Datatype::Boolean => f.write_str("boolean"),
            Datatype::Datetime => f.write_str("datetime"),
            Datatype::Text => f.write_str("text"),
            Datatype::PrimaryKey => f.write_str("pk"),
            Datatype::ForeignKey { table } => write!(f, "fk -> {table}"),
        }
    }
}

/// Value type of a tokenizable (non-key) cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureType {
    Numeric,
    Boolean,
    Datetime,
    Text,
}

impl FeatureType {
    pub const ALL: [FeatureType; 4] = [
        FeatureType::Numeric,
        FeatureType::Boolean,
        FeatureType::Datetime,
        FeatureType::Text,
    ];

    /// Only numeric and boolean cells are ever masked and decoded.
    pub fn is_maskable(self) -> bool {
        matches!(self, FeatureType::Numeric | FeatureType::Boolean)
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureType::Numeric => "numeric",
            FeatureType::Boolean => "boolean",
            FeatureType::Datetime => "datetime",
            FeatureType::Text => "text",
        }
    }
}

/// A non-missing feature value. Datetimes are seconds since the Unix epoch.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Numeric(f64),
    Boolean(bool),
    Datetime(i64),
    Text(Arc<str>),
}

impl Value {
    pub fn feature_type(&self) -> FeatureType {
        match self {
            Value::Numeric(_) => FeatureType::Numeric,
            Value::Boolean(_) => FeatureType::Boolean,
            Value::Datetime(_) => FeatureType::Datetime,
            Value::Text(_) => FeatureType::Text,
        }
    }

    /// Scalar view used for statistics: booleans map to {0, 1}, datetimes to seconds.
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Numeric(v) => Some(*v),
            Value::Boolean(b) => Some(if *b { 1.0 } else { 0.0 }),
            Value::Datetime(s) => Some(*s as f64),
            Value::Text(_) => None,
        }
    }

    pub fn text(s: &str) -> Value {
        Value::Text(Arc::from(s))
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Numeric(v) => write!(f, "{v}"),
            Value::Boolean(b) => write!(f, "{b}"),
            Value::Datetime(s) => f.write_str(&super::format_datetime(*s)),
            Value::Text(t) => f.write_str(t),
        }
    }
}

/// Index of a table inside a [`RelationalDatabase`](super::RelationalDatabase).
pub type TableId = u32;

/// Handle to one row of one table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowRef {
    pub table: TableId,
    pub row: u32,
}

impl RowRef {
    pub fn new(table: TableId, row: u32) -> Self {
        RowRef { table, row }
    }
}

impl fmt::Display for RowRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.table, self.row)
    }
}

/// Handle to one schema column; `column` indexes the table's declared columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table: TableId,
    pub column: u32,
}

impl ColumnRef {
    pub fn new(table: TableId, column: u32) -> Self {
        ColumnRef { table, column }
    }
}

/// Temporal partition of task (or autocomplete) rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Assigns a timestamp to a split given monotone cutoffs.
    pub fn of_timestamp(ts: i64, train_cutoff: i64, val_cutoff: i64) -> Split {
        if ts <= train_cutoff {
            Split::Train
        } else if ts <= val_cutoff {
            Split::Val
        } else {
            Split::Test
        }
    }
}

impl std::str::FromStr for Split {
    type Err = super::StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(super::StoreError::UnknownSplit(other.to_string())),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
