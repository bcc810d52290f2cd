//! Cell encoding: datatype-specific value normalization, text embeddings and
//! schema phrases.
//!
//! A token's input embedding is `W_d r + W e(phrase)` for visible cells and
//! `m_d + W e(phrase)` for masked ones, where `r` comes from
//! [`encode_value`], `e` is the [`TextEmbedder`] and the phrase is
//! `"<column> of <table>"`. The learned weights live in [`CodecWeights`];
//! the embedding arithmetic itself runs inside the model's forward pass.

mod embedder;
mod stats;

pub use embedder::{HashingEmbedder, TextEmbedder, DEFAULT_TEXT_DIM};
pub use stats::{fit_norm_stats, ColumnEntry, ColumnStats, NormStats, CLIP, STD_FLOOR};

use ndarray::{Array1, Array2};

use crate::sampler::{CellToken, ContextWindow};
use crate::store::{FeatureType, RelationalDatabase, Value};
use crate::tensor::Real;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("datatype mismatch: {0}")]
    DatatypeMismatch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Value representation `r` of one cell before projection.
#[derive(Clone, Debug, PartialEq)]
pub enum RawValue {
    Scalar(f64),
    Text(Vec<f32>),
    /// Masked cell; the mask vector replaces the value embedding.
    Masked,
}

/// Normalized scalar of a numeric/boolean/datetime value, ignoring masking.
pub fn normalized_scalar(token: &CellToken, stats: &NormStats) -> Result<f64, CodecError> {
    match &token.value {
        Value::Numeric(_) | Value::Boolean(_) => {
            let entry = stats
                .get(token.column)
                .ok_or_else(|| CodecError::DatatypeMismatch(format!("no statistics for column {:?}", token.column)))?;
            if entry.kind != token.value.feature_type() {
                return Err(CodecError::DatatypeMismatch(format!(
                    "column `{}.{}` is {} but the cell holds a {} value",
                    entry.table,
                    entry.column,
                    entry.kind.name(),
                    token.value.feature_type().name()
                )));
            }
            Ok(entry.stats.normalize(token.value.as_scalar().expect("scalar")))
        }
        Value::Datetime(s) => Ok(stats.datetime.normalize(*s as f64)),
        Value::Text(_) => Err(CodecError::DatatypeMismatch(
            "text cells have no scalar representation".into(),
        )),
    }
}

pub fn encode_value(token: &CellToken, stats: &NormStats, embedder: &dyn TextEmbedder) -> Result<RawValue, CodecError> {
    if token.is_masked {
        if !token.feature_type().is_maskable() {
            return Err(CodecError::DatatypeMismatch(format!(
                "{} cells cannot be masked",
                token.feature_type().name()
            )));
        }
        return Ok(RawValue::Masked);
    }
    match &token.value {
        Value::Text(t) => Ok(RawValue::Text(embedder.embed(t))),
        _ => normalized_scalar(token, stats).map(RawValue::Scalar),
    }
}

/// `"<column> of <table>"`, with any renaming carried by the window applied.
pub fn schema_phrase(db: &RelationalDatabase, window: &ContextWindow, token: &CellToken) -> String {
    let column = db.column_name(token.column);
    let table = db.table_name(token.table());
    match &window.renames {
        Some(map) => format!(
            "{} of {}",
            map.get(column).map(String::as_str).unwrap_or(column),
            map.get(table).map(String::as_str).unwrap_or(table)
        ),
        None => format!("{column} of {table}"),
    }
}

/// Index of a datatype in per-datatype parameter arrays.
pub fn type_slot(kind: FeatureType) -> usize {
    match kind {
        FeatureType::Numeric => 0,
        FeatureType::Boolean => 1,
        FeatureType::Datetime => 2,
        FeatureType::Text => 3,
    }
}

/// Learned embedding weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecWeights<F> {
    /// Value projections `W_d`, indexed by [`type_slot`]: `1 x d` for the
    /// scalar types, `d_text x d` for text.
    pub value_proj: [Array2<F>; 4],
    /// Shared schema-phrase projection `W`, `d_text x d`.
    pub schema_proj: Array2<F>,
    /// Mask vectors `m_d` for numeric (0) and boolean (1) cells.
    pub mask_vec: [Array1<F>; 2],
}

impl<F: Real> CodecWeights<F> {
    pub fn zeros(d_model: usize, d_text: usize) -> Self {
        CodecWeights {
            value_proj: [
                Array2::zeros((1, d_model)),
                Array2::zeros((1, d_model)),
                Array2::zeros((1, d_model)),
                Array2::zeros((d_text, d_model)),
            ],
            schema_proj: Array2::zeros((d_text, d_model)),
            mask_vec: [Array1::zeros(d_model), Array1::zeros(d_model)],
        }
    }

    pub fn check_shapes(&self, d_model: usize, d_text: usize) -> Result<(), CodecError> {
        let expect = |name: &str, got: &[usize], want: &[usize]| {
            if got == want {
                Ok(())
            } else {
                Err(CodecError::Shape(format!("{name}: expected {want:?}, got {got:?}")))
            }
        };
        for (i, w) in self.value_proj.iter().enumerate() {
            let rows = if i == 3 { d_text } else { 1 };
            expect("value_proj", w.shape(), &[rows, d_model])?;
        }
        expect("schema_proj", self.schema_proj.shape(), &[d_text, d_model])?;
        for m in &self.mask_vec {
            expect("mask_vec", m.shape(), &[d_model])?;
        }
        Ok(())
    }

    /// Embedding of one token given its already-embedded schema phrase.
    pub fn embed_token(&self, kind: FeatureType, raw: &RawValue, schema_vec: &[f32]) -> Result<Array1<F>, CodecError> {
        if schema_vec.len() != self.schema_proj.nrows() {
            return Err(CodecError::Shape(format!(
                "schema vector has {} entries, projection expects {}",
                schema_vec.len(),
                self.schema_proj.nrows()
            )));
        }
        let phrase = Array1::from_iter(schema_vec.iter().map(|&v| F::of_f32(v)));
        let mut x = phrase.dot(&self.schema_proj);
        match raw {
            RawValue::Masked => {
                if !kind.is_maskable() {
                    return Err(CodecError::DatatypeMismatch(format!(
                        "{} cells cannot be masked",
                        kind.name()
                    )));
                }
                x += &self.mask_vec[type_slot(kind)];
            }
            RawValue::Scalar(r) => {
                if kind == FeatureType::Text {
                    return Err(CodecError::DatatypeMismatch("text cell with scalar value".into()));
                }
                x.scaled_add(F::of_f64(*r), &self.value_proj[type_slot(kind)].row(0));
            }
            RawValue::Text(v) => {
                if kind != FeatureType::Text || v.len() != self.value_proj[3].nrows() {
                    return Err(CodecError::Shape("text value does not match text projection".into()));
                }
                let t = Array1::from_iter(v.iter().map(|&e| F::of_f32(e)));
                x += &t.dot(&self.value_proj[3]);
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::store::{Cell, ColumnRef, DatabaseBuilder, Datatype, RowRef, SchemaDescriptor, TableSchema};

    fn measurements() -> RelationalDatabase {
        let schema = SchemaDescriptor::new(vec![TableSchema::new("m")
            .column("id", Datatype::PrimaryKey)
            .column("x", Datatype::Numeric)
            .column("k", Datatype::Numeric)
            .column("flag", Datatype::Boolean)
            .timestamp_column("at")]);
        let mut b = DatabaseBuilder::new(schema).unwrap();
        let rows: [(f64, bool, i64); 4] = [(1.0, true, 1), (2.0, false, 2), (3.0, true, 3), (100.0, false, 10)];
        for (i, (x, flag, at)) in rows.into_iter().enumerate() {
            b.add_row(
                "m",
                vec![
                    Cell::Key(i.to_string()),
                    Cell::Value(Value::Numeric(x)),
                    Cell::Value(Value::Numeric(5.0)),
                    Cell::Value(Value::Boolean(flag)),
                    Cell::Value(Value::Datetime(at)),
                ],
            )
            .unwrap();
        }
        b.build().unwrap()
    }

    fn token(value: Value, column: ColumnRef) -> CellToken {
        CellToken {
            value,
            column,
            row: RowRef::new(column.table, 0),
            out_links: Arc::from(Vec::new()),
            is_masked: false,
        }
    }

    fn stats_with(col: ColumnRef, kind: FeatureType, mean: f64, std: f64) -> NormStats {
        let mut columns = std::collections::BTreeMap::new();
        columns.insert(
            col,
            ColumnEntry {
                table: "t".into(),
                column: "c".into(),
                kind,
                stats: ColumnStats { mean, std },
            },
        );
        NormStats {
            columns,
            datetime: ColumnStats::UNIT,
        }
    }

    #[test]
    fn fits_population_statistics_on_train_rows() {
        let db = measurements();
        let stats = fit_norm_stats(&db, 5);
        let x = stats.get(ColumnRef::new(0, 1)).unwrap().stats;
        // Independent recomputation: sqrt(((1-2)^2 + 0 + (3-2)^2) / 3).
        let oracle_sd = (2.0f64 / 3.0).sqrt();
        assert!((x.mean - 2.0).abs() < 1e-12);
        assert!((x.std - oracle_sd).abs() < 1e-12);
        assert!((x.std - 0.816_496_6).abs() < 1e-7);

        let k = stats.get(ColumnRef::new(0, 2)).unwrap().stats;
        assert_eq!((k.mean, k.std), (5.0, 0.0));
        let flag = stats.get(ColumnRef::new(0, 3)).unwrap().stats;
        assert!((flag.mean - 2.0 / 3.0).abs() < 1e-12);
        let dt = stats.datetime;
        assert!((dt.mean - 2.0).abs() < 1e-12);
    }

    #[test]
    fn including_future_rows_changes_statistics() {
        let db = measurements();
        let train = fit_norm_stats(&db, 5);
        let leaky = fit_norm_stats(&db, 100);
        assert_ne!(train.get(ColumnRef::new(0, 1)), leaky.get(ColumnRef::new(0, 1)));
        assert_ne!(train.datetime, leaky.datetime);
    }

    #[test]
    fn boolean_mean_is_fraction_true() {
        let schema = SchemaDescriptor::new(vec![TableSchema::new("b")
            .column("id", Datatype::PrimaryKey)
            .column("f", Datatype::Boolean)]);
        let mut b = DatabaseBuilder::new(schema).unwrap();
        for i in 0..10 {
            b.add_row("b", vec![Cell::Key(i.to_string()), Cell::Value(Value::Boolean(i < 7))])
                .unwrap();
        }
        let stats = fit_norm_stats(&b.build().unwrap(), 0);
        let s = stats.get(ColumnRef::new(0, 1)).unwrap().stats;
        assert!((s.mean - 0.7).abs() < 1e-12);
        assert!((s.std - (0.21f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn encodes_numeric_and_boolean_values() {
        let col = ColumnRef::new(0, 1);
        let e = HashingEmbedder::new(8);
        let stats = stats_with(col, FeatureType::Numeric, 5.0, 2.0);
        let enc = |v: f64| encode_value(&token(Value::Numeric(v), col), &stats, &e).unwrap();
        assert_eq!(enc(5.0), RawValue::Scalar(0.0));
        assert_eq!(enc(7.0), RawValue::Scalar(1.0));
        assert_eq!(enc(1e9), RawValue::Scalar(CLIP));

        let sd = 0.21f64.sqrt();
        let stats = stats_with(col, FeatureType::Boolean, 0.7, sd);
        match encode_value(&token(Value::Boolean(true), col), &stats, &e).unwrap() {
            RawValue::Scalar(r) => {
                assert!((r - 0.3 / sd).abs() < 1e-12);
                assert!((r - 0.655).abs() < 1e-3);
            }
            other => panic!("{other:?}"),
        }
        // Constant column: std 0 is floored, value maps to 0.
        let stats = stats_with(col, FeatureType::Numeric, 5.0, 0.0);
        assert_eq!(enc_with(&stats, 5.0, col), RawValue::Scalar(0.0));
    }

    fn enc_with(stats: &NormStats, v: f64, col: ColumnRef) -> RawValue {
        encode_value(&token(Value::Numeric(v), col), stats, &HashingEmbedder::new(4)).unwrap()
    }

    #[test]
    fn datatype_mismatch_is_reported() {
        let col = ColumnRef::new(0, 1);
        let stats = stats_with(col, FeatureType::Boolean, 0.5, 0.5);
        let err = encode_value(&token(Value::Numeric(1.0), col), &stats, &HashingEmbedder::new(4));
        assert!(matches!(err, Err(CodecError::DatatypeMismatch(_))));
        let mut t = token(Value::text("x"), col);
        t.is_masked = true;
        assert!(encode_value(&t, &stats, &HashingEmbedder::new(4)).is_err());
    }

    #[test]
    fn embed_token_properties() {
        let phrase = HashingEmbedder::new(16).embed("age of user");
        let zero = CodecWeights::<f64>::zeros(6, 16);
        let x = zero
            .embed_token(FeatureType::Numeric, &RawValue::Scalar(3.0), &phrase)
            .unwrap();
        assert!(x.iter().all(|&v| v == 0.0));

        let mut w = CodecWeights::<f64>::zeros(6, 16);
        for (i, v) in w.schema_proj.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        for (i, v) in w.value_proj[0].iter_mut().enumerate() {
            *v = 1.0 + i as f64;
        }
        w.mask_vec[0].fill(0.25);
        let masked = w.embed_token(FeatureType::Numeric, &RawValue::Masked, &phrase).unwrap();
        let a = w
            .embed_token(FeatureType::Numeric, &RawValue::Scalar(1.0), &phrase)
            .unwrap();
        let b = w
            .embed_token(FeatureType::Numeric, &RawValue::Scalar(1.0), &phrase)
            .unwrap();
        assert_eq!(a, b);
        let base = phrase_proj(&w, &phrase);
        for j in 0..6 {
            assert!((masked[j] - (base[j] + 0.25)).abs() < 1e-12);
            assert!((a[j] - (base[j] + 1.0 + j as f64)).abs() < 1e-12);
        }
        assert!(w.embed_token(FeatureType::Text, &RawValue::Masked, &phrase).is_err());
        assert!(w
            .embed_token(FeatureType::Numeric, &RawValue::Masked, &phrase[..3])
            .is_err());
    }

    fn phrase_proj(w: &CodecWeights<f64>, phrase: &[f32]) -> Vec<f64> {
        (0..w.schema_proj.ncols())
            .map(|j| {
                phrase
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| f64::from(p) * w.schema_proj[[i, j]])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn schema_phrase_uses_renames() {
        let db = crate::fixtures::shop();
        let seed = crate::store::Seed {
            row: RowRef::new(1, 0),
            target: db.column_ref("orders", "price").unwrap(),
        };
        let mut w = crate::sampler::sample_context(&db, &seed, &Default::default()).unwrap();
        assert_eq!(schema_phrase(&db, &w, &w.tokens[0].clone()), "price of orders");
        let mut map = crate::sampler::NameMap::new();
        map.insert("price".into(), "users".into());
        map.insert("orders".into(), "age".into());
        w.renames = Some(Arc::new(map));
        assert_eq!(schema_phrase(&db, &w, &w.tokens[0].clone()), "users of age");
    }
}
