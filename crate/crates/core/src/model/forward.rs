use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use ndarray::Array2;

use super::{ModelError, ModelParams, ModelState};
use crate::attention::{block_backward, block_forward, build_masks, BlockCache, MaskSet};
use crate::codec::{encode_value, normalized_scalar, schema_phrase, type_slot, NormStats, RawValue, TextEmbedder};
use crate::sampler::ContextWindow;
use crate::store::{FeatureType, RelationalDatabase};
use crate::tensor::{add_at_b, sigmoid, Real};

pub const HUBER_DELTA: f64 = 1.0;

/// Ground truth for one masked cell, in normalized space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub token: usize,
    pub kind: FeatureType,
    pub value: f64,
}

/// A context window turned into model inputs: per-token raw values and
/// schema-phrase embeddings, the four masks and the masked-cell targets.
#[derive(Clone, Debug)]
pub struct EncodedWindow {
    pub kinds: Vec<FeatureType>,
    pub values: Vec<RawValue>,
    pub schema: Vec<Arc<[f32]>>,
    pub masks: MaskSet,
    pub targets: Vec<Target>,
    /// Index into `targets` of the seed's own target cell.
    pub seed_target: Option<usize>,
    pub task: Option<Arc<str>>,
}

impl EncodedWindow {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// Encodes windows against fixed statistics and embedder, caching
/// schema-phrase embeddings.
pub struct WindowEncoder {
    stats: Arc<NormStats>,
    embedder: Arc<dyn TextEmbedder>,
    phrases: RwLock<HashMap<String, Arc<[f32]>>>,
}

impl WindowEncoder {
    pub fn new(stats: Arc<NormStats>, embedder: Arc<dyn TextEmbedder>) -> Self {
        WindowEncoder {
            stats,
            embedder,
            phrases: RwLock::new(HashMap::new()),
        }
    }

    fn phrase(&self, text: String) -> Arc<[f32]> {
        if let Some(v) = self.phrases.read().expect("phrase cache").get(&text) {
            return v.clone();
        }
        let v: Arc<[f32]> = self.embedder.embed(&text).into();
        self.phrases.write().expect("phrase cache").insert(text, v.clone());
        v
    }

    pub fn encode(
        &self,
        db: &RelationalDatabase,
        window: &ContextWindow,
        task: Option<&str>,
    ) -> Result<EncodedWindow, ModelError> {
        let n = window.len();
        let mut kinds = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        let mut schema = Vec::with_capacity(n);
        let mut targets = Vec::new();
        let mut seed_target = None;
        for (i, tok) in window.tokens.iter().enumerate() {
            let kind = tok.feature_type();
            kinds.push(kind);
            values.push(encode_value(tok, &self.stats, self.embedder.as_ref())?);
            schema.push(self.phrase(schema_phrase(db, window, tok)));
            if tok.is_masked {
                if tok.row == window.seed && tok.column == window.target {
                    seed_target = Some(targets.len());
                }
                targets.push(Target {
                    token: i,
                    kind,
                    value: normalized_scalar(tok, &self.stats)?,
                });
            }
        }
        Ok(EncodedWindow {
            kinds,
            values,
            schema,
            masks: build_masks(window),
            targets,
            seed_target,
            task: task.map(Arc::from),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellPrediction<F> {
    pub token: usize,
    pub kind: FeatureType,
    /// Normalized regression value or boolean logit.
    pub value: F,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput<F> {
    pub cells: Vec<CellPrediction<F>>,
    pub seed_target: Option<usize>,
    pub task: Option<Arc<str>>,
}

impl<F: Real> PredictionOutput<F> {
    /// Output for the seed's target cell.
    pub fn seed_value(&self) -> Option<F> {
        self.seed_target.map(|i| self.cells[i].value)
    }
}

fn decoder_slot(kind: FeatureType) -> Result<usize, ModelError> {
    match kind {
        FeatureType::Numeric => Ok(0),
        FeatureType::Boolean => Ok(1),
        other => Err(ModelError::Task(format!("no decoder for {} cells", other.name()))),
    }
}

fn embed<F: Real>(p: &ModelParams<F>, enc: &EncodedWindow) -> (Array2<F>, Array2<F>) {
    let d_text = p.codec.schema_proj.nrows();
    let s = Array2::from_shape_fn((enc.len(), d_text), |(i, j)| F::of_f32(enc.schema[i][j]));
    let mut x = s.dot(&p.codec.schema_proj);
    for (i, (raw, &kind)) in enc.values.iter().zip(&enc.kinds).enumerate() {
        let mut row = x.row_mut(i);
        match raw {
            RawValue::Masked => row += &p.codec.mask_vec[type_slot(kind)],
            RawValue::Scalar(r) => row.scaled_add(F::of_f64(*r), &p.codec.value_proj[type_slot(kind)].row(0)),
            RawValue::Text(t) => {
                for (j, &v) in t.iter().enumerate() {
                    if v != 0.0 {
                        row.scaled_add(F::of_f32(v), &p.codec.value_proj[3].row(j));
                    }
                }
            }
        }
    }
    (x, s)
}

fn embed_backward<F: Real>(enc: &EncodedWindow, s: &Array2<F>, dx: &Array2<F>, g: &mut ModelParams<F>) {
    add_at_b(s.view(), dx.view(), g.codec.schema_proj.view_mut());
    for (i, (raw, &kind)) in enc.values.iter().zip(&enc.kinds).enumerate() {
        let drow = dx.row(i);
        match raw {
            RawValue::Masked => g.codec.mask_vec[type_slot(kind)] += &drow,
            RawValue::Scalar(r) => g.codec.value_proj[type_slot(kind)]
                .row_mut(0)
                .scaled_add(F::of_f64(*r), &drow),
            RawValue::Text(t) => {
                for (j, &v) in t.iter().enumerate() {
                    if v != 0.0 {
                        g.codec.value_proj[3].row_mut(j).scaled_add(F::of_f32(v), &drow);
                    }
                }
            }
        }
    }
}

struct ForwardCache<F> {
    schema: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    hidden: Array2<F>,
}

fn forward_cached<F: Real>(
    state: &ModelState<F>,
    enc: &EncodedWindow,
) -> Result<(PredictionOutput<F>, ForwardCache<F>), ModelError> {
    let p = &state.params;
    let cfg = &state.config;
    let (mut x, schema) = embed(p, enc);
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let (y, c) = block_forward(&x, b, &enc.masks, cfg.heads, cfg.norm);
        x = y;
        blocks.push(c);
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite("activations"));
    }
    let mut cells = Vec::with_capacity(enc.targets.len());
    for t in &enc.targets {
        let dec = &p.decoders[decoder_slot(t.kind)?];
        let value = x.row(t.token).dot(&dec.w) + dec.b[0];
        cells.push(CellPrediction {
            token: t.token,
            kind: t.kind,
            value,
        });
    }
    let out = PredictionOutput {
        cells,
        seed_target: enc.seed_target,
        task: enc.task.clone(),
    };
    Ok((
        out,
        ForwardCache {
            schema,
            blocks,
            hidden: x,
        },
    ))
}

/// Predictions for every masked cell of the window.
pub fn forward<F: Real>(state: &ModelState<F>, enc: &EncodedWindow) -> Result<PredictionOutput<F>, ModelError> {
    forward_cached(state, enc).map(|(o, _)| o)
}

/// Huber loss and its derivative with respect to the prediction.
pub fn huber(pred: f64, target: f64) -> (f64, f64) {
    let e = pred - target;
    if e.abs() <= HUBER_DELTA {
        (0.5 * e * e, e)
    } else {
        (HUBER_DELTA * (e.abs() - 0.5 * HUBER_DELTA), HUBER_DELTA * e.signum())
    }
}

/// Binary cross-entropy of a logit against label `y` and its derivative.
pub fn bce_with_logits(logit: f64, y: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - y)
}

/// Loss of one cell: Huber for numeric, BCE against `1{r > 0}` for boolean.
pub fn cell_loss(kind: FeatureType, pred: f64, target: f64) -> Result<(f64, f64), ModelError> {
    match kind {
        FeatureType::Numeric => Ok(huber(pred, target)),
        FeatureType::Boolean => Ok(bce_with_logits(pred, if target > 0.0 { 1.0 } else { 0.0 })),
        other => Err(ModelError::Task(format!("no loss for {} cells", other.name()))),
    }
}

/// Mean loss over all masked cells of a batch of outputs.
pub fn loss<F: Real>(outputs: &[PredictionOutput<F>], targets: &[&[Target]]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (out, tgt) in outputs.iter().zip(targets) {
        for (c, t) in out.cells.iter().zip(tgt.iter()) {
            total += cell_loss(t.kind, c.value.as_f64(), t.value)?.0;
            count += 1;
        }
    }
    if count == 0 {
        return Err(ModelError::NoMaskedCells);
    }
    Ok(total / count as f64)
}

/// Runs forward and backward for one window. Gradients of `scale * sum of
/// cell losses` are accumulated into `grads`; the unscaled loss sum is returned.
pub fn loss_and_grad<F: Real>(
    state: &ModelState<F>,
    enc: &EncodedWindow,
    scale: f64,
    grads: &mut ModelParams<F>,
) -> Result<f64, ModelError> {
    if enc.targets.is_empty() {
        return Err(ModelError::NoMaskedCells);
    }
    let (out, cache) = forward_cached(state, enc)?;
    let p = &state.params;
    let cfg = &state.config;
    let mut dx = Array2::<F>::zeros(cache.hidden.raw_dim());
    let mut total = 0.0;
    for (c, t) in out.cells.iter().zip(&enc.targets) {
        let (l, dl) = cell_loss(t.kind, c.value.as_f64(), t.value)?;
        total += l;
        let slot = decoder_slot(t.kind)?;
        let g = F::of_f64(dl * scale);
        let dec = &mut grads.decoders[slot];
        dec.w.scaled_add(g, &cache.hidden.row(t.token));
        dec.b[0] += g;
        dx.row_mut(t.token).scaled_add(g, &p.decoders[slot].w);
    }
    if !total.is_finite() {
        return Err(ModelError::NonFinite("loss"));
    }
    for (i, b) in p.blocks.iter().enumerate().rev() {
        dx = block_backward(
            &dx,
            b,
            &enc.masks,
            cfg.heads,
            cfg.norm,
            &cache.blocks[i],
            &mut grads.blocks[i],
        );
    }
    embed_backward(enc, &cache.schema, &dx, grads);
    Ok(total)
}

/// Probability of the positive class for each boolean output cell.
pub fn predict_probability<F: Real>(out: &PredictionOutput<F>) -> Result<Vec<f64>, ModelError> {
    out.cells
        .iter()
        .map(|c| match c.kind {
            FeatureType::Boolean => Ok(sigmoid(c.value.as_f64()).clamp(0.0, 1.0)),
            other => Err(ModelError::Task(format!(
                "probabilities need a boolean task, got {}",
                other.name()
            ))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::fit_norm_stats;
    use crate::model::ModelConfig;
    use crate::rng;
    use crate::sampler::{sample_context, SamplerConfig};
    use crate::store::{ColumnRef, RowRef, Seed, Value};

    fn setup() -> (RelationalDatabase, ContextWindow, ModelState<f64>) {
        let db = crate::fixtures::shop();
        let orders = db.table_id("orders").unwrap();
        let seed = Seed {
            row: RowRef::new(orders, 3),
            target: ColumnRef::new(orders, 2),
        };
        let window = sample_context(
            &db,
            &seed,
            &SamplerConfig {
                context_length: 32,
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = ModelConfig {
            d_text: 32,
            ..ModelConfig::sized(2, 8, 2)
        };
        let state = ModelState::new(cfg, fit_norm_stats(&db, 1000), &mut rng::stream(3, &[])).unwrap();
        (db, window, state)
    }

    #[test]
    fn loss_reference_values() {
        let (l, _) = bce_with_logits(0.0, 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(huber(1.5, 1.5).0, 0.0);
        assert_eq!(huber(3.0, 0.0).0, 2.5);
        assert_eq!(huber(0.5, 0.0), (0.125, 0.5));
        assert!(matches!(loss::<f64>(&[], &[]), Err(ModelError::NoMaskedCells)));
    }

    #[test]
    fn zero_network_outputs_decoder_bias() {
        let (db, window, mut state) = setup();
        for t in state.params.tensors_mut() {
            t.data.fill(0.0);
        }
        state.params.decoders[0].b[0] = 0.375;
        let enc = state.encoder().encode(&db, &window, None).unwrap();
        let out = forward(&state, &enc).unwrap();
        assert_eq!(out.cells.len(), 1);
        assert_eq!(out.seed_value(), Some(0.375));
    }

    #[test]
    fn hidden_value_does_not_reach_prediction() {
        let (db, mut window, state) = setup();
        let before_window = window.clone();
        let enc = state.encoder();
        let before = forward(&state, &enc.encode(&db, &window, None).unwrap()).unwrap();
        let tok = window.tokens.iter_mut().find(|t| t.is_masked).unwrap();
        tok.value = Value::Numeric(-1234.0);
        let e2 = enc.encode(&db, &window, None).unwrap();
        let after = forward(&state, &e2).unwrap();
        assert_eq!(
            before.seed_value().unwrap().to_bits(),
            after.seed_value().unwrap().to_bits()
        );
        assert_ne!(
            e2.targets[0].value,
            enc.encode(&db, &before_window, None).unwrap().targets[0].value
        );
    }

    #[test]
    fn probabilities_require_boolean_outputs() {
        let (db, window, state) = setup();
        let out = forward(&state, &state.encoder().encode(&db, &window, None).unwrap()).unwrap();
        assert!(predict_probability(&out).is_err());
        let b = PredictionOutput {
            cells: vec![
                CellPrediction {
                    token: 0,
                    kind: FeatureType::Boolean,
                    value: 0.0f64,
                },
                CellPrediction {
                    token: 1,
                    kind: FeatureType::Boolean,
                    value: f64::INFINITY,
                },
            ],
            seed_target: Some(0),
            task: None,
        };
        assert_eq!(predict_probability(&b).unwrap(), vec![0.5, 1.0]);
    }
}
