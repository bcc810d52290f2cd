//! Embeddings, block stack and per-datatype decoders assembled into a
//! single differentiable model.

mod forward;

pub use forward::{
    bce_with_logits, cell_loss, forward, huber, loss, loss_and_grad, predict_probability, CellPrediction,
    EncodedWindow, PredictionOutput, Target, WindowEncoder, HUBER_DELTA,
};

use std::sync::Arc;

use ndarray::Array1;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionError, AttentionKind, BlockParams, NormPlacement};
use crate::codec::{CodecError, CodecWeights, HashingEmbedder, NormStats, TextEmbedder, DEFAULT_TEXT_DIM};
use crate::tensor::{push_mut, push_ref, ParamKind, Real, TensorMut, TensorRef};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("window has no masked cells")]
    NoMaskedCells,
    #[error("{0}")]
    Task(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

/// Which attention sublayers each block contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionFlags {
    pub column: bool,
    pub feature: bool,
    pub neighbor: bool,
    pub full: bool,
}

impl Default for AttentionFlags {
    fn default() -> Self {
        AttentionFlags {
            column: true,
            feature: true,
            neighbor: true,
            full: true,
        }
    }
}

impl AttentionFlags {
    pub fn without(kind: AttentionKind) -> Self {
        let mut f = AttentionFlags::default();
        f.set(kind, false);
        f
    }

    pub fn enabled(&self) -> Vec<AttentionKind> {
        AttentionKind::ALL.into_iter().filter(|&k| self.get(k)).collect()
    }

    pub fn get(&self, kind: AttentionKind) -> bool {
        match kind {
            AttentionKind::Column => self.column,
            AttentionKind::Feature => self.feature,
            AttentionKind::Neighbor => self.neighbor,
            AttentionKind::Full => self.full,
        }
    }

    pub fn set(&mut self, kind: AttentionKind, on: bool) {
        match kind {
            AttentionKind::Column => self.column = on,
            AttentionKind::Feature => self.feature = on,
            AttentionKind::Neighbor => self.neighbor = on,
            AttentionKind::Full => self.full = on,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub d_text: usize,
    pub attention: AttentionFlags,
    pub norm: NormPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            d_model: 64,
            heads: 4,
            mlp_hidden: 256,
            d_text: DEFAULT_TEXT_DIM,
            attention: AttentionFlags::default(),
            norm: NormPlacement::Post,
        }
    }
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        ModelConfig {
            layers: 12,
            d_model: 256,
            heads: 8,
            mlp_hidden: 1024,
            ..ModelConfig::default()
        }
    }

    /// A config of the given width with the MLP hidden size at `4d`.
    pub fn sized(layers: usize, d_model: usize, heads: usize) -> Self {
        ModelConfig {
            layers,
            d_model,
            heads,
            mlp_hidden: 4 * d_model,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.mlp_hidden == 0 || self.d_text == 0 {
            return bad("layers, d_model, heads, mlp_hidden and d_text must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.attention.enabled().is_empty() {
            return bad("at least one attention type must be enabled".into());
        }
        Ok(())
    }
}

/// Linear read-out `h . w + b` for one datatype.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<F> {
    pub w: Array1<F>,
    pub b: Array1<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub codec: CodecWeights<F>,
    pub blocks: Vec<BlockParams<F>>,
    /// Numeric then boolean.
    pub decoders: [Decoder<F>; 2],
}

const VALUE_NAMES: [&str; 4] = ["numeric", "boolean", "datetime", "text"];

impl<F: Real> ModelParams<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let kinds = cfg.attention.enabled();
        let dec = || Decoder {
            w: Array1::zeros(d),
            b: Array1::zeros(1),
        };
        ModelParams {
            codec: CodecWeights::zeros(d, cfg.d_text),
            blocks: (0..cfg.layers)
                .map(|_| BlockParams::zeros(d, cfg.mlp_hidden, &kinds))
                .collect(),
            decoders: [dec(), dec()],
        }
    }

    /// Random initialization: unit-variance embedding projections, `1/sqrt(fan_in)`
    /// for block and decoder weights, unit gains, zero decoder biases.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut p = ModelParams::zeros(cfg);
        let d = cfg.d_model as f64;
        let h = cfg.mlp_hidden as f64;
        for t in p.tensors_mut() {
            let std = match t.kind {
                ParamKind::Gain => {
                    t.data.fill(F::one());
                    continue;
                }
                ParamKind::Bias => continue,
                ParamKind::Mask => 1.0,
                ParamKind::Weight if t.name.starts_with("embed.") => 1.0,
                ParamKind::Weight if t.name.ends_with("w_down") => 1.0 / h.sqrt(),
                ParamKind::Weight => 1.0 / d.sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("valid std");
            for v in t.data.iter_mut() {
                *v = F::of_f64(normal.sample(rng));
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros_shaped(self)
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, F>> {
        let mut out = Vec::new();
        for (i, w) in self.codec.value_proj.iter().enumerate() {
            push_ref(
                &mut out,
                format!("embed.value.{}", VALUE_NAMES[i]),
                ParamKind::Weight,
                w,
            );
        }
        push_ref(
            &mut out,
            "embed.schema".into(),
            ParamKind::Weight,
            &self.codec.schema_proj,
        );
        for (i, m) in self.codec.mask_vec.iter().enumerate() {
            push_ref(&mut out, format!("embed.mask.{}", VALUE_NAMES[i]), ParamKind::Mask, m);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.tensors(&format!("block{i}"), &mut out);
        }
        for (i, d) in self.decoders.iter().enumerate() {
            push_ref(
                &mut out,
                format!("decoder.{}.w", VALUE_NAMES[i]),
                ParamKind::Weight,
                &d.w,
            );
            push_ref(&mut out, format!("decoder.{}.b", VALUE_NAMES[i]), ParamKind::Bias, &d.b);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, F>> {
        let mut out = Vec::new();
        for (i, w) in self.codec.value_proj.iter_mut().enumerate() {
            push_mut(
                &mut out,
                format!("embed.value.{}", VALUE_NAMES[i]),
                ParamKind::Weight,
                w,
            );
        }
        push_mut(
            &mut out,
            "embed.schema".into(),
            ParamKind::Weight,
            &mut self.codec.schema_proj,
        );
        for (i, m) in self.codec.mask_vec.iter_mut().enumerate() {
            push_mut(&mut out, format!("embed.mask.{}", VALUE_NAMES[i]), ParamKind::Mask, m);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.tensors_mut(&format!("block{i}"), &mut out);
        }
        for (i, d) in self.decoders.iter_mut().enumerate() {
            push_mut(
                &mut out,
                format!("decoder.{}.w", VALUE_NAMES[i]),
                ParamKind::Weight,
                &mut d.w,
            );
            push_mut(
                &mut out,
                format!("decoder.{}.b", VALUE_NAMES[i]),
                ParamKind::Bias,
                &mut d.b,
            );
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Same tensors converted to another precision.
    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::zeros_shaped(self);
        for (src, dst) in self.tensors().into_iter().zip(out.tensors_mut()) {
            for (s, d) in src.data.iter().zip(dst.data.iter_mut()) {
                *d = G::of_f64(s.as_f64());
            }
        }
        out
    }

    fn zeros_shaped<G: Real>(other: &ModelParams<G>) -> Self {
        let d = other.codec.schema_proj.ncols();
        let d_text = other.codec.schema_proj.nrows();
        ModelParams {
            codec: CodecWeights::zeros(d, d_text),
            blocks: other
                .blocks
                .iter()
                .map(|b| {
                    let kinds: Vec<_> = b.sublayers.iter().map(|s| s.kind).collect();
                    BlockParams::zeros(d, b.mlp.w_up.ncols(), &kinds)
                })
                .collect(),
            decoders: [0, 1].map(|_| Decoder {
                w: Array1::zeros(d),
                b: Array1::zeros(1),
            }),
        }
    }

    pub fn add_assign(&mut self, other: &ModelParams<F>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += *y;
            }
        }
    }
}

/// Everything needed to run the model: configuration, parameters, the
/// training-split normalization statistics and the text embedder.
#[derive(Clone)]
pub struct ModelState<F> {
    pub config: ModelConfig,
    pub params: ModelParams<F>,
    pub stats: Arc<NormStats>,
    pub embedder: Arc<dyn TextEmbedder>,
}

impl<F: Real> std::fmt::Debug for ModelState<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelState")
            .field("config", &self.config)
            .field("params", &self.params.param_count())
            .field("embedder", &self.embedder.id())
            .finish()
    }
}

impl<F: Real> ModelState<F> {
    pub fn new(config: ModelConfig, stats: NormStats, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        Ok(ModelState {
            embedder: Arc::new(HashingEmbedder::new(config.d_text)),
            config,
            params,
            stats: Arc::new(stats),
        })
    }

    pub fn cast<G: Real>(&self) -> ModelState<G> {
        ModelState {
            config: self.config.clone(),
            params: self.params.cast(),
            stats: self.stats.clone(),
            embedder: self.embedder.clone(),
        }
    }

    pub fn encoder(&self) -> WindowEncoder {
        WindowEncoder::new(self.stats.clone(), self.embedder.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn default_and_full_scale_configs_validate() {
        ModelConfig::default().validate().unwrap();
        let p = ModelConfig::full_scale();
        p.validate().unwrap();
        assert_eq!((p.layers, p.d_model, p.heads, p.mlp_hidden), (12, 256, 8, 1024));
        let bad = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = ModelConfig {
            d_text: 16,
            ..ModelConfig::sized(2, 8, 2)
        };
        let p = ModelParams::<f32>::zeros(&cfg);
        let (d, t, h) = (8, 16, 32);
        let embed = 3 * d + t * d + t * d + 2 * d;
        let block = 4 * (4 * d * d + d) + 3 * d * h + d;
        let dec = 2 * (d + 1);
        assert_eq!(p.param_count(), embed + 2 * block + dec);
    }

    #[test]
    fn names_are_unique_and_cast_round_trips() {
        let cfg = ModelConfig {
            d_text: 16,
            ..ModelConfig::sized(2, 8, 2)
        };
        let p = ModelParams::<f32>::init(&cfg, &mut rng::stream(1, &[]));
        let names: std::collections::BTreeSet<_> = p.tensors().into_iter().map(|t| t.name).collect();
        assert_eq!(names.len(), p.tensors().len());
        assert_eq!(p.cast::<f64>().cast::<f32>(), p);
        assert!(p
            .tensors()
            .iter()
            .filter(|t| t.kind == ParamKind::Gain)
            .all(|t| t.data.iter().all(|&v| v == 1.0)));
    }
}
