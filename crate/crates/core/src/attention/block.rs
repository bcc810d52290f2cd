use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use super::mha::{attention_backward, attention_forward, AttentionCache, AttentionParams};
use super::{AttentionError, AttentionKind, MaskSet};
use crate::tensor::{a_bt, add_at_b, push_mut, push_ref, sigmoid, ParamKind, Real, TensorMut, TensorRef};

pub const RMS_EPS: f64 = 1e-6;

/// Where the RMS normalization sits relative to each residual sublayer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// `X + Norm(f(X))`.
    #[default]
    Post,
    /// `X + f(Norm(X))`.
    Pre,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSublayer<F> {
    pub kind: AttentionKind,
    pub attn: AttentionParams<F>,
    pub gain: Array1<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<F> {
    pub w_gate: Array2<F>,
    pub w_up: Array2<F>,
    pub w_down: Array2<F>,
    pub gain: Array1<F>,
}

/// One transformer block: the enabled attention sublayers in column,
/// feature, neighbor, full order, then the gated MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<F> {
    pub sublayers: Vec<AttentionSublayer<F>>,
    pub mlp: MlpParams<F>,
}

impl<F: Real> BlockParams<F> {
    pub fn zeros(d: usize, hidden: usize, kinds: &[AttentionKind]) -> Self {
        let mut kinds = kinds.to_vec();
        kinds.sort();
        kinds.dedup();
        BlockParams {
            sublayers: kinds
                .into_iter()
                .map(|kind| AttentionSublayer {
                    kind,
                    attn: AttentionParams::zeros(d),
                    gain: Array1::zeros(d),
                })
                .collect(),
            mlp: MlpParams {
                w_gate: Array2::zeros((d, hidden)),
                w_up: Array2::zeros((d, hidden)),
                w_down: Array2::zeros((hidden, d)),
                gain: Array1::zeros(d),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.gain.len()
    }

    pub fn zeros_like(&self) -> Self {
        let kinds: Vec<_> = self.sublayers.iter().map(|s| s.kind).collect();
        BlockParams::zeros(self.dim(), self.mlp.w_up.ncols(), &kinds)
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, F>>) {
        for s in &self.sublayers {
            let p = format!("{prefix}.{}", s.kind.short_name());
            push_ref(out, format!("{p}.wq"), ParamKind::Weight, &s.attn.wq);
            push_ref(out, format!("{p}.wk"), ParamKind::Weight, &s.attn.wk);
            push_ref(out, format!("{p}.wv"), ParamKind::Weight, &s.attn.wv);
            push_ref(out, format!("{p}.wo"), ParamKind::Weight, &s.attn.wo);
            push_ref(out, format!("{p}.gain"), ParamKind::Gain, &s.gain);
        }
        let m = &self.mlp;
        push_ref(out, format!("{prefix}.mlp.w_gate"), ParamKind::Weight, &m.w_gate);
        push_ref(out, format!("{prefix}.mlp.w_up"), ParamKind::Weight, &m.w_up);
        push_ref(out, format!("{prefix}.mlp.w_down"), ParamKind::Weight, &m.w_down);
        push_ref(out, format!("{prefix}.mlp.gain"), ParamKind::Gain, &m.gain);
    }

    pub fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, F>>) {
        for s in &mut self.sublayers {
            let p = format!("{prefix}.{}", s.kind.short_name());
            push_mut(out, format!("{p}.wq"), ParamKind::Weight, &mut s.attn.wq);
            push_mut(out, format!("{p}.wk"), ParamKind::Weight, &mut s.attn.wk);
            push_mut(out, format!("{p}.wv"), ParamKind::Weight, &mut s.attn.wv);
            push_mut(out, format!("{p}.wo"), ParamKind::Weight, &mut s.attn.wo);
            push_mut(out, format!("{p}.gain"), ParamKind::Gain, &mut s.gain);
        }
        let m = &mut self.mlp;
        push_mut(out, format!("{prefix}.mlp.w_gate"), ParamKind::Weight, &mut m.w_gate);
        push_mut(out, format!("{prefix}.mlp.w_up"), ParamKind::Weight, &mut m.w_up);
        push_mut(out, format!("{prefix}.mlp.w_down"), ParamKind::Weight, &mut m.w_down);
        push_mut(out, format!("{prefix}.mlp.gain"), ParamKind::Gain, &mut m.gain);
    }
}

/// RMS normalization with a learned gain; returns the output and per-row `1/rms`.
pub fn rms_norm<F: Real>(z: &Array2<F>, gain: &Array1<F>) -> (Array2<F>, Vec<F>) {
    let d = F::of_f64(z.ncols() as f64);
    let eps = F::of_f64(RMS_EPS);
    let mut out = z.clone();
    let mut inv = Vec::with_capacity(z.nrows());
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|&v| v * v).sum::<F>() / d;
        let r = F::one() / (ms + eps).sqrt();
        Zip::from(&mut row).and(gain).for_each(|v, &g| *v = *v * r * g);
        inv.push(r);
    }
    (out, inv)
}

/// Backward of [`rms_norm`]; accumulates into `dgain` and returns `dL/dz`.
pub fn rms_norm_backward<F: Real>(
    dout: &Array2<F>,
    z: &Array2<F>,
    gain: &Array1<F>,
    inv: &[F],
    dgain: &mut Array1<F>,
) -> Array2<F> {
    let d = F::of_f64(z.ncols() as f64);
    let mut dz = Array2::zeros(z.raw_dim());
    for (i, ((dorow, zrow), mut dzrow)) in dout.rows().into_iter().zip(z.rows()).zip(dz.rows_mut()).enumerate() {
        let r = inv[i];
        let mut dot = F::zero();
        for c in 0..zrow.len() {
            dgain[c] += dorow[c] * zrow[c] * r;
            dot += dorow[c] * gain[c] * zrow[c];
        }
        let coef = r * r * r * dot / d;
        for c in 0..zrow.len() {
            dzrow[c] = r * dorow[c] * gain[c] - coef * zrow[c];
        }
    }
    dz
}

struct MlpCache<F> {
    x: Array2<F>,
    a: Array2<F>,
    u: Array2<F>,
    h: Array2<F>,
}

fn mlp_forward<F: Real>(x: &Array2<F>, p: &MlpParams<F>) -> (Array2<F>, MlpCache<F>) {
    let a = x.dot(&p.w_gate);
    let u = x.dot(&p.w_up);
    let h = Zip::from(&a).and(&u).map_collect(|&a, &u| a * sigmoid(a) * u);
    let y = h.dot(&p.w_down);
    (y, MlpCache { x: x.clone(), a, u, h })
}

fn mlp_backward<F: Real>(dy: &Array2<F>, p: &MlpParams<F>, c: &MlpCache<F>, g: &mut MlpParams<F>) -> Array2<F> {
    add_at_b(c.h.view(), dy.view(), g.w_down.view_mut());
    let dh = a_bt(dy.view(), p.w_down.view());
    let mut da = Array2::zeros(c.a.raw_dim());
    let mut du = Array2::zeros(c.u.raw_dim());
    Zip::from(&mut da)
        .and(&mut du)
        .and(&dh)
        .and(&c.a)
        .and(&c.u)
        .for_each(|da, du, &dh, &a, &u| {
            let s = sigmoid(a);
            *du = dh * a * s;
            *da = dh * u * s * (F::one() + a * (F::one() - s));
        });
    add_at_b(c.x.view(), da.view(), g.w_gate.view_mut());
    add_at_b(c.x.view(), du.view(), g.w_up.view_mut());
    let mut dx = a_bt(da.view(), p.w_gate.view());
    dx += &a_bt(du.view(), p.w_up.view());
    dx
}

enum SubCache<F> {
    Attention(AttentionCache<F>),
    Mlp(MlpCache<F>),
}

struct SublayerCache<F> {
    inner: SubCache<F>,
    /// The tensor fed to the norm (sublayer output under post-norm, sublayer input under pre-norm).
    norm_in: Array2<F>,
    inv_rms: Vec<F>,
}

pub struct BlockCache<F> {
    sublayers: Vec<SublayerCache<F>>,
}

pub fn block_forward<F: Real>(
    x: &Array2<F>,
    p: &BlockParams<F>,
    masks: &MaskSet,
    heads: usize,
    placement: NormPlacement,
) -> (Array2<F>, BlockCache<F>) {
    let mut x = x.clone();
    let mut caches = Vec::with_capacity(p.sublayers.len() + 1);
    let n_sub = p.sublayers.len() + 1;
    for idx in 0..n_sub {
        let gain = if idx < p.sublayers.len() {
            &p.sublayers[idx].gain
        } else {
            &p.mlp.gain
        };
        let run = |input: &Array2<F>| -> (Array2<F>, SubCache<F>) {
            if idx < p.sublayers.len() {
                let s = &p.sublayers[idx];
                let (y, c) = attention_forward(input, &s.attn, masks.get(s.kind), heads);
                (y, SubCache::Attention(c))
            } else {
                let (y, c) = mlp_forward(input, &p.mlp);
                (y, SubCache::Mlp(c))
            }
        };
        match placement {
            NormPlacement::Post => {
                let (y, inner) = run(&x);
                let (normed, inv_rms) = rms_norm(&y, gain);
                x += &normed;
                caches.push(SublayerCache {
                    inner,
                    norm_in: y,
                    inv_rms,
                });
            }
            NormPlacement::Pre => {
                let (normed, inv_rms) = rms_norm(&x, gain);
                let (y, inner) = run(&normed);
                let norm_in = x.clone();
                x += &y;
                caches.push(SublayerCache {
                    inner,
                    norm_in,
                    inv_rms,
                });
            }
        }
    }
    (x, BlockCache { sublayers: caches })
}

/// Accumulates block parameter gradients into `grads` and returns `dL/dx`.
pub fn block_backward<F: Real>(
    dy: &Array2<F>,
    p: &BlockParams<F>,
    masks: &MaskSet,
    heads: usize,
    placement: NormPlacement,
    cache: &BlockCache<F>,
    grads: &mut BlockParams<F>,
) -> Array2<F> {
    let mut dx = dy.clone();
    let n_att = p.sublayers.len();
    for idx in (0..cache.sublayers.len()).rev() {
        let c = &cache.sublayers[idx];
        let gain = if idx < n_att {
            &p.sublayers[idx].gain
        } else {
            &p.mlp.gain
        };
        let back = |d_sub_out: &Array2<F>, grads: &mut BlockParams<F>| -> Array2<F> {
            match &c.inner {
                SubCache::Attention(ac) => {
                    let s = &p.sublayers[idx];
                    attention_backward(
                        d_sub_out,
                        &s.attn,
                        masks.get(s.kind),
                        heads,
                        ac,
                        &mut grads.sublayers[idx].attn,
                    )
                }
                SubCache::Mlp(mc) => mlp_backward(d_sub_out, &p.mlp, mc, &mut grads.mlp),
            }
        };
        match placement {
            NormPlacement::Post => {
                let dgain = if idx < n_att {
                    &mut grads.sublayers[idx].gain
                } else {
                    &mut grads.mlp.gain
                };
                let d_sub = rms_norm_backward(&dx, &c.norm_in, gain, &c.inv_rms, dgain);
                let d_in = back(&d_sub, grads);
                dx += &d_in;
            }
            NormPlacement::Pre => {
                let d_normed = back(&dx, grads);
                let dgain = if idx < n_att {
                    &mut grads.sublayers[idx].gain
                } else {
                    &mut grads.mlp.gain
                };
                let d_in = rms_norm_backward(&d_normed, &c.norm_in, gain, &c.inv_rms, dgain);
                dx += &d_in;
            }
        }
    }
    dx
}

/// One block application with finiteness checks on input and output.
pub fn transformer_block<F: Real>(
    x: &Array2<F>,
    p: &BlockParams<F>,
    masks: &MaskSet,
    heads: usize,
    placement: NormPlacement,
) -> Result<Array2<F>, AttentionError> {
    if x.nrows() != masks.size() || x.ncols() != p.dim() {
        return Err(AttentionError::Shape(format!(
            "input {:?} vs {} tokens, d={}",
            x.dim(),
            masks.size(),
            p.dim()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(AttentionError::NonFinite("block input"));
    }
    let (y, _) = block_forward(x, p, masks, heads, placement);
    if !y.iter().all(|v| v.is_finite()) {
        return Err(AttentionError::NonFinite("block output"));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Mask;
    use crate::rng;
    use rand::Rng;

    fn random(rows: usize, cols: usize, r: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
    }

    fn random_block(d: usize, r: &mut impl Rng) -> BlockParams<f64> {
        let mut p = BlockParams::zeros(d, 4 * d, &AttentionKind::ALL);
        let mut ts = Vec::new();
        p.tensors_mut("b", &mut ts);
        for t in ts {
            for v in t.data.iter_mut() {
                *v = r.random_range(-0.5..0.5);
            }
        }
        p
    }

    fn masks(n: usize) -> MaskSet {
        MaskSet {
            column: Mask::from_fn(n, |q, k| q % 2 == k % 2),
            feature: Mask::from_fn(n, |q, k| q / 3 == k / 3),
            neighbor: Mask::from_fn(n, |q, k| q != 0 && k < q),
            full: Mask::from_fn(n, |_, _| true),
        }
    }

    #[test]
    fn shape_preserved() {
        let mut r = rng::stream(11, &[]);
        for (n, d) in [(1, 4), (5, 8), (9, 4)] {
            let p = random_block(d, &mut r);
            let x = random(n, d, &mut r);
            for placement in [NormPlacement::Post, NormPlacement::Pre] {
                let y = transformer_block(&x, &p, &masks(n), 2, placement).unwrap();
                assert_eq!(y.dim(), (n, d));
            }
        }
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let mut r = rng::stream(12, &[]);
        let mut p = random_block(8, &mut r);
        for s in &mut p.sublayers {
            s.attn.wo.fill(0.0);
        }
        p.mlp.w_down.fill(0.0);
        let x = random(6, 8, &mut r);
        for placement in [NormPlacement::Post, NormPlacement::Pre] {
            let y = transformer_block(&x, &p, &masks(6), 2, placement).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn rms_norm_has_unit_rms_with_unit_gain() {
        let mut r = rng::stream(13, &[]);
        let z = random(4, 16, &mut r);
        let (out, _) = rms_norm(&z, &Array1::ones(16));
        for row in out.rows() {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / 16.0;
            assert!((ms - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = BlockParams::<f64>::zeros(4, 16, &AttentionKind::ALL);
        let mut x = Array2::zeros((2, 4));
        x[[1, 2]] = f64::NAN;
        assert!(matches!(
            transformer_block(&x, &p, &masks(2), 2, NormPlacement::Post),
            Err(AttentionError::NonFinite(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng::stream(14, &[]);
        let (n, d) = (5, 4);
        let p = random_block(d, &mut r);
        let x = random(n, d, &mut r);
        let w = random(n, d, &mut r);
        let m = masks(n);
        for placement in [NormPlacement::Post, NormPlacement::Pre] {
            let objective = |p: &BlockParams<f64>, x: &Array2<f64>| -> f64 {
                let (y, _) = block_forward(x, p, &m, 2, placement);
                (&y * &w).sum()
            };
            let (_, cache) = block_forward(&x, &p, &m, 2, placement);
            let mut g = p.zeros_like();
            let dx = block_backward(&w, &p, &m, 2, placement, &cache, &mut g);
            let eps = 1e-5;
            for (i, j) in [(0, 0), (2, 3), (4, 1)] {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let num = (objective(&p, &xp) - objective(&p, &xm)) / (2.0 * eps);
                assert!(
                    (num - dx[[i, j]]).abs() < 1e-6,
                    "{placement:?} dx {num} vs {}",
                    dx[[i, j]]
                );
            }
            let mut grads = Vec::new();
            g.tensors("b", &mut grads);
            let analytic: Vec<(String, Vec<f64>)> = grads.into_iter().map(|t| (t.name, t.data.to_vec())).collect();
            for (ti, (name, ga)) in analytic.iter().enumerate() {
                for k in [0, ga.len() / 2, ga.len() - 1] {
                    let bump = |delta: f64| {
                        let mut q = p.clone();
                        let mut ts = Vec::new();
                        q.tensors_mut("b", &mut ts);
                        ts[ti].data[k] += delta;
                        drop(ts);
                        objective(&q, &x)
                    };
                    let num = (bump(eps) - bump(-eps)) / (2.0 * eps);
                    assert!(
                        (num - ga[k]).abs() < 1e-6,
                        "{placement:?} {name}[{k}] {num} vs {}",
                        ga[k]
                    );
                }
            }
        }
    }
}
