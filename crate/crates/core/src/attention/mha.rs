use ndarray::{s, Array2};

use super::{AttentionError, Mask};
use crate::tensor::{a_bt, add_at_b, Real};

/// Projections of one multi-head attention sublayer; all `d x d`, with head
/// `h` using columns `h*d_k .. (h+1)*d_k` of the query/key/value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<F> {
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
}

impl<F: Real> AttentionParams<F> {
    pub fn zeros(d: usize) -> Self {
        AttentionParams {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
        }
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache<F> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Softmax weights over `mask.visible(i)`, stored at `i * heads + h`.
    probs: Vec<Vec<F>>,
    ctx: Array2<F>,
}

impl<F: Real> AttentionCache<F> {
    /// Attention weights of query `i` in head `h`, aligned with the mask's visible keys.
    pub fn weights(&self, i: usize, h: usize, heads: usize) -> &[F] {
        &self.probs[i * heads + h]
    }
}

/// Masked multi-head attention.
///
/// Hidden keys get exactly zero weight (their logits are excluded from the
/// softmax); a query with no visible key produces a zero context vector.
pub fn attention_forward<F: Real>(
    x: &Array2<F>,
    p: &AttentionParams<F>,
    mask: &Mask,
    heads: usize,
) -> (Array2<F>, AttentionCache<F>) {
    let (n, d) = x.dim();
    assert_eq!(mask.size(), n, "mask size must match token count");
    assert!(heads > 0 && d % heads == 0, "d must be divisible by heads");
    let dk = d / heads;
    let scale = F::one() / F::of_f64(dk as f64).sqrt();
    let q = x.dot(&p.wq);
    let k = x.dot(&p.wk);
    let v = x.dot(&p.wv);
    let mut ctx = Array2::<F>::zeros((n, d));
    let mut probs = Vec::with_capacity(n * heads);
    let mut acc = vec![0.0f64; dk];
    for i in 0..n {
        let vis = mask.visible(i);
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            if vis.is_empty() {
                probs.push(Vec::new());
                continue;
            }
            let qi = q.slice(s![i, cols.clone()]);
            let mut logits: Vec<F> = vis
                .iter()
                .map(|&j| qi.dot(&k.slice(s![j as usize, cols.clone()])) * scale)
                .collect();
            // Sums over keys run in f64 so that the result barely depends on
            // token order.
            let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = 0.0f64;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                total += l.as_f64();
            }
            let total = F::of_f64(total);
            for l in logits.iter_mut() {
                *l /= total;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (&j, &pj) in vis.iter().zip(&logits) {
                let pj = pj.as_f64();
                for (a, &vj) in acc.iter_mut().zip(v.slice(s![j as usize, cols.clone()])) {
                    *a += pj * vj.as_f64();
                }
            }
            for (o, &a) in ctx.slice_mut(s![i, cols.clone()]).iter_mut().zip(&acc) {
                *o = F::of_f64(a);
            }
            probs.push(logits);
        }
    }
    let y = ctx.dot(&p.wo);
    (
        y,
        AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

/// Accumulates parameter gradients into `grads` and returns `dL/dx`.
pub fn attention_backward<F: Real>(
    dy: &Array2<F>,
    p: &AttentionParams<F>,
    mask: &Mask,
    heads: usize,
    cache: &AttentionCache<F>,
    grads: &mut AttentionParams<F>,
) -> Array2<F> {
    let (n, d) = cache.x.dim();
    let dk = d / heads;
    let scale = F::one() / F::of_f64(dk as f64).sqrt();
    add_at_b(cache.ctx.view(), dy.view(), grads.wo.view_mut());
    let dctx = a_bt(dy.view(), p.wo.view());
    let mut dq = Array2::<F>::zeros((n, d));
    let mut dk_m = Array2::<F>::zeros((n, d));
    let mut dv = Array2::<F>::zeros((n, d));
    let mut dp: Vec<F> = Vec::new();
    for i in 0..n {
        let vis = mask.visible(i);
        if vis.is_empty() {
            continue;
        }
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let probs = &cache.probs[i * heads + h];
            let dci = dctx.slice(s![i, cols.clone()]);
            dp.clear();
            dp.extend(
                vis.iter()
                    .map(|&j| dci.dot(&cache.v.slice(s![j as usize, cols.clone()]))),
            );
            let weighted: F = probs.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
            let qi = cache.q.slice(s![i, cols.clone()]).to_owned();
            for ((&j, &pj), &dpj) in vis.iter().zip(probs).zip(&dp) {
                let j = j as usize;
                dv.slice_mut(s![j, cols.clone()]).scaled_add(pj, &dci);
                let ds = pj * (dpj - weighted) * scale;
                if ds != F::zero() {
                    dq.slice_mut(s![i, cols.clone()])
                        .scaled_add(ds, &cache.k.slice(s![j, cols.clone()]));
                    dk_m.slice_mut(s![j, cols.clone()]).scaled_add(ds, &qi);
                }
            }
        }
    }
    add_at_b(cache.x.view(), dq.view(), grads.wq.view_mut());
    add_at_b(cache.x.view(), dk_m.view(), grads.wk.view_mut());
    add_at_b(cache.x.view(), dv.view(), grads.wv.view_mut());
    let mut dx = a_bt(dq.view(), p.wq.view());
    dx += &a_bt(dk_m.view(), p.wk.view());
    dx += &a_bt(dv.view(), p.wv.view());
    dx
}

/// Checked forward pass: rejects shape mismatches and non-finite input.
pub fn masked_attention<F: Real>(
    x: &Array2<F>,
    p: &AttentionParams<F>,
    mask: &Mask,
    heads: usize,
) -> Result<Array2<F>, AttentionError> {
    let d = x.ncols();
    if mask.size() != x.nrows() || p.wq.dim() != (d, d) || heads == 0 || !d.is_multiple_of(heads) {
        return Err(AttentionError::Shape(format!(
            "input {:?}, mask {}, heads {heads}",
            x.dim(),
            mask.size()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(AttentionError::NonFinite("attention input"));
    }
    Ok(attention_forward(x, p, mask, heads).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, &[]);
        Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
    }

    fn params(d: usize, seed: u64) -> AttentionParams<f64> {
        AttentionParams {
            wq: random(d, d, seed),
            wk: random(d, d, seed + 1),
            wv: random(d, d, seed + 2),
            wo: random(d, d, seed + 3),
        }
    }

    #[test]
    fn zero_queries_average_visible_values() {
        let (n, d, heads) = (5, 4, 2);
        let x = random(n, d, 1);
        let mut p = params(d, 2);
        p.wq.fill(0.0);
        p.wo = Array2::eye(d);
        let mask = Mask::from_fn(n, |q, k| (q + k) % 2 == 0 || k == 0);
        let y = masked_attention(&x, &p, &mask, heads).unwrap();
        let v = x.dot(&p.wv);
        for q in 0..n {
            let vis = mask.visible(q);
            for c in 0..d {
                let mean = vis.iter().map(|&j| v[[j as usize, c]]).sum::<f64>() / vis.len() as f64;
                assert!((y[[q, c]] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn query_without_visible_keys_outputs_zero() {
        let (n, d) = (3, 4);
        let x = random(n, d, 3);
        let p = params(d, 4);
        let mask = Mask::from_fn(n, |q, _| q != 1);
        let y = masked_attention(&x, &p, &mask, 2).unwrap();
        assert!(y.row(1).iter().all(|&v| v == 0.0));
        assert!(y.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn weights_are_row_stochastic_over_visible_keys() {
        let (n, d, heads) = (6, 4, 2);
        let x = random(n, d, 5);
        let p = params(d, 6);
        let mask = Mask::from_fn(n, |q, k| (q * 7 + k * 3) % 4 != 0);
        let (_, cache) = attention_forward(&x, &p, &mask, heads);
        for q in 0..n {
            for h in 0..heads {
                let w = cache.weights(q, h, heads);
                assert_eq!(w.len(), mask.visible(q).len());
                if !w.is_empty() {
                    assert!(w.iter().all(|&p| p >= 0.0));
                    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn output_ignores_permutation_of_hidden_tokens() {
        let (n, d, heads) = (7, 4, 2);
        let x = random(n, d, 7);
        let p = params(d, 8);
        // Query 0 sees tokens 0, 2, 4; tokens 1, 3, 5, 6 are hidden from it.
        let mask = Mask::from_fn(n, |q, k| if q == 0 { k % 2 == 0 && k < 6 } else { true });
        let y = masked_attention(&x, &p, &mask, heads).unwrap();
        let perm = [0usize, 6, 2, 5, 4, 1, 3];
        let xp = Array2::from_shape_fn((n, d), |(i, c)| x[[perm[i], c]]);
        let mp = Mask::from_fn(n, |q, k| mask.get(perm[q], perm[k]));
        let yp = masked_attention(&xp, &p, &mp, heads).unwrap();
        for c in 0..d {
            assert_eq!(y[[0, c]].to_bits(), yp[[0, c]].to_bits());
        }
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let mut x = random(3, 4, 9);
        x[[0, 0]] = f64::INFINITY;
        let mask = Mask::from_fn(3, |_, _| true);
        assert!(matches!(
            masked_attention(&x, &params(4, 10), &mask, 2),
            Err(AttentionError::NonFinite(_))
        ));
    }
}
