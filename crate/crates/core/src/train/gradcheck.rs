use rand::seq::index::sample;

use crate::model::{loss_and_grad, EncodedWindow, ModelError, ModelParams, ModelState};
use crate::rng;

/// Denominator floor of the relative error. Central differences at step
/// `1e-4` carry an absolute truncation error around `1e-10`, so gradients
/// smaller than the floor are judged by absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Every checked coordinate, worst first.
    pub checks: Vec<CoordinateCheck>,
    pub tensors_covered: usize,
    pub tensors_total: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks.first()
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

/// Mean masked-cell loss of a batch and its gradient.
pub fn batch_loss_and_grad(
    state: &ModelState<f64>,
    batch: &[EncodedWindow],
) -> Result<(f64, ModelParams<f64>), ModelError> {
    let count: usize = batch.iter().map(|e| e.targets.len()).sum();
    if count == 0 {
        return Err(ModelError::NoMaskedCells);
    }
    let scale = 1.0 / count as f64;
    let mut grads = state.params.zeros_like();
    let mut total = 0.0;
    for enc in batch {
        let mut g = state.params.zeros_like();
        total += loss_and_grad(state, enc, scale, &mut g)?;
        grads.add_assign(&g);
    }
    Ok((total * scale, grads))
}

fn batch_loss(state: &ModelState<f64>, batch: &[EncodedWindow]) -> Result<f64, ModelError> {
    let mut scratch = state.params.zeros_like();
    let count: usize = batch.iter().map(|e| e.targets.len()).sum();
    let mut total = 0.0;
    for enc in batch {
        total += loss_and_grad(state, enc, 0.0, &mut scratch)?;
    }
    Ok(total / count as f64)
}

/// Deliberate perturbation of one analytic gradient coordinate, used to
/// check that the detector points at it.
#[derive(Clone, Debug)]
pub struct GradientFault {
    pub tensor: String,
    pub index: usize,
    pub delta: f64,
}

/// Compares analytic gradients with central differences on at least
/// `coordinates` sampled coordinates, at least one from every tensor.
pub fn gradient_check(
    state: &ModelState<f64>,
    batch: &[EncodedWindow],
    epsilon: f64,
    coordinates: usize,
    rng_seed: u64,
    fault: Option<&GradientFault>,
) -> Result<GradCheckReport, ModelError> {
    let (_, mut grads) = batch_loss_and_grad(state, batch)?;
    if let Some(f) = fault {
        for t in grads.tensors_mut() {
            if t.name == f.tensor {
                t.data[f.index] += f.delta;
            }
        }
    }
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|t| (t.name, t.data.to_vec())).collect();
    let n_tensors = analytic.len();
    let per_tensor = coordinates.div_ceil(n_tensors).max(1);
    let mut r = rng::stream(rng_seed, &[0x9c]);
    let mut plan: Vec<(usize, usize)> = Vec::new();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let k = per_tensor.min(g.len());
        let mut idx: Vec<usize> = sample(&mut r, g.len(), k).into_vec();
        if let Some(f) = fault.filter(|f| &f.tensor == name) {
            if !idx.contains(&f.index) {
                idx.push(f.index);
            }
        }
        idx.sort_unstable();
        plan.extend(idx.into_iter().map(|i| (ti, i)));
    }

    let mut probe = state.clone();
    let mut checks = Vec::with_capacity(plan.len());
    for (ti, i) in plan {
        let orig = probe.params.tensors()[ti].data[i];
        let mut eval_at = |v: f64| -> Result<f64, ModelError> {
            probe.params.tensors_mut()[ti].data[i] = v;
            batch_loss(&probe, batch)
        };
        let plus = eval_at(orig + epsilon)?;
        let minus = eval_at(orig - epsilon)?;
        probe.params.tensors_mut()[ti].data[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[ti].1[i];
        checks.push(CoordinateCheck {
            tensor: analytic[ti].0.clone(),
            index: i,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    checks.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    let covered: std::collections::BTreeSet<&str> = checks.iter().map(|c| c.tensor.as_str()).collect();
    Ok(GradCheckReport {
        max_rel_error: checks.first().map_or(0.0, |c| c.rel_error),
        tensors_covered: covered.len(),
        tensors_total: n_tensors,
        checks,
    })
}
