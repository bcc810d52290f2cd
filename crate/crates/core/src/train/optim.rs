use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Linear ramp from 0 to the peak over the warmup fraction, then linear decay to 0.
    #[default]
    LinearWarmupDecay,
    Constant,
}

/// Learning rate for update `step` of `total`.
pub fn lr_at(schedule: Schedule, peak: f64, warmup_fraction: f64, step: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => peak,
        Schedule::LinearWarmupDecay => {
            let total = total.max(1) as f64;
            let step = step as f64;
            let warm = (warmup_fraction * total).round();
            if step < warm {
                peak * step / warm
            } else if total > warm {
                (peak * (total - step) / (total - warm)).max(0.0)
            } else {
                peak
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

/// Adam with decoupled weight decay applied only to `Weight` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub t: u64,
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig, params: &ModelParams<F>) -> Self {
        AdamW {
            config,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &ModelParams<F>, lr: f64) -> f64 {
        let c = self.config;
        let norm = grads
            .tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (F::of_f64(c.beta1), F::of_f64(c.beta2));
        let (ob1, ob2) = (F::of_f64(1.0 - c.beta1), F::of_f64(1.0 - c.beta2));
        let (lr_f, decay) = (F::of_f64(lr), F::of_f64(1.0 - lr * c.weight_decay));
        let (clip, eps) = (F::of_f64(clip), F::of_f64(c.eps));
        let (bc1, bc2) = (F::of_f64(bc1), F::of_f64(bc2));
        let tensors = params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in tensors.into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
            let decays = p.kind.decays();
            for i in 0..p.data.len() {
                let gi = g.data[i] * clip;
                m.data[i] = b1 * m.data[i] + ob1 * gi;
                v.data[i] = b2 * v.data[i] + ob2 * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                if decays {
                    p.data[i] *= decay;
                }
                p.data[i] -= lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::ParamKind;

    #[test]
    fn warmup_decay_schedule_endpoints() {
        let s = Schedule::LinearWarmupDecay;
        assert_eq!(lr_at(s, 1e-3, 0.2, 0, 100), 0.0);
        assert!((lr_at(s, 1e-3, 0.2, 20, 100) - 1e-3).abs() < 1e-15);
        assert!((lr_at(s, 1e-3, 0.2, 10, 100) - 5e-4).abs() < 1e-15);
        assert!(lr_at(s, 1e-3, 0.2, 99, 100) < 2e-5);
        assert_eq!(lr_at(s, 1e-3, 0.2, 100, 100), 0.0);
        assert_eq!(lr_at(Schedule::Constant, 1e-4, 0.2, 7, 100), 1e-4);
    }

    #[test]
    fn decay_only_touches_weights() {
        let cfg = ModelConfig {
            d_text: 4,
            ..ModelConfig::sized(1, 4, 2)
        };
        let mut p = ModelParams::<f64>::zeros(&cfg);
        for t in p.tensors_mut() {
            t.data.fill(1.0);
        }
        let g = p.zeros_like();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
            &p,
        );
        opt.step(&mut p, &g, 0.1);
        for t in p.tensors() {
            let want = if t.kind == ParamKind::Weight { 0.95 } else { 1.0 };
            assert!(t.data.iter().all(|&v| (v - want).abs() < 1e-12), "{}", t.name);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = ModelConfig {
            d_text: 4,
            ..ModelConfig::sized(1, 4, 2)
        };
        let mut p = ModelParams::<f64>::zeros(&cfg);
        let mut g = p.zeros_like();
        g.decoders[0].b[0] = 1e-3;
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
        );
        let norm = opt.step(&mut p, &g, 0.01);
        assert!((norm - 1e-3).abs() < 1e-15);
        assert!((p.decoders[0].b[0] + 0.01).abs() < 1e-6);
    }
}
