//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::Params;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-5,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &Params<f32>, config: AdamWConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| vec![0.0; p.value.len()])
                .collect()
        };
        AdamW {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` is the gradient of parameter `i`; `None` means
    /// zero gradient.
    pub fn step(&mut self, params: &mut Params<f32>, grads: &[Option<Tensor<f32>>]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(shape_err!(
                "optimizer expects {} gradients, got {}",
                params.len(),
                grads.len()
            ));
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            betas: (b1, b2),
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let decay = (1.0 - lr * weight_decay) as f32;
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        for ((id, m), v) in params.ids().zip(&mut self.first).zip(&mut self.second) {
            let theta = params.get_mut(id);
            if let Some(g) = &grads[id.index()] {
                if g.shape() != theta.shape() {
                    return Err(shape_err!(
                        "gradient shape {:?} != parameter shape {:?}",
                        g.shape(),
                        theta.shape()
                    ));
                }
            }
            let gd = grads[id.index()].as_ref().map(|g| g.data());
            for (k, th) in theta.data_mut().iter_mut().enumerate() {
                let gk = gd.map_or(0.0, |g| g[k]);
                *th *= decay;
                m[k] = b1f * m[k] + (1.0 - b1f) * gk;
                v[k] = b2f * v[k] + (1.0 - b2f) * gk * gk;
                let m_hat = m[k] as f64 / bc1;
                let v_hat = v[k] as f64 / bc2;
                *th -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Running sum of parameter gradients over a mini-batch.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    slots: Vec<Option<Tensor<f32>>>,
}

impl GradAccumulator {
    pub fn new(params: &Params<f32>) -> Self {
        GradAccumulator {
            slots: vec![None; params.len()],
        }
    }

    pub fn add(&mut self, grads: &Gradients<f32>) {
        for (id, g) in grads.params() {
            match &mut self.slots[id.index()] {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.slots.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn slots(&self) -> &[Option<Tensor<f32>>] {
        &self.slots
    }

    pub fn clear(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = None);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::{Init, ParamBuilder};

    fn scalar_param(v: f32) -> Params<f32> {
        let mut b = ParamBuilder::new(0);
        let id = b.add("theta", &[1], Init::Zeros).unwrap();
        let mut p = b.finish();
        p.get_mut(id).data_mut()[0] = v;
        p
    }

    fn grad(v: f32) -> Vec<Option<Tensor<f32>>> {
        vec![Some(Tensor::scalar(v))]
    }

    #[test]
    fn zero_grad_no_decay_leaves_params() {
        let mut p = scalar_param(0.75);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&p, cfg);
        opt.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get(crate::autodiff::ParamId(0)).data()[0], 0.75);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
        let mut p = scalar_param(1.0);
        let cfg = AdamWConfig {
            lr: 1e-5,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&p, cfg);
        opt.step(&mut p, &grad(1.0)).unwrap();
        let expected = 1.0 - 1e-5 / (1.0 + 1e-8);
        let got = p.get(crate::autodiff::ParamId(0)).data()[0];
        assert!((got as f64 - expected).abs() < 1e-7, "{got}");
    }

    #[test]
    fn decoupled_decay_scales_exactly() {
        let mut p = scalar_param(2.0);
        let cfg = AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = AdamW::new(&p, cfg);
        opt.step(&mut p, &grad(0.0)).unwrap();
        let got = p.get(crate::autodiff::ParamId(0)).data()[0];
        assert_eq!(got, 2.0 * (1.0 - 1e-3 * 0.01) as f32);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = scalar_param(-3.5);
        let cfg = AdamWConfig {
            lr: 0.0,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(&p, cfg);
        for g in [1.0, -2.0, 0.5] {
            opt.step(&mut p, &grad(g)).unwrap();
        }
        assert_eq!(p.get(crate::autodiff::ParamId(0)).data()[0], -3.5);
    }

    #[test]
    fn no_decay_matches_plain_adam() {
        // Plain Adam reference, evaluated independently in f64.
        let gs = [0.3, -1.2, 0.7, 0.05];
        let (lr, b1, b2, eps) = (1e-2, 0.9f64, 0.999f64, 1e-8);
        let (mut th, mut m, mut v) = (0.4f64, 0.0, 0.0);
        for (t, g) in gs.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            th -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = scalar_param(0.4);
        let mut opt = AdamW::new(
            &p,
            AdamWConfig {
                lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for g in gs {
            opt.step(&mut p, &grad(g as f32)).unwrap();
        }
        let got = p.get(crate::autodiff::ParamId(0)).data()[0] as f64;
        assert!((got - th).abs() < 1e-6, "{got} vs {th}");
    }

    #[test]
    fn rejects_mismatched_gradient() {
        let mut p = scalar_param(1.0);
        let mut opt = AdamW::new(&p, AdamWConfig::default());
        let bad = vec![Some(Tensor::zeros(&[2]))];
        assert!(opt.step(&mut p, &bad).is_err());
    }
}
