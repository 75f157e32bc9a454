//! Central finite-difference verification of analytic gradients.
//!
//! Checks run in `f64`. The closure under test builds a scalar from the
//! supplied inputs (and, through the graph, from the parameter store); every
//! input and every parameter tensor is probed coordinate by coordinate.
//! ReLU and max pooling make the function piecewise smooth. A step that
//! crosses onto another piece does not estimate the derivative, so such
//! coordinates are re-evaluated on the base point's piece with the same step
//! (see [`Graph::with_pattern`]).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{ActivationPattern, Graph, Var};
use super::params::Params;
use crate::error::{PcqError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tol: f64,
    /// Upper bound on probed coordinates per tensor; larger tensors are
    /// subsampled with a seeded RNG.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-3,
            tol: 1e-4,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    /// Coordinates compared against the finite difference.
    pub checked: usize,
    /// Coordinates with a kink within one step, compared on the frozen base
    /// piece.
    pub frozen: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    pub fn checked(&self) -> usize {
        self.entries.iter().map(|e| e.checked).sum()
    }

    pub fn frozen(&self) -> usize {
        self.entries.iter().map(|e| e.frozen).sum()
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-10)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-10)
}

/// Reduces `out` to a scalar through a fixed random projection, so every
/// output element contributes a distinct weight to the checked gradient.
pub fn random_projection(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = Tensor::from_fn(g.shape(out), |_| rng.gen_range(-1.0..1.0));
    let w = g.input(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Value and activation pattern of one evaluation; with `frozen`, the
/// evaluation replays that pattern.
fn eval<B>(
    params: &Params<f64>,
    inputs: &[Tensor<f64>],
    build: &B,
    frozen: Option<&ActivationPattern>,
) -> Result<(f64, ActivationPattern)>
where
    B: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = match frozen {
        Some(p) => Graph::with_pattern(params, p.clone()),
        None => Graph::new(params),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok((g.value(out).data()[0], g.activation_pattern()))
}

/// Central difference at step `h` on the smooth piece containing the base
/// point. When `x + h` or `x - h` changes the activation pattern (a kink lies
/// within one step), the difference is retaken with the base pattern frozen.
/// Returns the quotient and whether freezing was needed.
fn probe(
    h: f64,
    base: &ActivationPattern,
    mut f: impl FnMut(f64, bool) -> Result<(f64, ActivationPattern)>,
) -> Result<(f64, bool)> {
    let plus = f(h, false)?;
    let minus = f(-h, false)?;
    if plus.1 == *base && minus.1 == *base {
        return Ok(((plus.0 - minus.0) / (2.0 * h), false));
    }
    let plus = f(h, true)?;
    let minus = f(-h, true)?;
    Ok(((plus.0 - minus.0) / (2.0 * h), true))
}

fn coords(len: usize, cfg: &GradCheckConfig, salt: u64) -> Vec<usize> {
    if len <= cfg.max_coords {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(salt));
    let mut v = sample(&mut rng, len, cfg.max_coords).into_vec();
    v.sort_unstable();
    v
}

/// Compares analytic gradients of `build` against central differences.
pub fn grad_check<B>(
    params: &Params<f64>,
    inputs: &[Tensor<f64>],
    build: B,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input_with_grad(t.clone()))
        .collect();
    let out = build(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(PcqError::CheckFailed(format!(
            "closure must return a scalar, got shape {:?}",
            g.shape(out)
        )));
    }
    let base = g.value(out).data()[0];
    if !base.is_finite() {
        return Err(PcqError::CheckFailed("non-finite forward value".into()));
    }
    let base = (base, g.activation_pattern());
    let grads = g.backward(out)?;
    let eps = cfg.epsilon;
    let mut entries = Vec::new();

    let mut check = |name: String,
                     analytic: &dyn Fn(usize) -> f64,
                     numeric: &mut dyn FnMut(usize) -> Result<(f64, bool)>,
                     len: usize,
                     salt: u64|
     -> Result<()> {
        let mut worst = (0.0f64, 0usize);
        let mut frozen = 0;
        let picked = coords(len, &cfg, salt);
        for &k in &picked {
            let a = analytic(k);
            let (n, was_frozen) = numeric(k)?;
            frozen += was_frozen as usize;
            if !a.is_finite() || !n.is_finite() {
                return Err(PcqError::CheckFailed(format!(
                    "non-finite gradient at {name}[{k}] (analytic {a}, numeric {n})"
                )));
            }
            let e = relative_error(a, n);
            if e > worst.0 {
                worst = (e, k);
            }
        }
        entries.push(GradCheckEntry {
            name,
            checked: picked.len(),
            frozen,
            max_rel_err: worst.0,
            worst_index: worst.1,
        });
        Ok(())
    };

    for (i, t) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(t.shape());
        let ga = grads.wrt(vars[i]).unwrap_or(&zero).clone();
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut numeric = |k: usize| -> Result<(f64, bool)> {
            let orig = work[i].data()[k];
            let out = probe(eps, &base.1, |h, freeze| {
                work[i].data_mut()[k] = orig + h;
                eval(params, &work, &build, freeze.then_some(&base.1))
            });
            work[i].data_mut()[k] = orig;
            out
        };
        check(
            format!("input{i}"),
            &|k| ga.data()[k],
            &mut numeric,
            t.len(),
            i as u64,
        )?;
    }

    let mut work = params.clone();
    for (id, p) in params.iter() {
        let zero = Tensor::zeros(p.value.shape());
        let ga = grads.param(id).unwrap_or(&zero).clone();
        let mut numeric = |k: usize| -> Result<(f64, bool)> {
            let orig = work.get(id).data()[k];
            let out = probe(eps, &base.1, |h, freeze| {
                work.get_mut(id).data_mut()[k] = orig + h;
                eval(&work, inputs, &build, freeze.then_some(&base.1))
            });
            work.get_mut(id).data_mut()[k] = orig;
            out
        };
        check(
            p.name.clone(),
            &|k| ga.data()[k],
            &mut numeric,
            p.value.len(),
            1000 + id.index() as u64,
        )?;
    }

    Ok(GradCheckReport {
        entries,
        tol: cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correct_gradient_passes() {
        let p = Params::default();
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = grad_check(
            &p,
            &[x],
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r);
    }

    #[test]
    fn rejects_non_scalar_output() {
        let p = Params::default();
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(&p, &[x], |_, v| Ok(v[0]), GradCheckConfig::default());
        assert!(matches!(err, Err(PcqError::CheckFailed(_))));
    }

    #[test]
    fn non_finite_reported_with_location() {
        let p = Params::default();
        let x = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap();
        let err = grad_check(&p, &[x], |g, v| Ok(g.sum(v[0])), GradCheckConfig::default());
        assert!(matches!(err, Err(PcqError::CheckFailed(_))));
    }

    #[test]
    fn relative_error_symmetric() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 0.9) - 0.1).abs() < 1e-12);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn kink_within_step_uses_frozen_piece() {
        let p = Params::default();
        // x[0] sits 5e-4 from the ReLU kink, inside the 1e-3 step
        let x = Tensor::new(&[3], vec![5e-4, -0.3, 0.7]).unwrap();
        let r = grad_check(
            &p,
            &[x],
            |g, v| {
                let y = g.relu(v[0]);
                random_projection(g, y, 1)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(r.frozen(), 1);
        assert!(r.passed(), "{:?}", r);
    }
}
