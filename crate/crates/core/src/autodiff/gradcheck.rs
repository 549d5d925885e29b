//! Central finite-difference gradient checks for anything built on a
//! [`Scope`].
//!
//! The checked scalar is `Σ output ⊙ R` for fixed random weights `R`, so
//! every output coordinate contributes. For each parameter tensor the
//! relative error is `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over the checked
//! coordinates, where `a` is the tape gradient and `n` the numeric one.
//!
//! Some tensors have an exactly zero gradient (a bias feeding a softmax
//! that ignores constant shifts), where the numeric side is pure rounding
//! noise. The floor is therefore `floor_rel · g · √k`: a fraction of the
//! largest single gradient coordinate `g` seen anywhere, scaled to the `k`
//! coordinates checked in the tensor.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use super::{ParamStore, Real, Scope, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates checked per tensor; larger tensors are sampled.
    pub max_coords: usize,
    pub floor_rel: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        if cfg!(feature = "f64") {
            GradCheckConfig {
                step: 1e-5,
                max_coords: 48,
                floor_rel: 1e-5,
            }
        } else {
            GradCheckConfig {
                step: 3e-3,
                max_coords: 48,
                floor_rel: 1e-2,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub per_tensor: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_tensor.values().copied().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

fn weighted_sum(scope: &mut Scope<'_>, out: Var, weights: &[Real]) -> Result<Var> {
    let shape = scope.tape.shape(out).to_vec();
    let w = scope.tape.constant(Tensor::new(shape, weights.to_vec())?);
    let prod = scope.tape.mul(out, w)?;
    Ok(scope.tape.sum(prod))
}

/// Sum in f64 of `output ⊙ weights` for the current parameter values.
fn probe<F>(store: &ParamStore, build: &F, weights: &[Real]) -> Result<f64>
where
    F: Fn(&mut Scope<'_>) -> Result<Var>,
{
    let mut scope = Scope::inference(store);
    let out = build(&mut scope)?;
    Ok(scope
        .tape
        .value(out)
        .data()
        .iter()
        .zip(weights)
        .map(|(&o, &w)| o as f64 * w as f64)
        .sum())
}

/// Compares tape gradients of every tensor in `store` against central
/// differences. `build` must be deterministic.
pub fn check_gradients<F, R>(store: &mut ParamStore, build: F, cfg: GradCheckConfig, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Scope<'_>) -> Result<Var>,
    R: Rng,
{
    let (analytic, weights) = {
        let mut scope = Scope::train(store);
        let out = build(&mut scope)?;
        let n = scope.tape.value(out).numel();
        let weights: Vec<Real> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = weighted_sum(&mut scope, out, &weights)?;
        (scope.param_grads(loss)?, weights)
    };

    let g_max = analytic
        .values()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |m, &x| m.max((x as f64).abs()))
        .max(f64::MIN_POSITIVE);
    let mut per_tensor = BTreeMap::new();
    for name in store.names() {
        let numel = store.get(&name)?.numel();
        let coords: Vec<usize> = if numel <= cfg.max_coords {
            (0..numel).collect()
        } else {
            let mut c = sample(rng, numel, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &coords {
            let orig = store.get(&name)?.data()[i];
            store.get_mut(&name)?.data_mut()[i] = orig + cfg.step as Real;
            let up = probe(store, &build, &weights)?;
            store.get_mut(&name)?.data_mut()[i] = orig - cfg.step as Real;
            let down = probe(store, &build, &weights)?;
            store.get_mut(&name)?.data_mut()[i] = orig;
            // the step actually taken after rounding to Real
            let h = ((orig + cfg.step as Real) as f64 - (orig - cfg.step as Real) as f64) / 2.0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[&name][i] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let floor = cfg.floor_rel * g_max * (coords.len() as f64).sqrt();
        let denom = a2.sqrt().max(n2.sqrt()).max(floor);
        let rel = diff2.sqrt() / denom;
        if !rel.is_finite() {
            return Err(Error::Divergence(format!("gradient check for {name} is not finite")));
        }
        per_tensor.insert(name, rel);
    }
    Ok(GradCheckReport { per_tensor })
}
