//! Small building blocks shared by the encoder, aggregator and crossing
//! layers.

use rand::Rng;

use crate::autodiff::{ParamStore, Scope, Var};
use crate::error::Result;

/// Registers `{name}.w: [fan_in × fan_out]` (Xavier) and `{name}.b` (zeros).
pub fn init_linear<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    store.insert_xavier(&format!("{name}.w"), fan_in, fan_out, rng);
    store.insert_zeros(&format!("{name}.b"), &[fan_out]);
}

/// `x · W + b`
pub fn linear(scope: &mut Scope<'_>, x: Var, name: &str) -> Result<Var> {
    let w = scope.param(&format!("{name}.w"))?;
    let b = scope.param(&format!("{name}.b"))?;
    let h = scope.tape.matmul(x, w)?;
    scope.tape.add_row_bias(h, b)
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert_filled(&format!("{name}.g"), &[dim], 1.0);
    store.insert_zeros(&format!("{name}.b"), &[dim]);
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm(scope: &mut Scope<'_>, x: Var, name: &str) -> Result<Var> {
    let g = scope.param(&format!("{name}.g"))?;
    let b = scope.param(&format!("{name}.b"))?;
    scope.tape.layer_norm(x, g, b, LAYER_NORM_EPS as _)
}
