use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<Real>>,
    second: BTreeMap<String, Vec<Real>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Parameters without an entry in `grads`
/// are treated as having zero gradient. Nothing is modified when any
/// gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<Real>>,
    state: &mut AdamState,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if g.len() != p.numel() {
            return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient for parameter {name}")));
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (c.beta1 as Real, c.beta2 as Real);

    for (name, p) in params.iter_mut() {
        let n = p.numel();
        let m = state.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let g = grads.get(name);
        let data = p.data_mut();
        for i in 0..n {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] as f64 / bc1;
            let v_hat = v[i] as f64 / bc2;
            data[i] -= (c.lr * m_hat / (v_hat.sqrt() + c.eps)) as Real;
        }
    }
    Ok(())
}
