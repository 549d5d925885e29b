//! One-hop neighbor aggregation: combine a center sentence vector with up
//! to three neighbor vectors (GAT, GCN, or mean).
//!
//! Batched layout: `center: [N × d]`, `neighbors: [N·3 × d]` where row
//! `n·3 + j` is slot `j` of sample `n`, and `mask[n·3 + j]` says whether that
//! slot holds a real neighbor. Masked slots hold zeros and never receive
//! gradient.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Scope, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{init_linear, linear};

pub const NEIGHBOR_SLOTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Gat,
    Gcn,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    pub gat_heads: usize,
    pub leaky_relu_slope: f64,
    pub include_self: bool,
    /// Output width; defaults to the encoder output width.
    pub output_dim: Option<usize>,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            kind: AggregatorKind::Gat,
            gat_heads: 1,
            leaky_relu_slope: 0.2,
            include_self: true,
            output_dim: None,
        }
    }
}

impl AggregatorConfig {
    pub fn out_dim(&self, input_dim: usize) -> usize {
        self.output_dim.unwrap_or(input_dim)
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        let out = self.out_dim(input_dim);
        if out == 0 {
            return Err(Error::Config("aggregator output_dim must be positive".into()));
        }
        if self.kind == AggregatorKind::Gat && (self.gat_heads == 0 || out % self.gat_heads != 0) {
            return Err(Error::Config(format!(
                "gat_heads {} must be positive and divide the output dim {out}",
                self.gat_heads
            )));
        }
        Ok(())
    }
}

/// Center vector plus three neighbor slots for a single node.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborBundle {
    pub center: Vec<Real>,
    pub neighbors: [Vec<Real>; NEIGHBOR_SLOTS],
    pub mask: [bool; NEIGHBOR_SLOTS],
}

impl NeighborBundle {
    /// Builds a bundle from up to three neighbors; missing slots are zeroed.
    pub fn new(center: Vec<Real>, neighbors: &[Vec<Real>]) -> Result<Self> {
        if neighbors.len() > NEIGHBOR_SLOTS {
            return Err(Error::InvalidInput(format!("at most {NEIGHBOR_SLOTS} neighbors")));
        }
        let d = center.len();
        let mut slots: [Vec<Real>; NEIGHBOR_SLOTS] = Default::default();
        let mut mask = [false; NEIGHBOR_SLOTS];
        for j in 0..NEIGHBOR_SLOTS {
            match neighbors.get(j) {
                Some(v) if v.len() == d => {
                    slots[j] = v.clone();
                    mask[j] = true;
                }
                Some(v) => return Err(Error::shape("neighbor bundle", &[d], &[v.len()])),
                None => slots[j] = vec![0.0; d],
            }
        }
        Ok(NeighborBundle {
            center,
            neighbors: slots,
            mask,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Aggregator {
    pub cfg: AggregatorConfig,
    pub prefix: String,
    pub input_dim: usize,
}

impl Aggregator {
    pub fn new(cfg: AggregatorConfig, prefix: impl Into<String>, input_dim: usize) -> Self {
        Aggregator {
            cfg,
            prefix: prefix.into(),
            input_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim(self.input_dim)
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.cfg.validate(self.input_dim)?;
        let (d, out, p) = (self.input_dim, self.out_dim(), &self.prefix);
        match self.cfg.kind {
            AggregatorKind::Gat => {
                let dh = out / self.cfg.gat_heads;
                for h in 0..self.cfg.gat_heads {
                    store.insert_xavier(&format!("{p}.h{h}.w"), d, dh, rng);
                    store.insert_xavier(&format!("{p}.h{h}.a_center"), dh, 1, rng);
                    store.insert_xavier(&format!("{p}.h{h}.a_neighbor"), dh, 1, rng);
                }
            }
            AggregatorKind::Gcn => store.insert_xavier(&format!("{p}.w"), d, out, rng),
            AggregatorKind::Mean => init_linear(store, &format!("{p}.lin"), 2 * d, out, rng),
        }
        Ok(())
    }

    pub fn forward(&self, scope: &mut Scope<'_>, center: Var, neighbors: Var, mask: &[bool]) -> Result<Var> {
        let n = scope.tape.shape(center)[0];
        if scope.tape.shape(neighbors)[0] != n * NEIGHBOR_SLOTS || mask.len() != n * NEIGHBOR_SLOTS {
            return Err(Error::shape(
                "aggregate",
                scope.tape.shape(center),
                scope.tape.shape(neighbors),
            ));
        }
        match self.cfg.kind {
            AggregatorKind::Gat => self.gat(scope, center, neighbors, mask, n),
            AggregatorKind::Gcn => self.gcn(scope, center, neighbors, mask, n),
            AggregatorKind::Mean => self.mean(scope, center, neighbors, mask, n),
        }
    }

    /// Candidates laid out as `[self, slot0, slot1, slot2]` per sample.
    fn candidates(&self, scope: &mut Scope<'_>, center: Var, neighbors: Var, n: usize) -> Result<Var> {
        let all = scope.tape.concat_rows(&[center, neighbors])?;
        let mut idx = Vec::with_capacity(n * (NEIGHBOR_SLOTS + 1));
        for s in 0..n {
            idx.push(Some(s));
            for j in 0..NEIGHBOR_SLOTS {
                idx.push(Some(n + s * NEIGHBOR_SLOTS + j));
            }
        }
        scope.tape.gather_rows(all, Rc::new(idx))
    }

    fn gat(&self, scope: &mut Scope<'_>, center: Var, neighbors: Var, mask: &[bool], n: usize) -> Result<Var> {
        let width = NEIGHBOR_SLOTS + 1;
        let cand = self.candidates(scope, center, neighbors, n)?;
        let mut cand_mask = Vec::with_capacity(n * width);
        for s in 0..n {
            cand_mask.push(self.cfg.include_self);
            cand_mask.extend_from_slice(&mask[s * NEIGHBOR_SLOTS..(s + 1) * NEIGHBOR_SLOTS]);
        }
        let cand_mask = Rc::new(cand_mask);
        let repeat = Rc::new((0..n).flat_map(|s| std::iter::repeat_n(Some(s), width)).collect::<Vec<_>>());

        let mut heads = Vec::with_capacity(self.cfg.gat_heads);
        for h in 0..self.cfg.gat_heads {
            let p = format!("{}.h{h}", self.prefix);
            let w = scope.param(&format!("{p}.w"))?;
            let a_c = scope.param(&format!("{p}.a_center"))?;
            let a_n = scope.param(&format!("{p}.a_neighbor"))?;
            let proj_c = scope.tape.matmul(center, w)?;
            let proj = scope.tape.matmul(cand, w)?;
            let score_c = scope.tape.matmul(proj_c, a_c)?;
            let score_c = scope.tape.gather_rows(score_c, repeat.clone())?;
            let score_n = scope.tape.matmul(proj, a_n)?;
            let logits = scope.tape.add(score_c, score_n)?;
            let logits = scope.tape.leaky_relu(logits, self.cfg.leaky_relu_slope as Real);
            let logits = scope.tape.reshape(logits, vec![n, width])?;
            let att = scope.tape.masked_softmax(logits, cand_mask.clone())?;
            heads.push(scope.tape.group_weighted_sum(att, proj)?);
        }
        let out = if heads.len() == 1 {
            heads[0]
        } else {
            scope.tape.concat_cols(&heads)?
        };
        Ok(scope.tape.elu(out))
    }

    fn gcn(&self, scope: &mut Scope<'_>, center: Var, neighbors: Var, mask: &[bool], n: usize) -> Result<Var> {
        let width = NEIGHBOR_SLOTS + 1;
        let mut coef = Vec::with_capacity(n * width);
        for s in 0..n {
            let slots = &mask[s * NEIGHBOR_SLOTS..(s + 1) * NEIGHBOR_SLOTS];
            coef.extend(gcn_center_coefficients(slots, self.cfg.include_self).map_err(|e| {
                Error::InvalidMask(format!("sample {s}: {e}"))
            })?);
        }
        let cand = self.candidates(scope, center, neighbors, n)?;
        let coef = scope.tape.constant(Tensor::matrix(n, width, coef)?);
        let agg = scope.tape.group_weighted_sum(coef, cand)?;
        let w = scope.param(&format!("{}.w", self.prefix))?;
        let out = scope.tape.matmul(agg, w)?;
        Ok(scope.tape.elu(out))
    }

    fn mean(&self, scope: &mut Scope<'_>, center: Var, neighbors: Var, mask: &[bool], n: usize) -> Result<Var> {
        let mut coef = Vec::with_capacity(n * NEIGHBOR_SLOTS);
        for s in 0..n {
            let slots = &mask[s * NEIGHBOR_SLOTS..(s + 1) * NEIGHBOR_SLOTS];
            let m = slots.iter().filter(|&&b| b).count();
            coef.extend(slots.iter().map(|&b| if b { 1.0 / m as Real } else { 0.0 }));
        }
        let coef = scope.tape.constant(Tensor::matrix(n, NEIGHBOR_SLOTS, coef)?);
        let mean = scope.tape.group_weighted_sum(coef, neighbors)?;
        let both = scope.tape.concat_cols(&[center, mean])?;
        let out = linear(scope, both, &format!("{}.lin", self.prefix))?;
        Ok(scope.tape.elu(out))
    }
}

/// Center row of `D^-1/2 (A + I) D^-1/2` for the star graph formed by the
/// center and its unmasked neighbors, as weights over `[self, slot0..2]`.
/// Without a self loop the center keeps degree `m` and no self weight.
pub fn gcn_center_coefficients(mask: &[bool], include_self: bool) -> Result<Vec<Real>> {
    let m = mask.iter().filter(|&&b| b).count();
    let center_degree = m + usize::from(include_self);
    if center_degree == 0 {
        return Err(Error::InvalidMask("no neighbors and no self loop".into()));
    }
    let d0 = center_degree as f64;
    let mut coef = Vec::with_capacity(mask.len() + 1);
    coef.push(if include_self { (1.0 / d0) as Real } else { 0.0 });
    for &b in mask {
        // neighbor degree: its own self loop plus the edge to the center
        coef.push(if b { (1.0 / (d0 * 2.0).sqrt()) as Real } else { 0.0 });
    }
    Ok(coef)
}

/// Aggregates one bundle outside of any training graph.
pub fn aggregate_bundle(agg: &Aggregator, store: &ParamStore, bundle: &NeighborBundle) -> Result<Vec<Real>> {
    let d = bundle.center.len();
    let mut scope = Scope::inference(store);
    let c = scope.tape.constant(Tensor::matrix(1, d, bundle.center.clone())?);
    let nb: Vec<Real> = bundle.neighbors.iter().flatten().copied().collect();
    let nb = scope.tape.constant(Tensor::matrix(NEIGHBOR_SLOTS, d, nb)?);
    let out = agg.forward(&mut scope, c, nb, &bundle.mask)?;
    Ok(scope.tape.value(out).data().to_vec())
}

/// GAT attention weights over `[self, slot0..2]` for one bundle and head.
pub fn gat_attention(agg: &Aggregator, store: &ParamStore, bundle: &NeighborBundle, head: usize) -> Result<Vec<Real>> {
    if agg.cfg.kind != AggregatorKind::Gat {
        return Err(Error::Contract("attention weights exist only for GAT".into()));
    }
    let d = bundle.center.len();
    let mut scope = Scope::inference(store);
    let center = scope.tape.constant(Tensor::matrix(1, d, bundle.center.clone())?);
    let nb: Vec<Real> = bundle.neighbors.iter().flatten().copied().collect();
    let nb = scope.tape.constant(Tensor::matrix(NEIGHBOR_SLOTS, d, nb)?);
    let cand = agg.candidates(&mut scope, center, nb, 1)?;
    let p = format!("{}.h{head}", agg.prefix);
    let w = scope.param(&format!("{p}.w"))?;
    let a_c = scope.param(&format!("{p}.a_center"))?;
    let a_n = scope.param(&format!("{p}.a_neighbor"))?;
    let proj_c = scope.tape.matmul(center, w)?;
    let proj = scope.tape.matmul(cand, w)?;
    let sc = scope.tape.matmul(proj_c, a_c)?;
    let sn = scope.tape.matmul(proj, a_n)?;
    let sc = scope.tape.value(sc).data()[0];
    let slope = agg.cfg.leaky_relu_slope as Real;
    let logits: Vec<Real> = scope
        .tape
        .value(sn)
        .data()
        .iter()
        .map(|&x| {
            let z = sc + x;
            if z > 0.0 {
                z
            } else {
                slope * z
            }
        })
        .collect();
    let mut mask = vec![agg.cfg.include_self];
    mask.extend_from_slice(&bundle.mask);
    crate::autodiff::masked_softmax_values(&logits, &mask)
}
