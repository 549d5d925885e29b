use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse constant matrix: one list of `(column, value)` pairs per row.
pub type SparseRows = Vec<Vec<(usize, Real)>>;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Relu,
    LeakyRelu(Real),
    Elu,
    Gelu,
    Sigmoid,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchedMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    SparseMatMul {
        rows: Rc<SparseRows>,
        w: Var,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddRowBias {
        a: Var,
        bias: Var,
        cols: usize,
    },
    Unary {
        a: Var,
        kind: Unary,
    },
    MaskedSoftmax {
        a: Var,
        mask: Rc<Vec<bool>>,
        cols: usize,
    },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
        len: usize,
        in_cols: usize,
    },
    Gather {
        a: Var,
        idx: Rc<Vec<Option<usize>>>,
        cols: usize,
    },
    Permute {
        a: Var,
        perm: Rc<Vec<usize>>,
    },
    Reshape(Var),
    SegmentMax {
        a: Var,
        argmax: Vec<usize>,
    },
    GroupWeightedSum {
        w: Var,
        x: Var,
        groups: usize,
        size: usize,
        d: usize,
    },
    Sum(Var),
    Mean(Var),
    Bce {
        pred: Var,
        labels: Vec<Real>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in topological order; each node's inputs precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Clamp applied to probabilities before taking logs in the BCE loss.
pub const BCE_EPS: Real = 1e-7;

/// Tanh approximation constants for GELU.
const GELU_C: Real = 0.797_884_6;
const GELU_A: Real = 0.044715;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. It participates in backward iff the tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        mm(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// Per-batch product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn batched_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([ba, m, k], [bb, x, y]) if ba == bb => {
                let (kb, n) = if trans_b { (*y, *x) } else { (*x, *y) };
                if kb != *k {
                    return Err(Error::shape("batched_matmul", &sa, &sb));
                }
                (*ba, *m, *k, n)
            }
            _ => return Err(Error::shape("batched_matmul", &sa, &sb)),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..batch {
                let a_b = &ad[bi * m * k..(bi + 1) * m * k];
                let b_b = &bd[bi * k * n..(bi + 1) * k * n];
                let o_b = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    mm_bt(a_b, b_b, m, k, n, o_b);
                } else {
                    mm(a_b, b_b, m, k, n, o_b);
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchedMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// Constant sparse `[rows.len() × V]` matrix times `w: [V × n]`.
    pub fn sparse_matmul(&mut self, rows: Rc<SparseRows>, w: Var) -> Result<Var> {
        let (v, n) = self.mat_dims(w, "sparse_matmul")?;
        if rows.is_empty() {
            return Err(Error::Contract("sparse_matmul needs at least one row".into()));
        }
        let mut out = vec![0.0; rows.len() * n];
        {
            let wd = self.value(w).data();
            for (r, entries) in rows.iter().enumerate() {
                let o = &mut out[r * n..(r + 1) * n];
                for &(c, x) in entries {
                    if c >= v {
                        return Err(Error::shape("sparse_matmul", &[r, c], &[v, n]));
                    }
                    axpy(x, &wd[c * n..(c + 1) * n], o);
                }
            }
        }
        let rg = self.rg(&[w]);
        let m = rows.len();
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::SparseMatMul { rows, w, n },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(Real, Real) -> Real) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * c).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, c), rg)
    }

    /// Adds `bias: [n]` to every row of `a: [.., n]`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(a).rows_cols();
        if self.value(bias).numel() != cols {
            return Err(Error::shape("add_row_bias", self.shape(a), self.shape(bias)));
        }
        let mut data = self.value(a).data().to_vec();
        let bd = self.value(bias).data();
        for row in data.chunks_mut(cols) {
            for (x, b) in row.iter_mut().zip(bd) {
                *x += b;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::AddRowBias { a, bias, cols },
            rg,
        ))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| unary_fwd(kind, x)).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, data), Op::Unary { a, kind }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: Real) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Elu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    /// Row-wise softmax over the last axis, restricted to entries whose mask
    /// is true. Masked entries get probability exactly zero.
    pub fn masked_softmax(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let va = self.value(a);
        if mask.len() != va.numel() {
            return Err(Error::shape("masked_softmax", va.shape(), &[mask.len()]));
        }
        let (_, cols) = va.rows_cols();
        let mut out = vec![0.0; va.numel()];
        for (r, (row, mrow)) in va.data().chunks(cols).zip(mask.chunks(cols)).enumerate() {
            let o = &mut out[r * cols..(r + 1) * cols];
            softmax_row(row, mrow, o).map_err(|_| {
                Error::InvalidMask(format!("row {r} of masked_softmax has every entry masked"))
            })?;
        }
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MaskedSoftmax { a, mask, cols },
            rg,
        ))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: Real) -> Result<Var> {
        let (rows, cols) = self.value(a).rows_cols();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::shape("layer_norm", self.shape(a), self.shape(gamma)));
        }
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        {
            let x = self.value(a).data();
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<Real>() / cols as Real;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / cols as Real;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for c in 0..cols {
                    let h = (row[c] - mean) * is;
                    xhat[r * cols + c] = h;
                    out[r * cols + c] = h * g[c] + b[c];
                }
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                a,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (rows, _) = self.mat_dims(first, "concat_cols")?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            dims.push((p, c));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &dims {
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols { parts: dims, rows },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, cols) = self.mat_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.mat_dims(a, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::shape("slice_cols", self.shape(a), &[start, len]));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.value(a).data()[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, len], out),
            Op::SliceCols {
                a,
                start,
                len,
                in_cols: cols,
            },
            rg,
        ))
    }

    /// Row gather; `None` produces a zero row that receives no gradient.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<Option<usize>>>) -> Result<Var> {
        let (rows, cols) = self.value(a).rows_cols();
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let mut out = vec![0.0; idx.len() * cols];
        for (o, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= rows {
                    return Err(Error::shape("gather_rows", self.shape(a), &[i]));
                }
                out[o * cols..(o + 1) * cols]
                    .copy_from_slice(&self.value(a).data()[i * cols..(i + 1) * cols]);
            }
        }
        let rg = self.rg(&[a]);
        let n = idx.len();
        Ok(self.push(
            Tensor::from_parts(vec![n, cols], out),
            Op::Gather { a, idx, cols },
            rg,
        ))
    }

    /// `out[i] = a[perm[i]]` over flat storage, reinterpreted as `shape`.
    pub fn permute(&mut self, a: Var, perm: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(a).numel();
        if perm.len() != n || shape.iter().product::<usize>() != n {
            return Err(Error::shape("permute", self.shape(a), &shape));
        }
        let src = self.value(a).data();
        let out = perm.iter().map(|&p| src[p]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Permute { a, perm }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", t.shape(), &shape));
        }
        let data = t.data().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Reshape(a), rg))
    }

    /// Column-wise max over each contiguous row segment `(start, len)`.
    pub fn segment_max(&mut self, a: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = self.mat_dims(a, "segment_max")?;
        let mut out = Vec::with_capacity(segments.len() * cols);
        let mut argmax = Vec::with_capacity(segments.len() * cols);
        let x = self.value(a).data();
        for &(start, len) in segments {
            if len == 0 || start + len > rows {
                return Err(Error::shape("segment_max", &[rows, cols], &[start, len]));
            }
            for c in 0..cols {
                let mut best = start * cols + c;
                for r in start + 1..start + len {
                    let i = r * cols + c;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![segments.len(), cols], out),
            Op::SegmentMax { a, argmax },
            rg,
        ))
    }

    /// `out[g] = Σ_j w[g, j] · x[g·size + j]` for `w: [G × size]`,
    /// `x: [G·size × d]`.
    pub fn group_weighted_sum(&mut self, w: Var, x: Var) -> Result<Var> {
        let (groups, size) = self.mat_dims(w, "group_weighted_sum")?;
        let (xr, d) = self.mat_dims(x, "group_weighted_sum")?;
        if xr != groups * size {
            return Err(Error::shape("group_weighted_sum", self.shape(w), self.shape(x)));
        }
        let mut out = vec![0.0; groups * d];
        {
            let wd = self.value(w).data();
            let xd = self.value(x).data();
            for g in 0..groups {
                let o = &mut out[g * d..(g + 1) * d];
                for j in 0..size {
                    let r = g * size + j;
                    axpy(wd[r], &xd[r * d..(r + 1) * d], o);
                }
            }
        }
        let rg = self.rg(&[w, x]);
        Ok(self.push(
            Tensor::from_parts(vec![groups, d], out),
            Op::GroupWeightedSum {
                w,
                x,
                groups,
                size,
                d,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<Real>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<Real>() / t.numel() as Real;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean binary cross-entropy with probabilities clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_mean(&mut self, pred: Var, labels: &[Real]) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != labels.len() {
            return Err(Error::shape("bce_mean", p.shape(), &[labels.len()]));
        }
        let n = labels.len() as Real;
        let loss = p
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<Real>()
            / n;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Every node is visited at most once,
    /// in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<Real>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }

        let leaf_grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    Some(grads[i].take().unwrap_or_else(|| vec![0.0; n.value.numel()]))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: leaf_grads })
    }

    fn backward_node(&self, node: &Node, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let da = slot(grads, a, m * k);
                    mm_bt(g, val(b), m, n, k, da);
                }
                if wants(b) {
                    let db = slot(grads, b, k * n);
                    mm_at(val(a), g, m, k, n, db);
                }
            }
            &Op::BatchedMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (ad, bd) = (val(a), val(b));
                if wants(a) {
                    let da = slot(grads, a, batch * m * k);
                    for bi in 0..batch {
                        let g_b = &g[bi * m * n..(bi + 1) * m * n];
                        let b_b = &bd[bi * k * n..(bi + 1) * k * n];
                        let da_b = &mut da[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            mm(g_b, b_b, m, n, k, da_b);
                        } else {
                            mm_bt(g_b, b_b, m, n, k, da_b);
                        }
                    }
                }
                if wants(b) {
                    let db = slot(grads, b, batch * k * n);
                    for bi in 0..batch {
                        let g_b = &g[bi * m * n..(bi + 1) * m * n];
                        let a_b = &ad[bi * m * k..(bi + 1) * m * k];
                        let db_b = &mut db[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            mm_at(g_b, a_b, m, n, k, db_b);
                        } else {
                            mm_at(a_b, g_b, m, k, n, db_b);
                        }
                    }
                }
            }
            Op::SparseMatMul { rows, w, n } => {
                let (w, n) = (*w, *n);
                if wants(w) {
                    let len = self.nodes[w.0].value.numel();
                    let dw = slot(grads, w, len);
                    for (r, entries) in rows.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        for &(c, x) in entries {
                            axpy(x, gr, &mut dw[c * n..(c + 1) * n]);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        axpy(1.0, g, slot(grads, v, g.len()));
                    }
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    axpy(1.0, g, slot(grads, a, g.len()));
                }
                if wants(b) {
                    axpy(-1.0, g, slot(grads, b, g.len()));
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bd = val(b);
                    let da = slot(grads, a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bd[i];
                    }
                }
                if wants(b) {
                    let ad = val(a);
                    let db = slot(grads, b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * ad[i];
                    }
                }
            }
            &Op::Scale(a, c) => {
                if wants(a) {
                    axpy(c, g, slot(grads, a, g.len()));
                }
            }
            &Op::AddRowBias { a, bias, cols } => {
                if wants(a) {
                    axpy(1.0, g, slot(grads, a, g.len()));
                }
                if wants(bias) {
                    let db = slot(grads, bias, cols);
                    for row in g.chunks(cols) {
                        axpy(1.0, row, db);
                    }
                }
            }
            &Op::Unary { a, kind } => {
                if wants(a) {
                    let x = val(a);
                    let y = node.value.data();
                    let da = slot(grads, a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * unary_grad(kind, x[i], y[i]);
                    }
                }
            }
            Op::MaskedSoftmax { a, mask, cols } => {
                let (a, cols) = (*a, *cols);
                if wants(a) {
                    let y = node.value.data();
                    let da = slot(grads, a, g.len());
                    for r in 0..g.len() / cols {
                        let s = r * cols..(r + 1) * cols;
                        let dot: Real = y[s.clone()].iter().zip(&g[s.clone()]).map(|(p, q)| p * q).sum();
                        for i in s {
                            if mask[i] {
                                da[i] += y[i] * (g[i] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            } => {
                let (a, gamma, beta, cols) = (*a, *gamma, *beta, *cols);
                let rows = g.len() / cols;
                if wants(gamma) {
                    let dg = slot(grads, gamma, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if wants(beta) {
                    let db = slot(grads, beta, cols);
                    for row in g.chunks(cols) {
                        axpy(1.0, row, db);
                    }
                }
                if wants(a) {
                    let gm = val(gamma).to_vec();
                    let da = slot(grads, a, g.len());
                    let nf = cols as Real;
                    for r in 0..rows {
                        let s = r * cols;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let d = g[s + c] * gm[c];
                            sum_d += d;
                            sum_dx += d * xhat[s + c];
                        }
                        for c in 0..cols {
                            let d = g[s + c] * gm[c];
                            da[s + c] += inv_std[r] / nf * (nf * d - sum_d - xhat[s + c] * sum_dx);
                        }
                    }
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, c) in parts {
                    if wants(p) {
                        let dp = slot(grads, p, rows * c);
                        for r in 0..*rows {
                            axpy(1.0, &g[r * total + off..r * total + off + c], &mut dp[r * c..(r + 1) * c]);
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if wants(p) {
                        axpy(1.0, &g[off..off + len], slot(grads, p, len));
                    }
                    off += len;
                }
            }
            &Op::SliceCols {
                a,
                start,
                len,
                in_cols,
            } => {
                if wants(a) {
                    let rows = g.len() / len;
                    let da = slot(grads, a, rows * in_cols);
                    for r in 0..rows {
                        axpy(
                            1.0,
                            &g[r * len..(r + 1) * len],
                            &mut da[r * in_cols + start..r * in_cols + start + len],
                        );
                    }
                }
            }
            Op::Gather { a, idx, cols } => {
                let (a, cols) = (*a, *cols);
                if wants(a) {
                    let len = self.nodes[a.0].value.numel();
                    let da = slot(grads, a, len);
                    for (o, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            axpy(1.0, &g[o * cols..(o + 1) * cols], &mut da[i * cols..(i + 1) * cols]);
                        }
                    }
                }
            }
            Op::Permute { a, perm } => {
                let a = *a;
                if wants(a) {
                    let da = slot(grads, a, g.len());
                    for (i, &p) in perm.iter().enumerate() {
                        da[p] += g[i];
                    }
                }
            }
            &Op::Reshape(a) => {
                if wants(a) {
                    axpy(1.0, g, slot(grads, a, g.len()));
                }
            }
            Op::SegmentMax { a, argmax } => {
                let a = *a;
                if wants(a) {
                    let len = self.nodes[a.0].value.numel();
                    let da = slot(grads, a, len);
                    for (o, &i) in argmax.iter().enumerate() {
                        da[i] += g[o];
                    }
                }
            }
            &Op::GroupWeightedSum {
                w,
                x,
                groups,
                size,
                d,
            } => {
                let (wd, xd) = (val(w), val(x));
                if wants(w) {
                    let dw = slot(grads, w, groups * size);
                    for gi in 0..groups {
                        let gg = &g[gi * d..(gi + 1) * d];
                        for j in 0..size {
                            let r = gi * size + j;
                            dw[r] += dot(gg, &xd[r * d..(r + 1) * d]);
                        }
                    }
                }
                if wants(x) {
                    let dx = slot(grads, x, groups * size * d);
                    for gi in 0..groups {
                        let gg = &g[gi * d..(gi + 1) * d];
                        for j in 0..size {
                            let r = gi * size + j;
                            axpy(wd[r], gg, &mut dx[r * d..(r + 1) * d]);
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if wants(a) {
                    let len = self.nodes[a.0].value.numel();
                    for v in slot(grads, a, len) {
                        *v += g[0];
                    }
                }
            }
            &Op::Mean(a) => {
                if wants(a) {
                    let len = self.nodes[a.0].value.numel();
                    let s = g[0] / len as Real;
                    for v in slot(grads, a, len) {
                        *v += s;
                    }
                }
            }
            Op::Bce { pred, labels } => {
                let pred = *pred;
                if wants(pred) {
                    let p = val(pred);
                    let n = labels.len() as Real;
                    let dp = slot(grads, pred, labels.len());
                    for i in 0..labels.len() {
                        let pi = p[i];
                        if pi <= BCE_EPS || pi >= 1.0 - BCE_EPS {
                            continue;
                        }
                        let y = labels[i];
                        dp[i] += g[0] * (-(y / pi) + (1.0 - y) / (1.0 - pi)) / n;
                    }
                }
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf; zeros if the loss does not reach it.
    pub fn get(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<Real>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<Real>>], v: Var, len: usize) -> &'a mut [Real] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn softmax_row(row: &[Real], mask: &[bool], out: &mut [Real]) -> std::result::Result<(), ()> {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .fold(Real::NEG_INFINITY, Real::max);
    if max == Real::NEG_INFINITY && !mask.iter().any(|&m| m) {
        return Err(());
    }
    let mut total = 0.0;
    for i in 0..row.len() {
        if mask[i] {
            let e = (row[i] - max).exp();
            out[i] = e;
            total += e;
        } else {
            out[i] = 0.0;
        }
    }
    for i in 0..row.len() {
        if mask[i] {
            out[i] /= total;
        }
    }
    Ok(())
}

/// Softmax over the unmasked entries of a single row, outside any tape.
pub fn masked_softmax_values(logits: &[Real], mask: &[bool]) -> Result<Vec<Real>> {
    if logits.len() != mask.len() {
        return Err(Error::shape("masked_softmax", &[logits.len()], &[mask.len()]));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_row(logits, mask, &mut out)
        .map_err(|_| Error::InvalidMask("every entry is masked".into()))?;
    Ok(out)
}

fn unary_fwd(kind: Unary, x: Real) -> Real {
    match kind {
        Unary::Tanh => x.tanh(),
        Unary::Relu => x.max(0.0),
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        Unary::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp_m1()
            }
        }
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        Unary::Sigmoid => sigmoid(x),
    }
}

fn unary_grad(kind: Unary, x: Real, y: Real) -> Real {
    match kind {
        Unary::Tanh => 1.0 - y * y,
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
        Unary::Elu => {
            if x > 0.0 {
                1.0
            } else {
                y + 1.0
            }
        }
        Unary::Gelu => {
            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
        Unary::Sigmoid => y * (1.0 - y),
    }
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn axpy(alpha: Real, x: &[Real], y: &mut [Real]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn mm(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x != 0.0 {
                axpy(x, &b[p * n..(p + 1) * n], o);
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
fn mm_bt(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
fn mm_at(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x != 0.0 {
                axpy(x, br, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}
