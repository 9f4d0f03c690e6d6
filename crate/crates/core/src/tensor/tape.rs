//! Reverse-mode autodiff over a recorded operation tape.
//!
//! The tape stores every intermediate value; `backward` walks the nodes in
//! reverse creation order and accumulates gradients for nodes that
//! (transitively) depend on a trainable leaf. Frozen tensors enter as plain
//! `input` constants and never receive gradients.

use super::{gelu, gelu_grad, matmul, matmul_nt, matmul_tn, softmax_rows, Param, Tensor};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    /// a · bᵀ
    MatmulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// x[m×n] + row-broadcast b[1×n]
    AddRow(Var, Var),
    Scale(Var, f64),
    /// x ⊙ s with s a [1] tensor
    ScaleVar(Var, Var),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    SoftmaxRows(Var, f64),
    /// softmax(x + mask) rows; mask is a constant additive tensor
    MaskedSoftmaxRows(Var, Tensor),
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    },
    Gelu(Var),
    Sum(Var),
    Square(Var),
    /// 1/sqrt(s + eps) for a [1] tensor
    RsqrtScalar(Var, f64),
    GatherRows(Var, Vec<usize>),
    /// Σ_t (logsumexp(logits_t) − logits_t[y_t]) over rows
    NllRows(Var, Vec<usize>),
    /// ln Σ_{i ∈ idx} exp(x_i) over the flattened input
    LogSumExpMasked(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub const LN_EPS: f64 = 1e-5;

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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Parameter leaf. Frozen params enter as constants.
    pub fn param(&mut self, p: &Param) -> Var {
        self.push(p.value.clone(), Op::Leaf, p.trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Matmul(a, b), g))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_nt(self.value(a), self.value(b))?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatmulNT(a, b), g))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut v = self.value(a).clone();
        v.add_in_place(self.value(b));
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let bd = self.value(b).clone();
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(bd.data()) {
            *x -= y;
        }
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let bd = self.value(b).clone();
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(bd.data()) {
            *x *= y;
        }
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    /// x[…×n] + b broadcast over every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).cols2();
        if self.value(b).numel() != n {
            return Err(Error::dim("add_row", self.value(x).shape(), self.value(b).shape()));
        }
        let bd = self.value(b).clone();
        let mut v = self.value(x).clone();
        let rows = v.rows2();
        for i in 0..rows {
            for (o, &bv) in v.row_mut(i).iter_mut().zip(bd.data()) {
                *o += bv;
            }
        }
        let g = self.ng(x) || self.ng(b);
        Ok(self.push(v, Op::AddRow(x, b), g))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut v = self.value(x).clone();
        v.scale_in_place(c);
        let g = self.ng(x);
        self.push(v, Op::Scale(x, c), g)
    }

    /// Multiply every element of x by the scalar tensor s (shape [1]).
    pub fn scale_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale_var", self.value(s).shape(), &[1]));
        }
        let sv = self.value(s).data()[0];
        let mut v = self.value(x).clone();
        v.scale_in_place(sv);
        let g = self.ng(x) || self.ng(s);
        Ok(self.push(v, Op::ScaleVar(x, s), g))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols2() != tb.cols2() {
            return Err(Error::dim("concat_rows", ta.shape(), tb.shape()));
        }
        let n = ta.cols2();
        let rows = ta.rows2() + tb.rows2();
        let mut data = Vec::with_capacity(rows * n);
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let v = Tensor::new(vec![rows, n], data)?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::ConcatRows(a, b), g))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows2() != tb.rows2() {
            return Err(Error::dim("concat_cols", ta.shape(), tb.shape()));
        }
        let (m, n1, n2) = (ta.rows2(), ta.cols2(), tb.cols2());
        let mut data = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let v = Tensor::new(vec![m, n1 + n2], data)?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::ConcatCols(a, b), g))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows2(), t.cols2());
        if start + len > n {
            return Err(Error::Param(format!(
                "slice_cols {start}..{} out of {n}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let v = Tensor::new(vec![m, len], data)?;
        let g = self.ng(x);
        Ok(self.push(v, Op::SliceCols(x, start, len), g))
    }

    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let v = softmax_rows(self.value(x), temperature)?;
        let g = self.ng(x);
        Ok(self.push(v, Op::SoftmaxRows(x, temperature), g))
    }

    /// softmax over rows of (x + mask); mask is constant (e.g. causal).
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        if self.value(x).shape() != mask.shape() {
            return Err(Error::dim("masked_softmax_rows", self.value(x).shape(), mask.shape()));
        }
        let mut biased = self.value(x).clone();
        biased.add_in_place(&mask);
        let v = softmax_rows(&biased, 1.0)?;
        let g = self.ng(x);
        Ok(self.push(v, Op::MaskedSoftmaxRows(x, mask), g))
    }

    /// Per-row layer normalization over the last axis with affine output.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let d = self.value(x).cols2();
        if self.value(scale).numel() != d || self.value(shift).numel() != d {
            return Err(Error::dim("layer_norm", self.value(x).shape(), self.value(scale).shape()));
        }
        let sc = self.value(scale).clone();
        let sh = self.value(shift).clone();
        let mut v = self.value(x).clone();
        let rows = v.rows2();
        for i in 0..rows {
            let row = v.row_mut(i);
            let (mean, inv_std) = row_stats(row, LN_EPS);
            for (j, r) in row.iter_mut().enumerate() {
                *r = (*r - mean) * inv_std * sc.data()[j] + sh.data()[j];
            }
        }
        let g = self.ng(x) || self.ng(scale) || self.ng(shift);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                scale,
                shift,
                eps: LN_EPS,
            },
            g,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let g = self.ng(x);
        self.push(v, Op::Gelu(x), g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let g = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        let g = self.ng(x);
        self.push(v, Op::Square(x), g)
    }

    /// 1/sqrt(s + eps) for a [1] tensor.
    pub fn rsqrt_scalar(&mut self, s: Var, eps: f64) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("rsqrt_scalar", self.value(s).shape(), &[1]));
        }
        let sv = self.value(s).data()[0];
        let v = Tensor::scalar(1.0 / (sv + eps).sqrt());
        let g = self.ng(s);
        Ok(self.push(v, Op::RsqrtScalar(s, eps), g))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols2();
        let rows = t.rows2();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Param(format!("gather_rows index {bad} out of {rows}")));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![indices.len(), n], data)?;
        let g = self.ng(x);
        Ok(self.push(v, Op::GatherRows(x, indices.to_vec()), g))
    }

    /// Negative log-likelihood summed over rows: Σ_t (lse(logits_t) − logits_t[y_t]).
    pub fn nll_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = (t.rows2(), t.cols2());
        if targets.len() != rows {
            return Err(Error::dim("nll_rows", &[rows], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= cols) {
            return Err(Error::Param(format!("nll target {bad} out of vocab {cols}")));
        }
        let mut total = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = t.row(i);
            let lse = log_sum_exp(row);
            total += lse - row[y];
        }
        let g = self.ng(logits);
        Ok(self.push(Tensor::scalar(total), Op::NllRows(logits, targets.to_vec()), g))
    }

    /// ln Σ_{i ∈ idx} exp(x_i) over the flattened tensor.
    pub fn log_sum_exp_masked(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if indices.is_empty() {
            return Err(Error::Param("log_sum_exp_masked: empty index set".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::Param(format!(
                "log_sum_exp_masked index {bad} out of {}",
                t.numel()
            )));
        }
        let mut mx = f64::NEG_INFINITY;
        for &i in indices {
            mx = mx.max(t.data()[i]);
        }
        let mut s = 0.0;
        for &i in indices {
            s += (t.data()[i] - mx).exp();
        }
        let v = Tensor::scalar(mx + s.ln());
        let g = self.ng(x);
        Ok(self.push(v, Op::LogSumExpMasked(x, indices.to_vec()), g))
    }

    /// Affine map over the last axis: x·w (+ b).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(bias) => self.add_row(y, bias),
            None => Ok(y),
        }
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients for
    /// nodes that need them; read them back with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Eval(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.data()[0].is_finite() {
            return Err(Error::Eval("non-finite loss".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(grads); // nothing trainable feeds the loss
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.accumulate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_in_place(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.ng(*a) {
                    self.add_grad(grads, *a, matmul_nt(g, self.value(*b))?);
                }
                if self.ng(*b) {
                    self.add_grad(grads, *b, matmul_tn(self.value(*a), g)?);
                }
            }
            Op::MatmulNT(a, b) => {
                if self.ng(*a) {
                    self.add_grad(grads, *a, matmul(g, self.value(*b))?);
                }
                if self.ng(*b) {
                    self.add_grad(grads, *b, matmul_tn(g, self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let mut d = g.clone();
                    for (x, y) in d.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *x *= y;
                    }
                    self.add_grad(grads, *a, d);
                }
                if self.ng(*b) {
                    let mut d = g.clone();
                    for (x, y) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x *= y;
                    }
                    self.add_grad(grads, *b, d);
                }
            }
            Op::AddRow(x, b) => {
                self.add_grad(grads, *x, g.clone());
                if self.ng(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![0.0; n];
                    for i in 0..g.rows2() {
                        for (s, &gv) in db.iter_mut().zip(g.row(i)) {
                            *s += gv;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.add_grad(grads, *b, Tensor::new(shape, db)?);
                }
            }
            Op::Scale(x, c) => {
                self.add_grad(grads, *x, g.map(|v| v * c));
            }
            Op::ScaleVar(x, s) => {
                let sv = self.value(*s).data()[0];
                if self.ng(*x) {
                    self.add_grad(grads, *x, g.map(|v| v * sv));
                }
                if self.ng(*s) {
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, xv)| gv * xv)
                        .sum();
                    self.add_grad(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows2();
                let n = g.cols2();
                if self.ng(*a) {
                    let da = Tensor::new(
                        self.value(*a).shape().to_vec(),
                        g.data()[..ra * n].to_vec(),
                    )?;
                    self.add_grad(grads, *a, da);
                }
                if self.ng(*b) {
                    let db = Tensor::new(
                        self.value(*b).shape().to_vec(),
                        g.data()[ra * n..].to_vec(),
                    )?;
                    self.add_grad(grads, *b, db);
                }
            }
            Op::ConcatCols(a, b) => {
                let n1 = self.value(*a).cols2();
                let n2 = self.value(*b).cols2();
                let m = g.rows2();
                if self.ng(*a) {
                    let mut da = Vec::with_capacity(m * n1);
                    for i in 0..m {
                        da.extend_from_slice(&g.row(i)[..n1]);
                    }
                    self.add_grad(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), da)?);
                }
                if self.ng(*b) {
                    let mut db = Vec::with_capacity(m * n2);
                    for i in 0..m {
                        db.extend_from_slice(&g.row(i)[n1..]);
                    }
                    self.add_grad(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                }
            }
            Op::SliceCols(x, start, len) => {
                let t = self.value(*x);
                let mut dx = Tensor::zeros(t.shape().to_vec());
                for i in 0..g.rows2() {
                    let src = g.row(i);
                    let dst = &mut dx.row_mut(i)[*start..*start + *len];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::SoftmaxRows(x, temp) => {
                let y = &self.nodes[idx].value;
                self.add_grad(grads, *x, softmax_backward(y, g, *temp)?);
            }
            Op::MaskedSoftmaxRows(x, _mask) => {
                let y = &self.nodes[idx].value;
                self.add_grad(grads, *x, softmax_backward(y, g, 1.0)?);
            }
            Op::LayerNorm { x, scale, shift, eps } => {
                let xt = self.value(*x);
                let sc = self.value(*scale);
                let d = xt.cols2();
                let rows = xt.rows2();
                let mut dx = Tensor::zeros(xt.shape().to_vec());
                let mut dscale = vec![0.0; d];
                let mut dshift = vec![0.0; d];
                for i in 0..rows {
                    let row = xt.row(i);
                    let (mean, inv_std) = row_stats(row, *eps);
                    let grow = g.row(i);
                    let mut mean_gs = 0.0;
                    let mut mean_gsx = 0.0;
                    let mut xhat = vec![0.0; d];
                    let mut gs = vec![0.0; d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv_std;
                        gs[j] = grow[j] * sc.data()[j];
                        mean_gs += gs[j];
                        mean_gsx += gs[j] * xhat[j];
                        dscale[j] += grow[j] * xhat[j];
                        dshift[j] += grow[j];
                    }
                    mean_gs /= d as f64;
                    mean_gsx /= d as f64;
                    let drow = dx.row_mut(i);
                    for j in 0..d {
                        drow[j] = inv_std * (gs[j] - mean_gs - xhat[j] * mean_gsx);
                    }
                }
                if self.ng(*x) {
                    self.add_grad(grads, *x, dx);
                }
                if self.ng(*scale) {
                    self.add_grad(
                        grads,
                        *scale,
                        Tensor::new(self.value(*scale).shape().to_vec(), dscale)?,
                    );
                }
                if self.ng(*shift) {
                    self.add_grad(
                        grads,
                        *shift,
                        Tensor::new(self.value(*shift).shape().to_vec(), dshift)?,
                    );
                }
            }
            Op::Gelu(x) => {
                let xt = self.value(*x);
                let mut d = g.clone();
                for (gv, &xv) in d.data_mut().iter_mut().zip(xt.data()) {
                    *gv *= gelu_grad(xv);
                }
                self.add_grad(grads, *x, d);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                let shape = self.value(*x).shape().to_vec();
                self.add_grad(grads, *x, Tensor::filled(shape, gv));
            }
            Op::Square(x) => {
                let xt = self.value(*x);
                let mut d = g.clone();
                for (gv, &xv) in d.data_mut().iter_mut().zip(xt.data()) {
                    *gv *= 2.0 * xv;
                }
                self.add_grad(grads, *x, d);
            }
            Op::RsqrtScalar(s, eps) => {
                let sv = self.value(*s).data()[0];
                let d = -0.5 * (sv + eps).powf(-1.5);
                self.add_grad(grads, *s, Tensor::scalar(g.data()[0] * d));
            }
            Op::GatherRows(x, indices) => {
                let t = self.value(*x);
                let mut dx = Tensor::zeros(t.shape().to_vec());
                for (out_i, &src_i) in indices.iter().enumerate() {
                    let src = g.row(out_i);
                    let dst = dx.row_mut(src_i);
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::NllRows(logits, targets) => {
                let lt = self.value(*logits);
                let gv = g.data()[0];
                let probs = softmax_rows(lt, 1.0)?;
                let mut dl = probs;
                for (i, &y) in targets.iter().enumerate() {
                    let row = dl.row_mut(i);
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= gv;
                    }
                }
                self.add_grad(grads, *logits, dl);
            }
            Op::LogSumExpMasked(x, indices) => {
                let xt = self.value(*x);
                let lse = self.nodes[idx].value.data()[0];
                let gv = g.data()[0];
                let mut dx = Tensor::zeros(xt.shape().to_vec());
                for &i in indices {
                    dx.data_mut()[i] += gv * (xt.data()[i] - lse).exp();
                }
                self.add_grad(grads, *x, dx);
            }
        }
        Ok(())
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn softmax_backward(y: &Tensor, g: &Tensor, temperature: f64) -> Result<Tensor> {
    let mut dx = Tensor::zeros(y.shape().to_vec());
    let cols = y.cols2();
    for i in 0..y.rows2() {
        let yr = y.row(i);
        let gr = g.row(i);
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        let dr = dx.row_mut(i);
        for j in 0..cols {
            dr[j] = yr[j] * (gr[j] - dot) / temperature;
        }
    }
    Ok(dx)
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let s: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
    mx + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    #[test]
    fn backward_through_matmul_sum() {
        // loss = sum(a·b): d/da = ones·bᵀ rows, d/db = aᵀ·ones
        let mut t = Tape::new();
        let a = Param::new("a", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), true);
        let b = Param::new("b", Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap(), true);
        let va = t.param(&a);
        let vb = t.param(&b);
        let c = t.matmul(va, vb).unwrap();
        let loss = t.sum(c);
        let grads = t.backward(loss).unwrap();
        let da = grads[va.0].as_ref().unwrap();
        // row sums of b: [11, 15] broadcast per row of a
        assert_eq!(da.data(), &[11.0, 15.0, 11.0, 15.0]);
        let db = grads[vb.0].as_ref().unwrap();
        // col sums of a: [4, 6] per row of b
        assert_eq!(db.data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn constant_graph_has_no_grads() {
        let mut t = Tape::new();
        let x = t.input(Tensor::row_vector(vec![1.0, 2.0]));
        let loss = t.sum(x);
        let grads = t.backward(loss).unwrap();
        assert!(grads.iter().all(Option::is_none));
    }

    #[test]
    fn elementwise_square_grad() {
        // loss = sum(w ⊙ w), w = [1, 2] → grad [2, 4]
        let mut t = Tape::new();
        let w = Param::new("w", Tensor::row_vector(vec![1.0, 2.0]), true);
        let vw = t.param(&w);
        let sq = t.square(vw);
        let loss = t.sum(sq);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads[vw.0].as_ref().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn nll_uniform_logits() {
        let mut t = Tape::new();
        let logits = t.input(Tensor::zeros(vec![3, 64]));
        let loss = t.nll_rows(logits, &[5, 0, 63]).unwrap();
        let expect = 3.0 * (64.0_f64).ln();
        assert!((t.value(loss).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_respects_mask() {
        let mut t = Tape::new();
        let x = t.input(Tensor::zeros(vec![2, 2]));
        let mask = Tensor::new(vec![2, 2], vec![0.0, -1e30, 0.0, 0.0]).unwrap();
        let y = t.masked_softmax_rows(x, mask).unwrap();
        let v = t.value(y);
        assert!((v.at2(0, 0) - 1.0).abs() < 1e-15);
        assert!(v.at2(0, 1) < 1e-300);
        assert!((v.at2(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gather_rows_scatter_grad() {
        let mut t = Tape::new();
        let e = Param::new("e", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap(), true);
        let ve = t.param(&e);
        let gathered = t.gather_rows(ve, &[2, 2, 0]).unwrap();
        let loss = t.sum(gathered);
        let grads = t.backward(loss).unwrap();
        let de = grads[ve.0].as_ref().unwrap();
        assert_eq!(de.data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn log_sum_exp_masked_subset() {
        let mut t = Tape::new();
        let x = t.input(Tensor::row_vector(vec![0.0, 100.0, 0.0]));
        let l = t.log_sum_exp_masked(x, &[0, 2]).unwrap();
        assert!((t.value(l).data()[0] - (2.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_values() {
        let mut t = Tape::new();
        let x = t.input(Tensor::row_vector(vec![1.0, 1.0, 1.0]));
        let sc = t.input(Tensor::filled(vec![3], 1.0));
        let sh = t.input(Tensor::zeros(vec![3]));
        let y = t.layer_norm(x, sc, sh).unwrap();
        for &v in t.value(y).data() {
            assert!(v.abs() < 1e-12);
        }
        // already zero-mean unit-variance stays put (up to eps)
        let mut t2 = Tape::new();
        let x2 = t2.input(Tensor::row_vector(vec![-1.0, 1.0]));
        let sc2 = t2.input(Tensor::filled(vec![2], 1.0));
        let sh2 = t2.input(Tensor::zeros(vec![2]));
        let y2 = t2.layer_norm(x2, sc2, sh2).unwrap();
        assert!((t2.value(y2).data()[0] + 1.0).abs() < 1e-4);
        assert!((t2.value(y2).data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_statistics_random() {
        let mut rng = SeededRng::new(9);
        let x = rng.uniform_tensor(vec![1, 5], -3.0, 3.0);
        let mut t = Tape::new();
        let vx = t.input(x);
        let sc = t.input(Tensor::filled(vec![5], 1.0));
        let sh = t.input(Tensor::zeros(vec![5]));
        let y = t.layer_norm(vx, sc, sh).unwrap();
        let row = t.value(y).row(0);
        let mean: f64 = row.iter().sum::<f64>() / 5.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
