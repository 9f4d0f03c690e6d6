//! Dense f64 tensors, seeded RNG, trainable parameters, a reverse-mode
//! tape, finite-difference gradient checking and checkpoint I/O.

mod checkpoint;
mod gradcheck;
mod param;
mod rng;
pub mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use param::Param;
pub use rng::{derive_seed, SeededRng};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major f64 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Param(format!("zero-sized dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Param(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Param("from_rows: no rows".into()));
        }
        let n = rows[0].len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Param("from_rows: ragged rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), n], data)
    }

    pub fn row_vector(v: Vec<f64>) -> Self {
        let n = v.len();
        Tensor {
            shape: vec![1, n],
            data: v,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of the trailing 2-D view: all leading axes are folded together.
    pub fn rows2(&self) -> usize {
        let cols = self.cols2();
        self.data.len() / cols
    }

    /// Size of the last axis.
    pub fn cols2(&self) -> usize {
        *self.shape.last().expect("tensor has no axes")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols2();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols2() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols2();
        self.data[i * c + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact bit-level equality (distinguishes -0.0 from 0.0, unlike ==).
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn add_in_place(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_in_place shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }
}

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = two_d(a, "matmul")?;
    let (kb, n) = two_d(b, "matmul")?;
    if k != kb {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b.data[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a (m×k) · bᵀ (k×n from b: n×k)` — dot products of contiguous rows.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = two_d(a, "matmul_nt")?;
    let (n, kb) = two_d(b, "matmul_nt")?;
    if k != kb {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ (k×m from a: m... k rows) · b` — i.e. `a: k×m`, `b: k×n` → `m×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = two_d(a, "matmul_tn")?;
    let (kb, n) = two_d(b, "matmul_tn")?;
    if k != kb {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for l in 0..k {
        let arow = a.row(l);
        let brow = b.row(l);
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn two_d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Dim {
            op,
            lhs: format!("{:?}", t.shape()),
            rhs: "rank-2".into(),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Row-wise temperature softmax over the last axis, stabilized by row-max
/// subtraction. Rows sum to 1 within 1e-12 for |x| ≤ 50.
pub fn softmax_rows(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::Param(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let cols = x.cols2();
    let mut out = x.clone();
    for i in 0..x.rows2() {
        let row = out.row_mut(i);
        let mut mx = f64::NEG_INFINITY;
        for &v in row.iter() {
            mx = mx.max(v / temperature);
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v / temperature - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        debug_assert_eq!(row.len(), cols);
    }
    Ok(out)
}

/// GELU with the tanh approximation:
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`. Smooth everywhere.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&i2, &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_computed() {
        // [[1,2],[3,4]] · [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_case() {
        let z = Tensor::zeros(vec![2, 3]);
        let mut rng = SeededRng::new(3);
        let b = rng.uniform_tensor(vec![3, 4], -1.0, 1.0);
        let c = matmul(&z, &b).unwrap();
        assert_eq!(c, Tensor::zeros(vec![2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = SeededRng::new(11);
        let a = rng.uniform_tensor(vec![4, 3], -1.0, 1.0);
        let b = rng.uniform_tensor(vec![3, 5], -1.0, 1.0);
        let c = matmul(&a, &b).unwrap();
        // a·b == (aᵀ)ᵀ·b via matmul_tn with a stored transposed
        let mut at = Tensor::zeros(vec![3, 4]);
        for i in 0..4 {
            for j in 0..3 {
                at.set2(j, i, a.at2(i, j));
            }
        }
        let c2 = matmul_tn(&at, &b).unwrap();
        assert!(c.max_abs_diff(&c2) < 1e-15);
        let mut bt = Tensor::zeros(vec![5, 3]);
        for i in 0..3 {
            for j in 0..5 {
                bt.set2(j, i, b.at2(i, j));
            }
        }
        let c3 = matmul_nt(&a, &bt).unwrap();
        assert!(c.max_abs_diff(&c3) < 1e-15);
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::row_vector(vec![0.0, 0.0, 0.0]);
        let y = softmax_rows(&x, 1.0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_analytic() {
        let x = Tensor::row_vector(vec![0.0, 2.0_f64.ln()]);
        let y = softmax_rows(&x, 1.0).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-14);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn softmax_argmax_limit() {
        let x = Tensor::row_vector(vec![0.0, 1.0]);
        let y = softmax_rows(&x, 1e-3).unwrap();
        assert!(y.data()[0].abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let x = Tensor::row_vector(vec![0.0, 1.0]);
        assert!(softmax_rows(&x, 0.0).is_err());
        assert!(softmax_rows(&x, -1.0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SeededRng::new(7);
        for _ in 0..50 {
            let x = rng.uniform_tensor(vec![5, 9], -50.0, 50.0);
            let y = softmax_rows(&x, 1.0).unwrap();
            for i in 0..5 {
                let s: f64 = y.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
            }
        }
    }

    #[test]
    fn gelu_grad_matches_fd() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn bits_eq_distinguishes_negative_zero() {
        let a = Tensor::row_vector(vec![0.0]);
        let b = Tensor::row_vector(vec![-0.0]);
        assert_eq!(a, b); // == treats them equal
        assert!(!a.bits_eq(&b));
    }
}
