//! Dense row-major matrices, a strided GEMM wrapper and the scalar fully-connected layer.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Param, Parameterized};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("shape mismatch: {0}")]
    Mismatch(String),
}

/// `c = alpha·a·b + beta·c` for an `m×k` by `k×n` product with arbitrary strides.
///
/// Panics if any addressed element falls outside its slice.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * rsc + j * csc;
                c[idx] = if beta == 0.0 { 0.0 } else { beta * c[idx] };
            }
        }
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, k, rsa, csa) < a.len(), "gemm: a out of bounds");
    assert!(last(k, n, rsb, csb) < b.len(), "gemm: b out of bounds");
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: c out of bounds");
    // SAFETY: every element addressed by the strides was bounds-checked above,
    // and `c` is a unique mutable borrow that cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if data.len() != rows * cols {
            return Err(ShapeError::Mismatch(format!(
                "{} values for a {rows}×{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column-wise concatenation `[self ‖ other]`.
    pub fn hconcat(&self, other: &Mat) -> Result<Mat, ShapeError> {
        if self.rows != other.rows {
            return Err(ShapeError::Mismatch(format!(
                "cannot concatenate {} rows with {} rows",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Mat {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Splits columns at `at` into `(left, right)`.
    pub fn hsplit(&self, at: usize) -> (Mat, Mat) {
        let mut left = Mat::zeros(self.rows, at);
        let mut right = Mat::zeros(self.rows, self.cols - at);
        for r in 0..self.rows {
            let row = self.row(r);
            left.row_mut(r).copy_from_slice(&row[..at]);
            right.row_mut(r).copy_from_slice(&row[at..]);
        }
        (left, right)
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Mat {
        let mut out = Mat::zeros(perm.len(), self.cols);
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(p));
        }
        out
    }
}

pub fn relu_inplace(m: &mut Mat) {
    for v in &mut m.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the forward activation was clipped.
pub fn relu_backward_inplace(grad: &mut Mat, activated: &Mat) {
    for (g, a) in grad.data.iter_mut().zip(&activated.data) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Fully-connected scalar layer `y = x·Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    /// Fan-in scaled Gaussian weights, zero bias.
    pub fn init(name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::gaussian(&format!("{name}.weight"), vec![outputs, inputs], inputs.max(1), rng),
            bias: Param::zeros(&format!("{name}.bias"), vec![outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat, ShapeError> {
        if x.cols != self.inputs() {
            return Err(ShapeError::Mismatch(format!(
                "dense layer {} expects {} inputs, got {}",
                self.weight.name,
                self.inputs(),
                x.cols
            )));
        }
        let (n, i, o) = (x.rows, self.inputs(), self.outputs());
        let mut y = Mat::zeros(n, o);
        for r in 0..n {
            y.row_mut(r).copy_from_slice(&self.bias.value);
        }
        // y (n×o) += x (n×i) · Wᵀ (i×o)
        gemm(
            n,
            i,
            o,
            1.0,
            &x.data,
            i,
            1,
            &self.weight.value,
            1,
            i,
            1.0,
            &mut y.data,
            o,
            1,
        );
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        let (n, i, o) = (x.rows, self.inputs(), self.outputs());
        debug_assert_eq!(dy.rows, n);
        debug_assert_eq!(dy.cols, o);
        // dW (o×i) += dyᵀ (o×n) · x (n×i)
        gemm(
            o,
            n,
            i,
            1.0,
            &dy.data,
            1,
            o,
            &x.data,
            i,
            1,
            1.0,
            &mut self.weight.grad,
            i,
            1,
        );
        for r in 0..n {
            for (g, d) in self.bias.grad.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        // dx (n×i) = dy (n×o) · W (o×i)
        let mut dx = Mat::zeros(n, i);
        gemm(
            n,
            o,
            i,
            1.0,
            &dy.data,
            o,
            1,
            &self.weight.value,
            i,
            1,
            0.0,
            &mut dx.data,
            i,
            1,
        );
        dx
    }
}

impl Parameterized for Dense {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Two dense layers with a pointwise `max(0, ·)` between them.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub fc1: Dense,
    pub fc2: Dense,
}

#[derive(Debug, Clone)]
pub struct Mlp2Cache {
    input: Mat,
    hidden: Mat,
}

impl Mlp2 {
    pub fn init(name: &str, inputs: usize, hidden: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Dense::init(&format!("{name}.fc1"), inputs, hidden, rng),
            fc2: Dense::init(&format!("{name}.fc2"), hidden, outputs, rng),
        }
    }

    pub fn forward(&self, x: &Mat) -> Result<(Mat, Mlp2Cache), ShapeError> {
        let mut hidden = self.fc1.forward(x)?;
        relu_inplace(&mut hidden);
        let y = self.fc2.forward(&hidden)?;
        Ok((
            y,
            Mlp2Cache {
                input: x.clone(),
                hidden,
            },
        ))
    }

    pub fn backward(&mut self, cache: &Mlp2Cache, dy: &Mat) -> Mat {
        let mut dh = self.fc2.backward(&cache.hidden, dy);
        relu_backward_inplace(&mut dh, &cache.hidden);
        self.fc1.backward(&cache.input, &dh)
    }
}

impl Parameterized for Mlp2 {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use rand::Rng;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product() {
        let mut rng = seeded_rng(0);
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a, k, 1, &b, n, 1, 0.0, &mut c, n, 1);
        for (x, y) in c.iter().zip(naive(m, k, n, &a, &b)) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn dense_forward_matches_hand_product() {
        let mut rng = seeded_rng(1);
        let layer = Dense::init("fc", 4, 3, &mut rng);
        let x = Mat::from_vec(2, 4, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let y = layer.forward(&x).unwrap();
        for r in 0..2 {
            for o in 0..3 {
                let mut e = layer.bias.value[o];
                for i in 0..4 {
                    e += layer.weight.value[o * 4 + i] * x.get(r, i);
                }
                assert!((y.get(r, o) - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let layer = Dense::init("fc", 4, 3, &mut seeded_rng(2));
        assert!(layer.forward(&Mat::zeros(2, 5)).is_err());
    }
}
