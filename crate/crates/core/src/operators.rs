//! Forward measurement operators, discrete gradients, SPD factorizations
//! and the generalized Tikhonov inversion layer.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::Container;
use crate::error::{config, contract, Error, Result};
use crate::tensor::{self, Tensor};

/// A linear map `R^cols -> R^rows` with its adjoint.
///
/// `apply`/`adjoint` panic on length mismatch; dimension checks belong at
/// the call sites that accept user input.
pub trait LinearOperator: Send + Sync + Debug {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn apply_into(&self, x: &[f64], out: &mut [f64]);
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]);

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols(), "operator input length");
        let mut out = vec![0.0; self.rows()];
        self.apply_into(x, &mut out);
        out
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows(), "operator adjoint input length");
        let mut out = vec![0.0; self.cols()];
        self.adjoint_into(y, &mut out);
        out
    }

    /// The explicit matrix, when the operator stores one.
    fn dense(&self) -> Option<&Tensor> {
        None
    }

    /// Materializes the operator column by column.
    fn to_dense(&self) -> Tensor {
        if let Some(d) = self.dense() {
            return d.clone();
        }
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        let mut e = vec![0.0; c];
        let mut col = vec![0.0; r];
        for j in 0..c {
            e[j] = 1.0;
            self.apply_into(&e, &mut col);
            for i in 0..r {
                data[i * c + j] = col[i];
            }
            e[j] = 0.0;
        }
        Tensor::new(vec![r, c], data).expect("dims")
    }
}

/// An operator backed by an explicit row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    matrix: Tensor,
}

impl DenseOperator {
    pub fn new(matrix: Tensor) -> Result<Self> {
        matrix.dims2()?;
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut c = Container::with_meta(meta);
        c.push("matrix", self.matrix.clone());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let m = c
            .get("matrix")
            .ok_or_else(|| config("container has no `matrix` entry"))?;
        Self::new(m.clone())
    }
}

impl LinearOperator for DenseOperator {
    fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    fn cols(&self) -> usize {
        self.matrix.shape()[1]
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        tensor::matvec(self.matrix.data(), self.rows(), self.cols(), x, out);
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        tensor::matvec_t(self.matrix.data(), self.rows(), self.cols(), y, out);
    }

    fn dense(&self) -> Option<&Tensor> {
        Some(&self.matrix)
    }
}

/// Draws an `m x n` matrix with i.i.d. `Normal(0, 1/m)` entries.
///
/// Only the underdetermined regime `0 < m < n` is accepted, and the draw is
/// checked to have full row rank.
pub fn sample_gaussian_operator(m: usize, n: usize, seed: u64) -> Result<DenseOperator> {
    if m == 0 || m >= n {
        return Err(config(format!(
            "Gaussian operator needs 0 < m < N, got m={m}, N={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (1.0 / m as f64).sqrt()).expect("valid std");
    let data: Vec<f64> = (0..m * n).map(|_| normal.sample(&mut rng)).collect();
    let op = DenseOperator::new(Tensor::new(vec![m, n], data)?)?;

    let gram = outer_gram(op.matrix());
    SpdFactor::new(&gram, m).map_err(|_| {
        Error::Numerical(format!(
            "sampled {m}x{n} Gaussian operator is rank deficient"
        ))
    })?;
    Ok(op)
}

/// Forward differences with Neumann boundary, closed by a mean row.
///
/// Rows `0..n-1` are `x[i+1] - x[i]`; row `n-1` is `mean(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientOp1D {
    n: usize,
}

impl GradientOp1D {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(contract(format!("1-D gradient needs N >= 2, got {n}")));
        }
        Ok(Self { n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl LinearOperator for GradientOp1D {
    fn rows(&self) -> usize {
        self.n
    }

    fn cols(&self) -> usize {
        self.n
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n - 1 {
            out[i] = x[i + 1] - x[i];
        }
        out[n - 1] = x.iter().sum::<f64>() / n as f64;
    }

    fn adjoint_into(&self, g: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mean = g[n - 1] / n as f64;
        for j in 0..n {
            let mut v = mean;
            if j >= 1 {
                v += g[j - 1];
            }
            if j + 1 < n {
                v -= g[j];
            }
            out[j] = v;
        }
    }
}

/// Convenience wrapper: applies [`GradientOp1D`] to a signal.
pub fn grad_1d(x: &Tensor) -> Result<Tensor> {
    let op = GradientOp1D::new(x.len())?;
    Ok(Tensor::from_vec(op.apply(x.data())))
}

/// Periodic forward differences of an `h x w` image, horizontal block first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientOp2D {
    h: usize,
    w: usize,
}

impl GradientOp2D {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h < 2 || w < 2 {
            return Err(contract(format!(
                "2-D gradient needs H, W >= 2, got {h}x{w}"
            )));
        }
        Ok(Self { h, w })
    }
}

impl LinearOperator for GradientOp2D {
    fn rows(&self) -> usize {
        2 * self.h * self.w
    }

    fn cols(&self) -> usize {
        self.h * self.w
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let (horiz, vert) = out.split_at_mut(h * w);
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                horiz[k] = x[i * w + (j + 1) % w] - x[k];
                vert[k] = x[((i + 1) % h) * w + j] - x[k];
            }
        }
    }

    fn adjoint_into(&self, g: &[f64], out: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let (horiz, vert) = g.split_at(h * w);
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                out[i * w + (j + 1) % w] += horiz[k];
                out[k] -= horiz[k];
                out[((i + 1) % h) * w + j] += vert[k];
                out[k] -= vert[k];
            }
        }
    }
}

/// Applies [`GradientOp2D`] to an `h x w` tensor.
pub fn grad_2d(x: &Tensor) -> Result<Tensor> {
    let (h, w) = x.dims2()?;
    let op = GradientOp2D::new(h, w)?;
    Ok(Tensor::from_vec(op.apply(x.data())))
}

/// `MᵀM` for a row-major matrix, as an `n x n` row-major buffer.
pub fn gram(m: &Tensor) -> Vec<f64> {
    let (r, c) = m.dims2().expect("matrix");
    let d = m.data();
    let mut out = vec![0.0; c * c];
    for row in d.chunks_exact(c).take(r) {
        for i in 0..c {
            let a = row[i];
            if a == 0.0 {
                continue;
            }
            let dst = &mut out[i * c..(i + 1) * c];
            for (o, &b) in dst.iter_mut().zip(row) {
                *o += a * b;
            }
        }
    }
    out
}

/// `MMᵀ` for a row-major matrix.
fn outer_gram(m: &Tensor) -> Vec<f64> {
    let (r, c) = m.dims2().expect("matrix");
    let d = m.data();
    let mut out = vec![0.0; r * r];
    for i in 0..r {
        for j in 0..=i {
            let v = tensor::dot(&d[i * c..(i + 1) * c], &d[j * c..(j + 1) * c]);
            out[i * r + j] = v;
            out[j * r + i] = v;
        }
    }
    out
}

/// Cholesky factor `Q = L Lᵀ` of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    n: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl SpdFactor {
    /// Factors the row-major `n x n` matrix `q`.
    pub fn new(q: &[f64], n: usize) -> Result<Self> {
        if q.len() != n * n {
            return Err(contract("SPD factor: buffer is not n x n"));
        }
        let m = DMatrix::from_row_slice(n, n, q);
        let Some(ch) = m.clone().cholesky() else {
            return Err(Error::Numerical(format!(
                "matrix is not positive definite (condition estimate {:.3e})",
                condition_estimate(&m)
            )));
        };
        let l = ch.l();
        let mut lower = vec![0.0; n * n];
        let mut upper = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                lower[i * n + j] = l[(i, j)];
                upper[j * n + i] = l[(i, j)];
            }
        }
        Ok(Self { n, lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `Q x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        assert_eq!(x.len(), n, "SPD solve length");
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let s = x[i] - tensor::dot(row, &x[..i]);
            x[i] = s / self.lower[i * n + i];
        }
        for i in (0..n).rev() {
            let row = &self.upper[i * n + i + 1..(i + 1) * n];
            let s = x[i] - tensor::dot(row, &x[i + 1..]);
            x[i] = s / self.upper[i * n + i];
        }
    }
}

/// Ratio of extreme eigenvalue magnitudes of a symmetric matrix.
fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let ev = m.clone().symmetric_eigenvalues();
    let max = ev.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = ev.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `AᵀA + alpha ∇ᵀ∇` as a dense row-major `n x n` buffer.
pub fn regularized_normal_matrix(
    a: &dyn LinearOperator,
    grad: &dyn LinearOperator,
    a_weight: f64,
    alpha: f64,
) -> Result<Vec<f64>> {
    if grad.cols() != a.cols() {
        return Err(contract(format!(
            "gradient acts on R^{} but operator on R^{}",
            grad.cols(),
            a.cols()
        )));
    }
    let mut q = gram(&a.to_dense());
    if a_weight != 1.0 {
        q.iter_mut().for_each(|v| *v *= a_weight);
    }
    let g = gram(&grad.to_dense());
    for (qi, gi) in q.iter_mut().zip(&g) {
        *qi += alpha * gi;
    }
    Ok(q)
}

/// The generalized Tikhonov inversion `(AᵀA + α∇ᵀ∇)⁻¹Aᵀ` as an explicit
/// `N x m` matrix.
#[derive(Debug, Clone)]
pub struct TikhonovInverse {
    alpha: f64,
    matrix: Arc<Tensor>,
}

impl TikhonovInverse {
    pub fn new(a: &dyn LinearOperator, grad: &dyn LinearOperator, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(contract(format!("Tikhonov alpha must be > 0, got {alpha}")));
        }
        let (m, n) = (a.rows(), a.cols());
        let q = regularized_normal_matrix(a, grad, 1.0, alpha)?;
        let factor = SpdFactor::new(&q, n)?;
        let ad = a.to_dense();

        // Columns of T are Q⁻¹ (row i of A)ᵀ.
        let mut t = vec![0.0; n * m];
        for (i, row) in ad.data().chunks_exact(n).enumerate() {
            let col = factor.solve(row);
            for (j, v) in col.into_iter().enumerate() {
                t[j * m + i] = v;
            }
        }
        let matrix = Tensor::new(vec![n, m], t)?;

        let resid = defining_residual(&q, n, &matrix, &ad);
        if !(resid <= 1e-8) {
            return Err(Error::Numerical(format!(
                "Tikhonov residual {resid:.3e} exceeds 1e-8 (condition estimate {:.3e})",
                condition_estimate(&DMatrix::from_row_slice(n, n, &q))
            )));
        }
        Ok(Self {
            alpha,
            matrix: Arc::new(matrix),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn shared_matrix(&self) -> Arc<Tensor> {
        Arc::clone(&self.matrix)
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        self.matrix.matvec(y).expect("Tikhonov input length")
    }
}

/// Relative Frobenius residual `‖Q T − Aᵀ‖ / ‖Aᵀ‖`.
pub fn defining_residual(q: &[f64], n: usize, t: &Tensor, a: &Tensor) -> f64 {
    let (_, m) = t.dims2().expect("matrix");
    let td = t.data();
    let ad = a.data();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        let qrow = &q[i * n..(i + 1) * n];
        for j in 0..m {
            let mut s = 0.0;
            for (k, &qv) in qrow.iter().enumerate() {
                s += qv * td[k * m + j];
            }
            let at = ad[j * n + i];
            num += (s - at) * (s - at);
            den += at * at;
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}
