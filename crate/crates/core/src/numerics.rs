// SPDX-License-Identifier: Apache-2.0

//! Dense float64 linear algebra sized for a few thousand parameters.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`; [`SymMatrix`] is a full square
//! row-major array that maintains the symmetry invariant on construction.
//! Spectral routines go through [`LinearOperator`] so they also accept
//! matrix-free operators such as Hessian-vector products.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type RealVector = Vec<f64>;

/// Inner product, checking lengths.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            context: "dot",
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> RealVector {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> RealVector {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scaled(alpha: f64, a: &[f64]) -> RealVector {
    a.iter().map(|x| alpha * x).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Symmetric real matrix in full row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
    }

    /// Builds from the upper triangle of `f(i, j)`, mirroring it below.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                m.data[i * n + j] = v;
                m.data[j * n + i] = v;
            }
        }
        m
    }

    /// Builds from explicit rows, rejecting input that violates the symmetry
    /// tolerance `|M_ij - M_ji| <= 1e-8 (1 + |M_ij|)`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::Dimension {
                    context: "SymMatrix::from_rows",
                    expected: n,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (data[i * n + j], data[j * n + i]);
                if (a - b).abs() > 1e-8 * (1.0 + a.abs()) {
                    return Err(Error::Config(format!(
                        "matrix is not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self { n, data })
    }

    /// Symmetrizes `(C + C^T) / 2` from column vectors. Returns the matrix
    /// together with the Frobenius norm of the antisymmetric part that was
    /// discarded.
    pub fn symmetrize_columns(columns: &[Vec<f64>]) -> (Self, f64) {
        let n = columns.len();
        let mut m = Self::zeros(n);
        let mut asym = 0.0;
        for i in 0..n {
            for j in i..n {
                // entry (i, j) lives in column j, row i
                let a = columns[j][i];
                let b = columns[i][j];
                let v = 0.5 * (a + b);
                m.data[i * n + j] = v;
                m.data[j * n + i] = v;
                if i != j {
                    asym += 2.0 * (0.5 * (a - b)).powi(2);
                }
            }
        }
        (m, asym.sqrt())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn matvec(&self, x: &[f64]) -> RealVector {
        let mut out = vec![0.0; self.n];
        self.matvec_into(x, &mut out);
        out
    }

    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot_unchecked(self.row(i), x);
        }
    }

    /// `self + shift * I`
    pub fn shifted(&self, shift: f64) -> Self {
        let mut m = self.clone();
        for i in 0..self.n {
            m.data[i * self.n + i] += shift;
        }
        m
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            n: self.n,
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.n, other.n);
        Self {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    /// Product of two matrices that commute (e.g. polynomials in the same
    /// matrix), so the result is symmetric up to rounding; it is
    /// re-symmetrized.
    pub fn mul_commuting(&self, other: &Self) -> Self {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let out_row = &mut out[i * n..(i + 1) * n];
            for k in 0..n {
                let a = self.data[i * n + k];
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (out[i * n + j] + out[j * n + i]);
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
        Self { n, data: out }
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.data[i * n + j] - self.data[j * n + i]).abs());
            }
        }
        worst
    }
}

/// A symmetric linear map applied matrix-free.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
}

impl LinearOperator for SymMatrix {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.matvec_into(x, out);
    }
}

/// Cholesky factor `M = L L^T`, lower triangle stored row-major.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(m: &SymMatrix) -> Result<Self> {
        let n = m.dim();
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = m.get(j, j) - dot_unchecked(&l[j * n..j * n + j], &l[j * n..j * n + j]);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Singular {
                    pivot: j,
                    value: d,
                    hint: "",
                });
            }
            d = d.sqrt();
            l[j * n + j] = d;
            for i in (j + 1)..n {
                let s = m.get(i, j) - dot_unchecked(&l[i * n..i * n + j], &l[j * n..j * n + j]);
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { n, lower: l })
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<RealVector> {
        let n = self.n;
        if rhs.len() != n {
            return Err(Error::Dimension {
                context: "Cholesky::solve",
                expected: n,
                actual: rhs.len(),
            });
        }
        let mut y = rhs.to_vec();
        for i in 0..n {
            let s = dot_unchecked(&self.lower[i * n..i * n + i], &y[..i]);
            y[i] = (y[i] - s) / self.lower[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lower[k * n + i] * y[k];
            }
            y[i] = s / self.lower[i * n + i];
        }
        Ok(y)
    }
}

/// Solves `M x = rhs` for symmetric positive definite `M`.
pub fn solve_spd(m: &SymMatrix, rhs: &[f64]) -> Result<RealVector> {
    Cholesky::factor(m)?.solve(rhs)
}

#[derive(Debug, Clone, Copy)]
pub struct PowerOptions {
    pub max_iter: usize,
    /// Residual tolerance relative to the operator scale.
    pub tol: f64,
    pub seed: u64,
}

impl Default for PowerOptions {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol: 1e-10,
            seed: 0x5eed,
        }
    }
}

fn start_vector(n: usize, seed: u64) -> RealVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: RealVector = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    v
}

/// Dominant eigenvalue of `shift * I + sign * op` by power iteration with a
/// Rayleigh-quotient readout.
fn dominant_shifted<O: LinearOperator + ?Sized>(
    op: &O,
    shift: f64,
    sign: f64,
    opts: &PowerOptions,
) -> Result<f64> {
    let n = op.dim();
    let mut v = start_vector(n, opts.seed);
    let mut w = vec![0.0; n];
    let scale = shift.abs().max(f64::MIN_POSITIVE);
    let mut prev = f64::NAN;
    let mut flat = 0usize;
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iter {
        op.apply(&v, &mut w);
        for (wi, vi) in w.iter_mut().zip(&v) {
            *wi = shift * vi + sign * *wi;
        }
        let mu = dot_unchecked(&v, &w);
        residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - mu * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= opts.tol * scale {
            return Ok(mu);
        }
        // Rayleigh quotient stalled at rounding level: near-degenerate top
        // eigenvalues whose eigenvector mixes but whose value is settled.
        if (mu - prev).abs() <= 1e-15 * scale {
            flat += 1;
            if flat >= 25 {
                return Ok(mu);
            }
        } else {
            flat = 0;
        }
        prev = mu;
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok(0.0);
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
    }
    Err(Error::Convergence {
        what: "power iteration",
        iterations: opts.max_iter,
        residual: residual / scale,
    })
}

/// Smallest and largest eigenvalue of a symmetric operator.
pub fn extreme_eigs_op<O: LinearOperator + ?Sized>(op: &O, opts: &PowerOptions) -> Result<(f64, f64)> {
    let n = op.dim();
    if n == 0 {
        return Err(Error::Empty("operator"));
    }
    // Rough magnitude of the spectrum: enough iterations that the shift
    // exceeds the midpoint of the spectrum, which keeps the wanted end
    // dominant in both shifted operators.
    let mut v = start_vector(n, opts.seed ^ 0x9e37_79b9);
    let mut w = vec![0.0; n];
    let mut magnitude: f64 = 0.0;
    for _ in 0..50 {
        op.apply(&v, &mut w);
        let nw = norm(&w);
        magnitude = magnitude.max(nw);
        if nw == 0.0 {
            break;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
    }
    if magnitude == 0.0 {
        return Ok((0.0, 0.0));
    }
    let shift = 1.05 * magnitude;
    let top = dominant_shifted(op, shift, 1.0, opts)? - shift;
    let bottom = shift - dominant_shifted(op, shift, -1.0, opts)?;
    Ok((bottom.min(top), top.max(bottom)))
}

/// Extreme eigenvalues of a dense matrix from the full spectrum. Power
/// iteration stalls on clustered top eigenvalues, which trained networks
/// produce routinely; it is kept for matrix-free operators.
pub fn extreme_eigs(m: &SymMatrix) -> Result<(f64, f64)> {
    if m.dim() == 0 {
        return Err(Error::Empty("matrix"));
    }
    let s = symmetric_spectrum(m);
    if !all_finite(&s) {
        return Err(Error::Config("matrix has non-finite eigenvalues".into()));
    }
    Ok((s[0], s[s.len() - 1]))
}

/// Full ascending spectrum via a dense symmetric eigensolver.
pub fn symmetric_spectrum(m: &SymMatrix) -> RealVector {
    let n = m.dim();
    let dm = nalgebra::DMatrix::from_row_slice(n, n, m.as_slice());
    let mut eig: Vec<f64> = dm.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    eig
}

/// `S_T(M) = eta * sum_{t<T} (I - eta M)^t`, built by binary doubling with
/// `S_{a+b} = S_a + A^a S_b`.
pub fn matrix_power_series(m: &SymMatrix, eta: f64, steps: u64) -> SymMatrix {
    let n = m.dim();
    let a = SymMatrix::identity(n).sub(&m.scale(eta));
    let mut acc_s = SymMatrix::zeros(n);
    let mut acc_pow = SymMatrix::identity(n);
    let mut base_s = SymMatrix::identity(n).scale(eta);
    let mut base_pow = a;
    let mut k = steps;
    while k > 0 {
        if k & 1 == 1 {
            acc_s = acc_s.add(&acc_pow.mul_commuting(&base_s));
            acc_pow = acc_pow.mul_commuting(&base_pow);
        }
        k >>= 1;
        if k > 0 {
            base_s = base_s.add(&base_pow.mul_commuting(&base_s));
            base_pow = base_pow.mul_commuting(&base_pow);
        }
    }
    acc_s
}

/// `S_T(M) v` by running the vector recursion; returns the value at each
/// requested step count (ascending order not required).
pub fn apply_power_series_at<O: LinearOperator + ?Sized>(
    op: &O,
    eta: f64,
    checkpoints: &[u64],
    v: &[f64],
) -> Vec<RealVector> {
    let n = op.dim();
    let max_t = checkpoints.iter().copied().max().unwrap_or(0);
    let mut out: Vec<Option<RealVector>> = vec![None; checkpoints.len()];
    let mut term = v.to_vec();
    let mut acc = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for t in 0..=max_t {
        for (slot, &c) in out.iter_mut().zip(checkpoints) {
            if c == t {
                *slot = Some(scaled(eta, &acc));
            }
        }
        if t == max_t {
            break;
        }
        axpy(1.0, &term, &mut acc);
        op.apply(&term, &mut tmp);
        axpy(-eta, &tmp, &mut term);
    }
    out.into_iter().map(|o| o.expect("checkpoint visited")).collect()
}

pub fn apply_power_series<O: LinearOperator + ?Sized>(op: &O, eta: f64, steps: u64, v: &[f64]) -> RealVector {
    apply_power_series_at(op, eta, &[steps], v).pop().expect("one checkpoint")
}
