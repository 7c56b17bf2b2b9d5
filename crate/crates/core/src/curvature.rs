// SPDX-License-Identifier: Apache-2.0

//! Exact reference quantities the simulator approximates.
//!
//! Hessians are assembled column by column from central differences of the
//! analytic gradient, so one code path covers every loss and activation.
//! Dense assembly is capped at [`DENSE_LIMIT`] parameters.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, ModelSpec, Objective, ParameterVector, Query, Scratch};
use crate::numerics::{
    apply_power_series_at, axpy, dot_unchecked, extreme_eigs, extreme_eigs_op, norm, symmetric_spectrum, Cholesky,
    LinearOperator, PowerOptions, RealVector, SymMatrix,
};

pub const DENSE_LIMIT: usize = 5000;

fn fd_step(p: usize) -> f64 {
    1e-4 / (p as f64).sqrt()
}

/// Central difference of a gradient map along `v`:
/// `[g(theta + h v/|v|) - g(theta - h v/|v|)] / (2h) * |v|`.
fn directional_fd(theta: &[f64], v: &[f64], mut grad: impl FnMut(&[f64], &mut [f64])) -> Result<RealVector> {
    let nv = norm(v);
    if nv == 0.0 {
        return Err(Error::Config("Hessian-vector product of the zero vector".into()));
    }
    let h = fd_step(theta.len());
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    axpy(h / nv, v, &mut plus);
    axpy(-h / nv, v, &mut minus);
    let mut gp = vec![0.0; theta.len()];
    let mut gm = vec![0.0; theta.len()];
    grad(&plus, &mut gp);
    grad(&minus, &mut gm);
    let scale = nv / (2.0 * h);
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) * scale).collect())
}

/// Hessian-vector product of the training objective at `theta`.
pub fn hvp(theta: &ParameterVector, objective: &Objective<'_>, v: &[f64]) -> Result<RealVector> {
    objective.spec.check_params(theta)?;
    let mut scratch = Scratch::new(objective.spec);
    directional_fd(theta.values(), v, |t, out| {
        objective.gradient_into(t, &mut scratch, out);
    })
}

/// The objective Hessian at fixed parameters as a matrix-free operator.
pub struct HessianOperator<'a> {
    theta: &'a ParameterVector,
    objective: Objective<'a>,
    shift: f64,
}

impl<'a> HessianOperator<'a> {
    pub fn new(theta: &'a ParameterVector, objective: Objective<'a>, shift: f64) -> Self {
        Self {
            theta,
            objective,
            shift,
        }
    }
}

impl LinearOperator for HessianOperator<'_> {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        if norm(x) == 0.0 {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        let hv = hvp(self.theta, &self.objective, x).expect("validated operator");
        for ((o, h), xi) in out.iter_mut().zip(&hv).zip(x) {
            *o = h + self.shift * xi;
        }
    }
}

fn check_budget(p: usize) -> Result<()> {
    if p > DENSE_LIMIT {
        return Err(Error::Budget {
            size: p,
            limit: DENSE_LIMIT,
        });
    }
    Ok(())
}

fn assemble_columns(p: usize, mut column: impl FnMut(&[f64]) -> Result<RealVector>) -> Result<Vec<RealVector>> {
    check_budget(p)?;
    let mut e = vec![0.0; p];
    (0..p)
        .map(|i| {
            e[i] = 1.0;
            let c = column(&e);
            e[i] = 0.0;
            c
        })
        .collect()
}

/// Dense Hessian of the objective, symmetrized, plus the Frobenius norm of
/// the antisymmetric part removed by symmetrization.
pub fn assemble_hessian_with_asymmetry(
    theta: &ParameterVector,
    objective: &Objective<'_>,
) -> Result<(SymMatrix, f64)> {
    let cols = assemble_columns(theta.len(), |e| hvp(theta, objective, e))?;
    Ok(SymMatrix::symmetrize_columns(&cols))
}

pub fn assemble_hessian(theta: &ParameterVector, objective: &Objective<'_>) -> Result<SymMatrix> {
    assemble_hessian_with_asymmetry(theta, objective).map(|(h, _)| h)
}

/// Hessian of `loss(theta; b)` alone.
pub fn per_example_hessian(spec: &ModelSpec, theta: &ParameterVector, b: &Example) -> Result<SymMatrix> {
    spec.check_params(theta)?;
    spec.check_example(b)?;
    let mut scratch = Scratch::new(spec);
    let cols = assemble_columns(theta.len(), |e| {
        directional_fd(theta.values(), e, |t, out| {
            out.iter_mut().for_each(|o| *o = 0.0);
            spec.loss_grad_raw(t, b, 1.0, &mut scratch, out);
        })
    })?;
    Ok(SymMatrix::symmetrize_columns(&cols).0)
}

/// Hessian of the query functional `F(q; theta)`.
pub fn query_hessian(spec: &ModelSpec, theta: &ParameterVector, q: &Query) -> Result<SymMatrix> {
    spec.check_params(theta)?;
    spec.check_query(q)?;
    let mut scratch = Scratch::new(spec);
    let cols = assemble_columns(theta.len(), |e| {
        directional_fd(theta.values(), e, |t, out| {
            out.iter_mut().for_each(|o| *o = 0.0);
            spec.query_grad_raw(t, q, &mut scratch, out);
        })
    })?;
    Ok(SymMatrix::symmetrize_columns(&cols).0)
}

/// Objective Hessian at the reference parameters and its damped version.
#[derive(Debug)]
pub struct CurvatureBundle {
    hessian: SymMatrix,
    lambda: f64,
    damped: SymMatrix,
    theta_star_hash: u64,
    factor: OnceLock<std::result::Result<Cholesky, (usize, f64)>>,
}

impl CurvatureBundle {
    pub fn new(hessian: SymMatrix, lambda: f64, theta_star_hash: u64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!("damping must be >= 0, got {lambda}")));
        }
        let damped = hessian.shifted(lambda);
        Ok(Self {
            hessian,
            lambda,
            damped,
            theta_star_hash,
            factor: OnceLock::new(),
        })
    }

    /// Assembles the objective Hessian at `theta_star`.
    pub fn build(theta_star: &ParameterVector, objective: &Objective<'_>, lambda: f64) -> Result<Self> {
        Self::new(assemble_hessian(theta_star, objective)?, lambda, theta_star.content_hash())
    }

    /// Same Hessian, different damping.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.hessian.clone(), lambda, self.theta_star_hash)
    }

    pub fn hessian(&self) -> &SymMatrix {
        &self.hessian
    }

    pub fn damped(&self) -> &SymMatrix {
        &self.damped
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn theta_star_hash(&self) -> u64 {
        self.theta_star_hash
    }

    pub fn dim(&self) -> usize {
        self.hessian.dim()
    }

    fn cholesky(&self) -> Result<&Cholesky> {
        let f = self.factor.get_or_init(|| match Cholesky::factor(&self.damped) {
            Ok(c) => Ok(c),
            Err(Error::Singular { pivot, value, .. }) => Err((pivot, value)),
            Err(_) => unreachable!("factorization only fails on a pivot"),
        });
        f.as_ref().map_err(|&(pivot, value)| Error::Singular {
            pivot,
            value,
            hint: "; H + lambda*I is not positive definite, increase lambda",
        })
    }

    /// `H_lambda^{-1} v`.
    pub fn solve(&self, v: &[f64]) -> Result<RealVector> {
        self.cholesky()?.solve(v)
    }

    /// Eigenvalues of `H`, ascending.
    pub fn spectrum(&self) -> RealVector {
        symmetric_spectrum(&self.hessian)
    }

    /// Writes the Hessian spectrum as CSV with columns `index,eigenvalue`.
    pub fn export_spectrum(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = String::from("index,eigenvalue\n");
        for (i, ev) in self.spectrum().iter().enumerate() {
            out.push_str(&format!("{i},{ev:e}\n"));
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IfScore {
    pub value: f64,
    pub example_id: u64,
    pub query_id: u64,
    pub lambda: f64,
}

/// `-(1/N) g_q^T H_lambda^{-1} g_b`.
pub fn tau_if(bundle: &CurvatureBundle, g_b: &[f64], g_q: &[f64], n: usize) -> Result<f64> {
    check_lengths(bundle, g_b, g_q)?;
    let x = bundle.solve(g_b)?;
    Ok(-dot_unchecked(g_q, &x) / n as f64)
}

pub fn tau_if_score(
    bundle: &CurvatureBundle,
    g_b: &[f64],
    g_q: &[f64],
    n: usize,
    example_id: u64,
    query_id: u64,
) -> Result<IfScore> {
    Ok(IfScore {
        value: tau_if(bundle, g_b, g_q, n)?,
        example_id,
        query_id,
        lambda: bundle.lambda,
    })
}

fn check_lengths(bundle: &CurvatureBundle, g_b: &[f64], g_q: &[f64]) -> Result<()> {
    for v in [g_b, g_q] {
        if v.len() != bundle.dim() {
            return Err(Error::Dimension {
                context: "curvature oracle gradient",
                expected: bundle.dim(),
                actual: v.len(),
            });
        }
    }
    Ok(())
}

/// `-g_q^T S_T(H_lambda) g_b`, the quantity the symmetric readout estimates.
pub fn linear_reference(bundle: &CurvatureBundle, eta: f64, steps: u64, g_b: &[f64], g_q: &[f64]) -> Result<f64> {
    Ok(linear_reference_at(bundle, eta, &[steps], g_b, g_q)?[0])
}

/// [`linear_reference`] at several unroll depths from one recursion.
pub fn linear_reference_at(
    bundle: &CurvatureBundle,
    eta: f64,
    steps: &[u64],
    g_b: &[f64],
    g_q: &[f64],
) -> Result<Vec<f64>> {
    check_lengths(bundle, g_b, g_q)?;
    check_budget(bundle.dim())?;
    Ok(apply_power_series_at(&bundle.damped, eta, steps, g_b)
        .iter()
        .map(|s| -dot_unchecked(g_q, s))
        .collect())
}

/// The `T -> infinity` limit `-g_q^T H_lambda^{-1} g_b` (= `N * tau_if`).
pub fn linear_reference_limit(bundle: &CurvatureBundle, g_b: &[f64], g_q: &[f64]) -> Result<f64> {
    check_lengths(bundle, g_b, g_q)?;
    Ok(-dot_unchecked(g_q, &bundle.solve(g_b)?))
}

/// Truncation error `g_q^T (I - eta H_lambda)^T H_lambda^{-1} g_b`, equal to
/// `linear_reference(T) - linear_reference_limit`.
pub fn truncation_error(bundle: &CurvatureBundle, eta: f64, steps: u64, g_b: &[f64], g_q: &[f64]) -> Result<f64> {
    Ok(truncation_error_at(bundle, eta, &[steps], g_b, g_q)?[0])
}

pub fn truncation_error_at(
    bundle: &CurvatureBundle,
    eta: f64,
    steps: &[u64],
    g_b: &[f64],
    g_q: &[f64],
) -> Result<Vec<f64>> {
    check_lengths(bundle, g_b, g_q)?;
    let mut v = bundle.solve(g_b)?;
    let max_t = steps.iter().copied().max().unwrap_or(0);
    let mut out = vec![0.0; steps.len()];
    let mut tmp = vec![0.0; v.len()];
    for t in 0..=max_t {
        let e = dot_unchecked(g_q, &v);
        for (slot, &s) in out.iter_mut().zip(steps) {
            if s == t {
                *slot = e;
            }
        }
        if t < max_t {
            bundle.damped.matvec_into(&v, &mut tmp);
            axpy(-eta, &tmp, &mut v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub stable: bool,
    /// Spectral radius of `I - eta H_lambda`.
    pub spectral_radius: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

/// Spectral radius of `I - eta H_lambda` from the extreme eigenvalues of
/// `H_lambda`; stable when it is below one.
pub fn stability_check(bundle: &CurvatureBundle, eta: f64) -> Result<Stability> {
    let (lo, hi) = extreme_eigs(&bundle.damped)?;
    Ok(stability_from_extremes(lo, hi, eta))
}

pub fn stability_from_extremes(lambda_min: f64, lambda_max: f64, eta: f64) -> Stability {
    let rho = (1.0 - eta * lambda_min).abs().max((1.0 - eta * lambda_max).abs());
    Stability {
        stable: rho < 1.0,
        spectral_radius: rho,
        lambda_min,
        lambda_max,
    }
}

/// Stability check without a dense Hessian: power iteration on
/// Hessian-vector products.
pub fn stability_check_matrix_free(
    theta: &ParameterVector,
    objective: &Objective<'_>,
    lambda: f64,
    eta: f64,
    opts: &PowerOptions,
) -> Result<Stability> {
    let op = HessianOperator::new(theta, *objective, lambda);
    let (lo, hi) = extreme_eigs_op(&op, opts)?;
    Ok(stability_from_extremes(lo, hi, eta))
}
