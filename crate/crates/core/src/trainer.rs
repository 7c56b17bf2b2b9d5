// SPDX-License-Identifier: Apache-2.0

//! Deterministic full-batch gradient descent for the reference model and
//! for the retrains behind leave-one-out and subset ground truth.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Example, ModelSpec, Objective, ParameterVector, Scratch};
use crate::numerics::{axpy, norm, Cholesky};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub step_size: f64,
    pub max_steps: usize,
    pub grad_norm_tol: f64,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainConfig {
    /// Defaults for `spec`: step 0.1, tolerance `1e-6 * sqrt(P)`.
    pub fn for_spec(spec: &ModelSpec) -> Self {
        Self {
            step_size: 0.1,
            max_steps: 100_000,
            grad_norm_tol: 1e-6 * (spec.param_count() as f64).sqrt(),
            seed: 0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if !(self.grad_norm_tol > 0.0) {
            return Err(Error::Config(format!(
                "grad_norm_tol must be > 0, got {}",
                self.grad_norm_tol
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_grad_norm: f64,
    pub steps_taken: usize,
    pub final_loss: f64,
    pub converged: bool,
}

/// Where a (re)training run starts.
#[derive(Debug, Clone, Copy)]
pub enum Start<'a> {
    /// `spec.param_init(cfg.seed)`.
    Seed,
    /// Given parameters, e.g. the full-data optimum.
    Warm(&'a ParameterVector),
    /// Given parameters, descending along `-M^-1 grad` for a fixed SPD `M`
    /// (typically the full-data Hessian at the start point) instead of the
    /// raw gradient. See [`train_preconditioned`].
    Preconditioned(&'a ParameterVector, &'a Cholesky),
}

pub fn train(spec: &ModelSpec, data: &[Example], cfg: &TrainConfig) -> Result<(ParameterVector, TrainReport)> {
    train_observed(spec, data, cfg, Start::Seed, |_, _, _| {})
}

/// Full-batch gradient descent; `observe(step, loss, grad_norm)` sees every
/// iterate, including the last one.
pub fn train_observed(
    spec: &ModelSpec,
    data: &[Example],
    cfg: &TrainConfig,
    start: Start<'_>,
    mut observe: impl FnMut(usize, f64, f64),
) -> Result<(ParameterVector, TrainReport)> {
    cfg.validate()?;
    spec.validate()?;
    let objective = Objective::new(spec, data, cfg.weight_decay)?;
    let mut theta = match start {
        Start::Seed => spec.param_init(cfg.seed).into_values(),
        Start::Warm(init) => {
            spec.check_params(init)?;
            init.values().to_vec()
        }
        Start::Preconditioned(init, m) => return train_preconditioned(spec, data, cfg, init, m),
    };
    let mut grad = vec![0.0; theta.len()];
    let mut scratch = Scratch::new(spec);
    let mut step = 0;
    loop {
        let loss = objective.gradient_into(&theta, &mut scratch, &mut grad);
        let gn = norm(&grad);
        if !loss.is_finite() || !gn.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        observe(step, loss, gn);
        let converged = gn <= cfg.grad_norm_tol;
        if converged || step == cfg.max_steps {
            let report = TrainReport {
                final_grad_norm: gn,
                steps_taken: step,
                final_loss: loss,
                converged,
            };
            return Ok((ParameterVector::new(spec, theta)?, report));
        }
        axpy(-cfg.step_size, &grad, &mut theta);
        step += 1;
    }
}

/// Preconditioned descent from `init`: `theta <- theta - a M^-1 grad`, with
/// `a` starting at 1 and halved until the objective decreases. The stopping
/// rule (`grad_norm_tol`, `max_steps`) is the one [`train`] uses, so the
/// result is the same stationary point gradient descent would reach from
/// `init`; `step_size` is ignored. With `M` the Hessian at a nearby optimum
/// the iteration is Newton-like and converges in a handful of steps.
pub fn train_preconditioned(
    spec: &ModelSpec,
    data: &[Example],
    cfg: &TrainConfig,
    init: &ParameterVector,
    m: &Cholesky,
) -> Result<(ParameterVector, TrainReport)> {
    cfg.validate()?;
    spec.validate()?;
    spec.check_params(init)?;
    let objective = Objective::new(spec, data, cfg.weight_decay)?;
    let mut theta = init.values().to_vec();
    let mut grad = vec![0.0; theta.len()];
    let mut scratch = Scratch::new(spec);
    let mut step = 0;
    loop {
        let loss = objective.gradient_into(&theta, &mut scratch, &mut grad);
        let gn = norm(&grad);
        if !loss.is_finite() || !gn.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let converged = gn <= cfg.grad_norm_tol;
        let report = |converged| TrainReport {
            final_grad_norm: gn,
            steps_taken: step,
            final_loss: loss,
            converged,
        };
        if converged || step == cfg.max_steps {
            return Ok((ParameterVector::new(spec, theta)?, report(converged)));
        }
        let dir = m.solve(&grad)?;
        let slope: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
        let mut a = 1.0;
        let mut trial = theta.clone();
        let accepted = loop {
            trial.copy_from_slice(&theta);
            axpy(-a, &dir, &mut trial);
            let f = objective.value(&trial);
            if f <= loss - 1e-4 * a * slope {
                break true;
            }
            // near the optimum the decrease drops below rounding in the loss;
            // fall back to the gradient norm
            if f <= loss + 1e-13 * loss.abs().max(1.0) {
                let mut g = vec![0.0; theta.len()];
                objective.gradient_into(&trial, &mut scratch, &mut g);
                if norm(&g) < gn {
                    break true;
                }
            }
            a *= 0.5;
            if a < 1e-10 {
                break false;
            }
        };
        if !accepted {
            // no decrease left at working precision
            return Ok((ParameterVector::new(spec, theta)?, report(false)));
        }
        theta.copy_from_slice(&trial);
        step += 1;
    }
}

/// Retrains on the examples selected by `mask`, through the same pipeline
/// as [`train`].
pub fn retrain_subset(
    spec: &ModelSpec,
    dataset: &Dataset,
    mask: &[bool],
    cfg: &TrainConfig,
    start: Start<'_>,
) -> Result<(ParameterVector, TrainReport)> {
    let subset = dataset.masked(mask)?;
    if subset.is_empty() {
        return Err(Error::Empty("training subset"));
    }
    train_observed(spec, &subset, cfg, start, |_, _, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::quadratic_testbed;
    use crate::model::{Activation, LossKind};

    fn scalar_spec() -> ModelSpec {
        ModelSpec::new(vec![1, 1], Activation::Tanh, LossKind::SquaredError)
            .unwrap()
            .without_bias()
    }

    fn cfg(step: f64) -> TrainConfig {
        TrainConfig {
            step_size: step,
            max_steps: 10_000,
            grad_norm_tol: 1e-10,
            seed: 3,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // single example 0.5 (theta - 1)^2
        let data = quadratic_testbed(1, 1, 0).unwrap().0;
        let (theta, report) = train(&scalar_spec(), &data, &cfg(0.5)).unwrap();
        assert!(report.converged);
        assert!((theta.values()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn testbed_minimizer_is_mean_target() {
        let data = quadratic_testbed(2, 1, 0).unwrap().0;
        let (theta, report) = train(&scalar_spec(), &data, &cfg(0.5)).unwrap();
        assert!(report.converged && report.final_grad_norm <= 1e-10);
        assert!((theta.values()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn retrain_examples() {
        let spec = scalar_spec();
        let d = Dataset::new(quadratic_testbed(2, 1, 0).unwrap().0).unwrap();
        let c = cfg(0.5);
        let full = train(&spec, d.examples(), &c).unwrap().0;
        let same = retrain_subset(&spec, &d, &[true, true], &c, Start::Seed).unwrap().0;
        assert_eq!(full, same);
        let dropped = retrain_subset(&spec, &d, &[true, false], &c, Start::Seed).unwrap().0;
        assert!(dropped.values()[0].abs() < 1e-9);
        assert!(matches!(
            retrain_subset(&spec, &d, &[false, false], &c, Start::Seed),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn drop_one_matches_first_order_prediction() {
        // N = 400 targets on [0, 2]; removing b moves theta by (theta* - c_b)/(N-1)
        // exactly, and the influence prediction -(1/N) H^-1 g_b = -(theta* - c_b)/N.
        let spec = scalar_spec();
        let d = Dataset::new(quadratic_testbed(400, 1, 0).unwrap().0).unwrap();
        let c = cfg(0.9);
        let full = train(&spec, d.examples(), &c).unwrap().0.values()[0];
        let mut mask = vec![true; 400];
        mask[0] = false;
        let drop = retrain_subset(&spec, &d, &mask, &c, Start::Seed).unwrap().0.values()[0];
        let g_b = full - 0.0;
        let predicted = -(-1.0 / 400.0) * g_b; // removal = down-weight by one example
        assert!(((drop - full) - predicted).abs() <= 2.0 / 400.0 * (drop - full).abs());
    }

    #[test]
    fn loss_decreases_monotonically_below_two_over_lambda_max() {
        let spec = ModelSpec::new(vec![4, 1], Activation::Tanh, LossKind::SquaredError)
            .unwrap()
            .without_bias();
        let data = quadratic_testbed(20, 4, 1).unwrap().0;
        let x = nalgebra::DMatrix::from_fn(20, 4, |i, j| data[i].features[j]);
        let hessian = (x.transpose() * &x) / 20.0;
        let lambda_max = hessian.symmetric_eigenvalues().max();
        let mut last = f64::INFINITY;
        let c = TrainConfig { max_steps: 500, ..cfg(1.9 / lambda_max) };
        train_observed(&spec, &data, &c, Start::Seed, |_, loss, _| {
            // rounding at the plateau may add a few ulps
            assert!(loss <= last + 4.0 * f64::EPSILON * last.abs().min(1e300), "{loss} > {last}");
            last = loss;
        })
        .unwrap();
    }

    #[test]
    fn divergence_reports_step() {
        let data = quadratic_testbed(2, 1, 0).unwrap().0;
        let c = TrainConfig {
            max_steps: 100_000,
            ..cfg(50.0)
        };
        assert!(matches!(train(&scalar_spec(), &data, &c), Err(Error::Divergence { .. })));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let spec = ModelSpec::new(vec![2, 3, 2], Activation::Tanh, LossKind::CrossEntropy).unwrap();
        let data = crate::data::two_moons(20, 0.1, 5);
        let c = TrainConfig {
            max_steps: 200,
            ..cfg(0.3)
        };
        let (a, ra) = train(&spec, &data, &c).unwrap();
        let (b, rb) = train(&spec, &data, &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(!ra.converged && ra.steps_taken == 200);
    }

    #[test]
    fn preconditioned_retrain_reaches_the_descent_optimum() {
        let spec = ModelSpec::new(vec![2, 4, 2], Activation::Tanh, LossKind::CrossEntropy).unwrap();
        let d = Dataset::new(crate::data::two_moons(30, 0.1, 4)).unwrap();
        let c = TrainConfig {
            step_size: 0.5,
            max_steps: 400_000,
            grad_norm_tol: 1e-11,
            seed: 1,
            weight_decay: 1e-2,
        };
        let (theta, _) = train(&spec, d.examples(), &c).unwrap();
        let obj = Objective::new(&spec, d.examples(), c.weight_decay).unwrap();
        let h = crate::curvature::assemble_hessian(&theta, &obj).unwrap();
        let m = Cholesky::factor(&h).unwrap();
        let mut mask = vec![true; 30];
        mask[7] = false;
        let (slow, rs) = retrain_subset(&spec, &d, &mask, &c, Start::Warm(&theta)).unwrap();
        let (fast, rf) = retrain_subset(&spec, &d, &mask, &c, Start::Preconditioned(&theta, &m)).unwrap();
        assert!(rs.converged && rf.converged);
        assert!(rf.steps_taken * 50 < rs.steps_taken, "{} vs {}", rf.steps_taken, rs.steps_taken);
        let gap = crate::numerics::norm(&crate::numerics::sub(slow.values(), fast.values()));
        assert!(gap < 1e-8, "{gap}");
        // half the data: far from theta*, the line search keeps it descending
        let half: Vec<bool> = (0..30).map(|i| i % 2 == 0).collect();
        let (a, _) = retrain_subset(&spec, &d, &half, &c, Start::Warm(&theta)).unwrap();
        let (b, rb) = retrain_subset(&spec, &d, &half, &c, Start::Preconditioned(&theta, &m)).unwrap();
        assert!(rb.converged);
        assert!(crate::numerics::norm(&crate::numerics::sub(a.values(), b.values())) < 1e-7);
    }
}
