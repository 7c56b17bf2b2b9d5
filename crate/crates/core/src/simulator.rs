// SPDX-License-Identifier: Apache-2.0

//! Perturbed-trajectory simulation: the preparation-time half of the
//! estimator.
//!
//! From the trained parameters `theta*` we run `T` steps of damped
//! full-batch gradient descent on the training objective with one example
//! up-weighted (`+eps/N`) and, for the pair variant, down-weighted
//! (`-eps/N`):
//!
//! ```text
//! theta_{t+1} = theta_t - eta * [grad L(theta_t) + s * (eps/N) grad l(theta_t; b) + lambda (theta_t - theta*)]
//! ```
//!
//! The proximal pull `lambda (theta_t - theta*)` linearizes to the damped
//! Hessian `H + lambda I`, which is how damping enters a forward simulation.
//! The stored displacements `theta_T - theta*` are the imprint.

use std::cell::Cell;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{stability_from_extremes, Stability};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hash::ContentHasher;
use crate::model::{ModelSpec, Objective, ParameterVector, Scratch};
use crate::numerics::{axpy, norm, RealVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Up- and down-weighted trajectories, symmetric readout.
    Pair,
    /// Up-weighted trajectory only, mirrored at readout.
    Single,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Pair => "pair",
            Variant::Single => "single",
        }
    }

    /// Perturbed trajectories simulated per example.
    pub fn trajectories(self) -> u64 {
        match self {
            Variant::Pair => 2,
            Variant::Single => 1,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair" => Ok(Variant::Pair),
            "single" => Ok(Variant::Single),
            other => Err(Error::Config(format!("unknown variant {other:?} (pair|single)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub epsilon: f64,
    pub eta: f64,
    pub steps: u64,
    pub lambda: f64,
    pub variant: Variant,
    #[serde(default)]
    pub drift_correction: bool,
    #[serde(default)]
    pub record_diagnostics: bool,
}

impl SimulationConfig {
    pub const DEFAULT_ETA: f64 = 3e-2;
    pub const DEFAULT_STEPS: u64 = 500;
    pub const DEFAULT_LAMBDA: f64 = 1e-3;
    /// Default `eps / N`.
    pub const DEFAULT_RELATIVE_EPSILON: f64 = 1e-2;

    pub fn new(epsilon: f64, eta: f64, steps: u64, lambda: f64) -> Result<Self> {
        let cfg = Self {
            epsilon,
            eta,
            steps,
            lambda,
            variant: Variant::Pair,
            drift_correction: false,
            record_diagnostics: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults for a training set of size `n`: `eps = 1e-2 N`,
    /// `eta = 3e-2`, `T = 500`, `lambda = 1e-3`.
    pub fn defaults_for(n: usize) -> Self {
        Self {
            epsilon: Self::DEFAULT_RELATIVE_EPSILON * n as f64,
            eta: Self::DEFAULT_ETA,
            steps: Self::DEFAULT_STEPS,
            lambda: Self::DEFAULT_LAMBDA,
            variant: Variant::Pair,
            drift_correction: false,
            record_diagnostics: false,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        self.validate_allowing_any_epsilon()
    }

    fn validate_allowing_any_epsilon(&self) -> Result<()> {
        if !(self.epsilon != 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be nonzero, got {}", self.epsilon)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.record_diagnostics && self.variant == Variant::Single {
            return Err(Error::Config(
                "diagnostics need both trajectories; use variant = pair".into(),
            ));
        }
        Ok(())
    }

    /// Inner gradient evaluations per example: `T * k`, `k` counting the
    /// perturbed trajectories plus the drift twin.
    pub fn inner_gradients_per_example(&self) -> u64 {
        self.steps * (self.variant.trajectories() + u64::from(self.drift_correction))
    }

    pub fn hash(&self) -> u64 {
        ContentHasher::new("simulation-config/v1")
            .f64(self.epsilon)
            .f64(self.eta)
            .u64(self.steps)
            .f64(self.lambda)
            .u64(self.variant.trajectories())
            .u64(u64::from(self.drift_correction))
            .u64(u64::from(self.record_diagnostics))
            .finish()
    }
}

/// Stored displacements `theta_T^{+/-} - theta*` for one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceImprint {
    pub example_id: u64,
    pub delta_plus: RealVector,
    /// Absent for [`Variant::Single`].
    pub delta_minus: Option<RealVector>,
    pub config: SimulationConfig,
    pub theta_star_hash: u64,
    pub spec_hash: u64,
    /// Training-set size at simulation time.
    pub n: u64,
}

impl InfluenceImprint {
    /// Antisymmetric displacement `delta_plus - delta_minus`.
    pub fn delta_delta(&self) -> Option<RealVector> {
        let m = self.delta_minus.as_ref()?;
        Some(self.delta_plus.iter().zip(m).map(|(p, q)| p - q).collect())
    }

    /// Symmetric displacement `delta_plus + delta_minus`.
    pub fn delta_sigma(&self) -> Option<RealVector> {
        let m = self.delta_minus.as_ref()?;
        Some(self.delta_plus.iter().zip(m).map(|(p, q)| p + q).collect())
    }
}

/// Per-step norms along a pair simulation, `t = 0..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDiagnostics {
    pub epsilon: f64,
    pub delta_delta: Vec<f64>,
    pub delta_sigma: Vec<f64>,
    pub delta_plus: Vec<f64>,
    pub delta_minus: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    pub imprint: InfluenceImprint,
    pub diagnostics: Option<TrajectoryDiagnostics>,
    /// `|delta_plus|` exceeded `1e3 * (eps/N) * |g_b| * T * eta`.
    pub unstable: bool,
    /// Stability of `I - eta H_lambda`, when the context knows the spectrum.
    pub stability: Option<Stability>,
    /// Inner gradient evaluations actually performed.
    pub inner_gradients: u64,
}

thread_local! {
    static INNER_GRADIENTS: Cell<u64> = const { Cell::new(0) };
}

/// Inner gradient evaluations performed on this thread so far.
pub fn inner_gradient_counter() -> u64 {
    INNER_GRADIENTS.with(Cell::get)
}

/// Immutable inputs shared by every simulation against one `theta*`.
#[derive(Debug, Clone, Copy)]
pub struct SimulationContext<'a> {
    pub spec: &'a ModelSpec,
    pub dataset: &'a Dataset,
    pub theta_star: &'a ParameterVector,
    pub weight_decay: f64,
    /// Extreme eigenvalues of the undamped Hessian, if known.
    pub hessian_extremes: Option<(f64, f64)>,
    /// Refuse configurations whose `I - eta H_lambda` is not contractive.
    pub strict: bool,
}

impl<'a> SimulationContext<'a> {
    /// Checks that `theta*` is stationary: `|grad| <= grad_tol`.
    pub fn new(
        spec: &'a ModelSpec,
        dataset: &'a Dataset,
        theta_star: &'a ParameterVector,
        weight_decay: f64,
        grad_tol: f64,
    ) -> Result<Self> {
        let ctx = Self::unguarded(spec, dataset, theta_star, weight_decay)?;
        let g = ctx.objective()?.gradient(theta_star.values());
        let grad_norm = norm(&g);
        if !(grad_norm <= grad_tol) {
            return Err(Error::NotConverged { grad_norm, tol: grad_tol });
        }
        Ok(ctx)
    }

    /// Skips the stationarity guard.
    pub fn unguarded(
        spec: &'a ModelSpec,
        dataset: &'a Dataset,
        theta_star: &'a ParameterVector,
        weight_decay: f64,
    ) -> Result<Self> {
        spec.check_params(theta_star)?;
        Objective::new(spec, dataset.examples(), weight_decay)?;
        Ok(Self {
            spec,
            dataset,
            theta_star,
            weight_decay,
            hessian_extremes: None,
            strict: false,
        })
    }

    pub fn with_hessian_extremes(mut self, lambda_min: f64, lambda_max: f64) -> Self {
        self.hessian_extremes = Some((lambda_min, lambda_max));
        self
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    fn objective(&self) -> Result<Objective<'a>> {
        Objective::new(self.spec, self.dataset.examples(), self.weight_decay)
    }

    pub fn stability(&self, cfg: &SimulationConfig) -> Option<Stability> {
        self.hessian_extremes
            .map(|(lo, hi)| stability_from_extremes(lo + cfg.lambda, hi + cfg.lambda, cfg.eta))
    }
}

/// One trajectory's step: overwrites `out` with the bracketed update
/// direction. At every step the example's own gradient is computed into
/// `g_b` separately, so all trajectories share one summation order.
#[allow(clippy::too_many_arguments)]
fn step_direction(
    ctx: &SimulationContext<'_>,
    b_pos: usize,
    extra_weight: f64,
    lambda: f64,
    theta: &[f64],
    scratch: &mut Scratch,
    g_b: &mut [f64],
    out: &mut [f64],
) {
    INNER_GRADIENTS.with(|c| c.set(c.get() + 1));
    let data = ctx.dataset.examples();
    let inv_n = 1.0 / data.len() as f64;
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, ex) in data.iter().enumerate() {
        if i == b_pos {
            g_b.iter_mut().for_each(|g| *g = 0.0);
            ctx.spec.loss_grad_raw(theta, ex, 1.0, scratch, g_b);
            axpy(inv_n + extra_weight, g_b, out);
        } else {
            ctx.spec.loss_grad_raw(theta, ex, inv_n, scratch, out);
        }
    }
    if ctx.weight_decay > 0.0 {
        axpy(2.0 * ctx.weight_decay, theta, out);
    }
    if lambda > 0.0 {
        for ((o, t), s) in out.iter_mut().zip(theta).zip(ctx.theta_star.values()) {
            *o += lambda * (t - s);
        }
    }
}

/// Simulates the imprint of example `example_id`.
pub fn simulate(ctx: &SimulationContext<'_>, example_id: u64, cfg: &SimulationConfig) -> Result<SimulationOutcome> {
    cfg.validate()?;
    Ok(run(ctx, example_id, cfg, &[cfg.steps])?.pop().expect("one checkpoint"))
}

/// Simulates once to `max(checkpoints)` and returns the imprint at each
/// checkpoint (in the order given); each imprint's config carries its own
/// step count.
pub fn simulate_checkpointed(
    ctx: &SimulationContext<'_>,
    example_id: u64,
    cfg: &SimulationConfig,
    checkpoints: &[u64],
) -> Result<Vec<SimulationOutcome>> {
    cfg.validate()?;
    if checkpoints.is_empty() {
        return Err(Error::Empty("checkpoint list"));
    }
    run(ctx, example_id, cfg, checkpoints)
}

/// [`simulate`] without the `epsilon > 0` check, for sign-symmetry tests.
#[doc(hidden)]
pub fn simulate_signed(ctx: &SimulationContext<'_>, example_id: u64, cfg: &SimulationConfig) -> Result<SimulationOutcome> {
    cfg.validate_allowing_any_epsilon()?;
    Ok(run(ctx, example_id, cfg, &[cfg.steps])?.pop().expect("one checkpoint"))
}

fn run(
    ctx: &SimulationContext<'_>,
    example_id: u64,
    cfg: &SimulationConfig,
    checkpoints: &[u64],
) -> Result<Vec<SimulationOutcome>> {
    let b_pos = ctx
        .dataset
        .position(example_id)
        .ok_or(Error::Membership(example_id))?;
    let stability = ctx.stability(cfg);
    if ctx.strict {
        if let Some(s) = stability.filter(|s| !s.stable) {
            return Err(Error::UnstableConfig {
                spectral_radius: s.spectral_radius,
                eta: cfg.eta,
            });
        }
    }

    let n = ctx.dataset.len();
    let p = ctx.theta_star.len();
    let rel = cfg.epsilon / n as f64;
    // trajectory weights: +, then - for pairs, then the unperturbed twin
    let mut signs: Vec<f64> = vec![1.0];
    if cfg.variant == Variant::Pair {
        signs.push(-1.0);
    }
    if cfg.drift_correction {
        signs.push(0.0);
    }
    let theta_star = ctx.theta_star.values();
    let mut thetas: Vec<RealVector> = signs.iter().map(|_| theta_star.to_vec()).collect();
    let mut dir = vec![0.0; p];
    let mut g_b = vec![0.0; p];
    let mut g_b_norm = 0.0;
    let mut scratch = Scratch::new(ctx.spec);
    let max_t = checkpoints.iter().copied().max().unwrap_or(0);
    let mut diag = cfg.record_diagnostics.then(|| TrajectoryDiagnostics {
        epsilon: cfg.epsilon,
        delta_delta: Vec::with_capacity(max_t as usize + 1),
        delta_sigma: Vec::with_capacity(max_t as usize + 1),
        delta_plus: Vec::with_capacity(max_t as usize + 1),
        delta_minus: Vec::with_capacity(max_t as usize + 1),
    });
    let mut out: Vec<Option<SimulationOutcome>> = vec![None; checkpoints.len()];
    let before = inner_gradient_counter();

    for t in 0..=max_t {
        let deltas = || -> Vec<RealVector> {
            let drift = cfg
                .drift_correction
                .then(|| thetas.last().expect("twin present"));
            thetas[..cfg.variant.trajectories() as usize]
                .iter()
                .map(|th| match drift {
                    Some(d) => th.iter().zip(d).map(|(a, b)| a - b).collect(),
                    None => th.iter().zip(theta_star).map(|(a, b)| a - b).collect(),
                })
                .collect()
        };
        let wanted = checkpoints.contains(&t);
        if diag.is_some() || wanted {
            let d = deltas();
            if let Some(diag) = diag.as_mut() {
                let (dp, dm) = (&d[0], &d[1]);
                diag.delta_delta.push(dp.iter().zip(dm).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
                diag.delta_sigma.push(dp.iter().zip(dm).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt());
                diag.delta_plus.push(norm(dp));
                diag.delta_minus.push(norm(dm));
            }
            if wanted {
                let mut d = d.into_iter();
                let delta_plus = d.next().expect("plus trajectory");
                let delta_minus = d.next();
                let guard = 1e3 * rel.abs() * g_b_norm * t as f64 * cfg.eta;
                let unstable = t > 0 && norm(&delta_plus) > guard;
                let imprint = InfluenceImprint {
                    example_id,
                    delta_plus,
                    delta_minus,
                    config: SimulationConfig { steps: t, ..*cfg },
                    theta_star_hash: ctx.theta_star.content_hash(),
                    spec_hash: ctx.theta_star.spec_hash(),
                    n: n as u64,
                };
                for (slot, &c) in out.iter_mut().zip(checkpoints) {
                    if c == t {
                        *slot = Some(SimulationOutcome {
                            imprint: imprint.clone(),
                            diagnostics: diag.clone(),
                            unstable,
                            stability,
                            inner_gradients: inner_gradient_counter() - before,
                        });
                    }
                }
            }
        }
        if t == max_t {
            break;
        }
        for (theta, &sign) in thetas.iter_mut().zip(&signs) {
            step_direction(ctx, b_pos, sign * rel, cfg.lambda, theta, &mut scratch, &mut g_b, &mut dir);
            if t == 0 {
                g_b_norm = norm(&g_b);
            }
            axpy(-cfg.eta, &dir, theta);
            if !theta.iter().all(|v| v.is_finite()) {
                return Err(Error::Instability {
                    step: t as usize + 1,
                    spectral_radius: stability.map(|s| s.spectral_radius),
                });
            }
        }
    }
    Ok(out.into_iter().map(|o| o.expect("checkpoint visited")).collect())
}

/// Result of simulating many examples; failures do not abort the batch.
#[derive(Debug)]
pub struct BatchOutcome {
    /// Successful outcomes, in request order.
    pub outcomes: Vec<SimulationOutcome>,
    pub failures: Vec<(u64, Error)>,
    /// Sum of the inner gradient evaluations actually performed.
    pub inner_gradients: u64,
}

impl BatchOutcome {
    pub fn imprints(&self) -> Vec<InfluenceImprint> {
        self.outcomes.iter().map(|o| o.imprint.clone()).collect()
    }

    pub fn failed_ids(&self) -> Vec<u64> {
        self.failures.iter().map(|(id, _)| *id).collect()
    }

    pub fn unstable_ids(&self) -> Vec<u64> {
        self.outcomes
            .iter()
            .filter(|o| o.unstable)
            .map(|o| o.imprint.example_id)
            .collect()
    }
}

/// Independent [`simulate`] calls over `example_ids` on a pool of
/// `workers` threads (`0` = rayon's default).
pub fn simulate_batch(
    ctx: &SimulationContext<'_>,
    example_ids: &[u64],
    cfg: &SimulationConfig,
    workers: usize,
) -> Result<BatchOutcome> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<(u64, Result<SimulationOutcome>)> = pool.install(|| {
        example_ids
            .par_iter()
            .map(|&id| (id, simulate(ctx, id, cfg)))
            .collect()
    });
    let mut batch = BatchOutcome {
        outcomes: Vec::with_capacity(results.len()),
        failures: Vec::new(),
        inner_gradients: 0,
    };
    for (id, r) in results {
        match r {
            Ok(o) => {
                batch.inner_gradients += o.inner_gradients;
                batch.outcomes.push(o);
            }
            Err(e) => batch.failures.push((id, e)),
        }
    }
    Ok(batch)
}

/// Per-step norm ratios between runs at `eps` and `eps/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// `|dd_t(eps)| / |dd_t(eps/2)|`, `None` where both vanish. Expected ~2.
    pub delta_ratio: Vec<Option<f64>>,
    /// `|dS_t(eps)| / |dS_t(eps/2)|`, `None` where both vanish. Expected ~4.
    pub sigma_ratio: Vec<Option<f64>>,
}

impl DiagnosticsReport {
    pub fn final_delta_ratio(&self) -> Option<f64> {
        self.delta_ratio.last().copied().flatten()
    }

    pub fn final_sigma_ratio(&self) -> Option<f64> {
        self.sigma_ratio.last().copied().flatten()
    }
}

pub fn diagnostics_check(
    at_eps: Option<&TrajectoryDiagnostics>,
    at_half: Option<&TrajectoryDiagnostics>,
) -> Result<DiagnosticsReport> {
    let (a, h) = match (at_eps, at_half) {
        (Some(a), Some(h)) => (a, h),
        _ => return Err(Error::Config("diagnostics were not recorded".into())),
    };
    if a.delta_delta.len() != h.delta_delta.len() {
        return Err(Error::Dimension {
            context: "diagnostics length",
            expected: a.delta_delta.len(),
            actual: h.delta_delta.len(),
        });
    }
    let rel = (a.epsilon / h.epsilon - 2.0).abs();
    if rel > 1e-12 {
        return Err(Error::Config(format!(
            "diagnostics must be recorded at eps and eps/2, got {} and {}",
            a.epsilon, h.epsilon
        )));
    }
    let ratio = |x: &[f64], y: &[f64]| -> Vec<Option<f64>> {
        x.iter()
            .zip(y)
            .map(|(&p, &q)| if p == 0.0 && q == 0.0 { None } else { Some(p / q) })
            .collect()
    };
    Ok(DiagnosticsReport {
        delta_ratio: ratio(&a.delta_delta, &h.delta_delta),
        sigma_ratio: ratio(&a.delta_sigma, &h.delta_sigma),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{assemble_hessian, CurvatureBundle};
    use crate::data::quadratic_testbed;
    use crate::model::{Activation, LossKind};
    use crate::numerics::{apply_power_series, dot_unchecked};
    use crate::trainer::{train, TrainConfig};
    use approx::assert_relative_eq;

    fn scalar_spec() -> ModelSpec {
        ModelSpec::new(vec![1, 1], Activation::Tanh, LossKind::SquaredError)
            .unwrap()
            .without_bias()
    }

    struct Bed {
        spec: ModelSpec,
        data: Dataset,
        theta: ParameterVector,
    }

    fn testbed() -> Bed {
        let spec = scalar_spec();
        let data = Dataset::new(quadratic_testbed(2, 1, 0).unwrap().0).unwrap();
        let theta = ParameterVector::new(&spec, vec![1.0]).unwrap();
        Bed { spec, data, theta }
    }

    fn cfg(eps: f64, eta: f64, steps: u64, lambda: f64) -> SimulationConfig {
        SimulationConfig::new(eps, eta, steps, lambda).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SimulationConfig::new(0.0, 0.1, 3, 0.0).is_err());
        assert!(SimulationConfig::new(-1.0, 0.1, 3, 0.0).is_err());
        assert!(SimulationConfig::new(1.0, 0.0, 3, 0.0).is_err());
        assert!(SimulationConfig::new(1.0, 0.1, 3, -1.0).is_err());
        let mut c = cfg(1.0, 0.1, 3, 0.0).with_variant(Variant::Single);
        c.record_diagnostics = true;
        assert!(c.validate().is_err());
        let d = SimulationConfig::defaults_for(200);
        assert_eq!((d.epsilon, d.eta, d.steps, d.lambda), (2.0, 3e-2, 500, 1e-3));
        assert_ne!(cfg(1.0, 0.1, 3, 0.0).hash(), cfg(1.0, 0.1, 4, 0.0).hash());
    }

    #[test]
    fn testbed_closed_form_displacements() {
        let bed = testbed();
        let ctx = SimulationContext::new(&bed.spec, &bed.data, &bed.theta, 0.0, 1e-12).unwrap();
        for eps in [0.1, 0.37, 1.0] {
            let o = simulate(&ctx, 0, &cfg(eps, 0.5, 2, 0.0)).unwrap();
            let dm = o.imprint.delta_minus.as_ref().unwrap();
            assert_relative_eq!(o.imprint.delta_plus[0], -0.375 * eps + 0.0625 * eps * eps, epsilon = 1e-15);
            assert_relative_eq!(dm[0], 0.375 * eps + 0.0625 * eps * eps, epsilon = 1e-15);
            assert_eq!(o.inner_gradients, 4);
        }
    }

    #[test]
    fn zero_steps_give_zero_imprint() {
        let bed = testbed();
        let ctx = SimulationContext::new(&bed.spec, &bed.data, &bed.theta, 0.0, 1e-12).unwrap();
        let o = simulate(&ctx, 1, &cfg(0.3, 0.5, 0, 0.0)).unwrap();
        assert_eq!(o.imprint.delta_plus, vec![0.0]);
        assert_eq!(o.imprint.delta_minus, Some(vec![0.0]));
        assert_eq!(o.inner_gradients, 0);
    }

    #[test]
    fn negating_epsilon_swaps_trajectories_exactly() {
        let spec = ModelSpec::new(vec![3, 1], Activation::Tanh, LossKind::SquaredError)
            .unwrap()
            .without_bias();
        let data = Dataset::new(quadratic_testbed(9, 3, 5).unwrap().0).unwrap();
        let theta = spec.param_init(1);
        let ctx = SimulationContext::unguarded(&spec, &data, &theta, 0.0).unwrap();
        let c = cfg(0.7, 0.2, 25, 0.05);
        let pos = simulate(&ctx, 4, &c).unwrap().imprint;
        let neg = simulate_signed(&ctx, 4, &SimulationConfig { epsilon: -0.7, ..c }).unwrap().imprint;
        assert_eq!(neg.delta_plus, pos.delta_minus.clone().unwrap());
        assert_eq!(neg.delta_minus.unwrap(), pos.delta_plus);
    }

    #[test]
    fn membership_and_guard_errors() {
        let bed = testbed();
        let ctx = SimulationContext::new(&bed.spec, &bed.data, &bed.theta, 0.0, 1e-12).unwrap();
        assert!(matches!(simulate(&ctx, 99, &cfg(0.1, 0.5, 2, 0.0)), Err(Error::Membership(99))));
        let off = ParameterVector::new(&bed.spec, vec![1.5]).unwrap();
        assert!(matches!(
            SimulationContext::new(&bed.spec, &bed.data, &off, 0.0, 1e-6),
            Err(Error::NotConverged { .. })
        ));
    }

    #[test]
    fn divergence_reports_step_and_radius() {
        let bed = testbed();
        let ctx = SimulationContext::new(&bed.spec, &bed.data, &bed.theta, 0.0, 1e-12)
            .unwrap()
            .with_hessian_extremes(1.0, 1.0);
        match simulate(&ctx, 0, &cfg(0.1, 5.0, 2000, 0.0)) {
            Err(Error::Instability { step, spectral_radius }) => {
                assert!(step > 1 && step <= 2000);
                assert_relative_eq!(spectral_radius.unwrap(), 4.0);
            }
            other => panic!("{other:?}"),
        }
        let strict = ctx.strict(true);
        assert!(matches!(
            simulate(&strict, 0, &cfg(0.1, 3.0, 10, 0.0)),
            Err(Error::UnstableConfig { .. })
        ));
        // non-strict: runs, and the blow-up guard flags it
        let o = simulate(&ctx, 0, &cfg(0.1, 3.0, 30, 0.0)).unwrap();
        assert!(o.unstable && !o.stability.unwrap().stable);
        assert!(!simulate(&ctx, 0, &cfg(0.1, 0.5, 30, 0.0)).unwrap().unstable);
    }

    /// Random least-squares instance with weight decay. Up-weighting b also
    /// moves the curvature by (eps/N) H_b, so the antisymmetric displacement
    /// carries an odd residual of order (eps/N)^3 and the relative error
    /// against the linear term shrinks fourfold per halving of eps.
    #[test]
    fn antisymmetric_displacement_bias_is_second_order() {
        let spec = ModelSpec::new(vec![5, 1], Activation::Tanh, LossKind::SquaredError)
            .unwrap()
            .without_bias();
        let data = Dataset::new(quadratic_testbed(16, 5, 2).unwrap().0).unwrap();
        let tc = TrainConfig {
            step_size: 0.3,
            max_steps: 100_000,
            grad_norm_tol: 1e-13,
            seed: 0,
            weight_decay: 1e-2,
        };
        let theta = train(&spec, data.examples(), &tc).unwrap().0;
        let ctx = SimulationContext::new(&spec, &data, &theta, 1e-2, 1e-12).unwrap();
        let obj = Objective::new(&spec, data.examples(), 1e-2).unwrap();
        let base = cfg(0.16, 0.1, 40, 0.05);
        let bundle = CurvatureBundle::new(assemble_hessian(&theta, &obj).unwrap(), base.lambda, 0).unwrap();
        let spectrum = bundle.spectrum();
        let kappa = (spectrum[spectrum.len() - 1] + base.lambda) / (spectrum[0] + base.lambda);
        let id = data.examples()[3].id;
        let g_b = spec.grad_example(&theta, data.get(id).unwrap()).unwrap();
        let series = apply_power_series(bundle.damped(), base.eta, base.steps, &g_b);
        let rel_err = |eps: f64| {
            let c = SimulationConfig { epsilon: eps, ..base };
            let want: Vec<f64> = series.iter().map(|v| -2.0 * eps / 16.0 * v).collect();
            let got = simulate(&ctx, id, &c).unwrap().imprint.delta_delta().unwrap();
            assert!(dot_unchecked(&got, &want) > 0.0);
            let err: f64 = got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            err / norm(&want)
        };
        let (coarse, fine) = (rel_err(0.16), rel_err(0.08));
        assert!(coarse <= 10.0 * (0.16f64 / 16.0).powi(2) * kappa, "{coarse}");
        assert!((coarse / fine - 4.0).abs() < 0.1, "{coarse} {fine}");
    }

    #[test]
    fn drift_correction_cancels_unperturbed_motion() {
        let bed = testbed();
        // theta* = 1.2 is not stationary; the twin absorbs its motion
        let off = ParameterVector::new(&bed.spec, vec![1.2]).unwrap();
        let ctx = SimulationContext::unguarded(&bed.spec, &bed.data, &off, 0.0).unwrap();
        let mut c = cfg(0.1, 0.5, 2, 0.0);
        let raw = simulate(&ctx, 0, &c).unwrap();
        c.drift_correction = true;
        let fixed = simulate(&ctx, 0, &c).unwrap();
        assert_eq!(fixed.inner_gradients, 6);
        // iterates are affine in the start: theta_T = A^T theta_0 + c with
        // A = 1 - eta (1 + eps/N) perturbed and A0 = 1 - eta unperturbed, so
        // the corrected displacement is the stationary-start closed form plus
        // (A^T - A0^T) (theta_0 - theta_stat)
        let (a, a0): (f64, f64) = (1.0 - 0.5 * (1.0 + 0.05), 0.5);
        let want = -0.375 * 0.1 + 0.0625 * 0.01 + (a.powi(2) - a0.powi(2)) * 0.2;
        assert_relative_eq!(fixed.imprint.delta_plus[0], want, epsilon = 1e-12);
        assert!((raw.imprint.delta_plus[0] - fixed.imprint.delta_plus[0]).abs() > 0.05);
    }

    #[test]
    fn single_variant_matches_pair_plus_trajectory() {
        let bed = testbed();
        let ctx = SimulationContext::new(&bed.spec, &bed.data, &bed.theta, 0.0, 1e-12).unwrap();
        let pair = simulate(&ctx, 0, &cfg(0.2, 0.5, 7, 0.1)).unwrap();
        let single = simulate(&ctx, 0, &cfg(0.2, 0.5, 7, 0.1).with_variant(Variant::Single)).unwrap();
        assert_eq!(pair.imprint.delta_plus, single.imprint.delta_plus);
        assert!(single.imprint.delta_minus.is_none());
        assert_eq!((pair.inner_gradients, single.inner_gradients), (14, 7));
    }

    #[test]
    fn checkpoints_match_separate_runs() {
        let spec = ModelSpec::new(vec![2, 4, 2], Activation::Tanh, LossKind::CrossEntropy).unwrap();
        let data = Dataset::new(crate::data::two_moons(12, 0.2, 1)).unwrap();
        let theta = spec.param_init(0);
        let ctx = SimulationContext::unguarded(&spec, &data, &theta, 0.0).unwrap();
        let c = cfg(0.12, 0.3, 12, 0.01);
        let outs = simulate_checkpointed(&ctx, 5, &c, &[12, 3, 7]).unwrap();
        for (o, t) in outs.iter().zip([12u64, 3, 7]) {
            let direct = simulate(&ctx, 5, &SimulationConfig { steps: t, ..c }).unwrap();
            assert_eq!(o.imprint, direct.imprint);
        }
    }

    #[test]
    fn batch_accounting_and_failures() {
        let spec = ModelSpec::new(vec![2, 3, 2], Activation::Tanh, LossKind::CrossEntropy).unwrap();
        let data = Dataset::new(crate::data::two_moons(10, 0.2, 4)).unwrap();
        let theta = spec.param_init(0);
        let ctx = SimulationContext::unguarded(&spec, &data, &theta, 0.0).unwrap();
        let c = cfg(0.1, 0.2, 10, 0.0);
        let batch = simulate_batch(&ctx, &[0, 4, 7], &c, 1).unwrap();
        assert_eq!(batch.inner_gradients, 60);
        assert_eq!(batch.inner_gradients, 3 * c.inner_gradients_per_example());
        for o in &batch.outcomes {
            assert_eq!(o.imprint, simulate(&ctx, o.imprint.example_id, &c).unwrap().imprint);
        }
        assert!(simulate_batch(&ctx, &[], &c, 1).unwrap().outcomes.is_empty());
        let mixed = simulate_batch(&ctx, &[1, 42, 2], &c, 2).unwrap();
        assert_eq!(mixed.failed_ids(), vec![42]);
        assert_eq!(mixed.outcomes.len(), 2);
        assert_eq!(mixed.outcomes[1].imprint.example_id, 2);
    }

    #[test]
    fn imprints_are_bit_reproducible() {
        let spec = ModelSpec::new(vec![2, 4, 3], Activation::Tanh, LossKind::CrossEntropy).unwrap();
        let data = Dataset::new(crate::data::gaussian_blobs(3, 2, 0.5, 15, 2).unwrap()).unwrap();
        let theta = spec.param_init(7);
        let ctx = SimulationContext::unguarded(&spec, &data, &theta, 1e-3).unwrap();
        let c = cfg(0.15, 0.1, 20, 0.01);
        assert_eq!(simulate(&ctx, 3, &c).unwrap().imprint, simulate(&ctx, 3, &c).unwrap().imprint);
    }

    /// Scalar recursion for the test bed: full gradient theta - 1, example 0
    /// has gradient theta. Returns theta_t - theta* for t = 0..=steps.
    fn testbed_oracle(eps: f64, eta: f64, steps: usize) -> Vec<f64> {
        let mut theta = 1.0;
        let mut out = vec![0.0];
        for _ in 0..steps {
            theta -= eta * ((theta - 1.0) + eps / 2.0 * theta);
            out.push(theta - 1.0);
        }
        out
    }

    #[test]
    fn diagnostics_ratios_on_testbed() {
        let bed = testbed();
        let ctx = SimulationContext::new(&bed.spec, &bed.data, &bed.theta, 0.0, 1e-12).unwrap();
        let mut c = cfg(0.2, 0.5, 6, 0.0);
        c.record_diagnostics = true;
        let a = simulate(&ctx, 0, &c).unwrap().diagnostics;
        let h = simulate(&ctx, 0, &SimulationConfig { epsilon: 0.1, ..c }).unwrap().diagnostics;
        let a_ref = a.as_ref().unwrap();
        assert_eq!((a_ref.delta_delta[0], a_ref.delta_sigma[0]), (0.0, 0.0));
        let r = diagnostics_check(a.as_ref(), h.as_ref()).unwrap();
        assert_eq!(r.delta_ratio[0], None);
        assert_eq!(r.sigma_ratio[0], None);
        let (ap, am) = (testbed_oracle(0.2, 0.5, 6), testbed_oracle(-0.2, 0.5, 6));
        let (hp, hm) = (testbed_oracle(0.1, 0.5, 6), testbed_oracle(-0.1, 0.5, 6));
        for t in 1..=6 {
            let want = (ap[t] - am[t]) / (hp[t] - hm[t]);
            assert_relative_eq!(r.delta_ratio[t].unwrap(), want, max_relative = 1e-12);
        }
        for t in 2..=6 {
            let want = (ap[t] + am[t]) / (hp[t] + hm[t]);
            assert_relative_eq!(r.sigma_ratio[t].unwrap(), want, max_relative = 1e-9);
        }
        // up to two steps the odd part is linear and the even part quadratic
        assert_relative_eq!(r.delta_ratio[2].unwrap(), 2.0, max_relative = 1e-12);
        assert_relative_eq!(r.sigma_ratio[2].unwrap(), 4.0, max_relative = 1e-12);
        // later steps pick up (eps/N)^2 relative corrections, here eps/N = 0.1
        assert!(r.delta_ratio[3].unwrap() > 2.0);
        assert!((r.delta_ratio[6].unwrap() - 2.0).abs() < 0.1);
        assert!(diagnostics_check(a.as_ref(), None).is_err());
    }

    #[test]
    fn antisymmetric_displacement_respects_stability_bound() {
        let spec = ModelSpec::new(vec![4, 1], Activation::Tanh, LossKind::SquaredError)
            .unwrap()
            .without_bias();
        let data = Dataset::new(quadratic_testbed(10, 4, 8).unwrap().0).unwrap();
        let tc = TrainConfig {
            step_size: 0.2,
            grad_norm_tol: 1e-13,
            ..TrainConfig::for_spec(&spec)
        };
        let theta = train(&spec, data.examples(), &tc).unwrap().0;
        let obj = Objective::new(&spec, data.examples(), 0.0).unwrap();
        let h = assemble_hessian(&theta, &obj).unwrap();
        let (lo, hi) = crate::numerics::extreme_eigs(&h).unwrap();
        let ctx = SimulationContext::new(&spec, &data, &theta, 0.0, 1e-10)
            .unwrap()
            .with_hessian_extremes(lo, hi);
        let mut c = cfg(0.1, 0.2, 30, 0.05);
        c.record_diagnostics = true;
        let o = simulate(&ctx, 2, &c).unwrap();
        let rho = o.stability.unwrap().spectral_radius;
        assert!(rho < 1.0);
        let g_b = norm(&spec.grad_example(&theta, data.get(2).unwrap()).unwrap());
        let diag = o.diagnostics.unwrap();
        for (t, dd) in diag.delta_delta.iter().enumerate() {
            let bound = 2.0 * c.epsilon / 10.0 * g_b * c.eta * (1.0 - rho.powi(t as i32)) / (1.0 - rho);
            assert!(*dd <= bound * (1.0 + 1e-6), "t={t}: {dd} > {bound}");
        }
    }
}
