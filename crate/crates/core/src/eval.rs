// SPDX-License-Identifier: Apache-2.0

//! Ground truth and metrics: leave-one-out and subset retraining, rank
//! correlations, agreement with the curvature oracle, hyperparameter sweeps
//! and error-curve fits.
//!
//! Sign convention. Removing example `b` is down-weighting it by one full
//! example (`eps = -1` in units of `1/N`), so the first-order removal effect
//! on a query is `-tau_if = -s / N`. LOO metrics therefore correlate scores
//! with the negated removal deltas ([`LOO_ALIGNMENT`]); a perfect estimator
//! scores +1. Subset outputs need no flip: keeping `S` moves the output by
//! `+sum_{b in S} s(b, q) / N` up to a constant.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{assemble_hessian, linear_reference_at, linear_reference_limit, CurvatureBundle};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Objective, ParameterVector, Query};
use crate::numerics::Cholesky;
use crate::readout::{attribute_matrix, ScoreTable};
use crate::simulator::{simulate_checkpointed, SimulationConfig, SimulationContext, Variant};
use crate::store::ImprintStore;
use crate::trainer::{retrain_subset, Start, TrainConfig, TrainReport};

/// Multiplier applied to removal deltas before correlating with scores.
pub const LOO_ALIGNMENT: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correlation {
    #[default]
    Spearman,
    Pearson,
}

impl Correlation {
    pub fn apply(self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            Correlation::Spearman => spearman(x, y),
            Correlation::Pearson => pearson(x, y),
        }
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            context: "correlation inputs",
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("need at least 2 points, got {}", x.len())));
    }
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(Error::UndefinedCorrelation("non-finite input".into()));
    }
    Ok(())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input has zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub per_query: Vec<f64>,
    pub mean: f64,
    /// Standard error of the mean across queries (0 for a single query).
    pub stderr: f64,
}

impl MetricSummary {
    pub fn from_values(per_query: Vec<f64>) -> Result<Self> {
        if per_query.is_empty() {
            return Err(Error::Empty("per-query metric list"));
        }
        let n = per_query.len() as f64;
        let mean = per_query.iter().sum::<f64>() / n;
        let stderr = if per_query.len() > 1 {
            let var = per_query.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Ok(Self { per_query, mean, stderr })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrainStart {
    /// Every retrain starts from the same seeded initialization as `theta*`.
    Seed,
    /// Every retrain starts from `theta*`.
    Warm,
    /// Starts from `theta*` and descends along the full-data Hessian at
    /// `theta*` (dense, `P <= DENSE_LIMIT`). Same stopping rule, far fewer
    /// steps.
    Preconditioned,
}

/// Removal deltas `F(q; theta_{-b}) - F(q; theta*)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooGroundTruth {
    pub example_ids: Vec<u64>,
    pub query_ids: Vec<u64>,
    /// `deltas[i][j]` for example `example_ids[i]` and query `query_ids[j]`.
    pub deltas: Vec<Vec<f64>>,
    pub start: RetrainStart,
    pub retrains: u64,
    /// Retrains that hit `max_steps` before the gradient tolerance.
    pub unconverged: u64,
}

impl LooGroundTruth {
    /// `LOO_ALIGNMENT * deltas` for query column `col`.
    pub fn aligned_column(&self, col: usize) -> Vec<f64> {
        self.deltas.iter().map(|row| LOO_ALIGNMENT * row[col]).collect()
    }

    /// The aligned deltas as a score table: the ideal estimator's output.
    pub fn as_scores(&self) -> ScoreTable {
        ScoreTable {
            example_ids: self.example_ids.clone(),
            query_ids: self.query_ids.clone(),
            cells: self
                .deltas
                .iter()
                .flat_map(|row| row.iter().map(|d| Some(LOO_ALIGNMENT * d)))
                .collect(),
            failures: Vec::new(),
            variant: Variant::Pair,
            per_example: false,
            forward_passes: 0,
            gradient_evaluations: 0,
        }
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Factor of the full-data Hessian at `theta_star`, for
/// [`RetrainStart::Preconditioned`].
fn preconditioner(
    spec: &ModelSpec,
    dataset: &Dataset,
    theta_star: &ParameterVector,
    cfg: &TrainConfig,
    start: RetrainStart,
) -> Result<Option<Cholesky>> {
    if start != RetrainStart::Preconditioned {
        return Ok(None);
    }
    let objective = Objective::new(spec, dataset.examples(), cfg.weight_decay)?;
    let h = assemble_hessian(theta_star, &objective)?;
    match Cholesky::factor(&h) {
        Ok(c) => Ok(Some(c)),
        Err(Error::Singular { pivot, value, .. }) => Err(Error::Singular {
            pivot,
            value,
            hint: "the Hessian at theta* is not positive definite; add weight decay or retrain warm",
        }),
        Err(e) => Err(e),
    }
}

fn start_for<'a>(start: RetrainStart, theta_star: &'a ParameterVector, m: Option<&'a Cholesky>) -> Start<'a> {
    match (start, m) {
        (RetrainStart::Seed, _) => Start::Seed,
        (RetrainStart::Preconditioned, Some(m)) => Start::Preconditioned(theta_star, m),
        _ => Start::Warm(theta_star),
    }
}

/// Retrains on `mask`. A preconditioned run that stops short of the
/// tolerance restarts from its iterate with the Hessian of the retraining
/// objective there; a fixed `H(theta*)` contracts slowly when the removed
/// examples carry much of the curvature.
fn retrain(
    spec: &ModelSpec,
    dataset: &Dataset,
    mask: &[bool],
    cfg: &TrainConfig,
    start: RetrainStart,
    theta_star: &ParameterVector,
    m: Option<&Cholesky>,
) -> Result<(ParameterVector, TrainReport)> {
    let (mut theta, mut report) = retrain_subset(spec, dataset, mask, cfg, start_for(start, theta_star, m))?;
    if start == RetrainStart::Preconditioned {
        for _ in 0..2 {
            if report.converged {
                break;
            }
            let subset = dataset.masked(mask)?;
            let objective = Objective::new(spec, &subset, cfg.weight_decay)?;
            let Ok(fresh) = Cholesky::factor(&assemble_hessian(&theta, &objective)?) else {
                break;
            };
            (theta, report) = retrain_subset(spec, dataset, mask, cfg, Start::Preconditioned(&theta, &fresh))?;
        }
    }
    Ok((theta, report))
}

/// Retrains without each example in `example_ids` and records the query
/// deltas against `theta_star`.
#[allow(clippy::too_many_arguments)]
pub fn loo_ground_truth(
    spec: &ModelSpec,
    dataset: &Dataset,
    queries: &[Query],
    theta_star: &ParameterVector,
    cfg: &TrainConfig,
    start: RetrainStart,
    example_ids: &[u64],
    workers: usize,
) -> Result<LooGroundTruth> {
    if queries.is_empty() {
        return Err(Error::Empty("query list"));
    }
    let base: Vec<f64> = queries
        .iter()
        .map(|q| spec.query_value(theta_star, q))
        .collect::<Result<_>>()?;
    let positions: Vec<usize> = example_ids
        .iter()
        .map(|&id| dataset.position(id).ok_or(Error::Membership(id)))
        .collect::<Result<_>>()?;
    let m = preconditioner(spec, dataset, theta_star, cfg, start)?;
    let results: Vec<Result<(Vec<f64>, bool)>> = pool(workers)?.install(|| {
        positions
            .par_iter()
            .map(|&pos| {
                let mut mask = vec![true; dataset.len()];
                mask[pos] = false;
                let (theta, report) = retrain(spec, dataset, &mask, cfg, start, theta_star, m.as_ref())?;
                let row = queries
                    .iter()
                    .zip(&base)
                    .map(|(q, b)| Ok(spec.query_value(&theta, q)? - b))
                    .collect::<Result<Vec<f64>>>()?;
                Ok((row, report.converged))
            })
            .collect()
    });
    let mut deltas = Vec::with_capacity(results.len());
    let mut unconverged = 0;
    for r in results {
        let (row, converged) = r?;
        unconverged += u64::from(!converged);
        deltas.push(row);
    }
    Ok(LooGroundTruth {
        example_ids: example_ids.to_vec(),
        query_ids: queries.iter().map(|q| q.id).collect(),
        deltas,
        start,
        retrains: example_ids.len() as u64,
        unconverged,
    })
}

/// Column of `scores` for `query_id`, reordered to `example_ids`.
fn score_column(scores: &ScoreTable, example_ids: &[u64], query_id: u64) -> Result<Vec<f64>> {
    example_ids
        .iter()
        .map(|&e| {
            scores.get(e, query_id).ok_or_else(|| {
                Error::Config(format!("no score for example {e} and query {query_id}"))
            })
        })
        .collect()
}

/// Per-query rank correlation between scores and aligned removal deltas.
pub fn loo_eval(scores: &ScoreTable, truth: &LooGroundTruth, corr: Correlation) -> Result<MetricSummary> {
    if truth.example_ids.len() < 3 {
        return Err(Error::Config(format!(
            "leave-one-out needs at least 3 examples, got {}",
            truth.example_ids.len()
        )));
    }
    let per_query = truth
        .query_ids
        .iter()
        .enumerate()
        .map(|(j, &q)| {
            let s = score_column(scores, &truth.example_ids, q)?;
            corr.apply(&s, &truth.aligned_column(j))
        })
        .collect::<Result<Vec<f64>>>()?;
    MetricSummary::from_values(per_query)
}

/// Mean LOO correlation under random permutations of the truth within each
/// query; returns the sorted null means.
pub fn loo_permutation_null(
    scores: &ScoreTable,
    truth: &LooGroundTruth,
    corr: Correlation,
    permutations: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns: Vec<(Vec<f64>, Vec<f64>)> = truth
        .query_ids
        .iter()
        .enumerate()
        .map(|(j, &q)| Ok((score_column(scores, &truth.example_ids, q)?, truth.aligned_column(j))))
        .collect::<Result<_>>()?;
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        let mut total = 0.0;
        for (s, t) in &columns {
            let mut shuffled = t.clone();
            shuffled.shuffle(&mut rng);
            total += corr.apply(s, &shuffled)?;
        }
        null.push(total / columns.len() as f64);
    }
    null.sort_by(f64::total_cmp);
    Ok(null)
}

/// Linear-interpolated quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Empty("quantile input"));
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Random training subsets for the linear datamodeling score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetDesign {
    pub m: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Dataset ids in the order mask entries refer to.
    pub example_ids: Vec<u64>,
    pub masks: Vec<Vec<bool>>,
}

impl SubsetDesign {
    pub const DEFAULT_M: usize = 50;
    pub const DEFAULT_ALPHA: f64 = 0.5;

    /// `m` distinct masks over `dataset`, each with `round(alpha * N)`
    /// examples included.
    pub fn new(dataset: &Dataset, m: usize, alpha: f64, seed: u64) -> Result<Self> {
        if m < 3 {
            return Err(Error::Config(format!("subset design needs M >= 3, got {m}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {alpha}")));
        }
        let n = dataset.len();
        let k = (alpha * n as f64).round() as usize;
        if k == 0 || k == n {
            return Err(Error::Config(format!("alpha = {alpha} gives empty or full subsets at N = {n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masks: Vec<Vec<bool>> = Vec::with_capacity(m);
        let mut order: Vec<usize> = (0..n).collect();
        let mut attempts = 0;
        while masks.len() < m {
            attempts += 1;
            if attempts > 100 * m {
                return Err(Error::Config(format!(
                    "cannot draw {m} distinct subsets of size {k} from {n} examples"
                )));
            }
            order.shuffle(&mut rng);
            let mut mask = vec![false; n];
            order[..k].iter().for_each(|&i| mask[i] = true);
            if !masks.contains(&mask) {
                masks.push(mask);
            }
        }
        Ok(Self {
            m,
            alpha,
            seed,
            example_ids: dataset.ids(),
            masks,
        })
    }
}

/// `outputs[i][j]`: query `j` under the model retrained on mask `i`.
#[allow(clippy::too_many_arguments)]
pub fn subset_outputs(
    spec: &ModelSpec,
    dataset: &Dataset,
    queries: &[Query],
    theta_star: &ParameterVector,
    design: &SubsetDesign,
    cfg: &TrainConfig,
    start: RetrainStart,
    workers: usize,
) -> Result<Vec<Vec<f64>>> {
    if design.example_ids != dataset.ids() {
        return Err(Error::Config("subset design was drawn for a different dataset".into()));
    }
    let m = preconditioner(spec, dataset, theta_star, cfg, start)?;
    let results: Vec<Result<Vec<f64>>> = pool(workers)?.install(|| {
        design
            .masks
            .par_iter()
            .map(|mask| {
                let (theta, _) = retrain(spec, dataset, mask, cfg, start, theta_star, m.as_ref())?;
                queries.iter().map(|q| spec.query_value(&theta, q)).collect()
            })
            .collect()
    });
    results.into_iter().collect()
}

/// Per query, rank correlation over subsets between `sum_{b in S} s(b, q)`
/// and the retrained output.
pub fn lds_eval(
    scores: &ScoreTable,
    design: &SubsetDesign,
    query_ids: &[u64],
    outputs: &[Vec<f64>],
    corr: Correlation,
) -> Result<MetricSummary> {
    if design.masks.len() < 3 {
        return Err(Error::Config(format!("subset design needs M >= 3, got {}", design.masks.len())));
    }
    if outputs.len() != design.masks.len() {
        return Err(Error::Dimension {
            context: "retrained outputs per subset",
            expected: design.masks.len(),
            actual: outputs.len(),
        });
    }
    let per_query = query_ids
        .iter()
        .enumerate()
        .map(|(j, &q)| {
            let s = score_column(scores, &design.example_ids, q)?;
            let predicted: Vec<f64> = design
                .masks
                .iter()
                .map(|mask| s.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum())
                .collect();
            let actual = outputs
                .iter()
                .map(|row| {
                    row.get(j).copied().ok_or(Error::Dimension {
                        context: "retrained outputs per query",
                        expected: query_ids.len(),
                        actual: row.len(),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            corr.apply(&predicted, &actual)
        })
        .collect::<Result<Vec<f64>>>()?;
    MetricSummary::from_values(per_query)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleAgreement {
    pub spearman: f64,
    /// `max |s - r| / (|r| + 1e-12)`.
    pub max_relative_deviation: f64,
}

pub fn oracle_agreement(scores: &[f64], reference: &[f64]) -> Result<OracleAgreement> {
    let spearman = spearman(scores, reference)?;
    let max_relative_deviation = scores
        .iter()
        .zip(reference)
        .map(|(s, r)| (s - r).abs() / (r.abs() + 1e-12))
        .fold(0.0, f64::max);
    Ok(OracleAgreement {
        spearman,
        max_relative_deviation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpCounts {
    pub retrains: u64,
    pub forward_passes: u64,
    pub inner_gradients: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub loo: Option<MetricSummary>,
    pub lds: Option<MetricSummary>,
    pub oracle: Option<OracleAgreement>,
    pub correlation: Correlation,
    pub sign_convention: String,
    pub ops: OpCounts,
    /// Free-form provenance: config hashes, seeds, file names.
    pub provenance: serde_json::Value,
}

impl EvaluationReport {
    pub fn new(correlation: Correlation) -> Self {
        Self {
            loo: None,
            lds: None,
            oracle: None,
            correlation,
            sign_convention: format!(
                "scores are correlated with {LOO_ALIGNMENT} * (F(q; theta without b) - F(q; theta*)) for leave-one-out \
                 and with retrained subset outputs directly"
            ),
            ops: OpCounts::default(),
            provenance: serde_json::Value::Null,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Least-squares slope of `y` on `x`; at least 4 points.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            context: "slope fit",
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 4 {
        return Err(Error::Config(format!("slope fit needs at least 4 points, got {}", x.len())));
    }
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(Error::Config("slope fit input is not finite".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("slope fit over a single x value".into()));
    }
    Ok(sxy / sxx)
}

/// Slope of `log|err|` against `log x`.
pub fn loglog_slope(x: &[f64], err: &[f64]) -> Result<f64> {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = err.iter().map(|v| v.abs().ln()).collect();
    fit_slope(&lx, &ly)
}

/// Bias order of a readout whose limit is unknown: with `eps` halving at
/// each step, successive differences `|s(eps_i) - s(eps_{i+1})|` scale like
/// the bias itself, and any `eps`-independent offset cancels. Needs five
/// or more points.
pub fn successive_difference_slope(epsilons: &[f64], scores: &[f64]) -> Result<f64> {
    if epsilons.len() != scores.len() {
        return Err(Error::Dimension {
            context: "successive differences",
            expected: epsilons.len(),
            actual: scores.len(),
        });
    }
    let diffs: Vec<f64> = scores.windows(2).map(|w| w[0] - w[1]).collect();
    loglog_slope(&epsilons[..epsilons.len().saturating_sub(1)], &diffs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationCurve {
    pub steps: Vec<u64>,
    pub errors: Vec<f64>,
    /// Fitted slope of `ln|error|` per step.
    pub slope: f64,
    /// `ln` of the spectral radius of `I - eta H_lambda`.
    pub expected_slope: f64,
}

impl TruncationCurve {
    /// Per-step contraction factor implied by the fit.
    pub fn contraction(&self) -> f64 {
        self.slope.exp()
    }
}

pub fn truncation_curve(
    bundle: &CurvatureBundle,
    eta: f64,
    steps: &[u64],
    g_b: &[f64],
    g_q: &[f64],
) -> Result<TruncationCurve> {
    let errors = crate::curvature::truncation_error_at(bundle, eta, steps, g_b, g_q)?;
    let xs: Vec<f64> = steps.iter().map(|&t| t as f64).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.abs().ln()).collect();
    let slope = fit_slope(&xs, &ys)?;
    let rho = crate::curvature::stability_check(bundle, eta)?.spectral_radius;
    Ok(TruncationCurve {
        steps: steps.to_vec(),
        errors,
        slope,
        expected_slope: rho.ln(),
    })
}

/// Grid for [`sweep`]; every combination is one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub eta: Vec<f64>,
    pub steps: Vec<u64>,
    pub lambda: Vec<f64>,
    pub epsilon: Vec<f64>,
}

impl SweepGrid {
    pub fn len(&self) -> usize {
        self.eta.len() * self.steps.len() * self.lambda.len() * self.epsilon.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which oracle quantity the sweep's agreement column compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleTarget {
    /// `N * tau_if`, the infinite-horizon target.
    TauIf,
    /// `-g_q^T S_T(H_lambda) g_b` at the row's `T`.
    LinearReference,
}

pub struct SweepSetup<'a> {
    pub ctx: SimulationContext<'a>,
    pub queries: &'a [Query],
    pub example_ids: &'a [u64],
    pub variant: Variant,
    pub drift_correction: bool,
    /// Undamped Hessian; enables the oracle column and stability radii.
    pub hessian: Option<&'a crate::numerics::SymMatrix>,
    pub oracle_target: OracleTarget,
    pub loo: Option<&'a LooGroundTruth>,
    pub lds: Option<(&'a SubsetDesign, &'a [Vec<f64>])>,
    pub correlation: Correlation,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eta: f64,
    pub steps: u64,
    pub lambda: f64,
    pub epsilon: f64,
    pub loo: Option<f64>,
    pub lds: Option<f64>,
    pub oracle_rho: Option<f64>,
    pub stability_rho: Option<f64>,
    pub unstable: bool,
    pub wall_ms: f64,
    pub inner_gradients: u64,
    pub forward_passes: u64,
}

/// Example-gradient evaluations a sweep will spend on simulation plus
/// forward passes on readout.
pub fn sweep_cost(setup: &SweepSetup<'_>, grid: &SweepGrid) -> u64 {
    let n = setup.ctx.dataset.len() as u64;
    let k = setup.variant.trajectories() + u64::from(setup.drift_correction);
    let b = setup.example_ids.len() as u64;
    let q = setup.queries.len() as u64;
    let max_t = grid.steps.iter().copied().max().unwrap_or(0);
    let per_config = b * max_t * k * n;
    let configs = (grid.eta.len() * grid.lambda.len() * grid.epsilon.len()) as u64;
    configs * per_config + grid.len() as u64 * 2 * b * q
}

/// Evaluates every grid point. Simulation runs once per `(eta, lambda, eps)`
/// up to the largest `T` and is read at each requested `T`. Rows that
/// diverge are flagged unstable instead of failing the sweep.
pub fn sweep(setup: &SweepSetup<'_>, grid: &SweepGrid, budget: Option<u64>) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    if let Some(cap) = budget {
        let estimated = sweep_cost(setup, grid);
        if estimated > cap {
            return Err(Error::WorkBudget { estimated, cap });
        }
    }
    let spec = setup.ctx.spec;
    let theta = setup.ctx.theta_star;
    let grads = setup
        .hessian
        .map(|_| -> Result<_> {
            let g_b: Vec<Vec<f64>> = setup
                .example_ids
                .iter()
                .map(|&id| {
                    let b = setup.ctx.dataset.get(id).ok_or(Error::Membership(id))?;
                    spec.grad_example(theta, b)
                })
                .collect::<Result<_>>()?;
            let g_q: Vec<Vec<f64>> = setup
                .queries
                .iter()
                .map(|q| spec.grad_query(theta, q))
                .collect::<Result<_>>()?;
            Ok((g_b, g_q))
        })
        .transpose()?;
    let extremes = match setup.hessian {
        Some(h) => Some(crate::numerics::extreme_eigs(h)?),
        None => setup.ctx.hessian_extremes,
    };
    let mut ctx = setup.ctx;
    ctx.hessian_extremes = extremes;
    ctx.strict = false;

    let mut rows = Vec::with_capacity(grid.len());
    for &eta in &grid.eta {
        for &lambda in &grid.lambda {
            let bundle = setup
                .hessian
                .map(|h| CurvatureBundle::new(h.clone(), lambda, theta.content_hash()))
                .transpose()?;
            // reference scores for every (b, q), per requested T
            let reference: Option<Vec<Vec<f64>>> = match (&bundle, &grads) {
                (Some(bundle), Some((g_b, g_q))) => Some(
                    g_b.iter()
                        .flat_map(|gb| g_q.iter().map(move |gq| (gb, gq)))
                        .map(|(gb, gq)| match setup.oracle_target {
                            OracleTarget::TauIf => Ok(vec![linear_reference_limit(bundle, gb, gq)?; grid.steps.len()]),
                            OracleTarget::LinearReference => linear_reference_at(bundle, eta, &grid.steps, gb, gq),
                        })
                        .collect::<Result<_>>()?,
                ),
                _ => None,
            };
            for &epsilon in &grid.epsilon {
                let cfg = SimulationConfig {
                    epsilon,
                    eta,
                    steps: grid.steps.iter().copied().max().unwrap_or(0),
                    lambda,
                    variant: setup.variant,
                    drift_correction: setup.drift_correction,
                    record_diagnostics: false,
                };
                cfg.validate()?;
                let stability_rho = ctx.stability(&cfg).map(|s| s.spectral_radius);
                let started = Instant::now();
                let sims: Vec<Result<Vec<crate::simulator::SimulationOutcome>>> = pool(setup.workers)?.install(|| {
                    setup
                        .example_ids
                        .par_iter()
                        .map(|&id| simulate_checkpointed(&ctx, id, &cfg, &grid.steps))
                        .collect()
                });
                let sim_ms = started.elapsed().as_secs_f64() * 1e3;
                let mut per_example = Vec::with_capacity(sims.len());
                let mut diverged = false;
                for s in sims {
                    match s {
                        Ok(v) => per_example.push(v),
                        Err(Error::Instability { .. }) => diverged = true,
                        Err(e) => return Err(e),
                    }
                }
                for (ti, &steps) in grid.steps.iter().enumerate() {
                    let mut row = SweepRow {
                        eta,
                        steps,
                        lambda,
                        epsilon,
                        loo: None,
                        lds: None,
                        oracle_rho: None,
                        stability_rho,
                        unstable: diverged || stability_rho.is_some_and(|r| r >= 1.0),
                        wall_ms: sim_ms,
                        inner_gradients: 0,
                        forward_passes: 0,
                    };
                    if diverged {
                        rows.push(row);
                        continue;
                    }
                    let started = Instant::now();
                    let outcomes: Vec<_> = per_example.iter().map(|v| &v[ti]).collect();
                    row.unstable |= outcomes.iter().any(|o| o.unstable);
                    row.inner_gradients = outcomes.iter().map(|o| o.inner_gradients).sum();
                    let store = ImprintStore::from_imprints(outcomes.iter().map(|o| o.imprint.clone()).collect())?;
                    let table = attribute_matrix(spec, &store, setup.queries, theta, setup.variant, false, setup.workers)?;
                    if let Some(f) = table.failures.first() {
                        return Err(Error::Config(format!(
                            "scoring failed for example {} and query {}: {}",
                            f.example_id, f.query_id, f.message
                        )));
                    }
                    row.forward_passes = table.forward_passes;
                    if let Some(reference) = &reference {
                        let s: Vec<f64> = setup
                            .example_ids
                            .iter()
                            .flat_map(|&e| setup.queries.iter().map(move |q| (e, q.id)))
                            .map(|(e, q)| table.get(e, q).expect("all cells succeeded"))
                            .collect();
                        let r: Vec<f64> = reference.iter().map(|v| v[ti]).collect();
                        row.oracle_rho = spearman(&s, &r).ok();
                    }
                    if let Some(truth) = setup.loo {
                        row.loo = loo_eval(&table, truth, setup.correlation).ok().map(|m| m.mean);
                    }
                    if let Some((design, outputs)) = setup.lds {
                        let qids: Vec<u64> = setup.queries.iter().map(|q| q.id).collect();
                        row.lds = lds_eval(&table, design, &qids, outputs, setup.correlation)
                            .ok()
                            .map(|m| m.mean);
                    }
                    row.wall_ms += started.elapsed().as_secs_f64() * 1e3;
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str =
    "eta,steps,lambda,epsilon,loo,lds,oracle_rho,stability_rho,unstable,wall_ms,inner_gradients,forward_passes";

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(SWEEP_CSV_HEADER.split(','))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        wtr.write_record([
            r.eta.to_string(),
            r.steps.to_string(),
            r.lambda.to_string(),
            r.epsilon.to_string(),
            opt(r.loo),
            opt(r.lds),
            opt(r.oracle_rho),
            opt(r.stability_rho),
            r.unstable.to_string(),
            format!("{:.3}", r.wall_ms),
            r.inner_gradients.to_string(),
            r.forward_passes.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<sweep csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::quadratic_testbed;
    use crate::model::{Activation, Functional, Label, LossKind};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn table(ids: &[u64], qids: &[u64], col_major: &[Vec<f64>]) -> ScoreTable {
        ScoreTable {
            example_ids: ids.to_vec(),
            query_ids: qids.to_vec(),
            cells: (0..ids.len())
                .flat_map(|r| col_major.iter().map(move |c| Some(c[r])))
                .collect(),
            failures: Vec::new(),
            variant: Variant::Pair,
            per_example: false,
            forward_passes: 0,
            gradient_evaluations: 0,
        }
    }

    #[test]
    fn spearman_examples() {
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]).unwrap(), 1.0);
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // ties share average ranks: scipy.stats.spearmanr([1,2,2,3],[1,3,2,4]) = 0.9486832980505138
        assert_relative_eq!(
            spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(),
            0.9486832980505138,
            epsilon = 1e-12
        );
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0]), Err(Error::Dimension { .. })));
        // centred sums by hand: sxy = 5.5, sxx = 5, syy = 8.75
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_relative_eq!(r, 5.5 / (5.0_f64.sqrt() * 8.75_f64.sqrt()), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_increasing_maps(
            xs in proptest::collection::vec(-100.0f64..100.0, 5..30),
            seed in 0u64..1000,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x.sin() + ((i as u64 * 31 + seed) % 17) as f64).collect();
            prop_assume!(spearman(&xs, &ys).is_ok());
            let a = spearman(&xs, &ys).unwrap();
            let mapped: Vec<f64> = xs.iter().map(|x| (x / 50.0).exp() * 3.0 + 1.0).collect();
            let scaled: Vec<f64> = xs.iter().map(|x| x / 1000.0).collect();
            prop_assert!((spearman(&mapped, &ys).unwrap() - a).abs() < 1e-12);
            prop_assert!((spearman(&scaled, &ys).unwrap() - a).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }

    fn truth_fixture() -> LooGroundTruth {
        LooGroundTruth {
            example_ids: vec![3, 1, 4, 5],
            query_ids: vec![9, 8],
            deltas: vec![vec![0.1, -2.0], vec![-0.3, 0.5], vec![0.2, 0.0], vec![0.05, 1.0]],
            start: RetrainStart::Warm,
            retrains: 4,
            unconverged: 0,
        }
    }

    #[test]
    fn loo_eval_self_and_negated() {
        let truth = truth_fixture();
        let own = truth.as_scores();
        assert_relative_eq!(loo_eval(&own, &truth, Correlation::Spearman).unwrap().mean, 1.0);
        let mut neg = own.clone();
        neg.cells.iter_mut().for_each(|c| *c = c.map(|v| -v));
        assert_relative_eq!(loo_eval(&neg, &truth, Correlation::Spearman).unwrap().mean, -1.0);
        // order of table rows does not matter
        let reordered = table(&[5, 4, 3, 1], &[8, 9], &[vec![-1.0, 0.0, 2.0, -0.5], vec![-0.05, -0.2, -0.1, 0.3]]);
        assert_relative_eq!(loo_eval(&reordered, &truth, Correlation::Spearman).unwrap().mean, 1.0);
        let constant = table(&[3, 1, 4, 5], &[9, 8], &[vec![1.0; 4], vec![1.0; 4]]);
        assert!(matches!(
            loo_eval(&constant, &truth, Correlation::Spearman),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn permutation_null_is_centered() {
        let truth = truth_fixture();
        let null = loo_permutation_null(&truth.as_scores(), &truth, Correlation::Spearman, 400, 1).unwrap();
        let mean = null.iter().sum::<f64>() / null.len() as f64;
        assert!(mean.abs() < 0.1, "{mean}");
        assert!(quantile(&null, 0.95).unwrap() <= 1.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.5).unwrap(), 2.0);
    }

    #[test]
    fn subset_design_properties() {
        let d = Dataset::new(quadratic_testbed(10, 2, 0).unwrap().0).unwrap();
        let design = SubsetDesign::new(&d, 20, 0.5, 3).unwrap();
        assert_eq!(design.masks.len(), 20);
        for (i, m) in design.masks.iter().enumerate() {
            assert_eq!(m.iter().filter(|&&b| b).count(), 5);
            assert!(!design.masks[..i].contains(m));
        }
        assert_eq!(design, SubsetDesign::new(&d, 20, 0.5, 3).unwrap());
        assert!(SubsetDesign::new(&d, 2, 0.5, 3).is_err());
        assert!(SubsetDesign::new(&d, 5, 1.0, 3).is_err());
    }

    #[test]
    fn lds_on_additive_model_is_one() {
        // output of a subset is an affine function of the summed per-example effects
        let d = Dataset::new(quadratic_testbed(12, 2, 1).unwrap().0).unwrap();
        let design = SubsetDesign::new(&d, 15, 0.5, 7).unwrap();
        // powers of two: distinct subsets have distinct, exactly summed totals
        let effects: Vec<f64> = (0..12).map(|i| (2.0f64).powi(i) * if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
        let outputs: Vec<Vec<f64>> = design
            .masks
            .iter()
            .map(|m| vec![3.0 + 0.5 * effects.iter().zip(m).filter(|(_, &k)| k).map(|(e, _)| e).sum::<f64>()])
            .collect();
        let scores = table(&design.example_ids, &[0], &[effects]);
        let lds = lds_eval(&scores, &design, &[0], &outputs, Correlation::Spearman).unwrap();
        assert_relative_eq!(lds.mean, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lds_random_scores_and_minimum_design() {
        let d = Dataset::new(quadratic_testbed(40, 2, 1).unwrap().0).unwrap();
        let design = SubsetDesign::new(&d, 200, 0.5, 2).unwrap();
        let effects: Vec<f64> = (0..40).map(|i| (i as f64 * 1.7).sin()).collect();
        let outputs: Vec<Vec<f64>> = design
            .masks
            .iter()
            .map(|m| vec![effects.iter().zip(m).filter(|(_, &k)| k).map(|(e, _)| e).sum::<f64>()])
            .collect();
        let noise: Vec<f64> = (0..40).map(|i| ((i * 7919 + 13) % 101) as f64).collect();
        let lds = lds_eval(&table(&design.example_ids, &[0], &[noise]), &design, &[0], &outputs, Correlation::Spearman).unwrap();
        assert!(lds.mean.abs() <= 0.3, "{}", lds.mean);

        let small = SubsetDesign::new(&d, 3, 0.5, 4).unwrap();
        let out3: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64]).collect();
        let v = lds_eval(&table(&small.example_ids, &[0], &[effects]), &small, &[0], &out3, Correlation::Spearman);
        match v {
            Ok(m) => assert!((-1.0..=1.0).contains(&m.mean)),
            Err(e) => assert!(matches!(e, Error::UndefinedCorrelation(_))),
        }
    }

    /// Least squares has a closed-form removal: theta_{-b} - theta* =
    /// (X^T X)^{-1} x_b r_b / (1 - h_b). The retrained deltas must match it and
    /// the linear part of each delta must equal -tau_if / (1 - h_b).
    #[test]
    fn loo_deltas_match_closed_form_removal_on_quadratics() {
        use nalgebra::{DMatrix, DVector};
        let spec = ModelSpec::new(vec![3, 1], Activation::Tanh, LossKind::SquaredError)
            .unwrap()
            .without_bias();
        let cfg = TrainConfig {
            step_size: 0.3,
            max_steps: 200_000,
            grad_norm_tol: 1e-13,
            seed: 0,
            weight_decay: 0.0,
        };
        let n = 24;
        for seed in 0..8 {
            let (train_set, queries) = quadratic_testbed(n, 3, seed).unwrap();
            let d = Dataset::new(train_set).unwrap();
            let theta = crate::trainer::train(&spec, d.examples(), &cfg).unwrap().0;
            let obj = crate::model::Objective::new(&spec, d.examples(), 0.0).unwrap();
            let bundle = CurvatureBundle::build(&theta, &obj, 0.0).unwrap();
            let truth = loo_ground_truth(&spec, &d, &queries, &theta, &cfg, RetrainStart::Warm, &d.ids(), 1).unwrap();
            assert_eq!(truth.unconverged, 0);
            let fast =
                loo_ground_truth(&spec, &d, &queries, &theta, &cfg, RetrainStart::Preconditioned, &d.ids(), 1).unwrap();
            assert_eq!(fast.unconverged, 0);
            for (a, b) in truth.deltas.iter().flatten().zip(fast.deltas.iter().flatten()) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
            }

            let x = DMatrix::from_fn(n, 3, |i, j| d.examples()[i].features[j]);
            let gram_inv = (x.transpose() * &x).try_inverse().unwrap();
            let t = DVector::from_column_slice(theta.values());
            let target = |l: &Label| match l {
                Label::Target(y) => *y,
                Label::Class(_) => unreachable!(),
            };
            let mut tau_cols = vec![Vec::new(); queries.len()];
            for (i, b) in d.examples().iter().enumerate() {
                let xb = DVector::from_column_slice(&b.features);
                let r_b = xb.dot(&t) - target(&b.label);
                let h_b = xb.dot(&(&gram_inv * &xb));
                let shift = &gram_inv * &xb * (r_b / (1.0 - h_b));
                let g_b = spec.grad_example(&theta, b).unwrap();
                for (j, q) in queries.iter().enumerate() {
                    let xq = DVector::from_column_slice(&q.features);
                    let r_q = xq.dot(&t) - target(&q.label);
                    let moved = xq.dot(&shift);
                    let exact = 0.5 * (r_q + moved).powi(2) - 0.5 * r_q * r_q;
                    assert!((truth.deltas[i][j] - exact).abs() <= 1e-9, "seed {seed}: {} vs {exact}", truth.deltas[i][j]);
                    let g_q = spec.grad_query(&theta, q).unwrap();
                    let tau = crate::curvature::tau_if(&bundle, &g_b, &g_q, n).unwrap();
                    // r_q * moved is the first-order part of the exact delta
                    assert!((-tau / (1.0 - h_b) - r_q * moved).abs() <= 1e-6 * (r_q * moved).abs().max(1e-6));
                    tau_cols[j].push(tau);
                }
            }
            let scores = table(&d.ids(), &truth.query_ids, &tau_cols);
            let rho = loo_eval(&scores, &truth, Correlation::Spearman).unwrap();
            assert!(rho.mean > 0.0, "seed {seed}: {rho:?}");
        }
    }

    #[test]
    fn oracle_agreement_examples() {
        let s = [1.0, 2.0, 3.5];
        let a = oracle_agreement(&s, &s).unwrap();
        assert_eq!((a.spearman, a.max_relative_deviation), (1.0, 0.0));
        let b = oracle_agreement(&[1.1, 2.0, 3.5], &s).unwrap();
        assert_relative_eq!(b.max_relative_deviation, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn slope_fits() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(fit_slope(&x, &[3.0, 5.0, 7.0, 9.0]).unwrap(), 2.0);
        assert!(fit_slope(&x[..3], &[1.0, 2.0, 3.0]).is_err());
        let eps = [0.1, 0.05, 0.025, 0.0125, 0.00625];
        let quad: Vec<f64> = eps.iter().map(|e| 1.5 - 0.046875 * e * e).collect();
        assert_relative_eq!(loglog_slope(&eps, &quad.iter().map(|s| s - 1.5).collect::<Vec<_>>()).unwrap(), 2.0, epsilon = 1e-9);
        assert_relative_eq!(successive_difference_slope(&eps, &quad).unwrap(), 2.0, epsilon = 1e-9);
        let lin: Vec<f64> = eps.iter().map(|e| 7.0 + 0.25 * e).collect();
        assert_relative_eq!(successive_difference_slope(&eps, &lin).unwrap(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn truncation_curve_on_scalar() {
        let bundle = CurvatureBundle::new(crate::numerics::SymMatrix::from_diagonal(&[1.0]), 0.0, 0).unwrap();
        let steps: Vec<u64> = (1..=20).collect();
        let c = truncation_curve(&bundle, 0.5, &steps, &[1.0], &[-2.0]).unwrap();
        for w in c.errors.windows(2) {
            assert_relative_eq!(w[1] / w[0], 0.5, epsilon = 1e-15);
        }
        assert_relative_eq!(c.contraction(), 0.5, epsilon = 1e-12);
        assert_relative_eq!(c.slope, c.expected_slope, epsilon = 1e-9);
    }

    fn sweep_fixture() -> (ModelSpec, Dataset, Vec<Query>, ParameterVector) {
        let spec = ModelSpec::new(vec![1, 1], Activation::Tanh, LossKind::SquaredError)
            .unwrap()
            .without_bias();
        let d = Dataset::new(quadratic_testbed(2, 1, 0).unwrap().0).unwrap();
        let q = vec![Query {
            id: 0,
            features: vec![1.0],
            label: Label::Target(3.0),
            functional: Functional::Loss,
        }];
        let theta = ParameterVector::new(&spec, vec![1.0]).unwrap();
        (spec, d, q, theta)
    }

    #[test]
    fn sweep_single_point_matches_direct_and_flags_instability() {
        let (spec, d, q, theta) = sweep_fixture();
        let ctx = SimulationContext::new(&spec, &d, &theta, 0.0, 1e-12).unwrap();
        let h = crate::numerics::SymMatrix::from_diagonal(&[1.0]);
        let ids = [0u64, 1];
        let setup = SweepSetup {
            ctx,
            queries: &q,
            example_ids: &ids,
            variant: Variant::Pair,
            drift_correction: false,
            hessian: Some(&h),
            oracle_target: OracleTarget::LinearReference,
            loo: None,
            lds: None,
            correlation: Correlation::Spearman,
            workers: 1,
        };
        let grid = SweepGrid {
            eta: vec![0.5],
            steps: vec![2],
            lambda: vec![0.0],
            epsilon: vec![0.1],
        };
        let rows = sweep(&setup, &grid, None).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].forward_passes, 4);
        assert_eq!(rows[0].inner_gradients, 8);
        assert_eq!(rows[0].oracle_rho, Some(1.0));
        assert_relative_eq!(rows[0].stability_rho.unwrap(), 0.5, epsilon = 1e-9);
        assert!(!rows[0].unstable);

        let unstable = SweepGrid {
            eta: vec![3.0],
            steps: vec![5, 2000],
            ..grid.clone()
        };
        let rows = sweep(&setup, &unstable, None).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.unstable));

        assert!(matches!(sweep(&setup, &grid, Some(3)), Err(Error::WorkBudget { .. })));
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some(SWEEP_CSV_HEADER));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn oracle_column_non_decreasing_in_t_on_testbed_family() {
        let spec = ModelSpec::new(vec![4, 1], Activation::Tanh, LossKind::SquaredError)
            .unwrap()
            .without_bias();
        let (train_set, queries) = quadratic_testbed(24, 4, 5).unwrap();
        let d = Dataset::new(train_set).unwrap();
        let cfg = TrainConfig {
            step_size: 0.3,
            max_steps: 200_000,
            grad_norm_tol: 1e-12,
            seed: 0,
            weight_decay: 0.0,
        };
        let theta = crate::trainer::train(&spec, d.examples(), &cfg).unwrap().0;
        let obj = crate::model::Objective::new(&spec, d.examples(), 0.0).unwrap();
        let h = crate::curvature::assemble_hessian(&theta, &obj).unwrap();
        let ctx = SimulationContext::new(&spec, &d, &theta, 0.0, 1e-10).unwrap();
        let ids = d.ids();
        let setup = SweepSetup {
            ctx,
            queries: &queries,
            example_ids: &ids,
            variant: Variant::Pair,
            drift_correction: false,
            hessian: Some(&h),
            oracle_target: OracleTarget::TauIf,
            loo: None,
            lds: None,
            correlation: Correlation::Spearman,
            workers: 1,
        };
        let grid = SweepGrid {
            eta: vec![0.1],
            steps: vec![1, 2, 5, 10, 20, 50, 100, 200],
            lambda: vec![1e-2],
            epsilon: vec![0.24],
        };
        let rows = sweep(&setup, &grid, None).unwrap();
        let rho: Vec<f64> = rows.iter().map(|r| r.oracle_rho.unwrap()).collect();
        for w in rho.windows(2) {
            assert!(w[1] >= w[0] - 0.02, "{rho:?}");
        }
        assert!(*rho.last().unwrap() > 0.99, "{rho:?}");
    }
}
