// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use fwtrace_core::curvature::{assemble_hessian, linear_reference, linear_reference_limit, CurvatureBundle, HessianOperator};
use fwtrace_core::data::Split;
use fwtrace_core::eval::{
    lds_eval, loo_eval, loo_ground_truth, loo_permutation_null, oracle_agreement, quantile, subset_outputs, sweep,
    write_sweep_csv, EvaluationReport, OracleTarget, SubsetDesign, SweepGrid, SweepSetup,
};
use fwtrace_core::hash::ContentHasher;
use fwtrace_core::numerics::{extreme_eigs_op, PowerOptions};
use fwtrace_core::readout::attribute_matrix;
use fwtrace_core::simulator::{simulate_batch, SimulationContext};
use fwtrace_core::{
    Error, ImprintStore, ModelSpec, Objective, ParameterVector, Query, Result, ScoreTable,
    TrainConfig, Variant,
};

use crate::artifacts::*;
use crate::config::{Overrides, RunConfig};

/// Options shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Globals {
    pub config: PathBuf,
    pub overrides: Overrides,
    pub per_example: bool,
    pub strict: bool,
    pub budget: Option<u64>,
    pub workers: usize,
}

/// A loaded configuration holding the lock on its output directory.
pub struct Run {
    pub cfg: RunConfig,
    pub config_hash: u64,
    pub out: PathBuf,
    pub globals: Globals,
    _lock: OutputLock,
}

impl Run {
    pub fn open(globals: Globals) -> Result<Self> {
        let mut cfg = RunConfig::load(&globals.config)?;
        cfg.apply(&globals.overrides);
        let out = cfg.output_dir.clone();
        let lock = OutputLock::acquire(&out)?;
        Ok(Self {
            config_hash: cfg.hash(),
            cfg,
            out,
            globals,
            _lock: lock,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn source_hash(&self) -> u64 {
        let bytes = serde_json::to_vec(&(&self.cfg.dataset, self.cfg.functional)).expect("source serializes");
        ContentHasher::new("data-source").bytes(&bytes).finish()
    }

    fn check_budget(&self, estimated: u64) -> Result<()> {
        match self.globals.budget {
            Some(cap) if estimated > cap => Err(Error::WorkBudget { estimated, cap }),
            _ => Ok(()),
        }
    }

    /// The materialized dataset, ingesting it first if needed.
    fn split(&self) -> Result<Split> {
        let path = self.path(DATASET_FILE);
        if path.exists() {
            let file: DatasetFile = read_json(&path)?;
            if file.source_hash != self.source_hash() {
                return Err(Error::Stale {
                    what: "dataset file (dataset section changed; rerun ingest)",
                    expected: self.source_hash(),
                    found: file.source_hash,
                });
            }
            return file.into_split();
        }
        let split = self.cfg.dataset.load(self.cfg.functional)?;
        write_json(&path, &DatasetFile::new(&split, self.source_hash()))?;
        Ok(split)
    }

    fn trained(&self) -> Result<Trained> {
        let split = self.split()?;
        let spec = self.cfg.model_spec()?;
        split.train.validate(&spec)?;
        let train_cfg = self.cfg.train_config(&spec)?;
        let data_hash = split_hash(split.train.examples(), &split.queries);
        let checkpoint: Checkpoint = read_json(&self.path(CHECKPOINT_FILE))?;
        let theta = checkpoint.parameters(train_hash(&spec, &train_cfg, data_hash))?;
        Ok(Trained {
            split,
            spec,
            train_cfg,
            theta,
        })
    }
}

struct Trained {
    split: Split,
    spec: ModelSpec,
    train_cfg: TrainConfig,
    theta: ParameterVector,
}

impl Trained {
    fn context(&self) -> Result<SimulationContext<'_>> {
        SimulationContext::new(
            &self.spec,
            &self.split.train,
            &self.theta,
            self.train_cfg.weight_decay,
            self.train_cfg.grad_norm_tol,
        )
    }

    fn objective(&self) -> Result<Objective<'_>> {
        Objective::new(&self.spec, self.split.train.examples(), self.train_cfg.weight_decay)
    }
}

pub fn ingest(run: &Run) -> Result<()> {
    let split = run.cfg.dataset.load(run.cfg.functional)?;
    let file = DatasetFile::new(&split, run.source_hash());
    write_json(&run.path(DATASET_FILE), &file)?;
    let dim = split.train.examples().first().map_or(0, |b| b.features.len());
    println!(
        "ingested {} training examples and {} queries of dimension {dim} (data hash {:016x})",
        split.train.len(),
        split.queries.len(),
        file.data_hash
    );
    Ok(())
}

pub fn train(run: &Run) -> Result<()> {
    let split = run.split()?;
    let spec = run.cfg.model_spec()?;
    split.train.validate(&spec)?;
    let cfg = run.cfg.train_config(&spec)?;
    let (theta, report) = fwtrace_core::trainer::train(&spec, split.train.examples(), &cfg)?;
    let data_hash = split_hash(split.train.examples(), &split.queries);
    let checkpoint = Checkpoint::new(
        &spec,
        &theta,
        report,
        run.config_hash,
        train_hash(&spec, &cfg, data_hash),
        data_hash,
    );
    write_json(&run.path(CHECKPOINT_FILE), &checkpoint)?;
    write_json(
        &run.path(TRAIN_REPORT_FILE),
        &json!({ "config_hash": run.config_hash, "params": spec.param_count(), "report": report }),
    )?;
    println!(
        "{} after {} steps: loss {:.6e}, gradient norm {:.3e} (tolerance {:.3e})",
        if report.converged { "converged" } else { "stopped" },
        report.steps_taken,
        report.final_loss,
        report.final_grad_norm,
        cfg.grad_norm_tol
    );
    if !report.converged {
        eprintln!("warning: gradient tolerance not reached; simulate will refuse this checkpoint");
    }
    Ok(())
}

/// Which training examples to simulate.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub ids: Option<Vec<u64>>,
    pub ids_file: Option<PathBuf>,
}

fn read_ids(path: &Path) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("{}: bad example id {t:?}", path.display())))
        })
        .collect()
}

pub fn simulate(run: &Run, selection: &Selection) -> Result<()> {
    let t = run.trained()?;
    let cfg = run.cfg.simulation_config(t.split.train.len())?;
    let ids = match (&selection.ids, &selection.ids_file) {
        (Some(ids), _) => ids.clone(),
        (None, Some(path)) => read_ids(path)?,
        (None, None) => run.cfg.simulation.examples.clone().unwrap_or_else(|| t.split.train.ids()),
    };
    if ids.is_empty() {
        return Err(Error::Empty("example id list"));
    }
    let n = t.split.train.len() as u64;
    run.check_budget(ids.len() as u64 * cfg.inner_gradients_per_example() * n)?;
    let mut ctx = t.context()?;
    if run.globals.strict {
        let objective = t.objective()?;
        let op = HessianOperator::new(&t.theta, objective, 0.0);
        let (lo, hi) = extreme_eigs_op(&op, &PowerOptions::default())?;
        ctx = ctx.with_hessian_extremes(lo, hi).strict(true);
        let s = ctx.stability(&cfg).expect("extremes set");
        if !s.stable {
            return Err(Error::UnstableConfig {
                spectral_radius: s.spectral_radius,
                eta: cfg.eta,
            });
        }
    }
    let batch = simulate_batch(&ctx, &ids, &cfg, run.globals.workers)?;
    if batch.outcomes.is_empty() {
        let (_, first) = batch.failures.into_iter().next().expect("non-empty id list");
        return Err(first);
    }
    let mut store = ImprintStore::new(&t.spec, &t.theta, n, cfg);
    for o in &batch.outcomes {
        store.insert(o.imprint.clone())?;
    }
    store.save(&run.path(STORE_FILE))?;
    let manifest = StoreManifest {
        config_hash: run.config_hash,
        simulation_hash: cfg.hash(),
        theta_hash: t.theta.content_hash(),
        count: store.len(),
        inner_gradients: batch.inner_gradients,
        unstable_ids: batch.unstable_ids(),
        failed: batch.failures.iter().map(|(id, e)| (*id, e.to_string())).collect(),
        spectral_radius: ctx.stability(&cfg).map(|s| s.spectral_radius),
    };
    write_json(&run.path(STORE_MANIFEST_FILE), &manifest)?;
    for (id, e) in &batch.failures {
        eprintln!("warning: example {id} failed: {e}");
    }
    println!(
        "simulated {} imprints ({} inner gradient evaluations, {} unstable, {} failed)",
        store.len(),
        manifest.inner_gradients,
        manifest.unstable_ids.len(),
        manifest.failed.len()
    );
    Ok(())
}

pub fn attribute(run: &Run, store_path: Option<&Path>, queries_path: Option<&Path>) -> Result<()> {
    let t = run.trained()?;
    let store_path = store_path.map_or_else(|| run.path(STORE_FILE), Path::to_path_buf);
    let store = ImprintStore::load_for(&store_path, &t.spec, &t.theta)?;
    let queries: Vec<Query> = match queries_path {
        Some(p) => read_json(p)?,
        None => t.split.queries.clone(),
    };
    let variant = run.globals.overrides.variant.unwrap_or(store.config().variant);
    if variant == Variant::Pair && store.config().variant == Variant::Single {
        return Err(Error::Config(
            "the store holds single-variant imprints; pair scoring needs both trajectories".into(),
        ));
    }
    let table = attribute_matrix(
        &t.spec,
        &store,
        &queries,
        &t.theta,
        variant,
        run.globals.per_example,
        run.globals.workers,
    )?;
    table.write_csv(&run.path(SCORES_FILE))?;
    let manifest = ScoresManifest {
        config_hash: run.config_hash,
        theta_hash: t.theta.content_hash(),
        simulation_hash: store.config().hash(),
        variant: variant.as_str().to_string(),
        per_example: run.globals.per_example,
        rows: table.cells.iter().filter(|c| c.is_some()).count(),
        forward_passes: table.forward_passes,
        gradient_evaluations: table.gradient_evaluations,
        failed_cells: table
            .failures
            .iter()
            .map(|f| (f.example_id, f.query_id, f.message.clone()))
            .collect(),
    };
    write_json(&run.path(SCORES_MANIFEST_FILE), &manifest)?;
    for f in &table.failures {
        eprintln!("warning: example {} query {}: {}", f.example_id, f.query_id, f.message);
    }
    println!(
        "scored {} cells with {} forward passes and {} gradient evaluations",
        manifest.rows, manifest.forward_passes, manifest.gradient_evaluations
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalMode {
    Loo,
    Lds,
    Oracle,
}

impl EvalMode {
    fn name(self) -> &'static str {
        match self {
            EvalMode::Loo => "loo",
            EvalMode::Lds => "lds",
            EvalMode::Oracle => "oracle",
        }
    }
}

pub fn evaluate(run: &Run, mode: EvalMode, scores_path: Option<&Path>) -> Result<()> {
    let t = run.trained()?;
    let scores_path = scores_path.map_or_else(|| run.path(SCORES_FILE), Path::to_path_buf);
    let scores = ScoreTable::read_csv(&scores_path)?;
    let manifest_path = scores_path.with_extension("json");
    let manifest: Option<ScoresManifest> = if manifest_path.exists() {
        Some(read_json(&manifest_path)?)
    } else {
        None
    };
    if let Some(m) = &manifest {
        if m.theta_hash != t.theta.content_hash() {
            return Err(Error::Stale {
                what: "score table (parameters changed since scoring)",
                expected: t.theta.content_hash(),
                found: m.theta_hash,
            });
        }
    }
    let per_example = manifest.as_ref().is_some_and(|m| m.per_example);
    let queries: Vec<Query> = scores
        .query_ids
        .iter()
        .map(|&id| {
            t.split
                .queries
                .iter()
                .find(|q| q.id == id)
                .cloned()
                .ok_or_else(|| Error::Config(format!("query {id} is not in the dataset")))
        })
        .collect::<Result<_>>()?;
    let ev = &run.cfg.evaluation;
    let n = t.split.train.len();
    let mut report = EvaluationReport::new(ev.correlation);
    report.ops.forward_passes = manifest.as_ref().map_or(0, |m| m.forward_passes);
    if let Ok(m) = read_json::<StoreManifest>(&run.path(STORE_MANIFEST_FILE)) {
        report.ops.inner_gradients = m.inner_gradients;
    }
    let mut provenance = json!({
        "config_hash": format!("{:016x}", run.config_hash),
        "theta_hash": format!("{:016x}", t.theta.content_hash()),
        "scores": scores_path.display().to_string(),
        "mode": mode.name(),
        "seed": run.cfg.seed,
    });
    let retrain_cost = (t.train_cfg.max_steps * n) as u64;
    match mode {
        EvalMode::Loo => {
            run.check_budget(scores.example_ids.len() as u64 * retrain_cost)?;
            let truth = loo_ground_truth(
                &t.spec,
                &t.split.train,
                &queries,
                &t.theta,
                &t.train_cfg,
                ev.retrain_start,
                &scores.example_ids,
                run.globals.workers,
            )?;
            write_json(&run.path("loo_truth.json"), &truth)?;
            let summary = loo_eval(&scores, &truth, ev.correlation)?;
            let null = loo_permutation_null(&scores, &truth, ev.correlation, ev.permutations, run.cfg.seed)?;
            let p95 = quantile(&null, 0.95)?;
            provenance["permutations"] = json!(ev.permutations);
            provenance["null_p95"] = json!(p95);
            provenance["exceeds_null"] = json!(summary.mean > p95);
            provenance["unconverged_retrains"] = json!(truth.unconverged);
            provenance["retrain_start"] = json!(ev.retrain_start);
            report.ops.retrains = truth.retrains;
            println!("loo {:.4} +/- {:.4} (null 95th percentile {p95:.4})", summary.mean, summary.stderr);
            report.loo = Some(summary);
        }
        EvalMode::Lds => {
            run.check_budget(ev.lds_subsets as u64 * retrain_cost)?;
            let design = SubsetDesign::new(&t.split.train, ev.lds_subsets, ev.lds_alpha, run.cfg.seed)?;
            let outputs = subset_outputs(
                &t.spec,
                &t.split.train,
                &queries,
                &t.theta,
                &design,
                &t.train_cfg,
                ev.retrain_start,
                run.globals.workers,
            )?;
            let summary = lds_eval(&scores, &design, &scores.query_ids, &outputs, ev.correlation)?;
            provenance["subsets"] = json!(design.m);
            provenance["alpha"] = json!(design.alpha);
            provenance["retrain_start"] = json!(ev.retrain_start);
            report.ops.retrains = design.m as u64;
            println!("lds {:.4} +/- {:.4}", summary.mean, summary.stderr);
            report.lds = Some(summary);
        }
        EvalMode::Oracle => {
            let cfg = run.cfg.simulation_config(n)?;
            let bundle = CurvatureBundle::build(&t.theta, &t.objective()?, cfg.lambda)?;
            let scale = if per_example { 1.0 / n as f64 } else { 1.0 };
            let g_q: Vec<Vec<f64>> = queries.iter().map(|q| t.spec.grad_query(&t.theta, q)).collect::<Result<_>>()?;
            let (mut s, mut r) = (Vec::new(), Vec::new());
            for &e in &scores.example_ids {
                let b = t.split.train.get(e).ok_or(Error::Membership(e))?;
                let g_b = t.spec.grad_example(&t.theta, b)?;
                for (q, gq) in queries.iter().zip(&g_q) {
                    let Some(v) = scores.get(e, q.id) else { continue };
                    let reference = match ev.oracle_target {
                        OracleTarget::TauIf => linear_reference_limit(&bundle, &g_b, gq)?,
                        OracleTarget::LinearReference => linear_reference(&bundle, cfg.eta, cfg.steps, &g_b, gq)?,
                    };
                    s.push(v);
                    r.push(scale * reference);
                }
            }
            let agreement = oracle_agreement(&s, &r)?;
            provenance["oracle_target"] = json!(ev.oracle_target);
            provenance["lambda"] = json!(cfg.lambda);
            provenance["pairs"] = json!(s.len());
            println!(
                "oracle spearman {:.4}, max relative deviation {:.3e} over {} pairs",
                agreement.spearman,
                agreement.max_relative_deviation,
                s.len()
            );
            report.oracle = Some(agreement);
        }
    }
    report.provenance = provenance;
    report.write_json(&run.path(&format!("report-{}.json", mode.name())))
}

/// Grid file for `sweep`. Unset epsilon falls back to the run's epsilon.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub eta: Vec<f64>,
    pub steps: Vec<u64>,
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub epsilon: Vec<f64>,
    /// Compare scores against this oracle (needs a dense Hessian).
    #[serde(default)]
    pub oracle: Option<OracleTarget>,
    #[serde(default)]
    pub loo: bool,
    #[serde(default)]
    pub lds: bool,
}

pub fn sweep_cmd(run: &Run, grid_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(grid_path).map_err(|e| Error::io(grid_path, e))?;
    let file: SweepFile = toml::from_str(&text).map_err(|e| Error::Config(format!("grid: {e}")))?;
    let t = run.trained()?;
    let n = t.split.train.len();
    let base = run.cfg.simulation_config(n)?;
    let grid = SweepGrid {
        eta: file.eta.clone(),
        steps: file.steps.clone(),
        lambda: file.lambda.clone(),
        epsilon: if file.epsilon.is_empty() { vec![base.epsilon] } else { file.epsilon.clone() },
    };
    let ids = run.cfg.simulation.examples.clone().unwrap_or_else(|| t.split.train.ids());
    let ev = &run.cfg.evaluation;
    let hessian = match file.oracle {
        Some(_) => Some(assemble_hessian(&t.theta, &t.objective()?)?),
        None => None,
    };
    let truth = if file.loo {
        Some(loo_ground_truth(
            &t.spec,
            &t.split.train,
            &t.split.queries,
            &t.theta,
            &t.train_cfg,
            ev.retrain_start,
            &ids,
            run.globals.workers,
        )?)
    } else {
        None
    };
    let lds = if file.lds {
        let design = SubsetDesign::new(&t.split.train, ev.lds_subsets, ev.lds_alpha, run.cfg.seed)?;
        let outputs = subset_outputs(
            &t.spec,
            &t.split.train,
            &t.split.queries,
            &t.theta,
            &design,
            &t.train_cfg,
            ev.retrain_start,
            run.globals.workers,
        )?;
        Some((design, outputs))
    } else {
        None
    };
    let setup = SweepSetup {
        ctx: t.context()?,
        queries: &t.split.queries,
        example_ids: &ids,
        variant: base.variant,
        drift_correction: base.drift_correction,
        hessian: hessian.as_ref(),
        oracle_target: file.oracle.unwrap_or(OracleTarget::TauIf),
        loo: truth.as_ref(),
        lds: lds.as_ref().map(|(d, o)| (d, o.as_slice())),
        correlation: ev.correlation,
        workers: run.globals.workers,
    };
    let rows = sweep(&setup, &grid, run.globals.budget)?;
    let path = run.path(SWEEP_FILE);
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_sweep_csv(&rows, f)?;
    write_json(
        &run.path(SWEEP_MANIFEST_FILE),
        &json!({ "config_hash": run.config_hash, "grid": file, "rows": rows.len() }),
    )?;
    println!(
        "swept {} grid points ({} flagged unstable)",
        rows.len(),
        rows.iter().filter(|r| r.unstable).count()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_files_accept_commas_and_newlines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ids.txt");
        std::fs::write(&p, "3, 1\n4\n\n").unwrap();
        assert_eq!(read_ids(&p).unwrap(), vec![3, 1, 4]);
        std::fs::write(&p, "3 x").unwrap();
        assert_eq!(read_ids(&p).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn sweep_file_requires_known_fields() {
        let ok: SweepFile = toml::from_str("eta = [0.03]\nsteps = [10, 20]\nlambda = [0.001]\noracle = \"tau-if\"").unwrap();
        assert_eq!(ok.oracle, Some(OracleTarget::TauIf));
        assert!(ok.epsilon.is_empty());
        assert!(toml::from_str::<SweepFile>("eta = [0.03]\nsteps = [1]\nlambda = [0.0]\nfoo = 1").is_err());
    }
}
