// SPDX-License-Identifier: Apache-2.0

//! Run configuration. One TOML file describes a whole pipeline; command-line
//! flags override individual fields before anything is hashed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fwtrace_core::data::DataSource;
use fwtrace_core::eval::{Correlation, OracleTarget, RetrainStart, SubsetDesign};
use fwtrace_core::hash::ContentHasher;
use fwtrace_core::{Activation, Error, Functional, LossKind, ModelSpec, Result, SimulationConfig, TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Initialization seed for training; also seeds subset designs and
    /// permutation nulls.
    #[serde(default)]
    pub seed: u64,
    /// Relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
    pub dataset: DataSource,
    #[serde(default)]
    pub functional: Functional,
    /// Required unless the dataset implies a model (the quadratic test bed).
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_loss() -> LossKind {
    LossKind::CrossEntropy
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub step_size: f64,
    pub max_steps: usize,
    /// Defaults to `1e-6 * sqrt(P)`.
    pub grad_norm_tol: Option<f64>,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            max_steps: 100_000,
            grad_norm_tol: None,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    /// Defaults to `1e-2 * N`.
    pub epsilon: Option<f64>,
    pub eta: f64,
    pub steps: u64,
    pub lambda: f64,
    pub variant: Variant,
    pub drift_correction: bool,
    /// Training ids to simulate; all of them when absent.
    pub examples: Option<Vec<u64>>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let d = SimulationConfig::defaults_for(1);
        Self {
            epsilon: None,
            eta: d.eta,
            steps: d.steps,
            lambda: d.lambda,
            variant: d.variant,
            drift_correction: false,
            examples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub correlation: Correlation,
    pub retrain_start: RetrainStart,
    pub lds_subsets: usize,
    pub lds_alpha: f64,
    pub permutations: usize,
    pub oracle_target: OracleTarget,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            correlation: Correlation::Spearman,
            retrain_start: RetrainStart::Warm,
            lds_subsets: SubsetDesign::DEFAULT_M,
            lds_alpha: SubsetDesign::DEFAULT_ALPHA,
            permutations: 1000,
            oracle_target: OracleTarget::TauIf,
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub eta: Option<f64>,
    pub steps: Option<u64>,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub variant: Option<Variant>,
    pub drift_correction: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let DataSource::Idx { images, labels, .. } = &mut self.dataset {
            fix(images);
            fix(labels);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        let sim = &mut self.simulation;
        if let Some(v) = o.eta {
            sim.eta = v;
        }
        if let Some(v) = o.steps {
            sim.steps = v;
        }
        if let Some(v) = o.lambda {
            sim.lambda = v;
        }
        if o.epsilon.is_some() {
            sim.epsilon = o.epsilon;
        }
        if let Some(v) = o.variant {
            sim.variant = v;
        }
        sim.drift_correction |= o.drift_correction;
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        match &self.model {
            Some(m) => {
                let spec = ModelSpec::new(m.layers.clone(), m.activation, m.loss)?;
                Ok(if m.bias { spec } else { spec.without_bias() })
            }
            None => self
                .dataset
                .natural_spec()
                .ok_or_else(|| Error::Config("[model] section is required for this dataset".into())),
        }
    }

    pub fn train_config(&self, spec: &ModelSpec) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            step_size: t.step_size,
            max_steps: t.max_steps,
            grad_norm_tol: t
                .grad_norm_tol
                .unwrap_or_else(|| TrainConfig::for_spec(spec).grad_norm_tol),
            seed: self.seed,
            weight_decay: t.weight_decay,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Simulation settings for a training set of `n` examples.
    pub fn simulation_config(&self, n: usize) -> Result<SimulationConfig> {
        let s = &self.simulation;
        let cfg = SimulationConfig {
            epsilon: s.epsilon.unwrap_or(SimulationConfig::defaults_for(n).epsilon),
            eta: s.eta,
            steps: s.steps,
            lambda: s.lambda,
            variant: s.variant,
            drift_correction: s.drift_correction,
            record_diagnostics: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of the whole configuration after overrides.
    pub fn hash(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        ContentHasher::new("run-config").bytes(&bytes).finish()
    }
}
