// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the attribution pipeline can report.
///
/// Variants are grouped by the exit-code family the CLI maps them onto
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("matrix is not positive definite: pivot {pivot} is {value:e}{hint}")]
    Singular {
        pivot: usize,
        value: f64,
        hint: &'static str,
    },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("dense budget exceeded: P = {size} exceeds limit {limit}")]
    Budget { size: usize, limit: usize },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error(
        "simulation became non-finite at step {step}{}",
        spectral_radius.map(|r| format!(" (spectral radius of I - eta*H_lambda: {r:.6})")).unwrap_or_default()
    )]
    Instability {
        step: usize,
        spectral_radius: Option<f64>,
    },

    #[error("unstable configuration: spectral radius {spectral_radius:.6} >= 1 for eta = {eta}")]
    UnstableConfig { spectral_radius: f64, eta: f64 },

    #[error("reference parameters are not converged: gradient norm {grad_norm:e} > tolerance {tol:e}")]
    NotConverged { grad_norm: f64, tol: f64 },

    #[error("example {0} is not part of the training set")]
    Membership(u64),

    #[error("stale {what}: expected hash {expected:016x}, found {found:016x}")]
    Stale {
        what: &'static str,
        expected: u64,
        found: u64,
    },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("bad magic in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("unsupported {what} version {version}")]
    UnsupportedVersion { what: &'static str, version: u16 },

    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: &'static str,
        expected: u64,
        actual: u64,
    },

    #[error("corrupt {what}: {detail}")]
    Corrupt { what: &'static str, detail: String },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("work budget exceeded: estimated {estimated} operations, cap {cap}")]
    WorkBudget { estimated: u64, cap: u64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 staleness, 4 metric
    /// undefined, 5 instability, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Dimension { .. }
            | Error::Empty(_)
            | Error::Membership(_)
            | Error::Budget { .. }
            | Error::WorkBudget { .. }
            | Error::NotConverged { .. } => 2,
            Error::Stale { .. } => 3,
            Error::UndefinedCorrelation(_) => 4,
            Error::Instability { .. }
            | Error::UnstableConfig { .. }
            | Error::Divergence { .. }
            | Error::Singular { .. } => 5,
            _ => 1,
        }
    }
}
