// SPDX-License-Identifier: Apache-2.0

//! Files exchanged between pipeline stages and the hashes that tie them
//! together.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use fwtrace_core::data::Split;
use fwtrace_core::hash::ContentHasher;
use fwtrace_core::{Dataset, Error, Example, ModelSpec, ParameterVector, Query, Result, TrainConfig, TrainReport};

pub const DATASET_FILE: &str = "dataset.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const STORE_FILE: &str = "imprints.fwim";
pub const STORE_MANIFEST_FILE: &str = "imprints.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const SCORES_MANIFEST_FILE: &str = "scores.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_MANIFEST_FILE: &str = "sweep.json";
const LOCK_FILE: &str = ".fwtrace.lock";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is locked by another run (remove {} if none is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Materialized training set and queries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFile {
    /// Hash of the source description the data was generated from.
    pub source_hash: u64,
    pub data_hash: u64,
    pub train: Vec<Example>,
    pub queries: Vec<Query>,
}

impl DatasetFile {
    pub fn new(split: &Split, source_hash: u64) -> Self {
        Self {
            source_hash,
            data_hash: split_hash(split.train.examples(), &split.queries),
            train: split.train.examples().to_vec(),
            queries: split.queries.clone(),
        }
    }

    /// Rebuilds the split, refusing a file whose content no longer matches
    /// its recorded hash.
    pub fn into_split(self) -> Result<Split> {
        let found = split_hash(&self.train, &self.queries);
        if found != self.data_hash {
            return Err(Error::Stale {
                what: "dataset file",
                expected: self.data_hash,
                found,
            });
        }
        Ok(Split {
            train: Dataset::new(self.train)?,
            queries: self.queries,
        })
    }
}

pub fn split_hash(train: &[Example], queries: &[Query]) -> u64 {
    let bytes = serde_json::to_vec(&(train, queries)).expect("dataset serializes");
    ContentHasher::new("dataset").bytes(&bytes).finish()
}

/// Hash of everything that determines `theta*`.
pub fn train_hash(spec: &ModelSpec, cfg: &TrainConfig, data_hash: u64) -> u64 {
    let bytes = serde_json::to_vec(cfg).expect("train config serializes");
    ContentHasher::new("train")
        .u64(spec.hash())
        .u64(data_hash)
        .bytes(&bytes)
        .finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub train_hash: u64,
    pub data_hash: u64,
    pub spec: ModelSpec,
    pub spec_hash: u64,
    pub theta_hash: u64,
    pub theta: Vec<f64>,
    pub report: TrainReport,
}

impl Checkpoint {
    pub fn new(
        spec: &ModelSpec,
        theta: &ParameterVector,
        report: TrainReport,
        config_hash: u64,
        train_hash: u64,
        data_hash: u64,
    ) -> Self {
        Self {
            config_hash,
            train_hash,
            data_hash,
            spec: spec.clone(),
            spec_hash: spec.hash(),
            theta_hash: theta.content_hash(),
            theta: theta.values().to_vec(),
            report,
        }
    }

    /// Parameters, after checking the embedded hashes against the content
    /// and against the train stage the current config describes.
    pub fn parameters(&self, expected_train_hash: u64) -> Result<ParameterVector> {
        if self.train_hash != expected_train_hash {
            return Err(Error::Stale {
                what: "checkpoint (config changed since training)",
                expected: expected_train_hash,
                found: self.train_hash,
            });
        }
        if self.spec.hash() != self.spec_hash {
            return Err(Error::Stale {
                what: "checkpoint model spec",
                expected: self.spec_hash,
                found: self.spec.hash(),
            });
        }
        let theta = ParameterVector::new(&self.spec, self.theta.clone())?;
        if theta.content_hash() != self.theta_hash {
            return Err(Error::Stale {
                what: "checkpoint parameters",
                expected: self.theta_hash,
                found: theta.content_hash(),
            });
        }
        Ok(theta)
    }
}

/// Sidecar for the imprint store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub config_hash: u64,
    pub simulation_hash: u64,
    pub theta_hash: u64,
    pub count: usize,
    pub inner_gradients: u64,
    pub unstable_ids: Vec<u64>,
    pub failed: Vec<(u64, String)>,
    pub spectral_radius: Option<f64>,
}

/// Sidecar for a score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresManifest {
    pub config_hash: u64,
    pub theta_hash: u64,
    pub simulation_hash: u64,
    pub variant: String,
    pub per_example: bool,
    pub rows: usize,
    pub forward_passes: u64,
    pub gradient_evaluations: u64,
    pub failed_cells: Vec<(u64, u64, String)>,
}
