// SPDX-License-Identifier: Apache-2.0

//! Dataset containers, synthetic generators and the IDX (MNIST) reader.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, Functional, Label, ModelSpec, Query};

/// Training examples with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    index: HashMap<u64, usize>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let mut index = HashMap::with_capacity(examples.len());
        for (pos, b) in examples.iter().enumerate() {
            if index.insert(b.id, pos).is_some() {
                return Err(Error::Config(format!("duplicate example id {}", b.id)));
            }
        }
        Ok(Self { examples, index })
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        self.examples.iter().try_for_each(|b| spec.check_example(b))
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.examples.iter().map(|b| b.id).collect()
    }

    pub fn get(&self, id: u64) -> Option<&Example> {
        self.index.get(&id).map(|&p| &self.examples[p])
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Examples whose mask entry is set, in dataset order.
    pub fn masked(&self, mask: &[bool]) -> Result<Vec<Example>> {
        if mask.len() != self.len() {
            return Err(Error::Dimension {
                context: "inclusion mask",
                expected: self.len(),
                actual: mask.len(),
            });
        }
        Ok(self
            .examples
            .iter()
            .zip(mask)
            .filter(|(_, &keep)| keep)
            .map(|(b, _)| b.clone())
            .collect())
    }

    pub fn without(&self, id: u64) -> Vec<Example> {
        self.examples.iter().filter(|b| b.id != id).cloned().collect()
    }
}

/// Training set plus held-out queries.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub queries: Vec<Query>,
}

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// `classes` isotropic Gaussian clusters in `dim` dimensions.
    GaussianBlobs {
        classes: usize,
        dim: usize,
        sigma: f64,
        n_train: usize,
        n_queries: usize,
        seed: u64,
    },
    TwoMoons {
        n_train: usize,
        n_queries: usize,
        noise: f64,
        seed: u64,
    },
    /// Least-squares problem `0.5 (theta . x - y)^2` for a bias-free linear
    /// model; with `dim = 1` the features are all 1 and the targets are
    /// evenly spaced on `[0, 2]`.
    QuadraticTestbed {
        n: usize,
        #[serde(default = "one")]
        dim: usize,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        n_train: usize,
        n_queries: usize,
        seed: u64,
    },
}

fn one() -> usize {
    1
}

impl DataSource {
    pub fn load(&self, functional: Functional) -> Result<Split> {
        match *self {
            DataSource::GaussianBlobs {
                classes,
                dim,
                sigma,
                n_train,
                n_queries,
                seed,
            } => {
                let all = gaussian_blobs(classes, dim, sigma, n_train + n_queries, seed)?;
                split_off(all, n_train, functional)
            }
            DataSource::TwoMoons {
                n_train,
                n_queries,
                noise,
                seed,
            } => split_off(two_moons(n_train + n_queries, noise, seed), n_train, functional),
            DataSource::QuadraticTestbed { n, dim, seed } => {
                let (train, queries) = quadratic_testbed(n, dim, seed)?;
                Ok(Split {
                    train: Dataset::new(train)?,
                    queries,
                })
            }
            DataSource::Idx {
                ref images,
                ref labels,
                n_train,
                n_queries,
                seed,
            } => {
                let all = load_idx_examples(images, labels)?;
                if n_train + n_queries > all.len() {
                    return Err(Error::Config(format!(
                        "requested {} examples but the IDX files hold {}",
                        n_train + n_queries,
                        all.len()
                    )));
                }
                let mut order: Vec<usize> = (0..all.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let picked = order[..n_train + n_queries].iter().map(|&i| all[i].clone()).collect();
                split_off(picked, n_train, functional)
            }
        }
    }

    /// A model spec that fits this source, for generators whose shape is
    /// implied (the quadratic test bed is a bias-free linear model).
    pub fn natural_spec(&self) -> Option<ModelSpec> {
        match *self {
            DataSource::QuadraticTestbed { dim, .. } => Some(
                ModelSpec::new(
                    vec![dim, 1],
                    crate::model::Activation::Tanh,
                    crate::model::LossKind::SquaredError,
                )
                .ok()?
                .without_bias(),
            ),
            _ => None,
        }
    }
}

fn split_off(mut all: Vec<Example>, n_train: usize, functional: Functional) -> Result<Split> {
    let held_out = all.split_off(n_train.min(all.len()));
    let queries = held_out.iter().map(|b| Query::from_example(b, functional)).collect();
    Ok(Split {
        train: Dataset::new(all)?,
        queries,
    })
}

pub fn gaussian_blobs(classes: usize, dim: usize, sigma: f64, n: usize, seed: u64) -> Result<Vec<Example>> {
    if classes < 2 || dim == 0 || !(sigma > 0.0) {
        return Err(Error::Config(format!(
            "gaussian blobs need >= 2 classes, dim > 0, sigma > 0 (got {classes}, {dim}, {sigma})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    Ok((0..n)
        .map(|i| {
            let c = i % classes;
            let features = centers[c]
                .iter()
                .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Example {
                id: i as u64,
                features,
                label: Label::Class(c),
            }
        })
        .collect())
}

pub fn two_moons(n: usize, noise: f64, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let c = i % 2;
            let t = rng.random_range(0.0..std::f64::consts::PI);
            let (x, y) = if c == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);
            Example {
                id: i as u64,
                features: vec![x + noise * nx, y + noise * ny],
                label: Label::Class(c),
            }
        })
        .collect()
}

/// Training examples and queries for the least-squares test bed.
///
/// `dim = 1`: features 1, targets evenly spaced on `[0, 2]` (so `n = 2`
/// gives targets `[0, 2]`), one query with target 3, i.e. the functional
/// `0.5 (theta - 3)^2`. Larger `dim`: standard normal features, targets from
/// a random planted vector plus noise, and four random queries.
pub fn quadratic_testbed(n: usize, dim: usize, seed: u64) -> Result<(Vec<Example>, Vec<Query>)> {
    if n == 0 || dim == 0 {
        return Err(Error::Config("quadratic test bed needs n > 0 and dim > 0".into()));
    }
    if dim == 1 {
        let train = (0..n)
            .map(|i| Example {
                id: i as u64,
                features: vec![1.0],
                label: Label::Target(if n == 1 { 1.0 } else { 2.0 * i as f64 / (n - 1) as f64 }),
            })
            .collect();
        let query = Query {
            id: 0,
            features: vec![1.0],
            label: Label::Target(3.0),
            functional: Functional::Loss,
        };
        return Ok((train, vec![query]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let draw = |rng: &mut ChaCha8Rng| -> (Vec<f64>, f64) {
        let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let noise: f64 = rng.sample(StandardNormal);
        let y = x.iter().zip(&planted).map(|(a, b)| a * b).sum::<f64>() + 0.5 * noise;
        (x, y)
    };
    let train = (0..n)
        .map(|i| {
            let (features, y) = draw(&mut rng);
            Example {
                id: i as u64,
                features,
                label: Label::Target(y),
            }
        })
        .collect();
    let queries = (0..4)
        .map(|i| {
            let (features, y) = draw(&mut rng);
            Query {
                id: i,
                features,
                label: Label::Target(y),
                functional: Functional::Loss,
            }
        })
        .collect();
    Ok((train, queries))
}

// ---- IDX -------------------------------------------------------------------

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            what,
            expected: (at + 4) as u64,
            actual: bytes.len() as u64,
        })
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let what = "IDX image file";
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            what,
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what,
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..expected].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let what = "IDX label file";
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            what,
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, what)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what,
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes[8..expected].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Pairs images with labels; pixels are scaled to `[0, 1]` and ids are the
/// record index in the files.
pub fn idx_examples(images: &IdxImages, labels: &[u8]) -> Result<Vec<Example>> {
    if images.count != labels.len() {
        return Err(Error::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let dim = images.rows * images.cols;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| Example {
            id: i as u64,
            features: images.pixels[i * dim..(i + 1) * dim]
                .iter()
                .map(|&p| f64::from(p) / 255.0)
                .collect(),
            label: Label::Class(usize::from(y)),
        })
        .collect())
}

pub fn load_idx_examples(images: &Path, labels: &Path) -> Result<Vec<Example>> {
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    idx_examples(&parse_idx_images(&img)?, &parse_idx_labels(&lab)?)
}
