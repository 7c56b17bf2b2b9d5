// SPDX-License-Identifier: Apache-2.0

//! Shared fixtures for the benchmarks: a small trained tanh network on
//! Gaussian blobs with held-out queries.

use fwtrace_core::data::gaussian_blobs;
use fwtrace_core::trainer::train;
use fwtrace_core::{Activation, Dataset, Functional, LossKind, ModelSpec, ParameterVector, Query, TrainConfig};

pub struct Fixture {
    pub spec: ModelSpec,
    pub data: Dataset,
    pub queries: Vec<Query>,
    pub theta: ParameterVector,
    pub weight_decay: f64,
}

/// `n` training examples in 8 dimensions, 4 classes, `hidden` tanh units.
pub fn fixture(n: usize, hidden: usize) -> Fixture {
    let spec = ModelSpec::new(vec![8, hidden, 4], Activation::Tanh, LossKind::CrossEntropy).expect("valid spec");
    let mut all = gaussian_blobs(4, 8, 1.0, n + 16, 11).expect("valid blobs");
    let held_out = all.split_off(n);
    let data = Dataset::new(all).expect("unique ids");
    let cfg = TrainConfig {
        step_size: 0.5,
        max_steps: 5_000,
        weight_decay: 1e-2,
        ..TrainConfig::for_spec(&spec)
    };
    let (theta, _) = train(&spec, data.examples(), &cfg).expect("training runs");
    Fixture {
        queries: held_out.iter().map(|b| Query::from_example(b, Functional::Loss)).collect(),
        spec,
        data,
        theta,
        weight_decay: cfg.weight_decay,
    }
}
