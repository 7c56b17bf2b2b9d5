// SPDX-License-Identifier: Apache-2.0

//! Forward-only training-data attribution.
//!
//! Preparation time: for each training example, simulate a short damped
//! gradient-descent trajectory from the trained parameters with that
//! example up- and down-weighted, and store the resulting parameter
//! displacements ("imprints"). Query time: score the example against any
//! query with two forward passes through the displaced models.
//!
//! Alongside the estimator the crate carries the instruments needed to
//! check it: an exact influence-function oracle built from dense Hessians,
//! leave-one-out and subset retraining, and the correlation metrics used
//! to compare them.

// `!(x > 0.0)` rejects NaN along with the out-of-range values; dense
// kernels index several arrays with one counter
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod curvature;
pub mod data;
pub mod error;
pub mod eval;
pub mod hash;
pub mod model;
pub mod numerics;
pub mod readout;
pub mod simulator;
pub mod store;
pub mod trainer;

pub use curvature::{CurvatureBundle, IfScore};
pub use data::{DataSource, Dataset, Split};
pub use error::{Error, Result};
pub use model::{Activation, Example, Functional, Label, LossKind, ModelSpec, Objective, ParameterVector, Query};
pub use numerics::{RealVector, SymMatrix};
pub use readout::{AttributionScore, ScoreTable};
pub use simulator::{InfluenceImprint, SimulationConfig, Variant};
pub use store::ImprintStore;
pub use trainer::{TrainConfig, TrainReport};
