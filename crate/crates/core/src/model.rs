// SPDX-License-Identifier: Apache-2.0

//! Fully connected networks with analytic backpropagation.
//!
//! Parameters are one flat vector. Each layer stores its weights input-major
//! (`w[i * n_out + o]`, so one input's fan-out is contiguous) followed by its
//! biases when the spec has them. Hidden layers apply the activation; the
//! output layer is linear and its values are the logits (or regression
//! outputs). Inputs that are exactly zero are skipped, which makes sparse
//! images such as MNIST digits cheap.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::ContentHasher;
use crate::numerics::{axpy, dot_unchecked, RealVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    SquaredError,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input, hidden..., output widths.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    /// Whether each layer carries a bias vector.
    #[serde(default = "default_true")]
    pub bias: bool,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, loss: LossKind) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
            loss,
            bias: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "a model needs at least 2 layer sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    fn layer_len(&self, l: usize) -> usize {
        (self.layer_sizes[l] + usize::from(self.bias)) * self.layer_sizes[l + 1]
    }

    pub fn param_count(&self) -> usize {
        (0..self.num_layers()).map(|l| self.layer_len(l)).sum()
    }

    pub fn hash(&self) -> u64 {
        let mut h = ContentHasher::new("model-spec/v1");
        h.u64(self.layer_sizes.len() as u64);
        for &n in &self.layer_sizes {
            h.u64(n as u64);
        }
        h.u64(match self.activation {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        });
        h.u64(match self.loss {
            LossKind::CrossEntropy => 0,
            LossKind::SquaredError => 1,
        });
        h.u64(u64::from(self.bias));
        h.finish()
    }

    /// Uniform `±sqrt(6 / (n_in + n_out))` weights, zero biases.
    pub fn param_init(&self, seed: u64) -> ParameterVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.param_count());
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            values.extend((0..n_in * n_out).map(|_| rng.random_range(-bound..bound)));
            if self.bias {
                values.extend(std::iter::repeat_n(0.0, n_out));
            }
        }
        ParameterVector::new(self, values).expect("init has the right length")
    }

    /// Indices of the bias entries in the flat parameter vector.
    pub fn bias_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.bias {
            return out;
        }
        let mut offset = 0;
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            out.extend(offset + n_in * n_out..offset + (n_in + 1) * n_out);
            offset += self.layer_len(l);
        }
        out
    }

    /// Indices of the first-layer weights (those multiplied by the inputs).
    pub fn input_weight_indices(&self) -> std::ops::Range<usize> {
        0..self.layer_sizes[0] * self.layer_sizes[1]
    }

    pub fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim() {
            return Err(Error::Dimension {
                context: "features",
                expected: self.input_dim(),
                actual: features.len(),
            });
        }
        Ok(())
    }

    pub fn check_label(&self, label: Label) -> Result<()> {
        match (label, self.loss) {
            (Label::Class(c), _) if c >= self.output_dim() => Err(Error::Config(format!(
                "class index {c} out of range for {} outputs",
                self.output_dim()
            ))),
            (Label::Target(_), LossKind::CrossEntropy) => Err(Error::Config(
                "cross-entropy needs a class label, got a real target".into(),
            )),
            (Label::Target(_), LossKind::SquaredError) if self.output_dim() != 1 => Err(Error::Config(
                "a real target needs a single-output model".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn check_example(&self, b: &Example) -> Result<()> {
        self.check_features(&b.features)?;
        self.check_label(b.label)
    }

    pub fn check_query(&self, q: &Query) -> Result<()> {
        self.check_features(&q.features)?;
        self.check_label(q.label)?;
        if q.functional == Functional::Margin {
            match q.label {
                Label::Class(_) if self.output_dim() >= 2 => {}
                _ => {
                    return Err(Error::Config(
                        "margin functional needs a class label and at least 2 outputs".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    pub(crate) fn check_params(&self, theta: &ParameterVector) -> Result<()> {
        if theta.spec_hash != self.hash() {
            return Err(Error::Stale {
                what: "parameters (model spec)",
                expected: self.hash(),
                found: theta.spec_hash,
            });
        }
        Ok(())
    }

    // ---- raw kernels over flat slices -------------------------------------

    /// Forward pass; leaves every layer's post-activation in `scratch` and
    /// returns the logits.
    pub(crate) fn forward<'s>(&self, theta: &[f64], x: &[f64], scratch: &'s mut Scratch) -> &'s [f64] {
        counters::bump_forward();
        let layers = self.num_layers();
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &theta[offset..offset + n_in * n_out];
            let (prev, rest) = scratch.acts.split_at_mut(l + 1);
            let input: &[f64] = if l == 0 { x } else { &prev[l] };
            let z = &mut rest[0];
            if self.bias {
                z.copy_from_slice(&theta[offset + n_in * n_out..offset + (n_in + 1) * n_out]);
            } else {
                z.iter_mut().for_each(|v| *v = 0.0);
            }
            for (i, &xi) in input.iter().enumerate() {
                if xi != 0.0 {
                    axpy(xi, &w[i * n_out..(i + 1) * n_out], z);
                }
            }
            if l + 1 < layers {
                match self.activation {
                    Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
                    Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
                }
            }
            offset += self.layer_len(l);
        }
        &scratch.acts[layers]
    }

    /// Accumulates `scale * d(output . dlogits)/d(theta)` into `grad`, using
    /// the activations left by the preceding [`forward`](Self::forward).
    pub(crate) fn backward(
        &self,
        theta: &[f64],
        x: &[f64],
        scratch: &mut Scratch,
        dlogits: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) {
        counters::bump_backward();
        let layers = self.num_layers();
        let offsets: Vec<usize> = (0..layers)
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += self.layer_len(l);
                Some(o)
            })
            .collect();
        scratch.delta.clear();
        scratch.delta.extend(dlogits.iter().map(|d| d * scale));
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let offset = offsets[l];
            let input: &[f64] = if l == 0 { x } else { &scratch.acts[l] };
            let delta = &scratch.delta;
            {
                let gw = &mut grad[offset..offset + n_in * n_out];
                for (i, &xi) in input.iter().enumerate() {
                    if xi != 0.0 {
                        axpy(xi, delta, &mut gw[i * n_out..(i + 1) * n_out]);
                    }
                }
            }
            if self.bias {
                let gb = &mut grad[offset + n_in * n_out..offset + (n_in + 1) * n_out];
                axpy(1.0, delta, gb);
            }
            if l > 0 {
                let w = &theta[offset..offset + n_in * n_out];
                scratch.delta_prev.clear();
                for i in 0..n_in {
                    let d = dot_unchecked(&w[i * n_out..(i + 1) * n_out], delta);
                    let a = input[i];
                    let deriv = match self.activation {
                        Activation::Tanh => 1.0 - a * a,
                        Activation::Relu => {
                            if a > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    scratch.delta_prev.push(d * deriv);
                }
                std::mem::swap(&mut scratch.delta, &mut scratch.delta_prev);
            }
        }
    }

    /// Per-example loss and (optionally) its derivative with respect to the logits.
    fn loss_from_logits(&self, logits: &[f64], label: Label, dlogits: Option<&mut Vec<f64>>) -> f64 {
        match self.loss {
            LossKind::CrossEntropy => {
                let Label::Class(y) = label else {
                    unreachable!("validated label")
                };
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
                let lse = max + sum.ln();
                if let Some(d) = dlogits {
                    d.clear();
                    d.extend(logits.iter().map(|z| (z - lse).exp()));
                    d[y] -= 1.0;
                }
                lse - logits[y]
            }
            LossKind::SquaredError => {
                let target = |k: usize| match label {
                    Label::Class(c) => f64::from(u8::from(c == k)),
                    Label::Target(t) => t,
                };
                let mut loss = 0.0;
                if let Some(d) = dlogits {
                    d.clear();
                    for (k, z) in logits.iter().enumerate() {
                        let r = z - target(k);
                        d.push(r);
                        loss += 0.5 * r * r;
                    }
                } else {
                    for (k, z) in logits.iter().enumerate() {
                        let r = z - target(k);
                        loss += 0.5 * r * r;
                    }
                }
                loss
            }
        }
    }

    pub(crate) fn loss_raw(&self, theta: &[f64], b: &Example, scratch: &mut Scratch) -> f64 {
        let logits = self.forward(theta, &b.features, scratch).to_vec();
        self.loss_from_logits(&logits, b.label, None)
    }

    /// Accumulates `scale * grad loss(theta; b)` into `grad` and returns the loss.
    pub(crate) fn loss_grad_raw(
        &self,
        theta: &[f64],
        b: &Example,
        scale: f64,
        scratch: &mut Scratch,
        grad: &mut [f64],
    ) -> f64 {
        self.forward(theta, &b.features, scratch);
        let logits = std::mem::take(&mut scratch.acts[self.num_layers()]);
        let mut dlogits = std::mem::take(&mut scratch.dlogits);
        let loss = self.loss_from_logits(&logits, b.label, Some(&mut dlogits));
        scratch.acts[self.num_layers()] = logits;
        self.backward(theta, &b.features, scratch, &dlogits, scale, grad);
        scratch.dlogits = dlogits;
        loss
    }

    fn margin_parts(logits: &[f64], y: usize) -> (f64, usize) {
        let mut runner_up = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for (k, &z) in logits.iter().enumerate() {
            if k != y && z > best {
                best = z;
                runner_up = k;
            }
        }
        (logits[y] - best, runner_up)
    }

    pub(crate) fn query_raw(&self, theta: &[f64], q: &Query, scratch: &mut Scratch) -> f64 {
        match q.functional {
            Functional::Loss => self.loss_raw(theta, &q.as_example(), scratch),
            Functional::Margin => {
                let Label::Class(y) = q.label else {
                    unreachable!("validated label")
                };
                let logits = self.forward(theta, &q.features, scratch);
                Self::margin_parts(logits, y).0
            }
        }
    }

    pub(crate) fn query_grad_raw(&self, theta: &[f64], q: &Query, scratch: &mut Scratch, grad: &mut [f64]) -> f64 {
        match q.functional {
            Functional::Loss => self.loss_grad_raw(theta, &q.as_example(), 1.0, scratch, grad),
            Functional::Margin => {
                let Label::Class(y) = q.label else {
                    unreachable!("validated label")
                };
                let logits = self.forward(theta, &q.features, scratch).to_vec();
                let (value, runner_up) = Self::margin_parts(&logits, y);
                let mut d = vec![0.0; logits.len()];
                d[y] = 1.0;
                d[runner_up] = -1.0;
                self.backward(theta, &q.features, scratch, &d, 1.0, grad);
                value
            }
        }
    }

    // ---- checked public API -----------------------------------------------

    pub fn loss_example(&self, theta: &ParameterVector, b: &Example) -> Result<f64> {
        self.check_params(theta)?;
        self.check_example(b)?;
        Ok(self.loss_raw(theta.values(), b, &mut Scratch::new(self)))
    }

    pub fn grad_example(&self, theta: &ParameterVector, b: &Example) -> Result<RealVector> {
        self.check_params(theta)?;
        self.check_example(b)?;
        let mut g = vec![0.0; self.param_count()];
        self.loss_grad_raw(theta.values(), b, 1.0, &mut Scratch::new(self), &mut g);
        Ok(g)
    }

    pub fn mean_loss(&self, theta: &ParameterVector, data: &[Example]) -> Result<f64> {
        self.check_params(theta)?;
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let mut scratch = Scratch::new(self);
        let mut total = 0.0;
        for b in data {
            self.check_example(b)?;
            total += self.loss_raw(theta.values(), b, &mut scratch);
        }
        Ok(total / data.len() as f64)
    }

    pub fn grad_mean(&self, theta: &ParameterVector, data: &[Example]) -> Result<RealVector> {
        self.check_params(theta)?;
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        for b in data {
            self.check_example(b)?;
        }
        let mut g = vec![0.0; self.param_count()];
        let inv_n = 1.0 / data.len() as f64;
        let mut scratch = Scratch::new(self);
        for b in data {
            self.loss_grad_raw(theta.values(), b, inv_n, &mut scratch, &mut g);
        }
        Ok(g)
    }

    pub fn query_value(&self, theta: &ParameterVector, q: &Query) -> Result<f64> {
        self.check_params(theta)?;
        self.check_query(q)?;
        Ok(self.query_raw(theta.values(), q, &mut Scratch::new(self)))
    }

    pub fn grad_query(&self, theta: &ParameterVector, q: &Query) -> Result<RealVector> {
        self.check_params(theta)?;
        self.check_query(q)?;
        let mut g = vec![0.0; self.param_count()];
        self.query_grad_raw(theta.values(), q, &mut Scratch::new(self), &mut g);
        Ok(g)
    }

    pub fn logits(&self, theta: &ParameterVector, features: &[f64]) -> Result<RealVector> {
        self.check_params(theta)?;
        self.check_features(features)?;
        Ok(self.forward(theta.values(), features, &mut Scratch::new(self)).to_vec())
    }
}

/// Reusable activation and delta buffers for one network.
#[derive(Debug, Clone)]
pub struct Scratch {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    dlogits: Vec<f64>,
}

impl Scratch {
    pub fn new(spec: &ModelSpec) -> Self {
        let acts = spec
            .layer_sizes
            .iter()
            .enumerate()
            .map(|(l, &n)| if l == 0 { Vec::new() } else { vec![0.0; n] })
            .collect();
        Self {
            acts,
            delta: Vec::new(),
            delta_prev: Vec::new(),
            dlogits: Vec::new(),
        }
    }
}

/// Model parameters bound to the spec they were created for.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: RealVector,
    spec_hash: u64,
    content_hash: u64,
}

impl ParameterVector {
    pub fn new(spec: &ModelSpec, values: RealVector) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::Dimension {
                context: "parameter vector",
                expected: spec.param_count(),
                actual: values.len(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("parameter vector has non-finite entries".into()));
        }
        Ok(Self::from_parts(values, spec.hash()))
    }

    pub(crate) fn from_parts(values: RealVector, spec_hash: u64) -> Self {
        let content_hash = ContentHasher::new("parameters/v1")
            .u64(spec_hash)
            .f64s(&values)
            .finish();
        Self {
            values,
            spec_hash,
            content_hash,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> RealVector {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spec_hash(&self) -> u64 {
        self.spec_hash
    }

    /// Hash of the parameter values (and the spec they belong to).
    pub fn content_hash(&self) -> u64 {
        self.content_hash
    }

    /// `self + delta` under the same spec.
    pub fn offset(&self, delta: &[f64]) -> RealVector {
        self.values.iter().zip(delta).map(|(a, b)| a + b).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Target(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub features: RealVector,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Functional {
    #[default]
    Loss,
    Margin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub features: RealVector,
    pub label: Label,
    #[serde(default)]
    pub functional: Functional,
}

impl Query {
    pub fn from_example(b: &Example, functional: Functional) -> Self {
        Self {
            id: b.id,
            features: b.features.clone(),
            label: b.label,
            functional,
        }
    }

    fn as_example(&self) -> Example {
        Example {
            id: self.id,
            features: self.features.clone(),
            label: self.label,
        }
    }
}

/// Training objective `(1/N) sum_i loss(theta; b_i) + weight_decay * |theta|^2`.
///
/// Everything that differentiates "the training loss" (training, the
/// simulator, the curvature oracle) goes through this type so the weight
/// decay term is never dropped on one side.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a [Example],
    pub weight_decay: f64,
}

impl<'a> Objective<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a [Example], weight_decay: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        for b in data {
            spec.check_example(b)?;
        }
        Ok(Self {
            spec,
            data,
            weight_decay,
        })
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    pub fn dim(&self) -> usize {
        self.spec.param_count()
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let mut scratch = Scratch::new(self.spec);
        let mean = self
            .data
            .iter()
            .map(|b| self.spec.loss_raw(theta, b, &mut scratch))
            .sum::<f64>()
            / self.n() as f64;
        mean + self.weight_decay * dot_unchecked(theta, theta)
    }

    /// Overwrites `out` with the objective gradient and returns the objective value.
    pub fn gradient_into(&self, theta: &[f64], scratch: &mut Scratch, out: &mut [f64]) -> f64 {
        out.iter_mut().for_each(|g| *g = 0.0);
        let inv_n = 1.0 / self.n() as f64;
        let mut loss = 0.0;
        for b in self.data {
            loss += self.spec.loss_grad_raw(theta, b, inv_n, scratch, out);
        }
        if self.weight_decay > 0.0 {
            axpy(2.0 * self.weight_decay, theta, out);
        }
        loss * inv_n + self.weight_decay * dot_unchecked(theta, theta)
    }

    pub fn gradient(&self, theta: &[f64]) -> RealVector {
        let mut out = vec![0.0; self.dim()];
        self.gradient_into(theta, &mut Scratch::new(self.spec), &mut out);
        out
    }
}

/// Per-thread counts of forward and backward passes through any network.
///
/// Counting is thread-local so concurrent tests and workers do not see each
/// other's traffic; [`counters::measure`] reports the passes performed by a
/// closure on the current thread.
pub mod counters {
    use super::Cell;

    thread_local! {
        static FORWARD: Cell<u64> = const { Cell::new(0) };
        static BACKWARD: Cell<u64> = const { Cell::new(0) };
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
    pub struct PassCounts {
        pub forward: u64,
        pub backward: u64,
    }

    impl std::ops::Sub for PassCounts {
        type Output = PassCounts;
        fn sub(self, rhs: Self) -> Self {
            PassCounts {
                forward: self.forward - rhs.forward,
                backward: self.backward - rhs.backward,
            }
        }
    }

    impl std::ops::AddAssign for PassCounts {
        fn add_assign(&mut self, rhs: Self) {
            self.forward += rhs.forward;
            self.backward += rhs.backward;
        }
    }

    pub(super) fn bump_forward() {
        FORWARD.with(|c| c.set(c.get() + 1));
    }

    pub(super) fn bump_backward() {
        BACKWARD.with(|c| c.set(c.get() + 1));
    }

    pub fn snapshot() -> PassCounts {
        PassCounts {
            forward: FORWARD.with(Cell::get),
            backward: BACKWARD.with(Cell::get),
        }
    }

    pub fn measure<T>(f: impl FnOnce() -> T) -> (T, PassCounts) {
        let before = snapshot();
        let out = f();
        (out, snapshot() - before)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn tanh_spec() -> ModelSpec {
        ModelSpec::new(vec![3, 4, 3], Activation::Tanh, LossKind::CrossEntropy).unwrap()
    }

    fn scalar_linear() -> ModelSpec {
        ModelSpec::new(vec![1, 1], Activation::Tanh, LossKind::SquaredError)
            .unwrap()
            .without_bias()
    }

    fn ex(id: u64, features: Vec<f64>, label: Label) -> Example {
        Example { id, features, label }
    }

    fn random_params(spec: &ModelSpec, seed: u64, scale: f64) -> ParameterVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..spec.param_count()).map(|_| rng.random_range(-scale..scale)).collect();
        ParameterVector::new(spec, v).unwrap()
    }

    /// Central differences of an arbitrary scalar function of the parameters.
    fn finite_difference(theta: &ParameterVector, spec: &ModelSpec, f: impl Fn(&ParameterVector) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..theta.len())
            .map(|i| {
                let mut plus = theta.values().to_vec();
                let mut minus = theta.values().to_vec();
                plus[i] += h;
                minus[i] -= h;
                let fp = f(&ParameterVector::new(spec, plus).unwrap());
                let fm = f(&ParameterVector::new(spec, minus).unwrap());
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64]) {
        let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
        for (a, n) in analytic.iter().zip(numeric) {
            assert!(
                (a - n).abs() <= 1e-4 * scale.max(n.abs()),
                "analytic {a} vs numeric {n} (scale {scale})"
            );
        }
    }

    #[test]
    fn param_count_and_validation() {
        assert_eq!(tanh_spec().param_count(), 4 * 4 + 5 * 3);
        assert_eq!(scalar_linear().param_count(), 1);
        assert!(ModelSpec::new(vec![3], Activation::Tanh, LossKind::CrossEntropy).is_err());
        assert!(ModelSpec::new(vec![3, 0, 2], Activation::Tanh, LossKind::CrossEntropy).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = tanh_spec();
        let a = spec.param_init(7);
        assert_eq!(a, spec.param_init(7));
        assert_ne!(a, spec.param_init(8));
        for i in spec.bias_indices() {
            assert_eq!(a.values()[i], 0.0);
        }
        let bound = (6.0f64 / 7.0).sqrt();
        assert!(a.values()[..12].iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn loss_examples() {
        let spec = scalar_linear();
        let theta = ParameterVector::new(&spec, vec![1.0]).unwrap();
        let b = ex(0, vec![2.0], Label::Target(2.0));
        assert_eq!(spec.loss_example(&theta, &b).unwrap(), 0.0);

        // zero weights => uniform logits over C classes
        let ce = ModelSpec::new(vec![2, 5], Activation::Tanh, LossKind::CrossEntropy).unwrap();
        let zero = ParameterVector::new(&ce, vec![0.0; ce.param_count()]).unwrap();
        let l = ce.loss_example(&zero, &ex(0, vec![0.3, -1.0], Label::Class(2))).unwrap();
        assert_relative_eq!(l, 5f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn loss_matches_independent_reimplementation() {
        // Straightforward re-evaluation with row-wise matrices, no shared kernels.
        let spec = tanh_spec();
        let theta = random_params(&spec, 11, 0.8);
        let b = ex(0, vec![0.5, -0.25, 1.5], Label::Class(1));
        let v = theta.values();
        let w1 = |i: usize, o: usize| v[i * 4 + o];
        let b1 = |o: usize| v[12 + o];
        let w2 = |i: usize, o: usize| v[16 + i * 3 + o];
        let b2 = |o: usize| v[28 + o];
        let hidden: Vec<f64> = (0..4)
            .map(|o| (b1(o) + (0..3).map(|i| w1(i, o) * b.features[i]).sum::<f64>()).tanh())
            .collect();
        let logits: Vec<f64> = (0..3)
            .map(|o| b2(o) + (0..4).map(|i| w2(i, o) * hidden[i]).sum::<f64>())
            .collect();
        let want = -(logits[1].exp() / logits.iter().map(|z| z.exp()).sum::<f64>()).ln();
        assert_relative_eq!(spec.loss_example(&theta, &b).unwrap(), want, max_relative = 1e-12);
    }

    #[test]
    fn gradient_of_linear_squared_error_is_closed_form() {
        let spec = ModelSpec::new(vec![3, 1], Activation::Tanh, LossKind::SquaredError)
            .unwrap()
            .without_bias();
        let theta = ParameterVector::new(&spec, vec![0.5, -1.0, 2.0]).unwrap();
        let x = vec![1.0, 2.0, -0.5];
        let b = ex(0, x.clone(), Label::Target(0.25));
        let r = 0.5 - 2.0 - 1.0 - 0.25;
        let want: Vec<f64> = x.iter().map(|xi| r * xi).collect();
        let got = spec.grad_example(&theta, &b).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert_relative_eq!(g, w, epsilon = 1e-15);
        }
    }

    #[test]
    fn gradient_vanishes_at_scalar_minimum() {
        let spec = scalar_linear();
        let theta = ParameterVector::new(&spec, vec![1.5]).unwrap();
        let g = spec.grad_example(&theta, &ex(0, vec![2.0], Label::Target(3.0))).unwrap();
        assert!(g[0].abs() <= 1e-10);
    }

    #[test]
    fn mean_examples() {
        let spec = scalar_linear();
        let theta = ParameterVector::new(&spec, vec![1.0]).unwrap();
        let data = vec![ex(0, vec![1.0], Label::Target(0.0)), ex(1, vec![1.0], Label::Target(2.0))];
        assert_eq!(spec.grad_mean(&theta, &data).unwrap(), vec![0.0]);

        let one = &data[..1];
        assert_eq!(spec.mean_loss(&theta, one).unwrap(), spec.loss_example(&theta, &one[0]).unwrap());
        assert_eq!(spec.grad_mean(&theta, one).unwrap(), spec.grad_example(&theta, &one[0]).unwrap());

        let doubled: Vec<Example> = data.iter().chain(data.iter()).cloned().collect();
        let theta2 = ParameterVector::new(&spec, vec![0.3]).unwrap();
        assert_relative_eq!(
            spec.mean_loss(&theta2, &doubled).unwrap(),
            spec.mean_loss(&theta2, &data).unwrap(),
            epsilon = 1e-15
        );
        assert!(matches!(spec.mean_loss(&theta, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn margin_values() {
        let spec = ModelSpec::new(vec![1, 2], Activation::Tanh, LossKind::CrossEntropy)
            .unwrap()
            .without_bias();
        // logits = (3x, 1x) at x = 1
        let theta = ParameterVector::new(&spec, vec![3.0, 1.0]).unwrap();
        let q = |label| Query {
            id: 0,
            features: vec![1.0],
            label: Label::Class(label),
            functional: Functional::Margin,
        };
        assert_eq!(spec.query_value(&theta, &q(0)).unwrap(), 2.0);
        assert_eq!(spec.query_value(&theta, &q(1)).unwrap(), -2.0);
    }

    #[test]
    fn loss_query_on_perfect_fit_is_zero() {
        let spec = scalar_linear();
        let theta = ParameterVector::new(&spec, vec![3.0]).unwrap();
        let q = Query {
            id: 0,
            features: vec![1.0],
            label: Label::Target(3.0),
            functional: Functional::Loss,
        };
        assert_eq!(spec.query_value(&theta, &q).unwrap(), 0.0);
    }

    #[test]
    fn query_gradients_match_finite_differences() {
        let spec = tanh_spec();
        let theta = random_params(&spec, 5, 0.7);
        for functional in [Functional::Loss, Functional::Margin] {
            let q = Query {
                id: 3,
                features: vec![0.2, -0.4, 0.9],
                label: Label::Class(2),
                functional,
            };
            let analytic = spec.grad_query(&theta, &q).unwrap();
            let numeric = finite_difference(&theta, &spec, |t| spec.query_value(t, &q).unwrap());
            assert_grad_close(&analytic, &numeric);
        }
    }

    #[test]
    fn margin_gradient_is_locally_constant() {
        let spec = tanh_spec().without_bias();
        let theta = random_params(&spec, 21, 0.9);
        let q = Query {
            id: 0,
            features: vec![0.3, 0.1, -0.7],
            label: Label::Class(0),
            functional: Functional::Margin,
        };
        let g0 = spec.grad_query(&theta, &q).unwrap();
        // Perturb only the output-layer weights: logits stay linear in them,
        // and the runner-up class does not change for a tiny move.
        let mut v = theta.values().to_vec();
        for x in &mut v[12..] {
            *x += 1e-7;
        }
        let moved = ParameterVector::new(&spec, v).unwrap();
        let g1 = spec.grad_query(&moved, &q).unwrap();
        for (a, b) in g0[12..].iter().zip(&g1[12..]) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_features_give_zero_input_weight_gradient() {
        let spec = tanh_spec().without_bias();
        let theta = random_params(&spec, 2, 0.5);
        let q = Query {
            id: 0,
            features: vec![0.0; 3],
            label: Label::Class(1),
            functional: Functional::Loss,
        };
        let g = spec.grad_query(&theta, &q).unwrap();
        assert!(g[spec.input_weight_indices()].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_errors() {
        let spec = tanh_spec();
        let theta = spec.param_init(0);
        let bad = ex(0, vec![1.0, 2.0], Label::Class(0));
        assert!(matches!(spec.loss_example(&theta, &bad), Err(Error::Dimension { .. })));
        assert!(spec.grad_example(&theta, &ex(0, vec![0.0; 3], Label::Class(9))).is_err());
        let other = ModelSpec::new(vec![3, 5, 3], Activation::Tanh, LossKind::CrossEntropy).unwrap();
        assert!(matches!(
            spec.loss_example(&other.param_init(0), &ex(0, vec![0.0; 3], Label::Class(0))),
            Err(Error::Stale { .. })
        ));
    }

    #[test]
    fn counters_track_passes() {
        let spec = tanh_spec();
        let theta = spec.param_init(1);
        let b = ex(0, vec![0.1, 0.2, 0.3], Label::Class(0));
        let (_, c) = counters::measure(|| spec.grad_example(&theta, &b).unwrap());
        assert_eq!(c, counters::PassCounts { forward: 1, backward: 1 });
        let (_, c) = counters::measure(|| spec.loss_example(&theta, &b).unwrap());
        assert_eq!(c, counters::PassCounts { forward: 1, backward: 0 });
    }

    #[test]
    fn objective_includes_weight_decay() {
        let spec = scalar_linear();
        let data = vec![ex(0, vec![1.0], Label::Target(0.0))];
        let obj = Objective::new(&spec, &data, 0.5).unwrap();
        // loss 0.5 θ², decay 0.5 θ² => gradient 2θ
        assert_relative_eq!(obj.gradient(&[3.0])[0], 6.0);
        assert_relative_eq!(obj.value(&[3.0]), 9.0);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<usize>, bool, u64)> {
        (prop::collection::vec(1usize..5, 2..5), any::<bool>(), any::<u64>())
    }

    #[test]
    fn relu_gradient_matches_finite_differences_away_from_kinks() {
        let spec = ModelSpec::new(vec![2, 3, 2], Activation::Relu, LossKind::CrossEntropy).unwrap();
        let theta = random_params(&spec, 4, 1.0);
        let b = ex(0, vec![0.6, -0.8], Label::Class(1));
        let pre: Vec<f64> = (0..3)
            .map(|o| theta.values()[6 + o] + 0.6 * theta.values()[o] - 0.8 * theta.values()[3 + o])
            .collect();
        assert!(pre.iter().all(|z| z.abs() > 1e-3), "fixture sits on a kink: {pre:?}");
        let analytic = spec.grad_example(&theta, &b).unwrap();
        let numeric = finite_difference(&theta, &spec, |t| spec.loss_example(t, &b).unwrap());
        assert_grad_close(&analytic, &numeric);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn analytic_gradient_matches_central_differences((sizes, ce, seed) in arb_case()) {
            let mut sizes = sizes;
            if ce && *sizes.last().unwrap() < 2 {
                *sizes.last_mut().unwrap() = 2;
            }
            let activation = Activation::Tanh;
            let loss = if ce { LossKind::CrossEntropy } else { LossKind::SquaredError };
            let spec = ModelSpec::new(sizes.clone(), activation, loss).unwrap();
            let theta = random_params(&spec, seed, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
            let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let label = Label::Class(rng.random_range(0..spec.output_dim()));
            let b = ex(0, x, label);
            let analytic = spec.grad_example(&theta, &b).unwrap();
            let numeric = finite_difference(&theta, &spec, |t| spec.loss_example(t, &b).unwrap());
            let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
            for (a, n) in analytic.iter().zip(&numeric) {
                prop_assert!((a - n).abs() <= 1e-4 * scale.max(n.abs()), "{} vs {}", a, n);
            }
        }

        #[test]
        fn grad_mean_is_size_weighted_union(seed in any::<u64>(), n1 in 1usize..6, n2 in 1usize..6) {
            let spec = tanh_spec();
            let theta = random_params(&spec, seed, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mk = |id| ex(id, (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(), Label::Class(rng.random_range(0..3)));
            let d1: Vec<Example> = (0..n1 as u64).map(&mut mk).collect();
            let d2: Vec<Example> = (0..n2 as u64).map(&mut mk).collect();
            let union: Vec<Example> = d1.iter().chain(&d2).cloned().collect();
            let g = spec.grad_mean(&theta, &union).unwrap();
            let g1 = spec.grad_mean(&theta, &d1).unwrap();
            let g2 = spec.grad_mean(&theta, &d2).unwrap();
            for i in 0..g.len() {
                let want = (n1 as f64 * g1[i] + n2 as f64 * g2[i]) / (n1 + n2) as f64;
                prop_assert!((g[i] - want).abs() <= 1e-12);
            }
        }

        #[test]
        fn evaluation_is_bit_deterministic(seed in any::<u64>()) {
            let spec = tanh_spec();
            let theta = random_params(&spec, seed, 1.0);
            let b = ex(0, vec![0.1, -0.2, 0.3], Label::Class(1));
            let a = spec.grad_example(&theta, &b).unwrap();
            let c = spec.grad_example(&theta, &b).unwrap();
            prop_assert!(a.iter().zip(&c).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
