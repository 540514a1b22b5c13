//! Small differentiable models: least-squares linear regression and an MLP
//! classifier with softmax cross-entropy. Losses are batch means.

mod data;
mod tape;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{gen_synthetic, hidden_linear_map, Batch, BatchSampler, Dataset, SyntheticKind, SyntheticSpec};

use crate::error::{config, dim, Error, Result};
use crate::tensor::Tensor;
use tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearRegression,
    MlpClassifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Tanh,
}

/// Architecture description. For linear regression `layer_sizes` is
/// `[n_features, n_outputs]`; for the MLP it runs input, hidden..., classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn linear(n_features: usize, n_outputs: usize) -> Self {
        Self {
            kind: ModelKind::LinearRegression,
            layer_sizes: vec![n_features, n_outputs],
            activation: Activation::Tanh,
        }
    }

    pub fn mlp(layer_sizes: Vec<usize>, activation: Activation) -> Self {
        Self { kind: ModelKind::MlpClassifier, layer_sizes, activation }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(config("layer_sizes needs at least an input and an output size"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(config(format!("layer sizes must be positive: {:?}", self.layer_sizes)));
        }
        if self.kind == ModelKind::LinearRegression && self.layer_sizes.len() != 2 {
            return Err(config("linear regression takes exactly [n_features, n_outputs]"));
        }
        if self.kind == ModelKind::MlpClassifier && *self.layer_sizes.last().unwrap() < 2 {
            return Err(config("a classifier needs at least 2 output classes"));
        }
        Ok(())
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        match self.kind {
            ModelKind::LinearRegression => "linear.weight".to_string(),
            ModelKind::MlpClassifier => format!("fc{layer}.weight"),
        }
    }

    pub fn bias_name(&self, layer: usize) -> Option<String> {
        match self.kind {
            ModelKind::LinearRegression => None,
            ModelKind::MlpClassifier => Some(format!("fc{layer}.bias")),
        }
    }

    /// Expected parameter names and shapes. Weights are `[out, in]`, so
    /// N:M groups run along the input dimension.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            out.push((self.weight_name(l), vec![fan_out, fan_in]));
            if let Some(b) = self.bias_name(l) {
                out.push((b, vec![fan_out]));
            }
        }
        out
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let mut params = ParamSet::new();
        for (name, shape) in self.param_shapes() {
            let tensor = if shape.len() == 2 {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let data = (0..shape[0] * shape[1]).map(|_| rng.gen_range(-limit..limit)).collect();
                Tensor::new(shape, data)?
            } else {
                Tensor::zeros(&shape)?
            };
            params.insert(name, tensor);
        }
        Ok(params)
    }

    fn check_params(&self, params: &ParamSet) -> Result<()> {
        for (name, shape) in self.param_shapes() {
            let t = params.get(&name).ok_or_else(|| dim(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(dim(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        if params.len() != self.param_shapes().len() {
            return Err(dim("parameter set has unexpected entries"));
        }
        Ok(())
    }
}

/// Named parameter tensors in a stable (sorted) order. Flattened views
/// concatenate tensors in that order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet(BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.0.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    /// Total coordinate count `d`.
    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self(self.0.iter().map(|(k, t)| (k.clone(), t.zeros_like())).collect())
    }

    /// All coordinates concatenated in name order.
    pub fn flat_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.values().flat_map(|t| t.data().iter().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }

    /// Checks that both sets hold the same names with the same shapes.
    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(dim("parameter sets have different sizes"));
        }
        for ((ka, ta), (kb, tb)) in self.0.iter().zip(&other.0) {
            if ka != kb {
                return Err(dim(format!("parameter {ka} vs {kb}")));
            }
            ta.check_same_shape(tb, ka)?;
        }
        Ok(())
    }
}

fn labels_of(batch: &Batch, n_classes: usize) -> Result<Vec<usize>> {
    if batch.targets.shape()[1] != 1 {
        return Err(dim("classification targets must be a single label column"));
    }
    batch
        .targets
        .data()
        .iter()
        .map(|&y| {
            if y >= 0.0 && y.fract() == 0.0 && (y as usize) < n_classes {
                Ok(y as usize)
            } else {
                Err(dim(format!("label {y} is not a class index below {n_classes}")))
            }
        })
        .collect()
}

/// Builds the loss graph; returns the tape, loss node and the leaf of every
/// parameter.
/// Tape, loss node, and the leaf of every parameter.
type Graph = (Tape, Var, Vec<(String, Var)>);

fn build(spec: &ModelSpec, params: &ParamSet, batch: &Batch) -> Result<Graph> {
    spec.validate()?;
    spec.check_params(params)?;
    let n_in = spec.layer_sizes[0];
    if batch.inputs.shape().len() != 2 || batch.inputs.shape()[1] != n_in {
        return Err(dim(format!("batch inputs {:?} do not match input size {n_in}", batch.inputs.shape())));
    }
    if batch.targets.shape()[0] != batch.rows() {
        return Err(dim("batch inputs and targets disagree on row count"));
    }
    let mut tape = Tape::new();
    let mut leaves = Vec::new();
    let mut h = tape.leaf(&batch.inputs);
    for l in 0..spec.n_layers() {
        let wname = spec.weight_name(l);
        let w = tape.leaf(params.get(&wname).expect("checked above"));
        leaves.push((wname, w));
        h = tape.matmul_t(h, w)?;
        if let Some(bname) = spec.bias_name(l) {
            let b = tape.leaf(params.get(&bname).expect("checked above"));
            leaves.push((bname, b));
            h = tape.add_bias(h, b)?;
        }
        if spec.kind == ModelKind::MlpClassifier && l + 1 < spec.n_layers() {
            h = match spec.activation {
                Activation::Relu => tape.relu(h),
                Activation::Tanh => tape.tanh(h),
            };
        }
    }
    let loss = match spec.kind {
        ModelKind::LinearRegression => {
            let n_out = spec.layer_sizes[1];
            if batch.targets.shape()[1] != n_out {
                return Err(dim(format!("expected {n_out} target columns")));
            }
            tape.squared_error(h, batch.targets.data())?
        }
        ModelKind::MlpClassifier => {
            let labels = labels_of(batch, *spec.layer_sizes.last().unwrap())?;
            tape.softmax_cross_entropy(h, &labels)?
        }
    };
    Ok((tape, loss, leaves))
}

/// Mean loss over the batch.
pub fn forward_loss(spec: &ModelSpec, params: &ParamSet, batch: &Batch) -> Result<f64> {
    let (tape, loss, _) = build(spec, params, batch)?;
    Ok(tape.value(loss)[0])
}

/// Loss and its gradient with respect to every parameter.
pub fn loss_and_grad(spec: &ModelSpec, params: &ParamSet, batch: &Batch) -> Result<(f64, ParamSet)> {
    let (tape, loss, leaves) = build(spec, params, batch)?;
    let adj = tape.backward(loss);
    let mut grads = ParamSet::new();
    for (name, var) in leaves {
        let shape = params.get(&name).expect("leaf came from params").shape().to_vec();
        let data = adj[var.index()].clone().unwrap_or_else(|| vec![0.0; shape.iter().product()]);
        grads.insert(name, Tensor::new(shape, data)?);
    }
    Ok((tape.value(loss)[0], grads))
}

pub fn grad(spec: &ModelSpec, params: &ParamSet, batch: &Batch) -> Result<ParamSet> {
    loss_and_grad(spec, params, batch).map(|(_, g)| g)
}

/// One coordinate whose analytic and numeric derivatives disagree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub pass: bool,
    pub offending: Vec<FdMismatch>,
}

/// Denominator floor for the relative error, so coordinates whose true
/// derivative is ~0 are judged on an absolute scale instead.
pub const FD_REL_FLOOR: f64 = 1e-4;

/// Compares [`grad`] with central differences `(f(w+h eᵢ) - f(w-h eᵢ)) / 2h`
/// on every coordinate. Relative error is `|a - n| / max(|a|, |n|, FD_REL_FLOOR)`.
pub fn finite_difference_check(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Batch,
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = grad(spec, params, batch)?;
    let mut probe = params.clone();
    let mut report = FdReport { checked: 0, max_rel_error: 0.0, pass: true, offending: Vec::new() };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        for i in 0..len {
            let w0 = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = w0 + h;
            let up = forward_loss(spec, &probe, batch)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = w0 - h;
            let down = forward_loss(spec, &probe, batch)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = w0;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(&name).unwrap().data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_REL_FLOOR);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > tol {
                report.offending.push(FdMismatch {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report.pass = report.offending.is_empty();
    Ok(report)
}
