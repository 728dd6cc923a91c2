//! Multilayer-perceptron classifier over a flat parameter vector.
//!
//! Layout contract (stable, masks and blobs depend on it): layers in order,
//! each layer stores its `fan_out x fan_in` weight matrix row-major (one row
//! per output unit) followed by its `fan_out` biases. Hidden layers use ReLU
//! with derivative 0 at 0; the output layer is linear and trained with mean
//! softmax cross-entropy.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{check_len, Error, Result};
use crate::mask::MaskVector;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

/// Position of one dense layer inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerLayout {
    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn biases(&self) -> Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    /// Weights and biases together.
    pub fn range(&self) -> Range<usize> {
        self.offset..self.biases().end
    }
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim", "must be positive"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::invalid("hidden_dims", "every hidden width must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "need at least 2 classes"));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let layer = LayerLayout {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset = layer.range().end;
                layer
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().last().map_or(0, |l| l.range().end)
    }

    /// Weight and bias range of the output layer.
    pub fn output_layer_range(&self) -> Range<usize> {
        self.layers().last().map_or(0..0, |l| l.range())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    spec: ModelSpec,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        check_len("parameter vector", spec.param_count(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter construction"));
        }
        Ok(Self { spec, values })
    }

    pub fn zeros(spec: ModelSpec) -> Self {
        let n = spec.param_count();
        Self {
            spec,
            values: vec![0.0; n],
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Values at positions where `mask` is set (the personal partition).
    pub fn masked_values(&self, mask: &MaskVector) -> Result<Vec<f64>> {
        check_len("mask", self.len(), mask.len())?;
        Ok(mask.ones_indices().map(|i| self.values[i]).collect())
    }

    /// Values at positions where `mask` is clear (the shared partition).
    pub fn unmasked_values(&self, mask: &MaskVector) -> Result<Vec<f64>> {
        check_len("mask", self.len(), mask.len())?;
        Ok(mask
            .as_bits()
            .iter()
            .zip(&self.values)
            .filter_map(|(&b, &v)| (!b).then_some(v))
            .collect())
    }

    /// Overwrites the positions selected by `select` with the same positions of `source`.
    pub fn copy_from_where(&mut self, source: &ParamVector, select: &MaskVector) -> Result<()> {
        check_len("source parameters", self.len(), source.len())?;
        check_len("selection mask", self.len(), select.len())?;
        for i in select.ones_indices() {
            self.values[i] = source.values[i];
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
}

impl Batch {
    /// `inputs` is row-major, one row of `input_dim` features per label.
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("batch"));
        }
        check_len("batch inputs", labels.len() * input_dim, inputs.len())?;
        Ok(Self {
            inputs,
            labels,
            input_dim,
        })
    }

    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a LabeledExample>) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut input_dim = None;
        for ex in examples {
            let dim = *input_dim.get_or_insert(ex.features.len());
            check_len("example features", dim, ex.features.len())?;
            inputs.extend_from_slice(&ex.features);
            labels.push(ex.label);
        }
        Self::new(inputs, labels, input_dim.unwrap_or(0))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        check_len("batch input_dim", spec.input_dim, self.input_dim)?;
        if let Some(&label) = self.labels.iter().find(|&&l| l >= spec.num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: spec.num_classes,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
}

impl Gradient {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|g| g * g).sum())
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive(seed, &[seed::tag::INIT]));
    let mut values = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let bound = 1.0 / libm::sqrt(layer.fan_in as f64);
        for w in &mut values[layer.weights()] {
            *w = rng.random_range(-bound..=bound);
        }
    }
    ParamVector::new(spec.clone(), values)
}

/// Forward activations for one example: pre-activations per layer and the
/// post-activation inputs to each layer (`inputs[0]` is the example itself).
struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn forward(layers: &[LayerLayout], values: &[f64], x: &[f64]) -> Trace {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut a = x.to_vec();
    for (li, layer) in layers.iter().enumerate() {
        let w = &values[layer.weights()];
        let b = &values[layer.biases()];
        let z: Vec<f64> = (0..layer.fan_out)
            .map(|o| {
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                row.iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>() + b[o]
            })
            .collect();
        let next = if li + 1 < layers.len() {
            z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
        } else {
            z.clone()
        };
        inputs.push(core::mem::replace(&mut a, next));
        pre.push(z);
    }
    Trace { inputs, pre }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(z.iter().map(|&v| libm::exp(v - max)).sum())
}

/// Output-layer logits for a single feature row.
pub fn logits(params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    check_len("features", params.spec.input_dim, x.len())?;
    let layers = params.spec.layers();
    let mut trace = forward(&layers, &params.values, x);
    Ok(trace.pre.pop().unwrap_or_default())
}

/// Index of the largest logit, lowest index on ties.
pub fn predict(params: &ParamVector, x: &[f64]) -> Result<usize> {
    let z = logits(params, x)?;
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Mean softmax cross-entropy over the batch.
pub fn loss(params: &ParamVector, batch: &Batch) -> Result<f64> {
    batch.check_against(&params.spec)?;
    let layers = params.spec.layers();
    let total: f64 = (0..batch.len())
        .map(|i| {
            let trace = forward(&layers, &params.values, batch.row(i));
            let z = trace.pre.last().expect("at least one layer");
            log_sum_exp(z) - z[batch.labels[i]]
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Exact gradient of [`loss`] by backpropagation.
pub fn grad(params: &ParamVector, batch: &Batch) -> Result<Gradient> {
    loss_and_grad(params, batch).map(|(_, g)| g)
}

pub fn loss_and_grad(params: &ParamVector, batch: &Batch) -> Result<(f64, Gradient)> {
    batch.check_against(&params.spec)?;
    let layers = params.spec.layers();
    let values = &params.values;
    let scale = 1.0 / batch.len() as f64;
    let mut g = vec![0.0; values.len()];
    let mut total = 0.0;

    for i in 0..batch.len() {
        let trace = forward(&layers, values, batch.row(i));
        let z = trace.pre.last().expect("at least one layer");
        let lse = log_sum_exp(z);
        let label = batch.labels[i];
        total += lse - z[label];

        let mut delta: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(c, &v)| {
                let p = libm::exp(v - lse);
                (if c == label { p - 1.0 } else { p }) * scale
            })
            .collect();

        for (li, layer) in layers.iter().enumerate().rev() {
            let a = &trace.inputs[li];
            let wr = layer.weights();
            let br = layer.biases();
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut g[wr.start + o * layer.fan_in..wr.start + (o + 1) * layer.fan_in];
                for (gw, &ai) in row.iter_mut().zip(a) {
                    *gw += d * ai;
                }
                g[br.start + o] += d;
            }
            if li == 0 {
                break;
            }
            let w = &values[wr];
            let prev_pre = &trace.pre[li - 1];
            let mut next = vec![0.0; layer.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (n, &wi) in next.iter_mut().zip(row) {
                    *n += d * wi;
                }
            }
            for (n, &zp) in next.iter_mut().zip(prev_pre) {
                if zp <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
    }

    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok((total * scale, Gradient::new(g)))
}

/// One masked SGD step: `theta - lr * g` where `mask` is set, untouched elsewhere.
pub fn sgd_step_masked(params: &ParamVector, gradient: &Gradient, mask: &MaskVector, lr: f64) -> Result<ParamVector> {
    let mut out = params.clone();
    apply_masked_step(&mut out, gradient, mask, lr)?;
    Ok(out)
}

pub(crate) fn apply_masked_step(
    params: &mut ParamVector,
    gradient: &Gradient,
    mask: &MaskVector,
    lr: f64,
) -> Result<()> {
    check_len("gradient", params.len(), gradient.values.len())?;
    check_len("mask", params.len(), mask.len())?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid("lr", "learning rate must be positive and finite"));
    }
    for i in mask.ones_indices() {
        let v = params.values[i] - lr * gradient.values[i];
        if !v.is_finite() {
            return Err(Error::NonFinite("sgd step"));
        }
        params.values[i] = v;
    }
    Ok(())
}

/// Fraction of `examples` whose predicted class equals the label.
pub fn accuracy(params: &ParamVector, examples: &[LabeledExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let mut correct = 0usize;
    for ex in examples {
        if predict(params, &ex.features)? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Mean loss over a whole dataset.
pub fn dataset_loss(params: &ParamVector, examples: &[LabeledExample]) -> Result<f64> {
    loss(params, &Batch::from_examples(examples)?)
}
