//! Feed-forward classifier with rectifier hidden layers and a softmax/cross-entropy head.
//!
//! Parameters live in one flat [`ParamVector`]. Layer `l` occupies a contiguous block:
//! an `in × out` row-major weight matrix followed by `out` biases. Every gradient routine
//! writes into the same layout, so clients and the server can treat the model as a plain
//! vector.

use std::ops::{Deref, DerefMut};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    layer_dims: Vec<usize>,
}

/// Location of one dense layer inside a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerSlot {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    pub fn len(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelSpec {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output dims, got {layer_dims:?}"
            )));
        }
        if let Some(pos) = layer_dims.iter().position(|&d| d < 1) {
            return Err(Error::InvalidSpec(format!(
                "layer {pos} has dimension 0 in {layer_dims:?}"
            )));
        }
        Ok(ModelSpec { layer_dims })
    }

    /// 784-32-10 rectifier MLP.
    pub fn mnist_default() -> Self {
        ModelSpec {
            layer_dims: vec![784, 32, 10],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn layers(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_dims
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += slot.len();
                slot
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerSlot::len).sum()
    }

    /// Symmetric-uniform fan-based initialization with zero biases.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = seed::rng(seed, &[]);
        let mut values = vec![0.0; self.param_count()];
        for slot in self.layers() {
            let bound = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
            for v in &mut values[slot.weight_range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        ParamVector(values)
    }

    fn check(&self, params: &ParamVector, batch: &Batch) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "parameter vector has {} entries, model {:?} needs {}",
                params.len(),
                self.layer_dims,
                self.param_count()
            )));
        }
        if batch.dim() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "batch has {} features, model expects {}",
                batch.dim(),
                self.input_dim()
            )));
        }
        let classes = self.classes();
        if let Some(bad) = batch.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Dimension(format!("label {bad} outside [0, {classes})")));
        }
        Ok(())
    }

    /// Forward pass keeping each layer's input for backprop. Returns the output logits.
    fn propagate<'a>(&self, params: &'a [f64], x: ArrayView2<'a, f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let slots = self.layers();
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(slots.len() - 1);
        let mut logits = Array2::zeros((0, 0));
        for (l, slot) in slots.iter().enumerate() {
            let w = weight_view(params, slot);
            let b = &params[slot.bias_range()];
            let input = if l == 0 { x } else { hidden[l - 1].view() };
            let mut z = input.dot(&w);
            for mut row in z.rows_mut() {
                for (v, bias) in row.iter_mut().zip(b) {
                    *v += bias;
                }
            }
            if l + 1 < slots.len() {
                z.mapv_inplace(|v| v.max(0.0));
                hidden.push(z);
            } else {
                logits = z;
            }
        }
        (hidden, logits)
    }

    /// Class probabilities, one row per sample.
    pub fn forward(&self, params: &ParamVector, batch: &Batch) -> Result<Array2<f64>> {
        self.check(params, batch)?;
        let (_, mut logits) = self.propagate(params, batch.features.view());
        for mut row in logits.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        Ok(logits)
    }

    /// Mean cross-entropy over the batch and its exact gradient.
    pub fn loss_and_grad(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
        self.check(params, batch)?;
        params.ensure_finite("model parameters")?;
        let slots = self.layers();
        let n = batch.len();
        let (hidden, logits) = self.propagate(params, batch.features.view());

        // Log-sum-exp keeps the loss finite even when a probability underflows.
        let mut dz = logits;
        let mut loss = 0.0;
        for (mut row, &y) in dz.rows_mut().into_iter().zip(&batch.labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_norm = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += log_norm - row[y];
            row.mapv_inplace(|v| (v - log_norm).exp() / n as f64);
            row[y] -= 1.0 / n as f64;
        }
        loss /= n as f64;

        let mut grad = vec![0.0; params.len()];
        for l in (0..slots.len()).rev() {
            let slot = &slots[l];
            let input = if l == 0 {
                batch.features.view()
            } else {
                hidden[l - 1].view()
            };
            {
                let (w_part, b_part) =
                    grad[slot.offset..slot.offset + slot.len()].split_at_mut(slot.fan_in * slot.fan_out);
                let mut gw = ArrayViewMut2::from_shape((slot.fan_in, slot.fan_out), w_part).expect("slot shape");
                general_mat_mul(1.0, &input.t(), &dz, 0.0, &mut gw);
                for (g, s) in b_part.iter_mut().zip(dz.sum_axis(Axis(0))) {
                    *g = s;
                }
            }
            if l > 0 {
                let w = weight_view(params, slot);
                let mut dh = dz.dot(&w.t());
                dh.zip_mut_with(&hidden[l - 1], |d, &h| {
                    if h <= 0.0 {
                        *d = 0.0;
                    }
                });
                dz = dh;
            }
        }
        Ok((loss, ParamVector(grad)))
    }

    pub fn loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        Ok(self.evaluate(params, batch)?.0)
    }

    /// Mean cross-entropy and argmax accuracy; ties go to the lowest class index.
    pub fn evaluate(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, f64)> {
        self.check(params, batch)?;
        let (_, logits) = self.propagate(params, batch.features.view());
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (row, &y) in logits.rows().into_iter().zip(&batch.labels) {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == y {
                correct += 1;
            }
            let max = row[best];
            let log_norm = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += log_norm - row[y];
        }
        let n = batch.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }

    /// Sign pattern of every hidden pre-activation. Finite-difference checks compare
    /// patterns across a stencil to detect rectifier kinks inside it.
    pub fn activation_pattern(&self, params: &ParamVector, batch: &Batch) -> Result<Vec<bool>> {
        self.check(params, batch)?;
        let (hidden, _) = self.propagate(params, batch.features.view());
        Ok(hidden
            .iter()
            .flat_map(|h| h.iter().map(|&v| v > 0.0).collect::<Vec<_>>())
            .collect())
    }
}

fn weight_view<'a>(params: &'a [f64], slot: &LayerSlot) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((slot.fan_in, slot.fan_out), &params[slot.weight_range()]).expect("slot shape")
}

/// Flat vector of model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.0.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{what}[{i}] = {}", self.0[i]))),
            None => Ok(()),
        }
    }

    /// `self - other`, elementwise.
    pub fn difference(&self, other: &ParamVector) -> Result<ParamVector> {
        same_len(self, other)?;
        Ok(ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        same_len(self, other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `params - lr * (grad + decay * params)`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64, decay: f64) -> Result<ParamVector> {
    same_len(params, grad)?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be >= 0")));
    }
    if !(decay >= 0.0 && decay.is_finite()) {
        return Err(Error::InvalidArgument(format!("decay {decay} must be >= 0")));
    }
    Ok(ParamVector(
        params
            .iter()
            .zip(grad.iter())
            .map(|(&p, &g)| p - lr * (g + decay * p))
            .collect(),
    ))
}

/// A labelled set of samples: `n × d` features and `n` class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Array2<f64>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("batch must hold at least one sample".into()));
        }
        Ok(Batch { features, labels })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Gathers rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::Dimension(format!("row {bad} outside batch of {}", self.len())));
        }
        let features = self.features.select(Axis(0), rows);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Batch::new(features, labels)
    }
}
