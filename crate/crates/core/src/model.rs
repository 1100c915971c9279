//! A small ReLU multi-layer perceptron with analytic gradients.
//!
//! Parameters live in one flat vector. Each layer contributes an
//! `out x in` row-major weight block followed by `out` biases.

use std::borrow::Borrow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{check_dims, GradientVector};

/// One labelled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

/// Flat MLP parameters plus the layer shapes needed to interpret them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    flat: Vec<f64>,
    layer_shapes: Vec<(usize, usize)>,
}

struct Layer<'a> {
    weights: &'a [f64],
    biases: &'a [f64],
    inputs: usize,
    outputs: usize,
}

/// Total parameter count for a chain of `(in, out)` layers.
pub fn param_count(layer_shapes: &[(usize, usize)]) -> usize {
    layer_shapes.iter().map(|&(i, o)| i * o + o).sum()
}

fn validate_shapes(layer_shapes: &[(usize, usize)]) -> Result<()> {
    if layer_shapes.is_empty() {
        return Err(Error::InvalidShapes("no layers".into()));
    }
    if layer_shapes.iter().any(|&(i, o)| i == 0 || o == 0) {
        return Err(Error::InvalidShapes("zero-width layer".into()));
    }
    for (k, pair) in layer_shapes.windows(2).enumerate() {
        if pair[0].1 != pair[1].0 {
            return Err(Error::InvalidShapes(format!(
                "layer {k} outputs {} but layer {} expects {}",
                pair[0].1,
                k + 1,
                pair[1].0
            )));
        }
    }
    Ok(())
}

/// Layer shapes for `input -> hidden... -> classes`.
pub fn mlp_shapes(input: usize, hidden: &[usize], classes: usize) -> Vec<(usize, usize)> {
    let mut widths = Vec::with_capacity(hidden.len() + 2);
    widths.push(input);
    widths.extend_from_slice(hidden);
    widths.push(classes);
    widths.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(layer_shapes: &[(usize, usize)], seed: u64) -> Result<ModelParams> {
    validate_shapes(layer_shapes)?;
    let mut rng = rng::stream(seed, "init-params", 0);
    let mut flat = Vec::with_capacity(param_count(layer_shapes));
    for &(inputs, outputs) in layer_shapes {
        let s = (6.0 / (inputs + outputs) as f64).sqrt();
        flat.extend((0..inputs * outputs).map(|_| rng.random_range(-s..=s)));
        flat.extend(std::iter::repeat_n(0.0, outputs));
    }
    Ok(ModelParams {
        flat,
        layer_shapes: layer_shapes.to_vec(),
    })
}

impl ModelParams {
    pub fn from_flat(layer_shapes: &[(usize, usize)], flat: Vec<f64>) -> Result<Self> {
        validate_shapes(layer_shapes)?;
        check_dims(param_count(layer_shapes), flat.len())?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "model parameters",
            });
        }
        Ok(Self {
            flat,
            layer_shapes: layer_shapes.to_vec(),
        })
    }

    pub fn zeros(layer_shapes: &[(usize, usize)]) -> Result<Self> {
        Self::from_flat(layer_shapes, vec![0.0; param_count(layer_shapes)])
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn dim(&self) -> usize {
        self.flat.len()
    }

    pub fn layer_shapes(&self) -> &[(usize, usize)] {
        &self.layer_shapes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_shapes[0].0
    }

    pub fn num_classes(&self) -> usize {
        self.layer_shapes[self.layer_shapes.len() - 1].1
    }

    /// Per-layer `(weights, biases)` views in layer order.
    pub fn layer_blocks(&self) -> Vec<(&[f64], &[f64])> {
        self.layers().map(|l| (l.weights, l.biases)).collect()
    }

    fn layers(&self) -> impl Iterator<Item = Layer<'_>> {
        let mut offset = 0;
        self.layer_shapes.iter().map(move |&(inputs, outputs)| {
            let w = &self.flat[offset..offset + inputs * outputs];
            let b = &self.flat[offset + inputs * outputs..offset + inputs * outputs + outputs];
            offset += inputs * outputs + outputs;
            Layer {
                weights: w,
                biases: b,
                inputs,
                outputs,
            }
        })
    }

    /// Pre-activations of every layer for input `x`.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let last = self.layer_shapes.len() - 1;
        let mut pre = Vec::with_capacity(self.layer_shapes.len());
        let mut act: Vec<f64> = x.to_vec();
        for (l, layer) in self.layers().enumerate() {
            let z: Vec<f64> = (0..layer.outputs)
                .map(|o| {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>() + layer.biases[o]
                })
                .collect();
            if l < last {
                act = z.iter().map(|&v| v.max(0.0)).collect();
            }
            pre.push(z);
        }
        pre
    }

    /// Adds `scale * d loss(example) / d params` into `acc`; returns the
    /// example's cross-entropy.
    fn accumulate_gradient(&self, x: &[f64], label: usize, scale: f64, acc: &mut [f64]) -> f64 {
        let pre = self.forward_trace(x);
        let logits = pre.last().expect("at least one layer");
        let (probs, ce) = softmax_with_loss(logits, label);
        let mut delta: Vec<f64> = probs;
        delta[label] -= 1.0;

        let layers: Vec<Layer<'_>> = self.layers().collect();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for l in &layers {
            offsets.push(offset);
            offset += l.inputs * l.outputs + l.outputs;
        }

        for l in (0..layers.len()).rev() {
            let layer = &layers[l];
            let input_act: Vec<f64> = if l == 0 {
                x.to_vec()
            } else {
                pre[l - 1].iter().map(|&v| v.max(0.0)).collect()
            };
            let base = offsets[l];
            for o in 0..layer.outputs {
                let d = delta[o] * scale;
                if d != 0.0 {
                    let row = &mut acc[base + o * layer.inputs..base + (o + 1) * layer.inputs];
                    for (g, a) in row.iter_mut().zip(&input_act) {
                        *g += d * a;
                    }
                }
                acc[base + layer.inputs * layer.outputs + o] += d;
            }
            if l > 0 {
                let prev_pre = &pre[l - 1];
                let mut next = vec![0.0; layer.inputs];
                for (row, &d) in layer.weights.chunks(layer.inputs).zip(&delta) {
                    if d == 0.0 {
                        continue;
                    }
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += w * d;
                    }
                }
                for (n, &z) in next.iter_mut().zip(prev_pre) {
                    if z <= 0.0 {
                        *n = 0.0;
                    }
                }
                delta = next;
            }
        }
        ce
    }
}

/// Softmax probabilities and the cross-entropy of `label`, via
/// max-subtracted log-sum-exp.
fn softmax_with_loss(logits: &[f64], label: usize) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = max + total.ln();
    let probs = exps.into_iter().map(|e| e / total).collect();
    (probs, lse - logits[label])
}

fn check_example(params: &ModelParams, ex: &Example) -> Result<()> {
    check_dims(params.input_dim(), ex.features.len())?;
    if ex.label >= params.num_classes() {
        return Err(Error::InvalidParams(format!(
            "label {} out of range for {} classes",
            ex.label,
            params.num_classes()
        )));
    }
    Ok(())
}

/// Logits for `x`. Hidden layers use ReLU; the last layer is linear.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    check_dims(params.input_dim(), x.len())?;
    Ok(params.forward_trace(x).pop().expect("at least one layer"))
}

/// Mean softmax cross-entropy over `batch`.
pub fn loss<E: Borrow<Example>>(params: &ModelParams, batch: &[E]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for ex in batch {
        let ex = ex.borrow();
        check_example(params, ex)?;
        let logits = params.forward_trace(&ex.features).pop().expect("layer");
        total += softmax_with_loss(&logits, ex.label).1;
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`loss`] with respect to the flat parameters.
pub fn gradient<E: Borrow<Example>>(params: &ModelParams, batch: &[E]) -> Result<GradientVector> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = vec![0.0; params.dim()];
    for ex in batch {
        let ex = ex.borrow();
        check_example(params, ex)?;
        params.accumulate_gradient(&ex.features, ex.label, 1.0, &mut acc);
    }
    let n = batch.len() as f64;
    for g in &mut acc {
        *g /= n;
    }
    GradientVector::new(acc)
}

/// `w - lr * g`.
pub fn apply_update(params: &ModelParams, g: &GradientVector, lr: f64) -> Result<ModelParams> {
    check_dims(params.dim(), g.dim())?;
    let flat: Vec<f64> = params
        .flat
        .iter()
        .zip(g.as_slice())
        .map(|(w, d)| w - lr * d)
        .collect();
    ModelParams::from_flat(&params.layer_shapes, flat)
}

/// Index of the largest logit; ties go to the lowest class.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ModelParams, x: &[f64]) -> Result<usize> {
    Ok(argmax(&forward(params, x)?))
}

/// Fraction of `set` that `params` classifies correctly.
pub fn accuracy<E: Borrow<Example>>(params: &ModelParams, set: &[E]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut correct = 0usize;
    for ex in set {
        let ex = ex.borrow();
        if predict(params, &ex.features)? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}
