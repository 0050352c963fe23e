//! Dense ReLU multilayer perceptron with a softmax output layer that can grow.
//!
//! All parameters live in one flat `f64` vector. Every layer is stored as a
//! row-major `[outputs x (inputs + 1)]` block whose last column is the bias, so
//! appending output units only ever appends to the end of the flat vector.
//! Optimizer, Fisher and score state can therefore grow by zero-padding.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{gemm, View, ViewMut};

/// Global class identifier.
pub type Label = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerShape {
    fn row_len(self) -> usize {
        self.inputs + 1
    }

    fn len(self) -> usize {
        self.outputs * self.row_len()
    }
}

/// Weight initializer. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    /// He-uniform, `U(-l, l)` with `l = scale * sqrt(6 / fan_in)`.
    HeUniform {
        scale: f64,
    },
}

impl Init {
    pub const HE: Init = Init::HeUniform { scale: 1.0 };

    fn fill<R: Rng + ?Sized>(self, fan_in: usize, rows: usize, out: &mut Vec<f64>, rng: &mut R) {
        let dist = match self {
            Init::Zeros => None,
            Init::HeUniform { scale } => {
                let limit = scale * (6.0 / fan_in as f64).sqrt();
                if limit > 0.0 {
                    Some(Uniform::new_inclusive(-limit, limit).expect("finite He limit"))
                } else {
                    None
                }
            }
        };
        for _ in 0..rows {
            for _ in 0..fan_in {
                out.push(dist.as_ref().map_or(0.0, |d| d.sample(rng)));
            }
            out.push(0.0);
        }
    }
}

/// One dense layer in conventional (separate weight / bias) form.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `[outputs x inputs]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameters of the network, `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    shapes: Vec<LayerShape>,
    output_labels: Vec<Label>,
    flat: Vec<f64>,
}

impl ModelParams {
    /// Builds an MLP `input_dim -> hidden... -> |output_labels|`.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_labels: &[Label],
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be > 0".into()));
        }
        check_unique(output_labels, &[])?;
        let mut shapes = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &width in hidden {
            shapes.push(LayerShape {
                inputs: prev,
                outputs: width,
            });
            prev = width;
        }
        shapes.push(LayerShape {
            inputs: prev,
            outputs: output_labels.len(),
        });
        let mut flat = Vec::with_capacity(shapes.iter().map(|s| s.len()).sum());
        for s in &shapes {
            init.fill(s.inputs, s.outputs, &mut flat, rng);
        }
        Ok(Self {
            shapes,
            output_labels: output_labels.to_vec(),
            flat,
        })
    }

    pub fn from_layers(layers: &[DenseLayer], output_labels: &[Label]) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("need at least one layer".into()));
        }
        check_unique(output_labels, &[])?;
        let mut shapes = Vec::with_capacity(layers.len());
        let mut flat = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            check_len(
                "layer weights",
                layer.weights.len(),
                layer.inputs * layer.outputs,
            )?;
            check_len("layer bias", layer.bias.len(), layer.outputs)?;
            if i > 0 && layers[i - 1].outputs != layer.inputs {
                return Err(Error::Shape(format!(
                    "layer {i} takes {} inputs but previous layer emits {}",
                    layer.inputs,
                    layers[i - 1].outputs
                )));
            }
            for o in 0..layer.outputs {
                flat.extend_from_slice(&layer.weights[o * layer.inputs..(o + 1) * layer.inputs]);
                flat.push(layer.bias[o]);
            }
            shapes.push(LayerShape {
                inputs: layer.inputs,
                outputs: layer.outputs,
            });
        }
        check_len(
            "output labels",
            output_labels.len(),
            shapes.last().expect("non-empty").outputs,
        )?;
        Ok(Self {
            shapes,
            output_labels: output_labels.to_vec(),
            flat,
        })
    }

    pub fn to_layers(&self) -> Vec<DenseLayer> {
        self.shapes
            .iter()
            .enumerate()
            .map(|(l, &s)| {
                let block = self.layer_block(l);
                let mut weights = Vec::with_capacity(s.inputs * s.outputs);
                let mut bias = Vec::with_capacity(s.outputs);
                for row in block.chunks_exact(s.row_len()) {
                    weights.extend_from_slice(&row[..s.inputs]);
                    bias.push(row[s.inputs]);
                }
                DenseLayer {
                    inputs: s.inputs,
                    outputs: s.outputs,
                    weights,
                    bias,
                }
            })
            .collect()
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        check_len("flat parameters", values.len(), self.flat.len())?;
        self.flat.copy_from_slice(values);
        Ok(())
    }

    /// Number of scalar parameters `P`.
    pub fn flat_len(&self) -> usize {
        self.flat.len()
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].inputs
    }

    /// Width of the representation feeding the output layer.
    pub fn feature_dim(&self) -> usize {
        self.output_shape().inputs
    }

    pub fn output_labels(&self) -> &[Label] {
        &self.output_labels
    }

    pub fn label_index(&self, label: Label) -> Option<usize> {
        self.output_labels.iter().position(|&l| l == label)
    }

    fn output_shape(&self) -> LayerShape {
        *self.shapes.last().expect("at least one layer")
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.shapes[..layer].iter().map(|s| s.len()).sum()
    }

    fn layer_block(&self, layer: usize) -> &[f64] {
        let off = self.layer_offset(layer);
        &self.flat[off..off + self.shapes[layer].len()]
    }

    /// Output-layer weight row (without bias) for `label`.
    pub fn output_row(&self, label: Label) -> Option<&[f64]> {
        let idx = self.label_index(label)?;
        let s = self.output_shape();
        let block = self.layer_block(self.shapes.len() - 1);
        Some(&block[idx * s.row_len()..idx * s.row_len() + s.inputs])
    }

    /// Appends one output unit per new label. Existing parameters keep their
    /// values and positions; the new ones are appended to the flat vector.
    pub fn grow_output<R: Rng + ?Sized>(
        &mut self,
        new_labels: &[Label],
        init: Init,
        rng: &mut R,
    ) -> Result<()> {
        check_unique(new_labels, &self.output_labels)?;
        let fan_in = self.output_shape().inputs;
        init.fill(fan_in, new_labels.len(), &mut self.flat, rng);
        self.output_labels.extend_from_slice(new_labels);
        self.shapes.last_mut().expect("at least one layer").outputs += new_labels.len();
        Ok(())
    }
}

fn check_unique(labels: &[Label], existing: &[Label]) -> Result<()> {
    for (i, l) in labels.iter().enumerate() {
        if existing.contains(l) || labels[..i].contains(l) {
            return Err(Error::InvalidArgument(format!(
                "duplicate output label {l}"
            )));
        }
    }
    Ok(())
}

/// A mini-batch of inputs (row-major `[B x d]`) with their global labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    labels: Vec<Label>,
    dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<Label>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument(
                "batch must hold at least one example".into(),
            ));
        }
        check_len("batch inputs", inputs.len(), labels.len() * dim)?;
        Ok(Self {
            inputs,
            labels,
            dim,
        })
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Everything backprop needs from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    batch_size: usize,
    /// `activations[0]` is the input; `activations[l]` the ReLU output of hidden layer `l`.
    activations: Vec<Vec<f64>>,
    /// Pre-activations per layer; the last entry holds the logits `[B x K]`.
    pre: Vec<Vec<f64>>,
    /// Output-unit indices taking part in the softmax.
    active: Vec<usize>,
    active_labels: Vec<Label>,
    output_width: usize,
    flat_len: usize,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Logits over every output unit, `[B x K]`.
    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("logits")
    }

    /// Logits restricted to the active (masked) labels, `[B x |S|]`.
    pub fn masked_logits(&self) -> Vec<f64> {
        let k = self.output_width;
        let mut out = Vec::with_capacity(self.batch_size * self.active.len());
        for row in self.logits().chunks_exact(k) {
            out.extend(self.active.iter().map(|&j| row[j]));
        }
        out
    }

    pub fn active_labels(&self) -> &[Label] {
        &self.active_labels
    }

    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }

    /// Input followed by each hidden layer's ReLU output.
    pub fn activations(&self) -> &[Vec<f64>] {
        &self.activations
    }

    /// Last hidden activation, `phi(x)`.
    pub fn features(&self) -> &[f64] {
        self.activations.last().expect("input activation")
    }

    fn label_column(&self, label: Label) -> Result<usize> {
        self.active_labels
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("label {label} outside the active label set"))
            })
    }
}

/// Runs the network on row-major `inputs`; `mask` restricts the softmax to a label subset.
pub fn forward_rows(
    params: &ModelParams,
    inputs: &[f64],
    mask: Option<&[Label]>,
) -> Result<ForwardCache> {
    let d = params.input_dim();
    if inputs.is_empty() || inputs.len() % d != 0 {
        return Err(Error::Shape(format!(
            "input buffer of {} values is not a whole number of {d}-dimensional rows",
            inputs.len()
        )));
    }
    let batch_size = inputs.len() / d;
    let (active, active_labels) = match mask {
        None => (
            (0..params.output_labels.len()).collect::<Vec<_>>(),
            params.output_labels.clone(),
        ),
        Some(mask) => {
            if mask.is_empty() {
                return Err(Error::InvalidArgument("empty label mask".into()));
            }
            let mut idx = Vec::with_capacity(mask.len());
            for &l in mask {
                let i = params.label_index(l).ok_or_else(|| {
                    Error::InvalidArgument(format!("mask label {l} is not an output label"))
                })?;
                if idx.contains(&i) {
                    return Err(Error::InvalidArgument(format!("mask label {l} repeated")));
                }
                idx.push(i);
            }
            (idx, mask.to_vec())
        }
    };
    if active.is_empty() {
        return Err(Error::InvalidArgument("model has no output labels".into()));
    }

    let layers = params.shapes.len();
    let mut activations = Vec::with_capacity(layers);
    let mut pre = Vec::with_capacity(layers);
    activations.push(inputs.to_vec());
    let mut offset = 0;
    for (l, &s) in params.shapes.iter().enumerate() {
        let block = &params.flat[offset..offset + s.len()];
        offset += s.len();
        let mut z = vec![0.0; batch_size * s.outputs];
        // bias broadcast, then z += a * W^T
        for row in z.chunks_exact_mut(s.outputs) {
            for (o, zo) in row.iter_mut().enumerate() {
                *zo = block[o * s.row_len() + s.inputs];
            }
        }
        let w_t = View {
            data: block,
            rows: s.inputs,
            cols: s.outputs,
            rs: 1,
            cs: s.row_len(),
        };
        gemm(
            1.0,
            View::row_major(&activations[l], batch_size, s.inputs),
            w_t,
            1.0,
            ViewMut::row_major(&mut z, batch_size, s.outputs),
        );
        if l + 1 < layers {
            activations.push(z.iter().map(|&v| v.max(0.0)).collect());
        }
        pre.push(z);
    }
    Ok(ForwardCache {
        batch_size,
        activations,
        pre,
        active,
        active_labels,
        output_width: params.output_labels.len(),
        flat_len: params.flat_len(),
    })
}

pub fn forward(
    params: &ModelParams,
    batch: &Batch,
    mask: Option<&[Label]>,
) -> Result<ForwardCache> {
    check_len("batch feature dimension", batch.dim, params.input_dim())?;
    forward_rows(params, &batch.inputs, mask)
}

/// Row-wise softmax of the active logits, `[B x |S|]`, computed with max subtraction.
pub fn softmax(cache: &ForwardCache) -> Vec<f64> {
    let s = cache.active.len();
    let mut probs = cache.masked_logits();
    for row in probs.chunks_exact_mut(s) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

/// Mean negative log-likelihood over the batch and the softmax probabilities.
pub fn softmax_log_likelihood(cache: &ForwardCache, labels: &[Label]) -> Result<(f64, Vec<f64>)> {
    check_len("labels", labels.len(), cache.batch_size)?;
    let s = cache.active.len();
    let logits = cache.masked_logits();
    let mut probs = softmax(cache);
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let col = cache.label_column(label)?;
        let row = &logits[b * s..(b + 1) * s];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[col];
    }
    loss /= cache.batch_size as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    // guard against -0.0 noise in probabilities
    for p in probs.iter_mut() {
        if *p < 0.0 {
            *p = 0.0;
        }
    }
    Ok((loss, probs))
}

/// Gradients produced by one backprop pass.
pub(crate) struct Backprop {
    /// Gradient of the mean cross-entropy.
    pub grad: Vec<f64>,
    /// Mean over examples of the squared per-example gradient, when requested.
    pub sq_grad: Option<Vec<f64>>,
}

pub(crate) fn backprop(
    params: &ModelParams,
    cache: &ForwardCache,
    labels: &[Label],
    with_squares: bool,
) -> Result<Backprop> {
    if cache.flat_len != params.flat_len() || cache.output_width != params.output_labels.len() {
        return Err(Error::Shape(
            "forward cache does not match the parameters (stale cache)".into(),
        ));
    }
    check_len("labels", labels.len(), cache.batch_size)?;
    let b = cache.batch_size;
    let inv_b = 1.0 / b as f64;
    let (_, probs) = softmax_log_likelihood(cache, labels)?;

    // per-example output deltas p - onehot, zero outside the active set
    let k = cache.output_width;
    let s = cache.active.len();
    let mut delta = vec![0.0; b * k];
    for (row, label) in labels.iter().enumerate() {
        let col = cache.label_column(*label)?;
        for (c, &j) in cache.active.iter().enumerate() {
            delta[row * k + j] = probs[row * s + c];
        }
        delta[row * k + cache.active[col]] -= 1.0;
    }

    let mut grad = vec![0.0; params.flat_len()];
    let mut sq = with_squares.then(|| vec![0.0; params.flat_len()]);
    let layers = params.shapes.len();
    for l in (0..layers).rev() {
        let shape = params.shapes[l];
        let off = params.layer_offset(l);
        let len = shape.len();
        let a_prev = &cache.activations[l];
        accumulate_layer(&mut grad[off..off + len], &delta, a_prev, b, shape, inv_b);
        if let Some(sq) = sq.as_mut() {
            let d2: Vec<f64> = delta.iter().map(|v| v * v).collect();
            let a2: Vec<f64> = a_prev.iter().map(|v| v * v).collect();
            accumulate_layer(&mut sq[off..off + len], &d2, &a2, b, shape, inv_b);
        }
        if l > 0 {
            let block = &params.flat[off..off + len];
            let mut next = vec![0.0; b * shape.inputs];
            let w = View {
                data: block,
                rows: shape.outputs,
                cols: shape.inputs,
                rs: shape.row_len(),
                cs: 1,
            };
            gemm(
                1.0,
                View::row_major(&delta, b, shape.outputs),
                w,
                0.0,
                ViewMut::row_major(&mut next, b, shape.inputs),
            );
            for (d, &z) in next.iter_mut().zip(&cache.pre[l - 1]) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = next;
        }
    }
    Ok(Backprop { grad, sq_grad: sq })
}

// block[o, i] = scale * sum_b delta[b, o] * act[b, i]; block[o, bias] = scale * sum_b delta[b, o]
fn accumulate_layer(
    block: &mut [f64],
    delta: &[f64],
    act: &[f64],
    b: usize,
    shape: LayerShape,
    scale: f64,
) {
    let row_len = shape.row_len();
    gemm(
        scale,
        View::row_major(delta, b, shape.outputs).t(),
        View::row_major(act, b, shape.inputs),
        0.0,
        ViewMut {
            data: block,
            rows: shape.outputs,
            cols: shape.inputs,
            rs: row_len,
            cs: 1,
        },
    );
    for o in 0..shape.outputs {
        let mut sum = 0.0;
        for row in 0..b {
            sum += delta[row * shape.outputs + o];
        }
        block[o * row_len + shape.inputs] = scale * sum;
    }
}

/// Gradient of the mean cross-entropy with respect to the flat parameters.
pub fn backward(params: &ModelParams, cache: &ForwardCache, labels: &[Label]) -> Result<Vec<f64>> {
    Ok(backprop(params, cache, labels, false)?.grad)
}

/// Last hidden activation `phi(x)` for each row of `inputs`, `[B x f]`.
pub fn features(params: &ModelParams, inputs: &[f64]) -> Result<Vec<f64>> {
    let mut cache = forward_rows(params, inputs, None)?;
    Ok(cache.activations.pop().expect("input activation"))
}

/// Predicted label per row, taking the argmax over `mask` (or all outputs).
pub fn predict(params: &ModelParams, inputs: &[f64], mask: Option<&[Label]>) -> Result<Vec<Label>> {
    let cache = forward_rows(params, inputs, mask)?;
    let s = cache.active.len();
    Ok(cache
        .masked_logits()
        .chunks_exact(s)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            cache.active_labels[best]
        })
        .collect())
}
