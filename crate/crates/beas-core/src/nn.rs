//! Dense neural-network training core.
//!
//! A from-scratch MLP with ReLU hidden layers and a softmax + cross-entropy
//! output, trained by plain mini-batch SGD. Parameters and gradients are
//! exchanged as flat `f64` vectors in a fixed order: layer-major, weights
//! before biases, weight matrices row-major `(out x in)`. This ordering is
//! load-bearing — block payload hashing on the ledger depends on it.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Identifies the model architecture a gradient vector belongs to.
///
/// Two vectors are combinable only if their fingerprints match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpecFingerprint(pub u64);

impl std::fmt::Display for SpecFingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Architecture of a dense classifier: layer widths plus the hidden
/// nonlinearity. The output layer is always softmax + cross-entropy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        Self::with_activation(layer_sizes, Activation::Relu)
    }

    pub fn with_activation(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument {
                name: "layer_sizes",
                reason: format!("need at least 2 layers, got {}", layer_sizes.len()),
            });
        }
        if layer_sizes.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument {
                name: "layer_sizes",
                reason: "all layer widths must be >= 1".into(),
            });
        }
        Ok(Self {
            layer_sizes,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight layers (= number of parameter groups).
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total parameter count: sum over layers of `in*out + out`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Hash of the canonical spec encoding; keys gradient compatibility.
    pub fn fingerprint(&self) -> SpecFingerprint {
        let mut hasher = Sha256::new();
        hasher.update((self.layer_sizes.len() as u32).to_le_bytes());
        for &w in &self.layer_sizes {
            hasher.update((w as u32).to_le_bytes());
        }
        hasher.update([match self.activation {
            Activation::Relu => 0u8,
        }]);
        let digest = hasher.finalize();
        SpecFingerprint(u64::from_le_bytes(digest[..8].try_into().unwrap()))
    }
}

/// A flat parameter or update vector tied to one architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    values: Vec<f64>,
    fingerprint: SpecFingerprint,
}

impl GradientVector {
    pub fn new(values: Vec<f64>, fingerprint: SpecFingerprint) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: i });
        }
        Ok(Self {
            values,
            fingerprint,
        })
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
            fingerprint: spec.fingerprint(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn fingerprint(&self) -> SpecFingerprint {
        self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Squared L2 distance to another vector of the same spec.
    pub fn squared_distance(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.fingerprint != other.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint.to_string(),
                actual: other.fingerprint.to_string(),
            });
        }
        Ok(())
    }

    /// Replace the stored values; length must be unchanged.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                what: "gradient values",
                expected: self.values.len(),
                actual: values.len(),
            });
        }
        Self::new(values, self.fingerprint)
    }
}

/// Model parameters: an architecture plus its flat value vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    spec: ModelSpec,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn new(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::ShapeMismatch {
                what: "model parameters",
                expected: spec.param_count(),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: i });
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

    /// Xavier-uniform weight init, zero biases, drawn from `rng`.
    pub fn init<R: Rng>(spec: ModelSpec, rng: &mut R) -> Self {
        let mut values = vec![0.0; spec.param_count()];
        let mut off = 0;
        for w in spec.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in values.iter_mut().skip(off).take(fan_in * fan_out) {
                *v = rng.gen_range(-limit..limit);
            }
            off += fan_in * fan_out + fan_out; // biases stay zero
        }
        Self { spec, values }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn fingerprint(&self) -> SpecFingerprint {
        self.spec.fingerprint()
    }

    /// `self + update`, the ledger's way of applying a shared delta.
    pub fn apply_update(&self, update: &GradientVector) -> Result<ModelParams> {
        self.check_grad(update)?;
        let values = self
            .values
            .iter()
            .zip(update.values())
            .map(|(a, b)| a + b)
            .collect();
        ModelParams::new(self.spec.clone(), values)
    }

    /// `self - start` as a shareable update vector.
    pub fn delta_from(&self, start: &ModelParams) -> Result<GradientVector> {
        if self.spec != start.spec {
            return Err(Error::FingerprintMismatch {
                expected: start.fingerprint().to_string(),
                actual: self.fingerprint().to_string(),
            });
        }
        let values = self
            .values
            .iter()
            .zip(&start.values)
            .map(|(a, b)| a - b)
            .collect();
        GradientVector::new(values, self.fingerprint())
    }

    fn check_grad(&self, grad: &GradientVector) -> Result<()> {
        if grad.fingerprint() != self.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint().to_string(),
                actual: grad.fingerprint().to_string(),
            });
        }
        Ok(())
    }

    /// View the flat vector as per-layer `(weights, biases)` pairs,
    /// weights row-major `(out x in)`.
    pub fn unflatten(&self) -> Vec<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut layers = Vec::with_capacity(self.spec.num_layers());
        let mut off = 0;
        for w in self.spec.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut rows = Vec::with_capacity(fan_out);
            for r in 0..fan_out {
                let start = off + r * fan_in;
                rows.push(self.values[start..start + fan_in].to_vec());
            }
            let bias = self.values[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]
                .to_vec();
            layers.push((rows, bias));
            off += fan_in * fan_out + fan_out;
        }
        layers
    }

    /// Rebuild the flat vector from per-layer matrices. Inverse of
    /// [`ModelParams::unflatten`].
    pub fn from_layers(spec: ModelSpec, layers: &[(Vec<Vec<f64>>, Vec<f64>)]) -> Result<Self> {
        let mut values = Vec::with_capacity(spec.param_count());
        for (weights, bias) in layers {
            for row in weights {
                values.extend_from_slice(row);
            }
            values.extend_from_slice(bias);
        }
        ModelParams::new(spec, values)
    }
}

/// A batch of examples: row-major inputs plus class-index labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    rows: usize,
    cols: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, rows: usize, cols: usize, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                what: "batch inputs",
                expected: rows * cols,
                actual: inputs.len(),
            });
        }
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                what: "batch labels",
                expected: rows,
                actual: labels.len(),
            });
        }
        Ok(Self {
            inputs,
            rows,
            cols,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn input_dim(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.cols..(i + 1) * self.cols]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn rows_mut(&mut self) -> (&mut [f64], &mut [usize], usize) {
        (&mut self.inputs, &mut self.labels, self.cols)
    }
}

/// An in-memory labeled dataset; the unit handed around by partitioning,
/// clustering, ingestion, and attacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument {
                name: "dim",
                reason: "input dimension must be >= 1".into(),
            });
        }
        if inputs.len() % dim != 0 || inputs.len() / dim != labels.len() {
            return Err(Error::ShapeMismatch {
                what: "dataset inputs",
                expected: labels.len() * dim,
                actual: inputs.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument {
                name: "labels",
                reason: format!("label {bad} out of range for {num_classes} classes"),
            });
        }
        Ok(Self {
            inputs,
            dim,
            labels,
            num_classes,
        })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            inputs: Vec::new(),
            dim,
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, input: &[f64], label: usize) {
        debug_assert_eq!(input.len(), self.dim);
        self.inputs.extend_from_slice(input);
        self.labels.push(label);
    }

    pub fn set_label(&mut self, i: usize, label: usize) {
        self.labels[i] = label;
    }

    /// Gather the rows at `indices` into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.dim, self.num_classes);
        for &i in indices {
            out.push(self.input(i), self.labels[i]);
        }
        out
    }

    /// Materialize rows `[start, end)` as a batch.
    pub fn batch_range(&self, start: usize, end: usize) -> Batch {
        Batch {
            inputs: self.inputs[start * self.dim..end * self.dim].to_vec(),
            rows: end - start,
            cols: self.dim,
            labels: self.labels[start..end].to_vec(),
        }
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Batch {
        self.batch_range(0, self.len())
    }

    /// Consecutive mini-batches of at most `batch_size` rows, in data order.
    pub fn minibatches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let n = self.len();
        let bs = batch_size.max(1);
        (0..n.div_ceil(bs)).map(move |k| self.batch_range(k * bs, ((k + 1) * bs).min(n)))
    }
}

/// Logits plus mean cross-entropy for one batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Row-major `(batch x output_dim)` pre-softmax scores.
    pub logits: Vec<f64>,
    /// Mean cross-entropy over the batch.
    pub loss: f64,
}

struct ForwardCache {
    /// Pre-activations per layer, row-major `(batch x width)`.
    pre_activations: Vec<Vec<f64>>,
    /// Post-activations per layer including the input as entry 0.
    activations: Vec<Vec<f64>>,
    loss: f64,
}

fn check_batch(model: &ModelParams, batch: &Batch) -> Result<()> {
    if batch.input_dim() != model.spec.input_dim() {
        return Err(Error::ShapeMismatch {
            what: "batch input dim",
            expected: model.spec.input_dim(),
            actual: batch.input_dim(),
        });
    }
    let out = model.spec.output_dim();
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= out) {
        return Err(Error::InvalidArgument {
            name: "labels",
            reason: format!("label {bad} out of range for {out} classes"),
        });
    }
    Ok(())
}

fn forward_cached(model: &ModelParams, batch: &Batch) -> Result<ForwardCache> {
    check_batch(model, batch)?;
    let spec = &model.spec;
    let sizes = spec.layer_sizes();
    let n = batch.len();
    let num_layers = spec.num_layers();

    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(num_layers + 1);
    activations.push(batch.inputs.clone());
    let mut pre_activations: Vec<Vec<f64>> = Vec::with_capacity(num_layers);

    let mut off = 0;
    for l in 0..num_layers {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let weights = &model.values[off..off + fan_in * fan_out];
        let biases = &model.values[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        let prev = &activations[l];
        let mut z = vec![0.0; n * fan_out];
        for r in 0..n {
            let a = &prev[r * fan_in..(r + 1) * fan_in];
            let zr = &mut z[r * fan_out..(r + 1) * fan_out];
            for (o, zo) in zr.iter_mut().enumerate() {
                let w = &weights[o * fan_in..(o + 1) * fan_in];
                let mut acc = biases[o];
                for (wi, ai) in w.iter().zip(a) {
                    acc += wi * ai;
                }
                *zo = acc;
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: l });
        }
        let act = if l + 1 < num_layers {
            z.iter().map(|&v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        pre_activations.push(z);
        activations.push(act);
        off += fan_in * fan_out + fan_out;
    }

    // Mean cross-entropy with max-subtracted softmax.
    let out_dim = spec.output_dim();
    let logits = activations.last().unwrap();
    let mut loss = 0.0;
    for r in 0..n {
        let row = &logits[r * out_dim..(r + 1) * out_dim];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[batch.labels[r]];
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            layer: num_layers - 1,
        });
    }

    Ok(ForwardCache {
        pre_activations,
        activations,
        loss,
    })
}

/// Run the model on a batch and report logits plus mean cross-entropy.
pub fn forward(model: &ModelParams, batch: &Batch) -> Result<ForwardOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument {
            name: "batch",
            reason: "batch must be nonempty".into(),
        });
    }
    let cache = forward_cached(model, batch)?;
    Ok(ForwardOutput {
        logits: cache.activations.last().unwrap().clone(),
        loss: cache.loss,
    })
}

/// Gradient of the mean batch loss w.r.t. every parameter, in flat order.
pub fn compute_gradients(model: &ModelParams, batch: &Batch) -> Result<GradientVector> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument {
            name: "batch",
            reason: "batch must be nonempty".into(),
        });
    }
    let cache = forward_cached(model, batch)?;
    let spec = &model.spec;
    let sizes = spec.layer_sizes();
    let n = batch.len();
    let num_layers = spec.num_layers();
    let out_dim = spec.output_dim();

    // dL/dz for the output layer: (softmax - onehot) / n.
    let logits = cache.activations.last().unwrap();
    let mut delta = vec![0.0; n * out_dim];
    for r in 0..n {
        let row = &logits[r * out_dim..(r + 1) * out_dim];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let d = &mut delta[r * out_dim..(r + 1) * out_dim];
        for (o, dv) in d.iter_mut().enumerate() {
            *dv = (row[o] - m).exp() / denom / n as f64;
        }
        d[batch.labels[r]] -= 1.0 / n as f64;
    }

    let mut grad = vec![0.0; spec.param_count()];
    let layer_offsets: Vec<usize> = {
        let mut offs = Vec::with_capacity(num_layers);
        let mut off = 0;
        for w in sizes.windows(2) {
            offs.push(off);
            off += w[0] * w[1] + w[1];
        }
        offs
    };

    for l in (0..num_layers).rev() {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let off = layer_offsets[l];
        let prev = &cache.activations[l];
        {
            let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out]
                .split_at_mut(fan_in * fan_out);
            for r in 0..n {
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                let a = &prev[r * fan_in..(r + 1) * fan_in];
                for (o, &dv) in d.iter().enumerate() {
                    let gr = &mut gw[o * fan_in..(o + 1) * fan_in];
                    for (g, ai) in gr.iter_mut().zip(a) {
                        *g += dv * ai;
                    }
                    gb[o] += dv;
                }
            }
        }
        if l > 0 {
            // Propagate to the previous layer through W^T and the ReLU mask.
            let weights = &model.values[off..off + fan_in * fan_out];
            let z_prev = &cache.pre_activations[l - 1];
            let mut next_delta = vec![0.0; n * fan_in];
            for r in 0..n {
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                let nd = &mut next_delta[r * fan_in..(r + 1) * fan_in];
                for (o, &dv) in d.iter().enumerate() {
                    let w = &weights[o * fan_in..(o + 1) * fan_in];
                    for (ndi, wi) in nd.iter_mut().zip(w) {
                        *ndi += dv * wi;
                    }
                }
                let z = &z_prev[r * fan_in..(r + 1) * fan_in];
                for (ndi, &zi) in nd.iter_mut().zip(z) {
                    if zi <= 0.0 {
                        *ndi = 0.0;
                    }
                }
            }
            delta = next_delta;
        }
    }

    GradientVector::new(grad, model.fingerprint())
}

/// One SGD step: `values - lr * grad`.
pub fn sgd_step(model: &ModelParams, grad: &GradientVector, lr: f64) -> Result<ModelParams> {
    model.check_grad(grad)?;
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::InvalidArgument {
            name: "lr",
            reason: format!("learning rate must be finite and >= 0, got {lr}"),
        });
    }
    let values = model
        .values
        .iter()
        .zip(grad.values())
        .map(|(v, g)| v - lr * g)
        .collect();
    ModelParams::new(model.spec.clone(), values)
}

/// Result of a local training run: the new parameters, the shareable
/// update delta, and the mean loss observed in each epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub update: GradientVector,
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD over one data cluster.
///
/// Runs `epochs` passes in data order with consecutive chunks of
/// `batch_size` rows. The returned update is `new - start`; privacy
/// transforms are applied downstream, not here.
pub fn local_train(
    start: &ModelParams,
    cluster: &Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
) -> Result<TrainOutcome> {
    if epochs == 0 {
        return Err(Error::InvalidArgument {
            name: "epochs",
            reason: "must be >= 1".into(),
        });
    }
    if cluster.is_empty() {
        return Err(Error::InvalidArgument {
            name: "cluster",
            reason: "training cluster must be nonempty".into(),
        });
    }
    let mut params = start.clone();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in cluster.minibatches(batch_size) {
            let out = forward_cached(&params, &batch)?;
            loss_sum += out.loss;
            batches += 1;
            let grad = compute_gradients(&params, &batch)?;
            params = sgd_step(&params, &grad, lr)?;
        }
        epoch_losses.push(loss_sum / batches as f64);
    }
    let update = params.delta_from(start)?;
    Ok(TrainOutcome {
        params,
        update,
        epoch_losses,
    })
}

/// Accuracy and mean loss over a dataset.
#[derive(Debug, Clone, Copy)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Evaluate argmax accuracy (ties broken toward the lower class index)
/// and mean cross-entropy. Deterministic and order-invariant.
pub fn evaluate(model: &ModelParams, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument {
            name: "dataset",
            reason: "evaluation dataset must be nonempty".into(),
        });
    }
    let out_dim = model.spec.output_dim();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let n = dataset.len();
    // Chunked to bound the activation memory on large sets.
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let batch = dataset.batch_range(start, end);
        let fwd = forward(model, &batch)?;
        loss_sum += fwd.loss * batch.len() as f64;
        for r in 0..batch.len() {
            let row = &fwd.logits[r * out_dim..(r + 1) * out_dim];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best == batch.label(r) {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        loss: loss_sum / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn spec(sizes: &[usize]) -> ModelSpec {
        ModelSpec::new(sizes.to_vec()).unwrap()
    }

    /// The fixed 2-2-2 model used by the frozen-value tests. Weights were
    /// chosen by hand; expected loss and gradient were computed with an
    /// independent reference implementation before this module was written.
    fn fixed_222() -> (ModelParams, Batch) {
        let s = spec(&[2, 2, 2]);
        let values = vec![
            0.5, -0.25, 1.0, 0.75, // W1 row-major (out x in)
            0.1, -0.2, // b1
            -0.3, 0.8, 0.6, -0.4, // W2
            0.05, 0.0, // b2
        ];
        let model = ModelParams::new(s, values).unwrap();
        let batch = Batch::new(vec![1.0, 2.0], 1, 2, vec![1]).unwrap();
        (model, batch)
    }

    #[test]
    fn param_count_matches_formula() {
        let s = spec(&[784, 64, 64, 10]);
        assert_eq!(s.param_count(), 784 * 64 + 64 + 64 * 64 + 64 + 64 * 10 + 10);
    }

    #[test]
    fn spec_requires_two_layers_and_positive_widths() {
        assert!(ModelSpec::new(vec![4]).is_err());
        assert!(ModelSpec::new(vec![4, 0]).is_err());
        assert!(ModelSpec::new(vec![4, 2]).is_ok());
    }

    #[test]
    fn zero_model_gives_uniform_loss_ln_k() {
        for k in [2usize, 5, 10] {
            let model = ModelParams::zeros(spec(&[3, k]));
            let batch = Batch::new(vec![0.3, -0.2, 0.9], 1, 3, vec![k - 1]).unwrap();
            let out = forward(&model, &batch).unwrap();
            assert!((out.loss - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_correct_logit_gives_near_zero_loss() {
        let s = spec(&[2, 2]);
        // Large-margin weights toward class 0.
        let model = ModelParams::new(s, vec![30.0, 30.0, -30.0, -30.0, 0.0, 0.0]).unwrap();
        let batch = Batch::new(vec![1.0, 1.0], 1, 2, vec![0]).unwrap();
        let out = forward(&model, &batch).unwrap();
        assert!(out.loss < 1e-12);
    }

    #[test]
    fn frozen_222_forward_loss() {
        let (model, batch) = fixed_222();
        let out = forward(&model, &batch).unwrap();
        assert!((out.loss - 2.7837958276838055).abs() < 1e-14, "loss {}", out.loss);
        assert!((out.logits[0] - 1.86).abs() < 1e-12);
        assert!((out.logits[1] + 0.86).abs() < 1e-12);
    }

    #[test]
    fn frozen_222_gradient() {
        let (model, batch) = fixed_222();
        let expected = [
            -0.84437688036277037,
            -1.6887537607255407,
            1.1258358404836939,
            2.2516716809673878,
            -0.84437688036277037,
            1.1258358404836939,
            0.093819653373641163,
            2.1578520275937465,
            -0.093819653373641149,
            -2.1578520275937461,
            0.93819653373641154,
            -0.93819653373641143,
        ];
        let grad = compute_gradients(&model, &batch).unwrap();
        for (g, e) in grad.values().iter().zip(expected) {
            assert!((g - e).abs() < 1e-14, "got {g}, want {e}");
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = ModelParams::zeros(spec(&[3, 2]));
        let batch = Batch::new(vec![1.0, 2.0], 1, 2, vec![0]).unwrap();
        assert!(matches!(
            forward(&model, &batch),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn finite_difference(model: &ModelParams, batch: &Batch, step: f64) -> Vec<f64> {
        let mut fd = Vec::with_capacity(model.values().len());
        for i in 0..model.values().len() {
            let mut plus = model.values().to_vec();
            plus[i] += step;
            let mut minus = model.values().to_vec();
            minus[i] -= step;
            let lp = forward(&ModelParams::new(model.spec().clone(), plus).unwrap(), batch)
                .unwrap()
                .loss;
            let lm = forward(&ModelParams::new(model.spec().clone(), minus).unwrap(), batch)
                .unwrap()
                .loss;
            fd.push((lp - lm) / (2.0 * step));
        }
        fd
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = substream(7, "nn-fd-test", 0);
        for trial in 0..10 {
            let sizes: &[usize] = match trial % 3 {
                0 => &[3, 4, 2],
                1 => &[2, 5, 3],
                _ => &[4, 3, 3, 2],
            };
            let s = spec(sizes);
            let model = ModelParams::init(s.clone(), &mut rng);
            let n = 3;
            let inputs: Vec<f64> = (0..n * s.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..s.output_dim())).collect();
            let batch = Batch::new(inputs, n, s.input_dim(), labels).unwrap();
            let grad = compute_gradients(&model, &batch).unwrap();
            let fd = finite_difference(&model, &batch, 1e-5);
            for (a, b) in grad.values().iter().zip(&fd) {
                let denom = (a.abs() + b.abs()).max(1e-8);
                assert!(
                    (a - b).abs() / denom < 1e-4,
                    "grad {a} vs fd {b} (trial {trial})"
                );
            }
        }
    }

    #[test]
    fn gradient_near_zero_at_fit_minimum() {
        // Saturated, correctly-classified single example: softmax residual
        // vanishes, so the gradient must too.
        let s = spec(&[2, 2]);
        let model = ModelParams::new(s, vec![40.0, 0.0, -40.0, 0.0, 0.0, 0.0]).unwrap();
        let batch = Batch::new(vec![1.0, 0.5], 1, 2, vec![0]).unwrap();
        let grad = compute_gradients(&model, &batch).unwrap();
        assert!(grad.linf_norm() < 1e-6);
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let mut rng = substream(11, "nn-dup-test", 0);
        let s = spec(&[3, 4, 2]);
        let model = ModelParams::init(s.clone(), &mut rng);
        let inputs: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Batch::new(inputs.clone(), 2, 3, vec![0, 1]).unwrap();
        let mut doubled = inputs.clone();
        doubled.extend_from_slice(&inputs);
        let dup = Batch::new(doubled, 4, 3, vec![0, 1, 0, 1]).unwrap();
        let g1 = compute_gradients(&model, &batch).unwrap();
        let g2 = compute_gradients(&model, &dup).unwrap();
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_step_applies_update_rule() {
        let s = spec(&[1, 2]);
        let model = ModelParams::new(s.clone(), vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        let grad =
            GradientVector::new(vec![0.5, -0.5, 0.0, 0.0], s.fingerprint()).unwrap();
        let next = sgd_step(&model, &grad, 1.0).unwrap();
        assert_eq!(&next.values()[..2], &[0.5, 2.5]);

        // Zero grad leaves the model unchanged.
        let zero = GradientVector::zeros(&s);
        assert_eq!(sgd_step(&model, &zero, 0.3).unwrap().values(), model.values());

        // Two half-steps equal one full step for a fixed gradient.
        let half = sgd_step(&sgd_step(&model, &grad, 0.5).unwrap(), &grad, 0.5).unwrap();
        let full = sgd_step(&model, &grad, 1.0).unwrap();
        for (a, b) in half.values().iter().zip(full.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_step_rejects_fingerprint_mismatch() {
        let model = ModelParams::zeros(spec(&[2, 2]));
        let other = GradientVector::zeros(&spec(&[2, 3]));
        assert!(matches!(
            sgd_step(&model, &other, 0.1),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    fn xor_dataset() -> Dataset {
        Dataset::new(
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0],
            2,
            vec![0, 1, 1, 0],
            2,
        )
        .unwrap()
    }

    #[test]
    fn local_train_zero_lr_returns_zero_update() {
        let mut rng = substream(3, "nn-zerolr", 0);
        let model = ModelParams::init(spec(&[2, 4, 2]), &mut rng);
        let out = local_train(&model, &xor_dataset(), 3, 0.0, 4).unwrap();
        assert!(out.update.linf_norm() == 0.0);
        assert_eq!(out.params.values(), model.values());
    }

    #[test]
    fn local_train_learns_xor() {
        // Known-learnable recipe; the seed is pinned to one verified run.
        let mut rng = substream(5, "nn-xor", 1);
        let start = ModelParams::init(spec(&[2, 4, 2]), &mut rng);
        let data = xor_dataset();
        let out = local_train(&start, &data, 2000, 0.5, 4).unwrap();
        let eval = evaluate(&out.params, &data).unwrap();
        assert_eq!(eval.accuracy, 1.0, "xor accuracy {}", eval.accuracy);
    }

    #[test]
    fn local_train_is_deterministic() {
        let mut rng = substream(9, "nn-det", 0);
        let start = ModelParams::init(spec(&[2, 4, 2]), &mut rng);
        let a = local_train(&start, &xor_dataset(), 50, 0.5, 2).unwrap();
        let b = local_train(&start, &xor_dataset(), 50, 0.5, 2).unwrap();
        assert_eq!(a.params.values(), b.params.values());
    }

    #[test]
    fn single_epoch_equals_plain_sgd_over_same_chunks() {
        let mut rng = substream(13, "nn-equiv", 0);
        let s = spec(&[2, 3, 2]);
        let start = ModelParams::init(s, &mut rng);
        let data = xor_dataset();
        let trained = local_train(&start, &data, 1, 0.25, 2).unwrap();
        let mut manual = start.clone();
        for batch in data.minibatches(2) {
            let g = compute_gradients(&manual, &batch).unwrap();
            manual = sgd_step(&manual, &g, 0.25).unwrap();
        }
        assert_eq!(trained.params.values(), manual.values());
    }

    #[test]
    fn evaluate_counts_argmax_and_ignores_row_order() {
        // Bias strongly toward class 0 regardless of input.
        let s = spec(&[2, 2]);
        let model = ModelParams::new(s, vec![0.0, 0.0, 0.0, 0.0, 5.0, 0.0]).unwrap();
        // 2 of 5 rows are class 0 -> accuracy 0.4.
        let data = Dataset::new(
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            2,
            vec![0, 1, 1, 0, 1],
            2,
        )
        .unwrap();
        let eval = evaluate(&model, &data).unwrap();
        assert!((eval.accuracy - 0.4).abs() < 1e-15);

        let reordered = data.subset(&[4, 2, 0, 3, 1]);
        let eval2 = evaluate(&model, &reordered).unwrap();
        assert_eq!(eval.accuracy, eval2.accuracy);
        assert!((eval.loss - eval2.loss).abs() < 1e-12);
    }

    #[test]
    fn perfect_fit_scores_full_accuracy() {
        let mut rng = substream(5, "nn-xor", 1);
        let start = ModelParams::init(spec(&[2, 4, 2]), &mut rng);
        let data = xor_dataset();
        let out = local_train(&start, &data, 2000, 0.5, 4).unwrap();
        assert_eq!(evaluate(&out.params, &data).unwrap().accuracy, 1.0);
    }

    #[test]
    fn unflatten_round_trip_is_identity() {
        let mut rng = substream(21, "nn-flat", 0);
        let s = spec(&[3, 5, 4, 2]);
        let model = ModelParams::init(s.clone(), &mut rng);
        let layers = model.unflatten();
        let rebuilt = ModelParams::from_layers(s, &layers).unwrap();
        assert_eq!(rebuilt.values(), model.values());
    }

    #[test]
    fn fingerprints_distinguish_specs() {
        let a = spec(&[2, 3, 2]).fingerprint();
        let b = spec(&[2, 3, 3]).fingerprint();
        let c = spec(&[2, 3, 2]).fingerprint();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
