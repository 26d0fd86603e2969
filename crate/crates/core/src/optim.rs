//! Sparse categorical cross-entropy, masked Adam and the epoch loop.

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::network::{backward_layers, forward_layers, Gradients, NetworkSpec, ParameterSet};
use crate::rng::Prng;
use crate::tensor::{argmax, Tensor};

pub const LR_INITIAL: f32 = 0.001;
pub const LR_FINE_TUNE: f32 = 0.000_001;

/// Mean over the batch of `−log softmax(logits)[label]` and its gradient
/// `(softmax − onehot) / B`. Rows are max-shifted before exponentiation and
/// the arithmetic runs in `f64`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (b, c) = match logits.shape() {
        [b, c] => (*b, *c),
        s => return Err(Error::Shape(format!("logits must be [B, C], got {s:?}"))),
    };
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{c}")));
    }
    let mut grad = Vec::with_capacity(b * c);
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += sum.ln() - (row[label] as f64 - max);
        for (j, e) in exps.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push(((e / sum - onehot) / b as f64) as f32);
        }
    }
    Ok(((total / b as f64) as f32, Tensor::new(vec![b, c], grad)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Zeroed moments mirroring `params`, β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(params: &ParameterSet, lr: f32) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Rebuilds a state from stored moments (checkpoint loading).
    pub fn from_parts(
        lr: f32,
        beta1: f32,
        beta2: f32,
        epsilon: f32,
        t: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Shape("Adam first and second moments differ in shape".into()));
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            epsilon,
            t,
            m,
            v,
        })
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

/// One bias-corrected Adam update of every trainable tensor. Frozen tensors and
/// their moments are left untouched. The step counter advances once per call.
pub fn adam_step(params: &mut ParameterSet, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let shape = p.tensor.shape();
        if grads.tensors()[i].shape() != shape || state.m[i].shape() != shape || state.v[i].shape() != shape {
            return Err(Error::Shape(format!("{}: gradient or moment shape differs from {shape:?}", p.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = (1.0 - (state.beta1 as f64).powi(t)) as f32;
    let bc2 = (1.0 - (state.beta2 as f64).powi(t)) as f32;
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.epsilon);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let g = grads.tensors()[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((theta, &g), m), v) in p.tensor.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f32,
    /// Fraction of samples classified correctly during the epoch's forward passes.
    pub accuracy: f32,
}

/// Trains on `data` for `config.epochs` epochs.
///
/// Each epoch shuffles a fresh identity ordering with `rng`, then walks it in
/// batches of `batch_size` with a ragged final batch. Layers below the first
/// trainable one are evaluated once per call and reused; since every sample is
/// computed independently this is bitwise identical to running them per batch.
pub fn train_phase(
    spec: &NetworkSpec,
    params: &mut ParameterSet,
    state: &mut AdamState,
    data: &[&LabeledImage],
    config: TrainConfig,
    rng: &mut Prng,
) -> Result<Vec<EpochStats>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
    }
    let [c, h, w] = spec.input_shape();
    if let Some(img) = data.iter().find(|i| i.pixels.shape() != [c, h, w]) {
        return Err(Error::Shape(format!(
            "image {:?} has shape {:?}, network expects [{c}, {h}, {w}]",
            img.id(),
            img.pixels.shape()
        )));
    }
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    let layers = spec.layers().len();
    let start = params.first_trainable_layer().unwrap_or(layers);
    let features = frozen_features(spec, params, data, start)?;
    let feat_len = features.len() / data.len();
    let labels: Vec<usize> = data.iter().map(|i| i.label.id()).collect();

    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = Vec::with_capacity(data.len());
    let mut batch_in = Vec::new();
    for epoch in 0..config.epochs {
        order.clear();
        order.extend(0..data.len());
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            batch_in.clear();
            for &i in chunk {
                batch_in.extend_from_slice(&features[i * feat_len..(i + 1) * feat_len]);
            }
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = forward_layers(spec, params, &batch_in, chunk.len(), start, layers, true)?;
            let logits = Tensor::new(vec![chunk.len(), spec.class_count()], logits)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &batch_labels)?;
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += logits
                .data()
                .chunks_exact(spec.class_count())
                .zip(&batch_labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            if start < layers {
                let cache = cache.expect("training forward returns a cache");
                let grads = backward_layers(spec, params, &cache, &dlogits, start)?;
                adam_step(params, &grads, state)?;
            }
        }
        trace.push(EpochStats {
            epoch: epoch + 1,
            mean_loss: (loss_sum / data.len() as f64) as f32,
            accuracy: correct as f32 / data.len() as f32,
        });
    }
    Ok(trace)
}

/// Activations entering layer `start` for every image, concatenated.
fn frozen_features(
    spec: &NetworkSpec,
    params: &ParameterSet,
    data: &[&LabeledImage],
    start: usize,
) -> Result<Vec<f32>> {
    const CHUNK: usize = 64;
    let mut out = Vec::new();
    for chunk in data.chunks(CHUNK) {
        let mut buf = Vec::with_capacity(chunk.len() * chunk[0].pixels.len());
        for img in chunk {
            buf.extend_from_slice(img.pixels.data());
        }
        if start == 0 {
            out.extend(buf);
        } else {
            let (f, _) = forward_layers(spec, params, &buf, chunk.len(), 0, start, false)?;
            out.extend(f);
        }
    }
    Ok(out)
}

/// Class predictions for `images`, batched for memory only.
pub fn predict(spec: &NetworkSpec, params: &ParameterSet, images: &[&LabeledImage]) -> Result<Vec<usize>> {
    const CHUNK: usize = 64;
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let mut buf = Vec::with_capacity(chunk.len() * chunk[0].pixels.len());
        for img in chunk {
            buf.extend_from_slice(img.pixels.data());
        }
        let (logits, _) = forward_layers(spec, params, &buf, chunk.len(), 0, spec.layers().len(), false)?;
        preds.extend(logits.chunks_exact(spec.class_count()).map(argmax));
    }
    Ok(preds)
}

/// Fraction of `images` whose argmax logit equals the label.
pub fn accuracy(spec: &NetworkSpec, params: &ParameterSet, images: &[&LabeledImage]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let preds = predict(spec, params, images)?;
    let correct = preds
        .iter()
        .zip(images)
        .filter(|(&p, img)| p == img.label.id())
        .count();
    Ok(correct as f64 / images.len() as f64)
}
