//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use incft::network::{backward, forward, LayerKind, LayerSpec, NetworkSpec, ParamRole, ParameterSet};
use incft::rng::Prng;
use incft::tensor::Tensor;

pub const FD_STEP: f32 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-2;
/// Absolute slack for entries whose gradient is near zero, where f32 rounding
/// of the loss dominates the central difference.
pub const FD_ABS_FLOOR: f64 = 2e-3;
/// Step and relative tolerance when the numeric side runs in f64.
pub const SHADOW_STEP: f64 = 1e-5;
pub const SHADOW_REL_TOL: f64 = 1e-4;
/// Largest fraction of sampled entries allowed to be skipped as kink crossings.
pub const FD_MAX_SKIP: f64 = 0.05;

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

impl FdReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && (self.skipped as f64) <= FD_MAX_SKIP * (self.checked + self.skipped) as f64
    }

    pub fn summary(&self) -> String {
        format!(
            "{} checked, {} skipped, worst rel err {:.2e}, {} failures{}",
            self.checked,
            self.skipped,
            self.worst_rel,
            self.failures.len(),
            self.failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        )
    }
}

/// `Σ proj ⊙ logits`, accumulated in f64.
fn projected_loss(spec: &NetworkSpec, params: &ParameterSet, input: &Tensor, proj: &[f64]) -> f64 {
    let (logits, _) = forward(spec, params, input, false).unwrap();
    logits.data().iter().zip(proj).map(|(&l, &p)| l as f64 * p).sum()
}

/// Compares analytic gradients of a random linear projection of the logits
/// against central differences on up to `per_tensor` entries of each tensor.
/// Entries whose difference quotient changes materially between steps `h` and
/// `h/2` straddle a ReLU or max-pool kink and are skipped.
pub fn fd_check(spec: &NetworkSpec, params: &ParameterSet, input: &Tensor, per_tensor: usize, seed: u64) -> FdReport {
    let mut rng = Prng::from_seed(seed);
    let (logits, cache) = forward(spec, params, input, true).unwrap();
    let proj: Vec<f64> = (0..logits.len()).map(|_| rng.uniform_f64(-1.0, 1.0)).collect();
    let dlogits = Tensor::new(logits.shape().to_vec(), proj.iter().map(|&p| p as f32).collect()).unwrap();
    let grads = backward(spec, params, &cache.unwrap(), &dlogits).unwrap();

    let mut report = FdReport::default();
    let mut work = params.clone();
    for (t, param) in params.iter().enumerate() {
        let n = param.tensor.len();
        let entries: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.below(n)).collect()
        };
        for i in entries {
            let analytic = grads.tensors()[t].data()[i] as f64;
            let original = param.tensor.data()[i];
            let mut quotient = |h: f32| {
                let up = original + h;
                let down = original - h;
                work.iter_mut().nth(t).unwrap().tensor.data_mut()[i] = up;
                let lp = projected_loss(spec, &work, input, &proj);
                work.iter_mut().nth(t).unwrap().tensor.data_mut()[i] = down;
                let lm = projected_loss(spec, &work, input, &proj);
                work.iter_mut().nth(t).unwrap().tensor.data_mut()[i] = original;
                (lp - lm) / (up as f64 - down as f64)
            };
            let fd = quotient(FD_STEP);
            let fd_half = quotient(FD_STEP / 2.0);
            let scale = fd.abs().max(fd_half.abs());
            if (fd - fd_half).abs() > 0.05 * scale + 2.0 * FD_ABS_FLOOR {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let err = (analytic - fd).abs();
            let denom = analytic.abs().max(fd.abs());
            if denom > FD_ABS_FLOOR {
                report.worst_rel = report.worst_rel.max(err / denom);
            }
            if err > FD_REL_TOL * denom + FD_ABS_FLOOR {
                report.failures.push(format!("{}[{i}]: analytic {analytic:.6}, numeric {fd:.6}", param.name));
            }
        }
    }
    report
}

/// Parameters drawn from `seed` with biases moved off zero so ReLU patterns
/// depend on them.
pub fn random_params(spec: &NetworkSpec, seed: u64) -> ParameterSet {
    let mut rng = Prng::from_seed(seed);
    let mut params = ParameterSet::init(spec, &mut rng).unwrap();
    for p in params.iter_mut() {
        if p.role == ParamRole::Bias {
            for v in p.tensor.data_mut() {
                *v = rng.uniform_f32(-0.1, 0.1);
            }
        }
    }
    params
}

pub fn random_input(shape: &[usize], seed: u64) -> Tensor {
    Prng::from_seed(seed).uniform(0.0, 1.0, shape).unwrap()
}

pub fn conv(name: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        },
    )
}

pub fn dense(name: &str, in_features: usize, out_features: usize) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Dense {
            in_features,
            out_features,
        },
    )
}

pub fn relu(name: &str) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Relu)
}

pub fn pool(name: &str, window: usize, stride: usize) -> LayerSpec {
    LayerSpec::new(name, LayerKind::MaxPool2d { window, stride })
}

pub fn flatten(name: &str) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Flatten)
}

/// Small networks that each exercise one layer kind's backward pass.
pub fn layer_kind_cases() -> Vec<(&'static str, NetworkSpec)> {
    vec![
        (
            "conv2d",
            NetworkSpec::new([2, 5, 5], vec![conv("c", 2, 3, 3, 1, 1), flatten("f")], 75).unwrap(),
        ),
        (
            "conv2d stride 2",
            NetworkSpec::new([1, 7, 7], vec![conv("c", 1, 2, 3, 2, 0), flatten("f")], 18).unwrap(),
        ),
        (
            "relu",
            NetworkSpec::new([1, 1, 6], vec![flatten("f"), dense("d1", 6, 5), relu("r"), dense("d2", 5, 3)], 3)
                .unwrap(),
        ),
        (
            "maxpool2d",
            NetworkSpec::new([1, 6, 6], vec![conv("c", 1, 2, 3, 1, 1), pool("p", 2, 2), flatten("f")], 18).unwrap(),
        ),
        (
            "maxpool2d overlapping",
            NetworkSpec::new([1, 7, 7], vec![conv("c", 1, 2, 3, 1, 1), pool("p", 3, 2), flatten("f")], 18).unwrap(),
        ),
        (
            "flatten",
            NetworkSpec::new([1, 4, 4], vec![conv("c", 1, 2, 3, 1, 1), flatten("f"), dense("d", 32, 3)], 3).unwrap(),
        ),
        (
            "dense",
            NetworkSpec::new([1, 1, 6], vec![flatten("f"), dense("d", 6, 4)], 4).unwrap(),
        ),
    ]
}

/// Straight-loop f64 forward pass, independent of the engine's kernels.
/// Returns logits `[batch × classes]` in row-major order.
pub fn reference_forward(spec: &NetworkSpec, tensors: &[Vec<f64>], input: &[f64], batch: usize) -> Vec<f64> {
    let [c0, h0, w0] = spec.input_shape();
    let mut out = Vec::new();
    for b in 0..batch {
        let per = c0 * h0 * w0;
        let mut act = input[b * per..(b + 1) * per].to_vec();
        let (mut c, mut h, mut w) = (c0, h0, w0);
        let mut t = 0;
        for layer in spec.layers() {
            match layer.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (wt, bias) = (&tensors[t], &tensors[t + 1]);
                    t += 2;
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    let mut next = vec![0.0; out_channels * oh * ow];
                    for o in 0..out_channels {
                        for y in 0..oh {
                            for x in 0..ow {
                                let mut s = bias[o];
                                for i in 0..in_channels {
                                    for ky in 0..kernel {
                                        for kx in 0..kernel {
                                            let iy = (y * stride + ky) as isize - padding as isize;
                                            let ix = (x * stride + kx) as isize - padding as isize;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                                continue;
                                            }
                                            s += wt[((o * in_channels + i) * kernel + ky) * kernel + kx]
                                                * act[(i * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                                next[(o * oh + y) * ow + x] = s;
                            }
                        }
                    }
                    act = next;
                    (c, h, w) = (out_channels, oh, ow);
                }
                LayerKind::Relu => act.iter_mut().for_each(|v| *v = v.max(0.0)),
                LayerKind::MaxPool2d { window, stride } => {
                    let oh = (h - window) / stride + 1;
                    let ow = (w - window) / stride + 1;
                    let mut next = vec![0.0; c * oh * ow];
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let mut m = f64::NEG_INFINITY;
                                for ky in 0..window {
                                    for kx in 0..window {
                                        m = m.max(act[(ch * h + y * stride + ky) * w + x * stride + kx]);
                                    }
                                }
                                next[(ch * oh + y) * ow + x] = m;
                            }
                        }
                    }
                    act = next;
                    (h, w) = (oh, ow);
                }
                LayerKind::Flatten => {
                    (c, h, w) = (c * h * w, 1, 1);
                }
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => {
                    let (wt, bias) = (&tensors[t], &tensors[t + 1]);
                    t += 2;
                    act = (0..out_features)
                        .map(|o| bias[o] + (0..in_features).map(|i| wt[i * out_features + o] * act[i]).sum::<f64>())
                        .collect();
                    (c, h, w) = (out_features, 1, 1);
                }
            }
        }
        out.extend(act);
    }
    out
}

/// Like [`fd_check`], but differentiates [`reference_forward`] in f64 with
/// [`SHADOW_STEP`], so the numeric side is free of f32 rounding and almost
/// never straddles a kink. Also checks the engine's logits against the
/// reference.
pub fn fd_check_f64(spec: &NetworkSpec, params: &ParameterSet, input: &Tensor, per_tensor: usize, seed: u64) -> FdReport {
    let step = SHADOW_STEP;
    let mut rng = Prng::from_seed(seed);
    let batch = input.shape()[0];
    let (logits, cache) = forward(spec, params, input, true).unwrap();
    let proj: Vec<f64> = (0..logits.len()).map(|_| rng.uniform_f64(-1.0, 1.0)).collect();
    let dlogits = Tensor::new(logits.shape().to_vec(), proj.iter().map(|&p| p as f32).collect()).unwrap();
    let grads = backward(spec, params, &cache.unwrap(), &dlogits).unwrap();

    let x: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let mut tensors: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.tensor.data().iter().map(|&v| v as f64).collect())
        .collect();
    let loss = |tensors: &[Vec<f64>]| -> f64 {
        reference_forward(spec, tensors, &x, batch)
            .iter()
            .zip(&proj)
            .map(|(l, p)| l * p)
            .sum()
    };
    let reference_logits = reference_forward(spec, &tensors, &x, batch);
    let mut report = FdReport::default();
    for (i, (&a, &b)) in logits.data().iter().zip(&reference_logits).enumerate() {
        if (a as f64 - b).abs() > 1e-4 * (1.0 + b.abs()) {
            report.failures.push(format!("logit {i}: engine {a}, reference {b}"));
        }
    }
    for (t, param) in params.iter().enumerate() {
        let n = param.tensor.len();
        let entries: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.below(n)).collect()
        };
        for i in entries {
            let analytic = grads.tensors()[t].data()[i] as f64;
            let original = tensors[t][i];
            tensors[t][i] = original + step;
            let lp = loss(&tensors);
            tensors[t][i] = original - step;
            let lm = loss(&tensors);
            tensors[t][i] = original;
            let fd = (lp - lm) / (2.0 * step);
            report.checked += 1;
            let err = (analytic - fd).abs();
            let denom = analytic.abs().max(fd.abs());
            if denom > 1e-6 {
                report.worst_rel = report.worst_rel.max(err / denom);
            }
            if err > SHADOW_REL_TOL * denom + 1e-6 {
                report.failures.push(format!("{}[{i}]: analytic {analytic:.6}, numeric {fd:.6}", param.name));
            }
        }
    }
    report
}
