//! Convolutional classifier: layer descriptions, He-uniform initialization,
//! cached forward pass and hand-written backward pass.
//!
//! Activations are laid out `[batch, channels, height, width]` (or
//! `[batch, features]` after flattening). Conv weights are `[out, in, k, k]`,
//! dense weights `[in, out]`. Every sample is computed independently and
//! gradient contributions are summed in sample order, so results never
//! depend on batch composition or call site.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, lane_sum, Tensor};

pub const DEFAULT_CLASS_COUNT: usize = 5;
pub const DEFAULT_CONV_CHANNELS: [usize; 5] = [8, 16, 32, 64, 128];
pub const DEFAULT_HIDDEN_WIDTH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }
}

/// Shape of one sample's activation between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Image { c: usize, h: usize, w: usize },
    Vector(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Image { c, h, w } => c * h * w,
            ActShape::Vector(n) => n,
        }
    }

    fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Image { c, h, w } => vec![c, h, w],
            ActShape::Vector(n) => vec![n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    class_count: usize,
}

impl NetworkSpec {
    /// Validates shape propagation: every layer must accept its input and the
    /// final output must be a `class_count` vector.
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>, class_count: usize) -> Result<Self> {
        let spec = NetworkSpec {
            input_shape,
            layers,
            class_count,
        };
        let mut names = std::collections::HashSet::new();
        for layer in &spec.layers {
            if !names.insert(layer.name.as_str()) {
                return Err(Error::Shape(format!("duplicate layer name {:?}", layer.name)));
            }
        }
        let shapes = spec.propagate()?;
        match shapes.last() {
            Some(ActShape::Vector(n)) if *n == class_count => Ok(spec),
            Some(s) => Err(Error::Shape(format!(
                "network ends in {s:?}, expected a vector of {class_count} logits"
            ))),
            None => unreachable!("propagate always yields the input shape"),
        }
    }

    /// Five sections of [3×3 same conv, ReLU, 2×2 max-pool] with channels
    /// 8→16→32→64→128, then flatten, dense→128, ReLU, dense→`class_count`.
    pub fn default_for(input_shape: [usize; 3], class_count: usize) -> Result<Self> {
        let [channels, h, w] = input_shape;
        if h < 32 || w < 32 {
            return Err(Error::Shape(format!(
                "input {h}×{w} is too small for 5 pooling stages (need at least 32×32)"
            )));
        }
        let mut layers = Vec::new();
        let mut in_ch = channels;
        let (mut oh, mut ow) = (h, w);
        for (i, &out_ch) in DEFAULT_CONV_CHANNELS.iter().enumerate() {
            let s = i + 1;
            layers.push(LayerSpec::new(
                format!("conv{s}"),
                LayerKind::Conv2d {
                    in_channels: in_ch,
                    out_channels: out_ch,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
            ));
            layers.push(LayerSpec::new(format!("relu{s}"), LayerKind::Relu));
            layers.push(LayerSpec::new(
                format!("pool{s}"),
                LayerKind::MaxPool2d { window: 2, stride: 2 },
            ));
            in_ch = out_ch;
            oh /= 2;
            ow /= 2;
        }
        layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
        layers.push(LayerSpec::new(
            "dense1",
            LayerKind::Dense {
                in_features: in_ch * oh * ow,
                out_features: DEFAULT_HIDDEN_WIDTH,
            },
        ));
        layers.push(LayerSpec::new("relu_dense", LayerKind::Relu));
        layers.push(LayerSpec::new(
            "dense2",
            LayerKind::Dense {
                in_features: DEFAULT_HIDDEN_WIDTH,
                out_features: class_count,
            },
        ));
        NetworkSpec::new(input_shape, layers, class_count)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Per-sample activation shapes: the input followed by each layer's output.
    pub fn shapes(&self) -> Vec<ActShape> {
        self.propagate().expect("validated at construction")
    }

    fn propagate(&self) -> Result<Vec<ActShape>> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("zero extent in input shape {:?}", self.input_shape)));
        }
        let mut cur = ActShape::Image { c, h, w };
        let mut out = vec![cur];
        for layer in &self.layers {
            cur = next_shape(layer, cur)?;
            out.push(cur);
        }
        Ok(out)
    }

    /// Shapes of the learnable tensors, in parameter order.
    pub fn param_layout(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let (w_shape, b_len, class) = match layer.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (
                    vec![out_channels, in_channels, kernel, kernel],
                    out_channels,
                    LayerClass::Conv,
                ),
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => (vec![in_features, out_features], out_features, LayerClass::Dense),
                _ => continue,
            };
            slots.push(ParamSlot {
                name: format!("{}.weight", layer.name),
                layer: idx,
                role: ParamRole::Weight,
                class,
                shape: w_shape,
            });
            slots.push(ParamSlot {
                name: format!("{}.bias", layer.name),
                layer: idx,
                role: ParamRole::Bias,
                class,
                shape: vec![b_len],
            });
        }
        slots
    }
}

fn next_shape(layer: &LayerSpec, cur: ActShape) -> Result<ActShape> {
    let bad = |msg: String| Err(Error::Shape(format!("layer {:?}: {msg}", layer.name)));
    match (layer.kind, cur) {
        (
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            ActShape::Image { c, h, w },
        ) => {
            if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                return bad("conv extents must be positive".into());
            }
            if c != in_channels {
                return bad(format!("expects {in_channels} channels, got {c}"));
            }
            if h + 2 * padding < kernel || w + 2 * padding < kernel {
                return bad(format!("kernel {kernel} larger than padded input {h}×{w}"));
            }
            Ok(ActShape::Image {
                c: out_channels,
                h: (h + 2 * padding - kernel) / stride + 1,
                w: (w + 2 * padding - kernel) / stride + 1,
            })
        }
        (LayerKind::Relu, s) => Ok(s),
        (LayerKind::MaxPool2d { window, stride }, ActShape::Image { c, h, w }) => {
            if window == 0 || stride == 0 {
                return bad("pool extents must be positive".into());
            }
            if window > h || window > w {
                return bad(format!("pool window {window} exceeds spatial extent {h}×{w}"));
            }
            Ok(ActShape::Image {
                c,
                h: (h - window) / stride + 1,
                w: (w - window) / stride + 1,
            })
        }
        (LayerKind::Flatten, s) => Ok(ActShape::Vector(s.numel())),
        (
            LayerKind::Dense {
                in_features,
                out_features,
            },
            ActShape::Vector(n),
        ) => {
            if in_features == 0 || out_features == 0 {
                return bad("dense extents must be positive".into());
            }
            if n != in_features {
                return bad(format!("expects {in_features} features, got {n}"));
            }
            Ok(ActShape::Vector(out_features))
        }
        (kind, s) => bad(format!("{kind:?} cannot consume activation {s:?}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerClass {
    Conv,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub layer: usize,
    pub role: ParamRole,
    pub class: LayerClass,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub layer: usize,
    pub role: ParamRole,
    pub class: LayerClass,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Learnable tensors of a network, in layer order with weights before biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    params: Vec<Parameter>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMode {
    /// Every conv tensor frozen; dense layers train.
    #[serde(alias = "conv")]
    FreezeConvSections,
    /// Only the final dense layer trains.
    #[serde(alias = "all-but-last")]
    FreezeAllButLast,
    None,
}

impl std::str::FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" | "freeze-conv-sections" => Ok(FreezeMode::FreezeConvSections),
            "all-but-last" | "freeze-all-but-last" => Ok(FreezeMode::FreezeAllButLast),
            "none" => Ok(FreezeMode::None),
            other => Err(Error::Config(format!(
                "unknown freeze mode {other:?} (expected conv, all-but-last or none)"
            ))),
        }
    }
}

impl ParameterSet {
    /// He-uniform weights (bound √(6/fan_in)) drawn in parameter order, zero biases.
    pub fn init(spec: &NetworkSpec, rng: &mut Prng) -> Result<Self> {
        let mut params = Vec::new();
        for slot in spec.param_layout() {
            let tensor = match slot.role {
                ParamRole::Weight => {
                    let fan_in: usize = match slot.class {
                        LayerClass::Conv => slot.shape[1..].iter().product(),
                        LayerClass::Dense => slot.shape[0],
                    };
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    rng.uniform(-bound, bound, &slot.shape)?
                }
                ParamRole::Bias => Tensor::zeros(&slot.shape),
            };
            params.push(Parameter {
                name: slot.name,
                layer: slot.layer,
                role: slot.role,
                class: slot.class,
                tensor,
                trainable: true,
            });
        }
        Ok(ParameterSet { params })
    }

    /// Rebuilds a set from raw tensors, checking them against the spec layout.
    pub fn from_tensors(spec: &NetworkSpec, tensors: Vec<(Tensor, bool)>) -> Result<Self> {
        let layout = spec.param_layout();
        if layout.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "spec has {} learnable tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        let params = layout
            .into_iter()
            .zip(tensors)
            .map(|(slot, (tensor, trainable))| {
                if tensor.shape() != slot.shape.as_slice() {
                    return Err(Error::Shape(format!(
                        "{}: expected {:?}, got {:?}",
                        slot.name,
                        slot.shape,
                        tensor.shape()
                    )));
                }
                Ok(Parameter {
                    name: slot.name,
                    layer: slot.layer,
                    role: slot.role,
                    class: slot.class,
                    tensor,
                    trainable,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ParameterSet { params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, index: usize) -> Option<&Parameter> {
        self.params.get(index)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).count()
    }

    /// Sets the trainable flags for `mode`; every tensor outside the frozen
    /// selection becomes trainable.
    pub fn set_freeze_boundary(&mut self, mode: FreezeMode) {
        let last_dense = self
            .params
            .iter()
            .filter(|p| p.class == LayerClass::Dense)
            .map(|p| p.layer)
            .max();
        for p in &mut self.params {
            p.trainable = match mode {
                FreezeMode::None => true,
                FreezeMode::FreezeConvSections => p.class != LayerClass::Conv,
                FreezeMode::FreezeAllButLast => Some(p.layer) == last_dense,
            };
        }
    }

    fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let layout = spec.param_layout();
        if layout.len() != self.params.len()
            || layout
                .iter()
                .zip(&self.params)
                .any(|(s, p)| s.shape != p.tensor.shape() || s.layer != p.layer)
        {
            return Err(Error::Shape("parameter set does not match network spec".into()));
        }
        Ok(())
    }

    /// Index of the first layer that owns a trainable tensor.
    pub(crate) fn first_trainable_layer(&self) -> Option<usize> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.layer).min()
    }

    /// (weight, bias) parameter indices for each layer, `None` for layers without parameters.
    fn layer_index(&self, layer_count: usize) -> Vec<Option<usize>> {
        let mut idx = vec![None; layer_count];
        for (i, p) in self.params.iter().enumerate() {
            if p.role == ParamRole::Weight {
                idx[p.layer] = Some(i);
            }
        }
        idx
    }
}

/// Builds the default architecture and initializes it from `seed`.
pub fn build_default_network(
    input_shape: [usize; 3],
    class_count: usize,
    seed: u64,
) -> Result<(NetworkSpec, ParameterSet)> {
    let spec = NetworkSpec::default_for(input_shape, class_count)?;
    let params = ParameterSet::init(&spec, &mut Prng::from_seed(seed))?;
    Ok((spec, params))
}

/// One gradient tensor per learnable tensor, aligned with the `ParameterSet`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Gradients {
            tensors: params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect(),
        }
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Gradients { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv { input: Vec<f32> },
    Relu { input: Vec<f32> },
    MaxPool { argmax: Vec<u32> },
    Flatten,
    Dense { input: Vec<f32> },
}

/// Per-layer values stashed by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    first_layer: usize,
    shapes: Vec<ActShape>,
    entries: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Runs the network on `batch` (`[B, C, H, W]`), returning logits `[B, classes]`
/// and, when `training` is set, the cache needed by [`backward`].
pub fn forward(
    spec: &NetworkSpec,
    params: &ParameterSet,
    batch: &Tensor,
    training: bool,
) -> Result<(Tensor, Option<ForwardCache>)> {
    let [c, h, w] = spec.input_shape();
    let b = match batch.shape() {
        [b, bc, bh, bw] if (*bc, *bh, *bw) == (c, h, w) => *b,
        s => {
            return Err(Error::Shape(format!(
                "batch shape {s:?} does not match network input [B, {c}, {h}, {w}]"
            )))
        }
    };
    let (out, cache) = forward_layers(spec, params, batch.data(), b, 0, spec.layers().len(), training)?;
    Ok((Tensor::new(vec![b, spec.class_count()], out)?, cache))
}

/// Runs layers `start..end` on a flat activation buffer holding `batch` samples
/// shaped like the input of layer `start`.
pub(crate) fn forward_layers(
    spec: &NetworkSpec,
    params: &ParameterSet,
    input: &[f32],
    batch: usize,
    start: usize,
    end: usize,
    training: bool,
) -> Result<(Vec<f32>, Option<ForwardCache>)> {
    params.check_against(spec)?;
    let shapes = spec.shapes();
    if start > end || end > spec.layers().len() {
        return Err(Error::InvalidArgument(format!("layer range {start}..{end}")));
    }
    if batch == 0 || input.len() != batch * shapes[start].numel() {
        return Err(Error::Shape(format!(
            "activation buffer of {} values does not hold {batch} samples of {:?}",
            input.len(),
            shapes[start]
        )));
    }
    let index = params.layer_index(spec.layers().len());
    let mut entries = Vec::new();
    let mut act = input.to_vec();
    for l in start..end {
        let kind = spec.layers()[l].kind;
        let (in_shape, out_shape) = (shapes[l], shapes[l + 1]);
        let next = match kind {
            LayerKind::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let wi = index[l].expect("conv layer owns parameters");
                let geom = ConvGeom::new(in_shape, out_shape, kernel, stride, padding);
                let out = conv_forward(
                    &act,
                    batch,
                    &geom,
                    params.params[wi].tensor.data(),
                    params.params[wi + 1].tensor.data(),
                );
                if training {
                    entries.push(LayerCache::Conv { input: act });
                }
                out
            }
            LayerKind::Relu => {
                let out = act.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
                if training {
                    entries.push(LayerCache::Relu { input: act });
                }
                out
            }
            LayerKind::MaxPool2d { window, stride } => {
                let (out, argmax) = maxpool_forward(&act, batch, in_shape, out_shape, window, stride);
                if training {
                    entries.push(LayerCache::MaxPool { argmax });
                }
                out
            }
            LayerKind::Flatten => {
                if training {
                    entries.push(LayerCache::Flatten);
                }
                act
            }
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                let wi = index[l].expect("dense layer owns parameters");
                let bias = params.params[wi + 1].tensor.data();
                let mut out = Vec::with_capacity(batch * out_features);
                for _ in 0..batch {
                    out.extend_from_slice(bias);
                }
                gemm_acc(
                    &act,
                    params.params[wi].tensor.data(),
                    &mut out,
                    batch,
                    in_features,
                    out_features,
                );
                if training {
                    entries.push(LayerCache::Dense { input: act });
                }
                out
            }
        };
        act = next;
    }
    let cache = training.then(|| ForwardCache {
        batch,
        first_layer: start,
        shapes: shapes[start..=end].to_vec(),
        entries,
    });
    Ok((act, cache))
}

/// Exact gradients of a scalar loss whose logit gradient is `dlogits`, for
/// every learnable tensor regardless of its trainable flag.
pub fn backward(
    spec: &NetworkSpec,
    params: &ParameterSet,
    cache: &ForwardCache,
    dlogits: &Tensor,
) -> Result<Gradients> {
    if cache.first_layer != 0 {
        return Err(Error::InvalidArgument(
            "cache does not cover the whole network".into(),
        ));
    }
    backward_layers(spec, params, cache, dlogits, 0)
}

/// Backpropagates through the cached layers down to `stop_layer`. Layers below
/// it receive zero gradients and no input gradient is formed for `stop_layer`.
pub(crate) fn backward_layers(
    spec: &NetworkSpec,
    params: &ParameterSet,
    cache: &ForwardCache,
    dlogits: &Tensor,
    stop_layer: usize,
) -> Result<Gradients> {
    params.check_against(spec)?;
    let layers = spec.layers();
    let expected_entries = layers.len() - cache.first_layer;
    if cache.entries.len() != expected_entries || cache.shapes != spec.shapes()[cache.first_layer..] {
        return Err(Error::InvalidArgument(format!(
            "cache holds {} layers, network segment has {expected_entries}",
            cache.entries.len()
        )));
    }
    let batch = cache.batch;
    if dlogits.shape() != [batch, spec.class_count()] {
        return Err(Error::Shape(format!(
            "dlogits shape {:?} does not match cached batch [{batch}, {}]",
            dlogits.shape(),
            spec.class_count()
        )));
    }
    let stop = stop_layer.max(cache.first_layer);
    let shapes = spec.shapes();
    let index = params.layer_index(layers.len());
    let mut grads = Gradients::zeros_like(params);
    let mut dy = dlogits.data().to_vec();

    for l in (stop..layers.len()).rev() {
        let entry = &cache.entries[l - cache.first_layer];
        let need_dx = l > stop;
        let (in_shape, out_shape) = (shapes[l], shapes[l + 1]);
        let dx = match (layers[l].kind, entry) {
            (
                LayerKind::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                },
                LayerCache::Conv { input },
            ) => {
                let wi = index[l].expect("conv layer owns parameters");
                let geom = ConvGeom::new(in_shape, out_shape, kernel, stride, padding);
                let (gw, gb) = two_mut(&mut grads.tensors, wi);
                conv_backward(
                    input,
                    &dy,
                    batch,
                    &geom,
                    params.params[wi].tensor.data(),
                    gw.data_mut(),
                    gb.data_mut(),
                    need_dx,
                )
            }
            (LayerKind::Relu, LayerCache::Relu { input }) => Some(
                input
                    .iter()
                    .zip(&dy)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
            ),
            (LayerKind::MaxPool2d { .. }, LayerCache::MaxPool { argmax }) => {
                let in_len = in_shape.numel();
                let out_len = out_shape.numel();
                let mut dx = vec![0.0; batch * in_len];
                for s in 0..batch {
                    let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                    for o in 0..out_len {
                        dxs[argmax[s * out_len + o] as usize] += dy[s * out_len + o];
                    }
                }
                Some(dx)
            }
            (LayerKind::Flatten, LayerCache::Flatten) => Some(dy),
            (
                LayerKind::Dense {
                    in_features,
                    out_features,
                },
                LayerCache::Dense { input },
            ) => {
                let wi = index[l].expect("dense layer owns parameters");
                let (gw, gb) = two_mut(&mut grads.tensors, wi);
                gemm_at_b_acc(input, &dy, gw.data_mut(), batch, in_features, out_features);
                let gb = gb.data_mut();
                for row in dy.chunks_exact(out_features) {
                    for (g, &d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
                need_dx.then(|| {
                    let mut dx = vec![0.0; batch * in_features];
                    gemm_a_bt_acc(
                        &dy,
                        params.params[wi].tensor.data(),
                        &mut dx,
                        batch,
                        out_features,
                        in_features,
                    );
                    dx
                })
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "cache entry for layer {:?} does not match its kind",
                    layers[l].name
                )))
            }
        };
        if !need_dx {
            break;
        }
        dy = dx.expect("input gradient requested");
    }
    Ok(grads)
}

fn two_mut(v: &mut [Tensor], i: usize) -> (&mut Tensor, &mut Tensor) {
    let (a, b) = v.split_at_mut(i + 1);
    (&mut a[i], &mut b[0])
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(input: ActShape, output: ActShape, k: usize, stride: usize, pad: usize) -> Self {
        match (input, output) {
            (ActShape::Image { c, h, w }, ActShape::Image { c: co, h: ho, w: wo }) => ConvGeom {
                cin: c,
                h,
                w,
                cout: co,
                ho,
                wo,
                k,
                stride,
                pad,
            },
            _ => unreachable!("conv shapes validated by the spec"),
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Calls `f(row, oy, input_offset, ox_lo, ox_hi)` for every kernel tap and
    /// output row whose input row lies inside the image; `ox_lo..ox_hi` are the
    /// output columns whose input column is inside too, the first of which
    /// reads `input_offset`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        for ci in 0..self.cin {
            for ky in 0..self.k {
                let (oy_lo, oy_hi) = valid_range(ky, self.pad, self.stride, self.h, self.ho);
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let (ox_lo, ox_hi) = valid_range(kx, self.pad, self.stride, self.w, self.wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.pad;
                        let ix = ox_lo * self.stride + kx - self.pad;
                        f(row, oy, (ci * self.h + iy) * self.w + ix, ox_lo, ox_hi);
                    }
                }
            }
        }
    }

    /// Writes one sample's patches into columns `offset..offset + P` of a
    /// column matrix whose rows are `row_len` long. Padding taps are left as
    /// they are, so the caller zeroes the matrix first.
    fn im2col(&self, x: &[f32], col: &mut [f32], row_len: usize, offset: usize) {
        let (wo, s) = (self.wo, self.stride);
        self.for_each_run(|row, oy, src, lo, hi| {
            let dst = &mut col[row * row_len + offset + oy * wo..][lo..hi];
            if s == 1 {
                dst.copy_from_slice(&x[src..src + (hi - lo)]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = x[src + j * s];
                }
            }
        });
    }

    fn col2im_acc(&self, col: &[f32], row_len: usize, offset: usize, dx: &mut [f32]) {
        let (wo, s) = (self.wo, self.stride);
        self.for_each_run(|row, oy, src, lo, hi| {
            let from = &col[row * row_len + offset + oy * wo..][lo..hi];
            for (j, &v) in from.iter().enumerate() {
                dx[src + j * s] += v;
            }
        });
    }

    /// Samples per column-matrix group, bounding its size to about 4 MiB.
    fn group(&self, batch: usize) -> usize {
        const BUDGET: usize = 1 << 17;
        (BUDGET / (self.rows() * self.cols())).clamp(1, batch.max(1))
    }
}

/// Output positions `lo..hi` whose input coordinate `o·stride + k_off − pad`
/// falls inside `0..extent`.
fn valid_range(k_off: usize, pad: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > k_off {
        (extent + pad - k_off).div_ceil(stride).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Samples are processed in groups whose patches share one column matrix
/// `[R, G·P]`; each output is still `bias + Σ_r w·x` over `r` ascending, so the
/// grouping does not affect forward results.
fn conv_forward(x: &[f32], batch: usize, g: &ConvGeom, weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let (r, p) = (g.rows(), g.cols());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let group = g.group(batch);
    let mut col = vec![0.0; r * group * p];
    let mut acc = vec![0.0; g.cout * group * p];
    let mut out = vec![0.0; batch * out_len];
    for first in (0..batch).step_by(group) {
        let n = group.min(batch - first);
        let row_len = n * p;
        let col = &mut col[..r * row_len];
        let acc = &mut acc[..g.cout * row_len];
        col.fill(0.0);
        for j in 0..n {
            let s = first + j;
            g.im2col(&x[s * in_len..(s + 1) * in_len], col, row_len, j * p);
        }
        for (co, row) in acc.chunks_exact_mut(row_len).enumerate() {
            row.fill(bias[co]);
        }
        gemm_acc(weight, col, acc, g.cout, r, row_len);
        for j in 0..n {
            let ys = &mut out[(first + j) * out_len..(first + j + 1) * out_len];
            for co in 0..g.cout {
                ys[co * p..(co + 1) * p].copy_from_slice(&acc[co * row_len + j * p..][..p]);
            }
        }
    }
    out
}

/// Weight gradients are lane-split dot products over each group's `G·P`
/// columns, added to the running total group by group.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f32],
    dy: &[f32],
    batch: usize,
    g: &ConvGeom,
    weight: &[f32],
    gw: &mut [f32],
    gb: &mut [f32],
    need_dx: bool,
) -> Option<Vec<f32>> {
    let (r, p) = (g.rows(), g.cols());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let group = g.group(batch);
    let mut col = vec![0.0; r * group * p];
    let mut dcol = vec![0.0; r * group * p];
    let mut dyg = vec![0.0; g.cout * group * p];
    let mut dx = need_dx.then(|| vec![0.0; batch * in_len]);
    for first in (0..batch).step_by(group) {
        let n = group.min(batch - first);
        let row_len = n * p;
        let col = &mut col[..r * row_len];
        let dyg = &mut dyg[..g.cout * row_len];
        col.fill(0.0);
        for j in 0..n {
            let s = first + j;
            g.im2col(&x[s * in_len..(s + 1) * in_len], col, row_len, j * p);
            let dys = &dy[s * out_len..(s + 1) * out_len];
            for co in 0..g.cout {
                dyg[co * row_len + j * p..][..p].copy_from_slice(&dys[co * p..(co + 1) * p]);
            }
        }
        gemm_a_bt_acc(dyg, col, gw, g.cout, row_len, r);
        for (co, row) in dyg.chunks_exact(row_len).enumerate() {
            gb[co] += lane_sum(row);
        }
        if let Some(dx) = dx.as_mut() {
            let dcol = &mut dcol[..r * row_len];
            dcol.fill(0.0);
            gemm_at_b_acc(weight, dyg, dcol, g.cout, r, row_len);
            for j in 0..n {
                let s = first + j;
                g.col2im_acc(dcol, row_len, j * p, &mut dx[s * in_len..(s + 1) * in_len]);
            }
        }
    }
    dx
}

fn maxpool_forward(
    x: &[f32],
    batch: usize,
    input: ActShape,
    output: ActShape,
    window: usize,
    stride: usize,
) -> (Vec<f32>, Vec<u32>) {
    let (ActShape::Image { c, h, w }, ActShape::Image { h: ho, w: wo, .. }) = (input, output) else {
        unreachable!("pool shapes validated by the spec")
    };
    let in_len = c * h * w;
    let out_len = c * ho * wo;
    let mut out = vec![0.0; batch * out_len];
    let mut argmax = vec![0u32; batch * out_len];
    for s in 0..batch {
        let xs = &x[s * in_len..(s + 1) * in_len];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (ch * h + oy * stride) * w + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = (ch * h + oy * stride + dy) * w + ox * stride + dx;
                            if xs[i] > xs[best] {
                                best = i;
                            }
                        }
                    }
                    let o = s * out_len + (ch * ho + oy) * wo + ox;
                    out[o] = xs[best];
                    argmax[o] = best as u32;
                }
            }
        }
    }
    (out, argmax)
}

/// Per-sample activation dimensions after layer `l` (test and tooling helper).
pub fn output_dims(spec: &NetworkSpec, l: usize) -> Vec<usize> {
    spec.shapes()[l + 1].dims()
}
