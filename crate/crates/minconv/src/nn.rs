//! Layer zoo and network builder.
//!
//! Two reference architectures are provided, `lenet` and `mini_cifar`, with
//! every convolution switchable between exact and min-approximate mode. The
//! training-phase forward of an approximate convolution follows the
//! approximate-forward / exact-backward recipe: update the running input
//! statistic, clip inputs and weights to twice their mean magnitude, rescale
//! the weights, run the smin kernel, and stash the clipped operands so the
//! backward pass can differentiate the exact convolution instead.

use crate::approx::{self, AbsMeanStats, ApproxConvLayer, ConvMode, OpCounter, Phase};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape2D, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default negative slope of the leaky ReLU after each convolution.
pub const LEAKY_SLOPE: f64 = 0.1;

/// One layer of a network description.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv { out_channels: usize, fh: usize, fw: usize, mode: ConvMode },
    MaxPool2,
    LeakyRelu { slope: f64 },
    Relu,
    FullyConnected { out_dim: usize },
    Dropout { rate: f64 },
    SoftmaxXent,
}

/// Ordered layer list plus the input shape it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    /// Input `(channels, height, width)`.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

/// Shape of the data flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flow {
    Spatial { c: usize, h: usize, w: usize },
    Flat { dim: usize },
}

impl Flow {
    fn dim(&self) -> usize {
        match *self {
            Flow::Spatial { c, h, w } => c * h * w,
            Flow::Flat { dim } => dim,
        }
    }
}

impl NetworkSpec {
    /// Checks layer invariants and shape compatibility; returns the output
    /// dimension (number of logits).
    pub fn validate(&self) -> Result<usize> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension("network input extents must be >= 1".into()));
        }
        let mut flow = Flow::Spatial { c, h, w };
        for (i, layer) in self.layers.iter().enumerate() {
            flow = match *layer {
                LayerSpec::Conv { out_channels, fh, fw, .. } => match flow {
                    Flow::Spatial { h, w, .. } => {
                        let s = Shape2D::same(fh, fw)?;
                        let (oh, ow) = s.out_dims(h, w)?;
                        if out_channels == 0 {
                            return Err(Error::Dimension(format!("layer {i}: conv needs filters")));
                        }
                        Flow::Spatial { c: out_channels, h: oh, w: ow }
                    }
                    Flow::Flat { .. } => {
                        return Err(Error::Dimension(format!(
                            "layer {i}: conv after flattening is not supported"
                        )))
                    }
                },
                LayerSpec::MaxPool2 => match flow {
                    Flow::Spatial { c, h, w } => {
                        if h < 2 || w < 2 {
                            return Err(Error::Dimension(format!(
                                "layer {i}: maxpool needs at least 2x2 input, got {h}x{w}"
                            )));
                        }
                        Flow::Spatial { c, h: h / 2, w: w / 2 }
                    }
                    Flow::Flat { .. } => {
                        return Err(Error::Dimension(format!("layer {i}: maxpool after flattening")))
                    }
                },
                LayerSpec::LeakyRelu { .. } | LayerSpec::Relu => flow,
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::Dimension(format!(
                            "layer {i}: dropout rate must be in [0,1), got {rate}"
                        )));
                    }
                    flow
                }
                LayerSpec::FullyConnected { out_dim } => {
                    if out_dim == 0 {
                        return Err(Error::Dimension(format!("layer {i}: fc needs outputs")));
                    }
                    Flow::Flat { dim: out_dim }
                }
                LayerSpec::SoftmaxXent => flow,
            };
        }
        Ok(flow.dim())
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::Conv { .. })).count()
    }

    pub fn conv_modes(&self) -> Vec<ConvMode> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { mode, .. } => Some(*mode),
                _ => None,
            })
            .collect()
    }

    /// Replaces the conv mode flags in layer order.
    pub fn set_conv_modes(&mut self, modes: &[ConvMode]) -> Result<()> {
        if modes.len() != self.conv_count() {
            return Err(Error::Usage(format!(
                "{} mode flags for {} conv layers",
                modes.len(),
                self.conv_count()
            )));
        }
        let mut it = modes.iter();
        for layer in &mut self.layers {
            if let LayerSpec::Conv { mode, .. } = layer {
                *mode = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Canonical architecture description, conv modes excluded. Two specs
    /// that differ only in conv modes print identically, which is what lets
    /// an exact checkpoint initialize an approximate network.
    pub fn arch_string(&self) -> String {
        let mut s = format!("{}x{}x{}", self.input.0, self.input.1, self.input.2);
        for layer in &self.layers {
            s.push(';');
            match *layer {
                LayerSpec::Conv { out_channels, fh, fw, .. } => {
                    s.push_str(&format!("conv{fh}x{fw}x{out_channels}"));
                }
                LayerSpec::MaxPool2 => s.push_str("maxpool2"),
                LayerSpec::LeakyRelu { slope } => s.push_str(&format!("leaky{slope}")),
                LayerSpec::Relu => s.push_str("relu"),
                LayerSpec::FullyConnected { out_dim } => s.push_str(&format!("fc{out_dim}")),
                LayerSpec::Dropout { rate } => s.push_str(&format!("dropout{rate}")),
                LayerSpec::SoftmaxXent => s.push_str("softmax_xent"),
            }
        }
        s
    }

    /// Human-readable description, one `key=value` line per layer.
    pub fn describe(&self) -> String {
        let mut s = format!(
            "name={}\ninput={}x{}x{}\n",
            self.name, self.input.0, self.input.1, self.input.2
        );
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv { out_channels, fh, fw, mode } => {
                    s.push_str(&format!("conv={fh}x{fw}x{out_channels},{}\n", mode.name()))
                }
                LayerSpec::MaxPool2 => s.push_str("maxpool=2x2\n"),
                LayerSpec::LeakyRelu { slope } => s.push_str(&format!("leaky_relu={slope}\n")),
                LayerSpec::Relu => s.push_str("relu=\n"),
                LayerSpec::FullyConnected { out_dim } => s.push_str(&format!("fc={out_dim}\n")),
                LayerSpec::Dropout { rate } => s.push_str(&format!("dropout={rate}\n")),
                LayerSpec::SoftmaxXent => s.push_str("softmax_xent=\n"),
            }
        }
        s
    }
}

/// LeNet: conv 5x5x32 + leaky ReLU, maxpool 2x2, conv 5x5x64 + leaky ReLU,
/// FC 1024 + ReLU, dropout 0.5, FC 10. Same padding, stride 1.
pub fn build_lenet(input: (usize, usize, usize), modes: &[ConvMode]) -> Result<NetworkSpec> {
    if modes.len() != 2 {
        return Err(Error::Usage(format!("lenet has 2 conv layers, got {} modes", modes.len())));
    }
    let spec = NetworkSpec {
        name: "lenet".into(),
        input,
        layers: vec![
            LayerSpec::Conv { out_channels: 32, fh: 5, fw: 5, mode: modes[0] },
            LayerSpec::LeakyRelu { slope: LEAKY_SLOPE },
            LayerSpec::MaxPool2,
            LayerSpec::Conv { out_channels: 64, fh: 5, fw: 5, mode: modes[1] },
            LayerSpec::LeakyRelu { slope: LEAKY_SLOPE },
            LayerSpec::FullyConnected { out_dim: 1024 },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::FullyConnected { out_dim: 10 },
        ],
    };
    spec.validate()?;
    Ok(spec)
}

/// mini_cifar: six convolutions (three of them 1x1), two 2x2 maxpools, each
/// conv followed by leaky ReLU, then FC 1024 + ReLU, dropout 0.5, FC 10.
pub fn build_mini_cifar(input: (usize, usize, usize), modes: &[ConvMode]) -> Result<NetworkSpec> {
    if modes.len() != 6 {
        return Err(Error::Usage(format!(
            "mini_cifar has 6 conv layers, got {} modes",
            modes.len()
        )));
    }
    let conv = |out, f, mode| LayerSpec::Conv { out_channels: out, fh: f, fw: f, mode };
    let leaky = LayerSpec::LeakyRelu { slope: LEAKY_SLOPE };
    let spec = NetworkSpec {
        name: "mini_cifar".into(),
        input,
        layers: vec![
            conv(32, 3, modes[0]),
            leaky.clone(),
            LayerSpec::MaxPool2,
            conv(16, 1, modes[1]),
            leaky.clone(),
            conv(64, 3, modes[2]),
            leaky.clone(),
            LayerSpec::MaxPool2,
            conv(32, 1, modes[3]),
            leaky.clone(),
            conv(128, 3, modes[4]),
            leaky.clone(),
            conv(64, 1, modes[5]),
            leaky,
            LayerSpec::FullyConnected { out_dim: 1024 },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::FullyConnected { out_dim: 10 },
        ],
    };
    spec.validate()?;
    Ok(spec)
}

/// Builds the named architecture.
pub fn build_network_spec(
    name: &str,
    input: (usize, usize, usize),
    modes: &[ConvMode],
) -> Result<NetworkSpec> {
    match name {
        "lenet" => build_lenet(input, modes),
        "mini-cifar" | "mini_cifar" => build_mini_cifar(input, modes),
        other => Err(Error::Usage(format!("unknown network '{other}' (lenet, mini-cifar)"))),
    }
}

// ---------------------------------------------------------------------------
// materialized layers

struct ConvState<T> {
    kernel: ApproxConvLayer<T>,
    bias: Vec<T>,
    grad_w: Tensor<T>,
    grad_b: Vec<T>,
    // training caches: the operands the exact backward differentiates, plus
    // clip masks when the forward clipped
    x_eff: Option<Tensor<T>>,
    w_eff: Option<Tensor<T>>,
    x_mask: Option<Tensor<T>>,
    w_mask: Option<Tensor<T>>,
}

struct FcState<T> {
    /// `[out, in]`, applied as `y = x @ w^T + b`.
    weights: Tensor<T>,
    bias: Vec<T>,
    grad_w: Tensor<T>,
    grad_b: Vec<T>,
    x_cache: Option<Tensor<T>>,
    in_shape: Vec<usize>,
}

enum Layer<T> {
    Conv(ConvState<T>),
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    LeakyRelu { slope: T, factors: Option<Tensor<T>> },
    Relu { factors: Option<Tensor<T>> },
    Fc(FcState<T>),
    Dropout { rate: f64, mask: Option<Tensor<T>> },
}

/// A materialized network: parameters, layer caches, and gradient buffers.
pub struct Network<T> {
    pub spec: NetworkSpec,
    layers: Vec<Layer<T>>,
    dropout_rng: ChaCha8Rng,
}

const STREAM_INIT: u64 = 0x10;
const STREAM_DROPOUT: u64 = 0x11;

impl<T: Scalar> Network<T> {
    /// Materializes a spec: weights from a fan-in-scaled zero-mean uniform,
    /// biases zero, running statistics fresh.
    pub fn build(spec: NetworkSpec, seed: u64, gamma: T) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_INIT);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        dropout_rng.set_stream(STREAM_DROPOUT);

        let (c0, h0, w0) = spec.input;
        let mut flow = Flow::Spatial { c: c0, h: h0, w: w0 };
        let mut layers = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            match *layer {
                LayerSpec::Conv { out_channels, fh, fw, mode } => {
                    let (c, h, w) = match flow {
                        Flow::Spatial { c, h, w } => (c, h, w),
                        Flow::Flat { .. } => unreachable!("validated"),
                    };
                    let fan_in = c * fh * fw;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let data: Vec<T> = (0..out_channels * fan_in)
                        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                        .collect();
                    let weights = Tensor::new(vec![out_channels, c, fh, fw], data)?;
                    let shape = Shape2D::same(fh, fw)?;
                    let kernel = ApproxConvLayer::new(weights, shape, gamma, mode)?;
                    let (oh, ow) = shape.out_dims(h, w)?;
                    layers.push(Layer::Conv(ConvState {
                        grad_w: Tensor::zeros(vec![out_channels, c, fh, fw]),
                        grad_b: vec![T::zero(); out_channels],
                        bias: vec![T::zero(); out_channels],
                        kernel,
                        x_eff: None,
                        w_eff: None,
                        x_mask: None,
                        w_mask: None,
                    }));
                    flow = Flow::Spatial { c: out_channels, h: oh, w: ow };
                }
                LayerSpec::MaxPool2 => {
                    let (c, h, w) = match flow {
                        Flow::Spatial { c, h, w } => (c, h, w),
                        Flow::Flat { .. } => unreachable!("validated"),
                    };
                    layers.push(Layer::MaxPool { argmax: Vec::new(), in_shape: Vec::new() });
                    flow = Flow::Spatial { c, h: h / 2, w: w / 2 };
                }
                LayerSpec::LeakyRelu { slope } => {
                    layers.push(Layer::LeakyRelu { slope: T::from_f64(slope), factors: None });
                }
                LayerSpec::Relu => layers.push(Layer::Relu { factors: None }),
                LayerSpec::FullyConnected { out_dim } => {
                    let in_dim = flow.dim();
                    let bound = 1.0 / (in_dim as f64).sqrt();
                    let data: Vec<T> = (0..out_dim * in_dim)
                        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                        .collect();
                    layers.push(Layer::Fc(FcState {
                        weights: Tensor::new(vec![out_dim, in_dim], data)?,
                        bias: vec![T::zero(); out_dim],
                        grad_w: Tensor::zeros(vec![out_dim, in_dim]),
                        grad_b: vec![T::zero(); out_dim],
                        x_cache: None,
                        in_shape: Vec::new(),
                    }));
                    flow = Flow::Flat { dim: out_dim };
                }
                LayerSpec::Dropout { rate } => {
                    layers.push(Layer::Dropout { rate, mask: None });
                }
                LayerSpec::SoftmaxXent => {}
            }
        }
        Ok(Network { spec, layers, dropout_rng })
    }

    /// Forward pass; returns the logits. `Train` stashes what the backward
    /// pass needs and advances conv running statistics; `Calibrate` advances
    /// statistics without caching or dropout; `Infer` does neither.
    pub fn forward(&mut self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        let batch = x.shape()[0];
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = match layer {
                Layer::Conv(state) => conv_forward(state, &cur, phase)?,
                Layer::MaxPool { argmax, in_shape } => {
                    let (out, idx) = maxpool2_forward(&cur)?;
                    if phase == Phase::Train {
                        *argmax = idx;
                        *in_shape = cur.shape().to_vec();
                    }
                    out
                }
                Layer::LeakyRelu { slope, factors } => {
                    let slope = *slope;
                    let f = cur.map(|v| if v > T::zero() { T::one() } else { slope });
                    let out = Tensor::new(
                        cur.shape().to_vec(),
                        cur.data().iter().zip(f.data()).map(|(&v, &m)| v * m).collect(),
                    )?;
                    if phase == Phase::Train {
                        *factors = Some(f);
                    }
                    out
                }
                Layer::Relu { factors } => {
                    let f = cur.map(|v| if v > T::zero() { T::one() } else { T::zero() });
                    let out = Tensor::new(
                        cur.shape().to_vec(),
                        cur.data().iter().zip(f.data()).map(|(&v, &m)| v * m).collect(),
                    )?;
                    if phase == Phase::Train {
                        *factors = Some(f);
                    }
                    out
                }
                Layer::Fc(state) => fc_forward(state, cur, batch, phase)?,
                Layer::Dropout { rate, mask } => {
                    if phase == Phase::Train && *rate > 0.0 {
                        let keep = 1.0 - *rate;
                        let scale = T::from_f64(1.0 / keep);
                        let rng = &mut self.dropout_rng;
                        let m = Tensor::new(
                            cur.shape().to_vec(),
                            (0..cur.numel())
                                .map(|_| if rng.gen_bool(keep) { scale } else { T::zero() })
                                .collect(),
                        )?;
                        let out = Tensor::new(
                            cur.shape().to_vec(),
                            cur.data().iter().zip(m.data()).map(|(&v, &k)| v * k).collect(),
                        )?;
                        *mask = Some(m);
                        out
                    } else {
                        cur
                    }
                }
            };
        }
        Ok(cur)
    }

    /// Backward pass from the loss gradient at the logits. Accumulates
    /// parameter gradients into the layer buffers (call [`Network::zero_grads`]
    /// first for a fresh step) and composes clip-gradient masks per the
    /// exact-backward recipe.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<()> {
        let mut grad = grad_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            grad = match layer {
                Layer::Conv(state) => conv_backward(state, &grad)?,
                Layer::MaxPool { argmax, in_shape } => maxpool2_backward(&grad, argmax, in_shape)?,
                Layer::LeakyRelu { factors, .. } | Layer::Relu { factors } => {
                    let f = factors
                        .as_ref()
                        .ok_or_else(|| Error::DegenerateInput("backward before forward".into()))?;
                    Tensor::new(
                        grad.shape().to_vec(),
                        grad.data().iter().zip(f.data()).map(|(&g, &m)| g * m).collect(),
                    )?
                }
                Layer::Fc(state) => fc_backward(state, &grad)?,
                Layer::Dropout { mask, .. } => match mask {
                    Some(m) => Tensor::new(
                        grad.shape().to_vec(),
                        grad.data().iter().zip(m.data()).map(|(&g, &k)| g * k).collect(),
                    )?,
                    None => grad,
                },
            };
        }
        Ok(())
    }

    /// Clears cached dropout masks so a later backward cannot reuse a stale
    /// mask, and zeroes gradient buffers.
    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(state) => {
                    state.grad_w.data_mut().fill(T::zero());
                    state.grad_b.fill(T::zero());
                }
                Layer::Fc(state) => {
                    state.grad_w.data_mut().fill(T::zero());
                    state.grad_b.fill(T::zero());
                }
                Layer::Dropout { mask, .. } => *mask = None,
                _ => {}
            }
        }
    }

    /// Visits `(param, grad)` pairs in a stable order (layer order; weights
    /// before biases). The optimizer and checkpoint rely on this order.
    pub fn for_each_param(&mut self, mut f: impl FnMut(&mut [T], &[T])) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(state) => {
                    f(state.kernel.weights.data_mut(), state.grad_w.data());
                    f(&mut state.bias, &state.grad_b);
                }
                Layer::Fc(state) => {
                    f(state.weights.data_mut(), state.grad_w.data());
                    f(&mut state.bias, &state.grad_b);
                }
                _ => {}
            }
        }
    }

    /// Parameter tensors in visit order as `(shape, data)`.
    pub fn param_tensors(&self) -> Vec<(Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(state) => {
                    out.push((state.kernel.weights.shape().to_vec(), state.kernel.weights.data()));
                    out.push((vec![state.bias.len()], state.bias.as_slice()));
                }
                Layer::Fc(state) => {
                    out.push((state.weights.shape().to_vec(), state.weights.data()));
                    out.push((vec![state.bias.len()], state.bias.as_slice()));
                }
                _ => {}
            }
        }
        out
    }

    /// Overwrites parameters from tensors in visit order.
    pub fn load_param_tensors(&mut self, tensors: &[(Vec<usize>, Vec<T>)]) -> Result<()> {
        let mut idx = 0usize;
        let mut err = None;
        self.for_each_param(|data, _| {
            if err.is_some() {
                return;
            }
            match tensors.get(idx) {
                Some((shape, values)) => {
                    let numel: usize = shape.iter().product();
                    if numel != data.len() || values.len() != data.len() {
                        err = Some(Error::IncompatibleCheckpoint(format!(
                            "parameter {idx}: shape {shape:?} does not match network slot of {} values",
                            data.len()
                        )));
                    } else {
                        data.copy_from_slice(values);
                    }
                }
                None => {
                    err = Some(Error::IncompatibleCheckpoint("too few parameter tensors".into()))
                }
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != tensors.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint has {} parameter tensors, network has {idx}",
                tensors.len()
            )));
        }
        Ok(())
    }

    /// Running statistics of each conv layer, in layer order.
    pub fn conv_stats(&self) -> Vec<AbsMeanStats<T>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(state) => Some(state.kernel.stats.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn set_conv_stats(&mut self, stats: &[AbsMeanStats<T>]) -> Result<()> {
        let convs: Vec<&mut ConvState<T>> = self
            .layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv(state) => Some(state),
                _ => None,
            })
            .collect();
        if convs.len() != stats.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} statistics blocks for {} conv layers",
                stats.len(),
                convs.len()
            )));
        }
        for (state, s) in convs.into_iter().zip(stats) {
            if s.mu_w.len() != state.kernel.stats.mu_w.len() {
                return Err(Error::IncompatibleCheckpoint("filter count mismatch".into()));
            }
            state.kernel.stats = s.clone();
        }
        Ok(())
    }

    /// Flips conv modes in place (layer order), e.g. when loading an exact
    /// checkpoint into an approximate network.
    pub fn set_conv_modes(&mut self, modes: &[ConvMode]) -> Result<()> {
        self.spec.set_conv_modes(modes)?;
        let mut it = modes.iter();
        for layer in &mut self.layers {
            if let Layer::Conv(state) = layer {
                state.kernel.mode = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Per-conv-layer operation counts for one `[C, H, W]` image, from the
    /// instrumented nested-loop reference kernels (inference semantics).
    pub fn count_conv_ops(&self, image: &Tensor<T>) -> Result<Vec<LayerOpReport>> {
        if image.shape().len() != 3 {
            return Err(Error::Dimension(format!("expected [C,H,W], got {:?}", image.shape())));
        }
        let mut reports = Vec::new();
        let mut cur = image.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(state) => {
                    let mut counter = OpCounter::default();
                    let mut out = match state.kernel.mode {
                        ConvMode::Exact => approx::exact_conv_reference(
                            &cur,
                            &state.kernel.weights,
                            state.kernel.shape,
                            &mut counter,
                        )?,
                        ConvMode::MinApprox => {
                            let (_, w_tilde, mu_w) =
                                state.kernel.prepare_weights(state.kernel.stats.mu_x_running)?;
                            approx::smin_conv_reference(
                                &cur,
                                &w_tilde,
                                &mu_w,
                                state.kernel.shape,
                                &mut counter,
                            )?
                        }
                    };
                    let cout = out.shape()[0];
                    let plane = out.shape()[1] * out.shape()[2];
                    for k in 0..cout {
                        let b = state.bias[k];
                        for v in &mut out.data_mut()[k * plane..(k + 1) * plane] {
                            *v += b;
                        }
                    }
                    reports.push(LayerOpReport {
                        layer_index: i,
                        mode: state.kernel.mode,
                        out_elements: (cout * plane) as u64,
                        counter,
                    });
                    cur = out;
                }
                Layer::MaxPool { .. } => {
                    let batched = cur
                        .clone()
                        .reshape(vec![1, cur.shape()[0], cur.shape()[1], cur.shape()[2]])?;
                    let (out, _) = maxpool2_forward(&batched)?;
                    let s = out.shape().to_vec();
                    cur = out.reshape(vec![s[1], s[2], s[3]])?;
                }
                Layer::LeakyRelu { slope, .. } => {
                    let slope = *slope;
                    cur = cur.map(|v| if v > T::zero() { v } else { slope * v });
                }
                Layer::Relu { .. } => cur = cur.map(|v| v.max(T::zero())),
                Layer::Fc(state) => {
                    let in_dim = state.weights.shape()[1];
                    let out_dim = state.weights.shape()[0];
                    let flat = cur.clone().reshape(vec![in_dim])?;
                    let mut out = vec![T::zero(); out_dim];
                    for (o, slot) in out.iter_mut().enumerate() {
                        let mut acc = state.bias[o];
                        for (t, &v) in flat.data().iter().enumerate() {
                            acc += v * state.weights.data()[o * in_dim + t];
                        }
                        *slot = acc;
                    }
                    cur = Tensor::new(vec![out_dim], out)?;
                }
                Layer::Dropout { .. } => {}
            }
        }
        Ok(reports)
    }
}

/// Operation counts for one conv layer on one image.
#[derive(Debug, Clone, Copy)]
pub struct LayerOpReport {
    pub layer_index: usize,
    pub mode: ConvMode,
    pub out_elements: u64,
    pub counter: OpCounter,
}

fn conv_forward<T: Scalar>(
    state: &mut ConvState<T>,
    x: &Tensor<T>,
    phase: Phase,
) -> Result<Tensor<T>> {
    let two = T::from_f64(2.0);
    let mut out = match (state.kernel.mode, phase) {
        (ConvMode::Exact, Phase::Train) => {
            state.x_eff = Some(x.clone());
            state.w_eff = Some(state.kernel.weights.clone());
            state.x_mask = None;
            state.w_mask = None;
            approx::exact_conv_forward(x, &state.kernel.weights, state.kernel.shape)?
        }
        (ConvMode::Exact, _) => {
            approx::exact_conv_forward(x, &state.kernel.weights, state.kernel.shape)?
        }
        (ConvMode::MinApprox, Phase::Train | Phase::Calibrate) => {
            let (stats, batch_mu) = approx::update_running_mu(&state.kernel.stats, x)?;
            state.kernel.stats = stats;
            let mu_w = approx::filter_abs_means(&state.kernel.weights);
            state.kernel.stats.mu_w = mu_w.clone();

            let x_bound = two * batch_mu;
            let x_c = approx::clip_tensor(x, x_bound);
            let w_bounds: Vec<T> = mu_w.iter().map(|&m| two * m).collect();
            let w_c = approx::clip_weights_per_filter(&state.kernel.weights, &w_bounds);
            let w_tilde = approx::rescale_weights(&w_c, batch_mu, &mu_w)?;
            let out = approx::smin_conv_forward(&x_c, &w_tilde, &mu_w, state.kernel.shape)?;

            if phase == Phase::Train {
                state.x_mask = Some(x.map(|v| approx::clip_grad(v, x_bound)));
                let cout = state.kernel.weights.shape()[0];
                let per = state.kernel.weights.numel() / cout;
                let mut w_mask = state.kernel.weights.clone();
                for k in 0..cout {
                    let alpha = w_bounds[k];
                    for v in &mut w_mask.data_mut()[k * per..(k + 1) * per] {
                        *v = approx::clip_grad(*v, alpha);
                    }
                }
                state.w_mask = Some(w_mask);
                state.x_eff = Some(x_c);
                state.w_eff = Some(w_c);
            }
            out
        }
        (ConvMode::MinApprox, Phase::Infer) => {
            // frozen running mean, no input clipping
            state.kernel.forward(x, Phase::Infer, None)?
        }
    };

    let (n, cout) = (out.shape()[0], out.shape()[1]);
    let plane = out.shape()[2] * out.shape()[3];
    let data = out.data_mut();
    for i in 0..n {
        for k in 0..cout {
            let b = state.bias[k];
            for v in &mut data[(i * cout + k) * plane..(i * cout + k + 1) * plane] {
                *v += b;
            }
        }
    }
    Ok(out)
}

fn conv_backward<T: Scalar>(state: &mut ConvState<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let x_eff = state
        .x_eff
        .as_ref()
        .ok_or_else(|| Error::DegenerateInput("conv backward before train forward".into()))?;
    let w_eff = state.w_eff.as_ref().expect("cached with x_eff");

    // bias gradient: sum over batch and spatial positions
    let (n, cout) = (grad_out.shape()[0], grad_out.shape()[1]);
    let plane = grad_out.shape()[2] * grad_out.shape()[3];
    for i in 0..n {
        for k in 0..cout {
            let mut acc = T::zero();
            for &g in &grad_out.data()[(i * cout + k) * plane..(i * cout + k + 1) * plane] {
                acc += g;
            }
            state.grad_b[k] += acc;
        }
    }

    let (mut gx, mut gw) = approx::exact_conv_backward(grad_out, x_eff, w_eff, state.kernel.shape)?;
    // chain through the clips: zero gradient where the forward saturated
    if let Some(mask) = &state.w_mask {
        for (g, &m) in gw.data_mut().iter_mut().zip(mask.data()) {
            *g *= m;
        }
    }
    if let Some(mask) = &state.x_mask {
        for (g, &m) in gx.data_mut().iter_mut().zip(mask.data()) {
            *g *= m;
        }
    }
    for (acc, &g) in state.grad_w.data_mut().iter_mut().zip(gw.data()) {
        *acc += g;
    }
    Ok(gx)
}

fn fc_forward<T: Scalar>(
    state: &mut FcState<T>,
    x: Tensor<T>,
    batch: usize,
    phase: Phase,
) -> Result<Tensor<T>> {
    let in_dim = state.weights.shape()[1];
    let out_dim = state.weights.shape()[0];
    if x.numel() != batch * in_dim {
        return Err(Error::Dimension(format!(
            "fc expects {batch}x{in_dim} input, got {:?}",
            x.shape()
        )));
    }
    let in_shape = x.shape().to_vec();
    let flat = x.reshape(vec![batch, in_dim])?;
    let mut out = Tensor::zeros(vec![batch, out_dim]);
    T::gemm(
        false,
        true,
        batch,
        in_dim,
        out_dim,
        T::one(),
        flat.data(),
        state.weights.data(),
        T::zero(),
        out.data_mut(),
    );
    for i in 0..batch {
        for (o, &b) in state.bias.iter().enumerate() {
            out.data_mut()[i * out_dim + o] += b;
        }
    }
    if phase == Phase::Train {
        state.x_cache = Some(flat);
        state.in_shape = in_shape;
    }
    Ok(out)
}

fn fc_backward<T: Scalar>(state: &mut FcState<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let x = state
        .x_cache
        .as_ref()
        .ok_or_else(|| Error::DegenerateInput("fc backward before train forward".into()))?;
    let batch = x.shape()[0];
    let in_dim = state.weights.shape()[1];
    let out_dim = state.weights.shape()[0];

    // grad_w += grad_out^T [out, batch] @ x [batch, in]
    T::gemm(
        true,
        false,
        out_dim,
        batch,
        in_dim,
        T::one(),
        grad_out.data(),
        x.data(),
        T::one(),
        state.grad_w.data_mut(),
    );
    for i in 0..batch {
        for o in 0..out_dim {
            state.grad_b[o] += grad_out.data()[i * out_dim + o];
        }
    }
    // grad_x = grad_out [batch, out] @ w [out, in]
    let mut gx = Tensor::zeros(vec![batch, in_dim]);
    T::gemm(
        false,
        false,
        batch,
        out_dim,
        in_dim,
        T::one(),
        grad_out.data(),
        state.weights.data(),
        T::zero(),
        gx.data_mut(),
    );
    gx.reshape(state.in_shape.clone())
}

/// 2x2 max pooling with stride 2; ties go to the first element in row-major
/// scan order. Returns the pooled tensor and the flat argmax index of every
/// output element.
fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.shape().len() != 4 {
        return Err(Error::Dimension(format!("maxpool expects [N,C,H,W], got {:?}", x.shape())));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Dimension(format!("input {h}x{w} too small for 2x2 pooling")));
    }
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    for nc in 0..n * c {
        let plane = &x.data()[nc * h * w..(nc + 1) * h * w];
        for u in 0..oh {
            for v in 0..ow {
                let mut best_idx = (2 * u) * w + 2 * v;
                let mut best = plane[best_idx];
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * u + di) * w + (2 * v + dj);
                    if plane[idx] > best {
                        best = plane[idx];
                        best_idx = idx;
                    }
                }
                let o = nc * oh * ow + u * ow + v;
                out.data_mut()[o] = best;
                argmax[o] = nc * h * w + best_idx;
            }
        }
    }
    Ok((out, argmax))
}

fn maxpool2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    in_shape: &[usize],
) -> Result<Tensor<T>> {
    if argmax.is_empty() {
        return Err(Error::DegenerateInput("maxpool backward before train forward".into()));
    }
    if grad_out.numel() != argmax.len() {
        return Err(Error::Dimension("maxpool gradient does not match forward".into()));
    }
    let mut gx = Tensor::zeros(in_shape.to_vec());
    for (o, &src) in argmax.iter().enumerate() {
        gx.data_mut()[src] += grad_out.data()[o];
    }
    Ok(gx)
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<(f64, Tensor<T>)> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut grad = Tensor::zeros(vec![n, k]);
    let mut loss = 0.0f64;
    let inv_n = T::from_f64(1.0 / n as f64);
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let label = labels[i] as usize;
        if label >= k {
            return Err(Error::Dimension(format!("label {label} out of range for {k} classes")));
        }
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for &z in row {
            sum += (z - max).exp();
        }
        loss += (sum.as_f64().ln() + max.as_f64()) - row[label].as_f64();
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, &z) in row.iter().enumerate() {
            let p = (z - max).exp() / sum;
            g[j] = (p - if j == label { T::one() } else { T::zero() }) * inv_n;
        }
    }
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rngf(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn lenet_shapes_on_mnist() {
        let spec = build_lenet((1, 28, 28), &[ConvMode::Exact, ConvMode::Exact]).unwrap();
        assert_eq!(spec.validate().unwrap(), 10);
        assert_eq!(spec.conv_count(), 2);
        // after the single maxpool the grid is 14x14, so the flatten feeding
        // the first FC sees 14*14*64 = 12544 inputs
        let mut net = Network::<f64>::build(spec, 1, 0.99).unwrap();
        let fc_in = net
            .param_tensors()
            .iter()
            .find(|(s, _)| s.len() == 2 && s[0] == 1024)
            .map(|(s, _)| s[1])
            .unwrap();
        assert_eq!(fc_in, 12544);
        let x = Tensor::<f64>::zeros(vec![2, 1, 28, 28]);
        let y = net.forward(&x, Phase::Infer).unwrap();
        assert_eq!(y.shape(), [2, 10]);
    }

    #[test]
    fn mini_cifar_shapes_and_counts() {
        let modes = [ConvMode::MinApprox; 6];
        let spec = build_mini_cifar((3, 32, 32), &modes).unwrap();
        assert_eq!(spec.conv_count(), 6);
        let one_by_one = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { fh: 1, fw: 1, .. }))
            .count();
        assert_eq!(one_by_one, 3);
        let mut net = Network::<f64>::build(spec, 2, 0.99).unwrap();
        let fc_in = net
            .param_tensors()
            .iter()
            .find(|(s, _)| s.len() == 2 && s[0] == 1024)
            .map(|(s, _)| s[1])
            .unwrap();
        assert_eq!(fc_in, 8 * 8 * 64);
        let x = Tensor::<f64>::zeros(vec![1, 3, 32, 32]);
        assert_eq!(net.forward(&x, Phase::Infer).unwrap().shape(), [1, 10]);
    }

    #[test]
    fn mode_flags_are_preserved_and_arch_string_ignores_them() {
        let a = build_lenet((1, 28, 28), &[ConvMode::Exact, ConvMode::MinApprox]).unwrap();
        assert_eq!(a.conv_modes(), vec![ConvMode::Exact, ConvMode::MinApprox]);
        let b = build_lenet((1, 28, 28), &[ConvMode::MinApprox, ConvMode::MinApprox]).unwrap();
        assert_eq!(a.arch_string(), b.arch_string());
        let c = build_lenet((3, 32, 32), &[ConvMode::Exact, ConvMode::Exact]).unwrap();
        assert_ne!(a.arch_string(), c.arch_string());
    }

    #[test]
    fn leaky_relu_values() {
        let spec = NetworkSpec {
            name: "t".into(),
            input: (1, 1, 2),
            layers: vec![LayerSpec::LeakyRelu { slope: 0.1 }],
        };
        let mut net = Network::<f64>::build(spec, 0, 0.99).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        let y = net.forward(&x, Phase::Infer).unwrap();
        assert_eq!(y.data(), [-0.1, 2.0]);
    }

    #[test]
    fn softmax_xent_uniform_logits() {
        let logits = Tensor::<f64>::zeros(vec![4, 10]);
        let (loss, grad) = softmax_xent(&logits, &[0, 3, 5, 9]).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
        // gradient rows sum to zero
        for i in 0..4 {
            let s: f64 = grad.data()[i * 10..(i + 1) * 10].iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_identity_at_inference_and_scaling_at_train() {
        let spec = NetworkSpec {
            name: "t".into(),
            input: (1, 4, 4),
            layers: vec![LayerSpec::Dropout { rate: 0.5 }],
        };
        let mut net = Network::<f64>::build(spec, 3, 0.99).unwrap();
        let mut rng = rngf(4);
        let x = random_tensor(vec![2, 1, 4, 4], &mut rng);
        let y = net.forward(&x, Phase::Infer).unwrap();
        assert_eq!(y, x);
        let y = net.forward(&x, Phase::Calibrate).unwrap();
        assert_eq!(y, x);
        let y = net.forward(&x, Phase::Train).unwrap();
        for (&out, &inp) in y.data().iter().zip(x.data()) {
            assert!(out == 0.0 || (out - 2.0 * inp).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_first_argmax() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![3.0, 3.0, 1.0, 2.0]).unwrap();
        let (y, argmax) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), [3.0]);
        assert_eq!(argmax, [0]); // tie broken to the first in scan order
        let g = Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        let gx = maxpool2_backward(&g, &argmax, &[1, 1, 2, 2]).unwrap();
        assert_eq!(gx.data(), [5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mode_flip_changes_only_conv_outputs() {
        let mut rng = rngf(5);
        let x = random_tensor(vec![2, 1, 8, 8], &mut rng);
        let spec_e = build_lenet((1, 8, 8), &[ConvMode::Exact, ConvMode::Exact]).unwrap();
        let spec_a = build_lenet((1, 8, 8), &[ConvMode::MinApprox, ConvMode::MinApprox]).unwrap();
        let mut net_e = Network::<f64>::build(spec_e, 7, 0.99).unwrap();
        let mut net_a = Network::<f64>::build(spec_a, 7, 0.99).unwrap();
        // identical seeds give identical parameters regardless of mode
        let pe = net_e.param_tensors();
        let pa = net_a.param_tensors();
        for ((s1, d1), (s2, d2)) in pe.iter().zip(pa.iter()) {
            assert_eq!(s1, s2);
            assert_eq!(d1, d2);
        }
        // outputs differ (conv kernels differ) but shapes agree
        let ye = net_e.forward(&x, Phase::Infer).unwrap();
        let ya = net_a.forward(&x, Phase::Infer).unwrap();
        assert_eq!(ye.shape(), ya.shape());
        assert_ne!(ye, ya);
    }

    #[test]
    fn whole_network_gradient_check_exact_mode() {
        // tiny net: conv 3x3x2 + leaky + fc, exact mode, f64
        let spec = NetworkSpec {
            name: "tiny".into(),
            input: (1, 5, 5),
            layers: vec![
                LayerSpec::Conv { out_channels: 2, fh: 3, fw: 3, mode: ConvMode::Exact },
                LayerSpec::LeakyRelu { slope: 0.1 },
                LayerSpec::FullyConnected { out_dim: 4 },
            ],
        };
        let mut net = Network::<f64>::build(spec, 11, 0.99).unwrap();
        let mut rng = rngf(12);
        let x = random_tensor(vec![3, 1, 5, 5], &mut rng);
        let labels = [0u8, 2, 3];

        net.zero_grads();
        let logits = net.forward(&x, Phase::Train).unwrap();
        let (_, grad) = softmax_xent(&logits, &labels).unwrap();
        net.backward(&grad).unwrap();

        let mut analytic: Vec<Vec<f64>> = Vec::new();
        net.for_each_param(|_, g| analytic.push(g.to_vec()));

        let step = 1e-5;
        let mut max_rel = 0.0f64;
        for (p, grads) in analytic.iter().enumerate() {
            let len = grads.len();
            let probes: Vec<usize> =
                if len <= 6 { (0..len).collect() } else { vec![0, len / 3, len / 2, len - 1] };
            for &j in &probes {
                let loss_at = |delta: f64, net: &mut Network<f64>| -> f64 {
                    let mut idx = 0;
                    net.for_each_param(|data, _| {
                        if idx == p {
                            data[j] += delta;
                        }
                        idx += 1;
                    });
                    let logits = net.forward(&x, Phase::Train).unwrap();
                    let (loss, _) = softmax_xent(&logits, &labels).unwrap();
                    let mut idx = 0;
                    net.for_each_param(|data, _| {
                        if idx == p {
                            data[j] -= delta;
                        }
                        idx += 1;
                    });
                    loss
                };
                let fd = (loss_at(step, &mut net) - loss_at(-step, &mut net)) / (2.0 * step);
                let rel = (grads[j] - fd).abs() / fd.abs().max(1e-6);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let spec = build_lenet((1, 8, 8), &[ConvMode::MinApprox, ConvMode::MinApprox]).unwrap();
        let mut net = Network::<f64>::build(spec, 13, 0.5).unwrap();
        let before = net.conv_stats();
        let mut rng = rngf(14);
        let x = random_tensor(vec![2, 1, 8, 8], &mut rng);
        net.forward(&x, Phase::Train).unwrap();
        let after = net.conv_stats();
        assert_ne!(before[0].mu_x_running, after[0].mu_x_running);
        assert!(after.iter().all(|s| s.mu_x_running > 0.0));
        // calibrate also advances stats
        net.forward(&x, Phase::Calibrate).unwrap();
        let cal = net.conv_stats();
        assert_ne!(after[0].mu_x_running, cal[0].mu_x_running);
    }

    #[test]
    fn param_round_trip() {
        let spec = build_lenet((1, 8, 8), &[ConvMode::Exact, ConvMode::Exact]).unwrap();
        let mut a = Network::<f64>::build(spec.clone(), 1, 0.99).unwrap();
        let mut b = Network::<f64>::build(spec, 2, 0.99).unwrap();
        let params: Vec<(Vec<usize>, Vec<f64>)> =
            a.param_tensors().into_iter().map(|(s, d)| (s, d.to_vec())).collect();
        b.load_param_tensors(&params).unwrap();
        let mut rng = rngf(3);
        let x = random_tensor(vec![1, 1, 8, 8], &mut rng);
        let ya = a.forward(&x, Phase::Infer).unwrap();
        let yb = b.forward(&x, Phase::Infer).unwrap();
        assert_eq!(ya, yb);
    }
}
