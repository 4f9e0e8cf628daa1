//! Dense/conv layer stack with hand-written backpropagation.
//!
//! Weights live in quantized form for both the forward and the backward
//! pass: every use dequantizes on the fly and no real-valued copy of a
//! weight tensor survives between iterations. The only exception is the
//! explicit [`WeightStore::Real`] variant, which exists so a genuinely
//! unquantized run can serve as the reference baseline.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::cost::LayerCost;
use crate::error::{Error, Result};
use crate::quant::{self, QuantizedTensor};
use crate::tensor::Tensor;

/// Weight storage of one layer.
#[derive(Debug, Clone)]
pub enum WeightStore {
    /// k-bit codes plus affine parameters; the normal case.
    Quantized(QuantizedTensor),
    /// Plain real weights; used only by the unquantized reference mode.
    Real(Tensor),
}

/// Per-layer trainable state.
///
/// The bias and the momentum buffer stay real-valued: they are O(outputs)
/// versus O(weights), and the cost model charges them at 32-bit.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub weights: WeightStore,
    pub bias: Vec<f64>,
    pub momentum_buf: Tensor,
    /// Smoothed underflow metric; `None` before the first measurement and
    /// after every reset.
    pub gavg_ema: Option<f64>,
    /// Multiply-accumulates per sample for this layer.
    pub mac_count: usize,
}

impl LayerState {
    pub fn bitwidth(&self) -> u8 {
        match &self.weights {
            WeightStore::Quantized(q) => q.bitwidth(),
            WeightStore::Real(_) => 32,
        }
    }

    /// Real values of the weight tensor (dequantized on the fly).
    pub fn weight_values(&self) -> Tensor {
        match &self.weights {
            WeightStore::Quantized(q) => quant::dequantize(q),
            WeightStore::Real(t) => t.clone(),
        }
    }

    pub fn weight_count(&self) -> usize {
        match &self.weights {
            WeightStore::Quantized(q) => q.len(),
            WeightStore::Real(t) => t.len(),
        }
    }

    /// Minimum resolution of the weight grid; `None` for real storage.
    pub fn epsilon(&self) -> Option<f64> {
        match &self.weights {
            WeightStore::Quantized(q) => Some(quant::epsilon(q)),
            WeightStore::Real(_) => None,
        }
    }

    pub fn cost(&self) -> LayerCost {
        LayerCost {
            weight_count: self.weight_count(),
            bias_count: self.bias.len(),
            mac_count: self.mac_count,
            bitwidth: self.bitwidth(),
        }
    }

    fn from_real(weights: Tensor, bias: Vec<f64>, mac_count: usize, init: WeightInit) -> Result<Self> {
        let momentum_buf = Tensor::zeros(weights.shape().to_vec());
        let weights = match init {
            WeightInit::Quantized(k) => {
                WeightStore::Quantized(QuantizedTensor::quantize_fit(&weights, k)?)
            }
            WeightInit::Real => WeightStore::Real(weights),
        };
        Ok(Self {
            weights,
            bias,
            momentum_buf,
            gavg_ema: None,
            mac_count,
        })
    }
}

/// How freshly initialized weights are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightInit {
    Quantized(u8),
    Real,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense {
        in_features: usize,
        out_features: usize,
        state: LayerState,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        state: LayerState,
    },
    Relu,
}

impl Layer {
    pub fn state(&self) -> Option<&LayerState> {
        match self {
            Layer::Dense { state, .. } | Layer::Conv2d { state, .. } => Some(state),
            Layer::Relu => None,
        }
    }

    pub fn state_mut(&mut self) -> Option<&mut LayerState> {
        match self {
            Layer::Dense { state, .. } | Layer::Conv2d { state, .. } => Some(state),
            Layer::Relu => None,
        }
    }
}

/// Gradients of one parameterized layer for one minibatch.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

/// An ordered layer stack ending in a softmax cross-entropy loss.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    class_count: usize,
}

fn he_tensor<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| normal.sample(rng)).collect();
    Tensor::new(data, shape).expect("consistent shape")
}

impl Network {
    /// Multi-layer perceptron: dense/relu pairs over `hidden`, then a
    /// dense classifier head.
    pub fn mlp<R: Rng>(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        init: WeightInit,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(Self::dense_layer(prev, h, init, rng)?);
            layers.push(Layer::Relu);
            prev = h;
        }
        layers.push(Self::dense_layer(prev, classes, init, rng)?);
        Ok(Self {
            layers,
            input_shape: vec![input_dim],
            class_count: classes,
        })
    }

    /// Small CNN: one same-padded conv, relu, dense classifier head.
    pub fn cnn<R: Rng>(
        input: (usize, usize, usize),
        conv_channels: usize,
        kernel: usize,
        classes: usize,
        init: WeightInit,
        rng: &mut R,
    ) -> Result<Self> {
        let (c, h, w) = input;
        if kernel % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv kernel must be odd for same padding, got {kernel}"
            )));
        }
        let layers = vec![
            Self::conv_layer(c, conv_channels, kernel, h, w, init, rng)?,
            Layer::Relu,
            Self::dense_layer(conv_channels * h * w, classes, init, rng)?,
        ];
        Ok(Self {
            layers,
            input_shape: vec![c, h, w],
            class_count: classes,
        })
    }

    fn dense_layer<R: Rng>(
        in_features: usize,
        out_features: usize,
        init: WeightInit,
        rng: &mut R,
    ) -> Result<Layer> {
        let weights = he_tensor(vec![out_features, in_features], in_features, rng);
        let state = LayerState::from_real(
            weights,
            vec![0.0; out_features],
            in_features * out_features,
            init,
        )?;
        Ok(Layer::Dense {
            in_features,
            out_features,
            state,
        })
    }

    fn conv_layer<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        h: usize,
        w: usize,
        init: WeightInit,
        rng: &mut R,
    ) -> Result<Layer> {
        let fan_in = in_channels * kernel * kernel;
        let weights = he_tensor(
            vec![out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        );
        let mac = out_channels * h * w * fan_in;
        let state = LayerState::from_real(weights, vec![0.0; out_channels], mac, init)?;
        Ok(Layer::Conv2d {
            in_channels,
            out_channels,
            kernel,
            state,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn param_layers(&self) -> impl Iterator<Item = &LayerState> {
        self.layers.iter().filter_map(|l| l.state())
    }

    pub fn param_layers_mut(&mut self) -> impl Iterator<Item = &mut LayerState> {
        self.layers.iter_mut().filter_map(|l| l.state_mut())
    }

    pub fn param_layer_count(&self) -> usize {
        self.param_layers().count()
    }

    pub fn bitwidths(&self) -> Vec<u8> {
        self.param_layers().map(|s| s.bitwidth()).collect()
    }

    pub fn gavg_emas(&self) -> Vec<Option<f64>> {
        self.param_layers().map(|s| s.gavg_ema).collect()
    }

    pub fn layer_costs(&self) -> Vec<LayerCost> {
        self.param_layers().map(|s| s.cost()).collect()
    }

    /// Forward pass to logits for a batch shaped `[batch, ...input_shape]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Dense {
                    in_features,
                    out_features,
                    state,
                } => {
                    let w = state.weight_values();
                    dense_forward_raw(w.data(), &state.bias, *in_features, *out_features, &cur)?
                }
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    state,
                } => {
                    let w = state.weight_values();
                    conv2d_forward_raw(
                        w.data(),
                        &state.bias,
                        *in_channels,
                        *out_channels,
                        *kernel,
                        &cur,
                    )?
                }
                Layer::Relu => relu_forward(&cur),
            };
        }
        Ok(cur)
    }

    /// Forward and backward pass for one labeled minibatch.
    ///
    /// Returns the mean loss and per-layer gradients (in the order of
    /// [`Network::param_layers`]). Weight gradients are real-valued; this
    /// is the raw gradient before momentum or weight decay.
    pub fn forward_backward(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<LayerGrads>)> {
        // Forward pass keeping each layer's input and one dequantized
        // weight view per parameterized layer for reuse in the backward.
        let mut inputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        let mut deq: Vec<Option<Tensor>> = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            inputs.push(cur.clone());
            let next = match layer {
                Layer::Dense {
                    in_features,
                    out_features,
                    state,
                } => {
                    let w = state.weight_values();
                    let y =
                        dense_forward_raw(w.data(), &state.bias, *in_features, *out_features, &cur)?;
                    deq.push(Some(w));
                    y
                }
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    state,
                } => {
                    let w = state.weight_values();
                    let y = conv2d_forward_raw(
                        w.data(),
                        &state.bias,
                        *in_channels,
                        *out_channels,
                        *kernel,
                        &cur,
                    )?;
                    deq.push(Some(w));
                    y
                }
                Layer::Relu => {
                    deq.push(None);
                    relu_forward(&cur)
                }
            };
            cur = next;
        }

        let (loss, mut grad) = softmax_xent(&cur, labels)?;

        let mut grads_rev: Vec<LayerGrads> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                Layer::Dense {
                    in_features,
                    out_features,
                    ..
                } => {
                    let w = deq[i].as_ref().expect("dense has weights");
                    let (gx, gw, gb) = dense_backward_raw(
                        w.data(),
                        *in_features,
                        *out_features,
                        &inputs[i],
                        &grad,
                    )?;
                    grads_rev.push(LayerGrads {
                        weights: gw,
                        bias: gb,
                    });
                    grad = gx;
                }
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let w = deq[i].as_ref().expect("conv has weights");
                    let (gx, gw, gb) = conv2d_backward_raw(
                        w.data(),
                        *in_channels,
                        *out_channels,
                        *kernel,
                        &inputs[i],
                        &grad,
                    )?;
                    grads_rev.push(LayerGrads {
                        weights: gw,
                        bias: gb,
                    });
                    grad = gx;
                }
                Layer::Relu => {
                    grad = relu_backward(&inputs[i], &grad)?;
                }
            }
        }
        grads_rev.reverse();
        Ok((loss, grads_rev))
    }
}

fn flat_batch_dims(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [] => Err(Error::ShapeMismatch("scalar input".into())),
        [b, rest @ ..] => Ok((*b, rest.iter().product())),
    }
}

fn dense_forward_raw(
    w: &[f64],
    bias: &[f64],
    in_features: usize,
    out_features: usize,
    x: &Tensor,
) -> Result<Tensor> {
    let (batch, feat) = flat_batch_dims(x)?;
    if feat != in_features {
        return Err(Error::ShapeMismatch(format!(
            "dense expects {in_features} input features, got {feat}"
        )));
    }
    let xd = x.data();
    let mut y = vec![0.0; batch * out_features];
    for b in 0..batch {
        let row = &xd[b * in_features..(b + 1) * in_features];
        let out = &mut y[b * out_features..(b + 1) * out_features];
        for (o, out_v) in out.iter_mut().enumerate() {
            let wrow = &w[o * in_features..(o + 1) * in_features];
            let mut acc = 0.0;
            for (wv, xv) in wrow.iter().zip(row) {
                acc += wv * xv;
            }
            *out_v = acc + bias[o];
        }
    }
    Tensor::new(y, vec![batch, out_features])
}

fn dense_backward_raw(
    w: &[f64],
    in_features: usize,
    out_features: usize,
    x: &Tensor,
    grad_y: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (batch, feat) = flat_batch_dims(x)?;
    if feat != in_features {
        return Err(Error::ShapeMismatch(format!(
            "dense backward expects {in_features} input features, got {feat}"
        )));
    }
    if grad_y.shape() != [batch, out_features] {
        return Err(Error::ShapeMismatch(format!(
            "grad_y shape {:?} does not match [{batch}, {out_features}]",
            grad_y.shape()
        )));
    }
    let xd = x.data();
    let gy = grad_y.data();
    let mut gx = vec![0.0; batch * in_features];
    let mut gw = vec![0.0; out_features * in_features];
    let mut gb = vec![0.0; out_features];
    for b in 0..batch {
        let xrow = &xd[b * in_features..(b + 1) * in_features];
        let gyrow = &gy[b * out_features..(b + 1) * out_features];
        let gxrow = &mut gx[b * in_features..(b + 1) * in_features];
        for (o, &g) in gyrow.iter().enumerate() {
            gb[o] += g;
            let wrow = &w[o * in_features..(o + 1) * in_features];
            let gwrow = &mut gw[o * in_features..(o + 1) * in_features];
            for i in 0..in_features {
                gwrow[i] += g * xrow[i];
                gxrow[i] += g * wrow[i];
            }
        }
    }
    Ok((
        Tensor::new(gx, x.shape().to_vec())?,
        Tensor::new(gw, vec![out_features, in_features])?,
        gb,
    ))
}

fn conv_dims(x: &Tensor, in_channels: usize) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [b, c, h, w] if *c == in_channels => Ok((*b, *h, *w)),
        other => Err(Error::ShapeMismatch(format!(
            "conv expects [batch, {in_channels}, h, w], got {other:?}"
        ))),
    }
}

fn conv2d_forward_raw(
    w: &[f64],
    bias: &[f64],
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    x: &Tensor,
) -> Result<Tensor> {
    let (batch, h, wd) = conv_dims(x, in_channels)?;
    let pad = kernel / 2;
    let xd = x.data();
    let mut y = vec![0.0; batch * out_channels * h * wd];
    for b in 0..batch {
        for oc in 0..out_channels {
            let ybase = (b * out_channels + oc) * h * wd;
            for oh in 0..h {
                for ow in 0..wd {
                    let mut acc = bias[oc];
                    for ic in 0..in_channels {
                        let xbase = (b * in_channels + ic) * h * wd;
                        let wbase = ((oc * in_channels + ic) * kernel) * kernel;
                        for kh in 0..kernel {
                            let ih = oh + kh;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let ih = ih - pad;
                            for kw in 0..kernel {
                                let iw = ow + kw;
                                if iw < pad || iw - pad >= wd {
                                    continue;
                                }
                                let iw = iw - pad;
                                acc += w[wbase + kh * kernel + kw] * xd[xbase + ih * wd + iw];
                            }
                        }
                    }
                    y[ybase + oh * wd + ow] = acc;
                }
            }
        }
    }
    Tensor::new(y, vec![batch, out_channels, h, wd])
}

fn conv2d_backward_raw(
    w: &[f64],
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    x: &Tensor,
    grad_y: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (batch, h, wd) = conv_dims(x, in_channels)?;
    if grad_y.shape() != [batch, out_channels, h, wd] {
        return Err(Error::ShapeMismatch(format!(
            "conv grad_y shape {:?} does not match [{batch}, {out_channels}, {h}, {wd}]",
            grad_y.shape()
        )));
    }
    let pad = kernel / 2;
    let xd = x.data();
    let gy = grad_y.data();
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; out_channels];
    for b in 0..batch {
        for oc in 0..out_channels {
            let ybase = (b * out_channels + oc) * h * wd;
            for oh in 0..h {
                for ow in 0..wd {
                    let g = gy[ybase + oh * wd + ow];
                    if g == 0.0 {
                        continue;
                    }
                    gb[oc] += g;
                    for ic in 0..in_channels {
                        let xbase = (b * in_channels + ic) * h * wd;
                        let wbase = ((oc * in_channels + ic) * kernel) * kernel;
                        for kh in 0..kernel {
                            let ih = oh + kh;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let ih = ih - pad;
                            for kw in 0..kernel {
                                let iw = ow + kw;
                                if iw < pad || iw - pad >= wd {
                                    continue;
                                }
                                let iw = iw - pad;
                                gw[wbase + kh * kernel + kw] += g * xd[xbase + ih * wd + iw];
                                gx[xbase + ih * wd + iw] += g * w[wbase + kh * kernel + kw];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(gx, x.shape().to_vec())?,
        Tensor::new(gw, vec![out_channels, in_channels, kernel, kernel])?,
        gb,
    ))
}

/// Forward pass through a dense layer: `y = dequant(W) x + b`.
pub fn dense_forward(state: &LayerState, in_features: usize, out_features: usize, x: &Tensor) -> Result<Tensor> {
    let w = state.weight_values();
    dense_forward_raw(w.data(), &state.bias, in_features, out_features, x)
}

/// Backward pass through a dense layer. Returns `(grad_x, grad_W, grad_b)`.
pub fn dense_backward(
    state: &LayerState,
    in_features: usize,
    out_features: usize,
    x: &Tensor,
    grad_y: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let w = state.weight_values();
    dense_backward_raw(w.data(), in_features, out_features, x, grad_y)
}

/// Same-padded stride-1 cross-correlation with dequantized weights.
pub fn conv2d_forward(
    state: &LayerState,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    x: &Tensor,
) -> Result<Tensor> {
    let w = state.weight_values();
    conv2d_forward_raw(w.data(), &state.bias, in_channels, out_channels, kernel, x)
}

/// Adjoints of [`conv2d_forward`]. Returns `(grad_x, grad_W, grad_b)`.
pub fn conv2d_backward(
    state: &LayerState,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    x: &Tensor,
    grad_y: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let w = state.weight_values();
    conv2d_backward_raw(w.data(), in_channels, out_channels, kernel, x, grad_y)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(data, x.shape().to_vec()).expect("same shape")
}

/// Gradient passes only where the forward input was strictly positive.
pub fn relu_backward(x: &Tensor, grad_y: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "relu backward: {:?} vs {:?}",
            x.shape(),
            grad_y.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_y.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(data, x.shape().to_vec())
}

/// Softmax cross-entropy over a `[batch, classes]` logit tensor.
///
/// Returns the mean loss over the batch and the gradient with respect to
/// the logits (already divided by the batch size). Softmax uses
/// max-subtraction for stability.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, classes) = match logits.shape() {
        [b, c] => (*b, *c),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "logits must be [batch, classes], got {other:?}"
            )))
        }
    };
    if labels.len() != batch {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for batch {batch}",
            labels.len()
        )));
    }
    let ld = logits.data();
    let mut grad = vec![0.0; batch * classes];
    let mut loss = 0.0;
    for b in 0..batch {
        let label = labels[b];
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = &ld[b * classes..(b + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - m).exp();
        }
        let log_sum = sum.ln();
        loss += -(row[label] - m - log_sum);
        let grow = &mut grad[b * classes..(b + 1) * classes];
        for (c, g) in grow.iter_mut().enumerate() {
            let p = (row[c] - m).exp() / sum;
            *g = (p - if c == label { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((loss / batch as f64, Tensor::new(grad, vec![batch, classes])?))
}

/// Rounding mode for re-coding updated weights onto the k-bit grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    /// Round the proposal to the nearest grid level (default). An update
    /// registers only when it exceeds half the resolution.
    Nearest,
    /// Step by whole grid levels: the magnitude moved is
    /// `floor(|lr*g| / eps) * eps`, so updates below the resolution are
    /// dropped entirely.
    Floor,
}

impl Rounding {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nearest" => Some(Rounding::Nearest),
            "floor" => Some(Rounding::Floor),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Rounding::Nearest => "nearest",
            Rounding::Floor => "floor",
        }
    }
}

/// One SGD step with momentum and weight decay on a layer whose weights
/// live on a k-bit grid.
///
/// The effective gradient is `buf <- momentum * buf + (grad_W + wd * w)`.
/// The real-domain proposal `w - lr * buf` is snapped onto the layer's
/// current grid per the [`Rounding`] mode: with `Floor` the magnitude
/// moved is exactly `floor(|lr * g_eff| / eps) * eps`, with `Nearest` the
/// proposal rounds to the nearest grid level, so updates below `eps`
/// (respectively `eps / 2`) underflow and leave the weight in place. The
/// snap works on the unbounded extension of the grid; when any element
/// actually moves, the affine parameters are refit from the stepped
/// values so the representable range tracks the live tensor. If no
/// element moves the stored tensor stays bit-identical. The bias is
/// updated with a plain `b - lr * grad_b` step and stays real-valued, as
/// does the momentum buffer.
pub fn sgd_step_quantized(
    state: &mut LayerState,
    layer_id: usize,
    grad_w: &Tensor,
    grad_b: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    rounding: Rounding,
) -> Result<()> {
    if grad_w.data().iter().any(|v| !v.is_finite()) || grad_b.iter().any(|v| !v.is_finite()) {
        return Err(Error::GradientBlowUp { layer: layer_id });
    }
    let w = state.weight_values();
    if grad_w.shape() != w.shape() {
        return Err(Error::ShapeMismatch(format!(
            "grad_W shape {:?} vs weights {:?}",
            grad_w.shape(),
            w.shape()
        )));
    }
    if grad_b.len() != state.bias.len() {
        return Err(Error::ShapeMismatch(format!(
            "grad_b length {} vs bias {}",
            grad_b.len(),
            state.bias.len()
        )));
    }

    let buf = state.momentum_buf.data_mut();
    for ((bv, &g), &wv) in buf.iter_mut().zip(grad_w.data()).zip(w.data()) {
        *bv = momentum * *bv + (g + weight_decay * wv);
    }

    match &mut state.weights {
        WeightStore::Real(t) => {
            for (wv, bv) in t.data_mut().iter_mut().zip(buf.iter()) {
                *wv -= lr * bv;
            }
        }
        WeightStore::Quantized(q) => {
            let params = q.params();
            let s = params.scale;
            let zp = params.zero_point as i64;
            // Grid levels are s * m for integer m = code - zero_point
            // (the zero nudge keeps the grid zero-aligned). Step each
            // element to a new integer level.
            let mut changed = false;
            let mut stepped = Vec::with_capacity(q.len());
            for ((&c, &wv), &bv) in q.codes().iter().zip(w.data()).zip(buf.iter()) {
                let delta = lr * bv;
                let m_old = c as i64 - zp;
                let m_new = match rounding {
                    Rounding::Nearest => ((wv - delta) / s).round() as i64,
                    Rounding::Floor => {
                        let levels = (delta.abs() / s).floor() as i64;
                        if delta >= 0.0 {
                            m_old - levels
                        } else {
                            m_old + levels
                        }
                    }
                };
                changed |= m_new != m_old;
                stepped.push(s * m_new as f64);
            }
            if changed {
                let stepped = Tensor::new(stepped, w.shape().to_vec())?;
                *q = QuantizedTensor::quantize_fit(&stepped, params.bitwidth)?;
            }
        }
    }

    for (b, &g) in state.bias.iter_mut().zip(grad_b) {
        *b -= lr * g;
    }
    Ok(())
}
