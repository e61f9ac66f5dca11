//! Minimal sequential network engine with hand-written backpropagation.
//!
//! Tensors are NHWC. Convolutions use "same" padding with stride 1 and are
//! lowered to a matrix product through an im2col buffer. The engine is
//! functional: a forward pass returns a [`Trace`] holding every intermediate
//! activation, and [`Network::backward`] turns a trace plus an output gradient
//! into a [`Gradients`] buffer. Networks themselves are never mutated by a
//! forward pass, so evaluation is safe to share across threads.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::decoder::{decode_backward, decode_into, Activation, CoordinateGrid, DecoderConfig};
use crate::tensor::{matmul, Op, Real, Tensor};

/// 3×3 or 1×1 convolution, stride 1, "same" padding, optional dilation.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub activation: Activation,
    /// `[ky][kx][c_in][c_out]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize, activation: Activation) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        Self {
            in_channels,
            out_channels,
            kernel,
            dilation,
            activation,
            weight: vec![T::zero(); kernel * kernel * in_channels * out_channels],
            bias: vec![T::zero(); out_channels],
        }
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

/// Fully connected map from a flattened item to an `h × w × c` output.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub activation: Activation,
    /// `[input][output]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn new(inputs: usize, out_h: usize, out_w: usize, out_c: usize, activation: Activation) -> Self {
        let outputs = out_h * out_w * out_c;
        Self {
            inputs,
            out_h,
            out_w,
            out_c,
            activation,
            weight: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    fn outputs(&self) -> usize {
        self.out_h * self.out_w * self.out_c
    }
}

/// 2×2 transpose convolution with stride 2 (doubles both spatial sides).
#[derive(Clone, Debug, PartialEq)]
pub struct TransposeConv2x2<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
    /// `[c_in][dy][dx][c_out]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> TransposeConv2x2<T> {
    pub fn new(in_channels: usize, out_channels: usize, activation: Activation) -> Self {
        Self {
            in_channels,
            out_channels,
            activation,
            weight: vec![T::zero(); in_channels * 4 * out_channels],
            bias: vec![T::zero(); out_channels],
        }
    }
}

/// Parameterless decoder stage: each item's feature vector is decoded over a
/// fixed coordinate grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordDecoder<T> {
    pub config: DecoderConfig,
    pub grid: CoordinateGrid<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    MaxPool2,
    Dropout(f32),
    /// Picks the feature vector at `(⌊h/2⌋, ⌊w/2⌋)`.
    CenterVector,
    Dense(Dense<T>),
    TransposeConv2x2(TransposeConv2x2<T>),
    Decoder(CoordDecoder<T>),
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::MaxPool2 => "maxpool2",
            Layer::Dropout(_) => "dropout",
            Layer::CenterVector => "center",
            Layer::Dense(_) => "dense",
            Layer::TransposeConv2x2(_) => "tconv2x2",
            Layer::Decoder(_) => "decoder",
        }
    }

    fn params(&self) -> Option<(&Vec<T>, &Vec<T>)> {
        match self {
            Layer::Conv2d(l) => Some((&l.weight, &l.bias)),
            Layer::Dense(l) => Some((&l.weight, &l.bias)),
            Layer::TransposeConv2x2(l) => Some((&l.weight, &l.bias)),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Vec<T>, &mut Vec<T>)> {
        match self {
            Layer::Conv2d(l) => Some((&mut l.weight, &mut l.bias)),
            Layer::Dense(l) => Some((&mut l.weight, &mut l.bias)),
            Layer::TransposeConv2x2(l) => Some((&mut l.weight, &mut l.bias)),
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` used for weight initialization.
    fn fans(&self) -> Option<(usize, usize)> {
        match self {
            Layer::Conv2d(l) => Some((l.patch_len(), l.kernel * l.kernel * l.out_channels)),
            Layer::Dense(l) => Some((l.inputs, l.out_h * l.out_w * l.out_c)),
            Layer::TransposeConv2x2(l) => Some((4 * l.out_channels, 4 * l.in_channels)),
            _ => None,
        }
    }

    /// Output shape `(h, w, c)` for a given input item shape.
    pub fn output_shape(&self, h: usize, w: usize, c: usize) -> (usize, usize, usize) {
        match self {
            Layer::Conv2d(l) => {
                assert_eq!(c, l.in_channels, "conv input channels");
                (h, w, l.out_channels)
            }
            Layer::MaxPool2 => (h / 2, w / 2, c),
            Layer::Dropout(_) => (h, w, c),
            Layer::CenterVector => (1, 1, c),
            Layer::Dense(l) => {
                assert_eq!(h * w * c, l.inputs, "dense input length");
                (l.out_h, l.out_w, l.out_c)
            }
            Layer::TransposeConv2x2(l) => {
                assert_eq!(c, l.in_channels, "transpose conv input channels");
                (2 * h, 2 * w, l.out_channels)
            }
            Layer::Decoder(d) => {
                assert_eq!(h * w * c, d.config.param_count(), "decoder vector length");
                (d.grid.side(), d.grid.side(), d.config.output_dim)
            }
        }
    }
}

/// Per-layer state recorded during a training forward pass.
#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    PoolArgmax(Vec<u8>),
    DropMask(Vec<T>),
}

/// Activations of one forward pass: `acts[0]` is the input, `acts[i + 1]` the
/// output of layer `i`.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub acts: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("trace has an input")
    }
}

/// Gradient buffers in the order of [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn flat_len(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    /// Gradient of the `index`-th scalar in flattened parameter order.
    pub fn get(&self, mut index: usize) -> T {
        for t in &self.tensors {
            if index < t.len() {
                return t[index];
            }
            index -= t.len();
        }
        panic!("gradient index out of range");
    }
}

/// A sequential stack of layers with an architecture tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub arch: String,
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Network<T> {
    pub fn new(arch: impl Into<String>, input_shape: (usize, usize, usize), layers: Vec<Layer<T>>) -> Self {
        let net = Self {
            arch: arch.into(),
            input_shape,
            layers,
        };
        // shape-check the whole stack once
        net.output_shape();
        net
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        let (mut h, mut w, mut c) = self.input_shape;
        for layer in &self.layers {
            (h, w, c) = layer.output_shape(h, w, c);
        }
        (h, w, c)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Named parameter arrays, `"<layer>.<kind>.weight"` / `".bias"`.
    pub fn params(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((w, b)) = layer.params() {
                out.push((format!("{i:02}.{}.weight", layer.kind()), w.as_slice()));
                out.push((format!("{i:02}.{}.bias", layer.kind()), b.as_slice()));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Some((w, b)) = layer.params_mut() {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    /// Mutable access to the `index`-th scalar in flattened parameter order.
    pub fn param_mut(&mut self, mut index: usize) -> &mut T {
        for t in self.params_mut() {
            if index < t.len() {
                return &mut t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            tensors: self.params().iter().map(|(_, p)| vec![T::zero(); p.len()]).collect(),
        }
    }

    /// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`, zero biases.
    pub fn init_uniform<R: RngCore>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            let Some((fan_in, fan_out)) = layer.fans() else {
                continue;
            };
            let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            let (w, b) = layer.params_mut().expect("parametric layer");
            for v in w.iter_mut() {
                *v = T::from_f64(rng.gen_range(-limit..limit));
            }
            b.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Copies the network into another element type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.as_f64())).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    dilation: c.dilation,
                    activation: c.activation,
                    weight: conv(&c.weight),
                    bias: conv(&c.bias),
                }),
                Layer::MaxPool2 => Layer::MaxPool2,
                Layer::Dropout(r) => Layer::Dropout(*r),
                Layer::CenterVector => Layer::CenterVector,
                Layer::Dense(d) => Layer::Dense(Dense {
                    inputs: d.inputs,
                    out_h: d.out_h,
                    out_w: d.out_w,
                    out_c: d.out_c,
                    activation: d.activation,
                    weight: conv(&d.weight),
                    bias: conv(&d.bias),
                }),
                Layer::TransposeConv2x2(t) => Layer::TransposeConv2x2(TransposeConv2x2 {
                    in_channels: t.in_channels,
                    out_channels: t.out_channels,
                    activation: t.activation,
                    weight: conv(&t.weight),
                    bias: conv(&t.bias),
                }),
                Layer::Decoder(d) => Layer::Decoder(CoordDecoder {
                    config: d.config,
                    grid: CoordinateGrid::new(d.grid.side()),
                }),
            })
            .collect();
        Network {
            arch: self.arch.clone(),
            input_shape: self.input_shape,
            layers,
        }
    }

    /// Evaluation-mode forward pass (dropout disabled).
    pub fn forward(&self, input: &Tensor<T>) -> Tensor<T> {
        let mut x = input.clone();
        for layer in &self.layers {
            if matches!(layer, Layer::Dropout(_)) {
                continue;
            }
            x = forward_layer(layer, &x, None).0;
        }
        x
    }

    /// Forward pass keeping every activation for [`Network::backward`].
    /// Dropout is active only when an RNG is supplied.
    pub fn forward_trace<R: RngCore + ?Sized>(&self, input: Tensor<T>, mut dropout_rng: Option<&mut R>) -> Trace<T> {
        assert_eq!(
            (input.h, input.w, input.c),
            self.input_shape,
            "network input shape"
        );
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        acts.push(input);
        for layer in &self.layers {
            let x = acts.last().expect("input pushed");
            let rng = dropout_rng.as_mut().map(|r| r as &mut dyn RngCore);
            let (y, a) = forward_layer(layer, x, rng);
            acts.push(y);
            aux.push(a);
        }
        Trace { acts, aux }
    }

    /// Backpropagates `grad_output` through a recorded trace.
    pub fn backward(&self, trace: &Trace<T>, grad_output: Tensor<T>) -> Gradients<T> {
        assert_eq!(trace.output().shape(), grad_output.shape(), "output gradient shape");
        let mut grads = self.zero_gradients();
        let mut slot = grads.tensors.len();
        let mut g = grad_output;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.acts[i];
            let output = &trace.acts[i + 1];
            let need_input = i > 0;
            let param_grads = if layer.params().is_some() {
                slot -= 2;
                let (a, b) = grads.tensors.split_at_mut(slot + 1);
                Some((&mut a[slot], &mut b[0]))
            } else {
                None
            };
            g = backward_layer(layer, input, output, &trace.aux[i], g, param_grads, need_input);
        }
        grads
    }
}

fn forward_layer<T: Real>(layer: &Layer<T>, x: &Tensor<T>, rng: Option<&mut dyn RngCore>) -> (Tensor<T>, Aux<T>) {
    let (h, w, c) = layer.output_shape(x.h, x.w, x.c);
    let mut y = Tensor::zeros(x.n, h, w, c);
    let aux = match layer {
        Layer::Conv2d(conv) => {
            conv_forward(conv, x, &mut y);
            Aux::None
        }
        Layer::MaxPool2 => Aux::PoolArgmax(pool_forward(x, &mut y)),
        Layer::Dropout(rate) => match rng {
            Some(rng) => {
                let keep = 1.0 - *rate as f64;
                let scale = T::from_f64(1.0 / keep);
                let mask: Vec<T> = (0..x.data.len())
                    .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
                    .collect();
                for ((o, &v), &m) in y.data.iter_mut().zip(&x.data).zip(&mask) {
                    *o = v * m;
                }
                Aux::DropMask(mask)
            }
            None => {
                y.data.copy_from_slice(&x.data);
                Aux::None
            }
        },
        Layer::CenterVector => {
            let (cy, cx) = (x.h / 2, x.w / 2);
            for n in 0..x.n {
                let src = ((n * x.h + cy) * x.w + cx) * x.c;
                y.item_mut(n).copy_from_slice(&x.data[src..src + x.c]);
            }
            Aux::None
        }
        Layer::Dense(d) => {
            matmul(x.n, d.inputs, d.outputs(), &x.data, Op::N, &d.weight, Op::N, &mut y.data, false);
            for row in y.data.chunks_exact_mut(d.outputs()) {
                for (v, b) in row.iter_mut().zip(&d.bias) {
                    *v = d.activation.apply(*v + *b);
                }
            }
            Aux::None
        }
        Layer::TransposeConv2x2(t) => {
            tconv_forward(t, x, &mut y);
            Aux::None
        }
        Layer::Decoder(dec) => {
            for n in 0..x.n {
                decode_into(&dec.config, x.item(n), dec.grid.coords(), y.item_mut(n))
                    .expect("decoder input length checked by output_shape");
            }
            Aux::None
        }
    };
    (y, aux)
}

#[allow(clippy::too_many_arguments)]
fn backward_layer<T: Real>(
    layer: &Layer<T>,
    input: &Tensor<T>,
    output: &Tensor<T>,
    aux: &Aux<T>,
    grad_out: Tensor<T>,
    param_grads: Option<(&mut Vec<T>, &mut Vec<T>)>,
    need_input: bool,
) -> Tensor<T> {
    match layer {
        Layer::Conv2d(conv) => {
            let (gw, gb) = param_grads.expect("conv has parameters");
            conv_backward(conv, input, output, grad_out, gw, gb, need_input)
        }
        Layer::MaxPool2 => {
            let Aux::PoolArgmax(arg) = aux else {
                unreachable!("pool trace without argmax")
            };
            let mut gin = Tensor::zeros(input.n, input.h, input.w, input.c);
            for n in 0..output.n {
                for oy in 0..output.h {
                    for ox in 0..output.w {
                        for c in 0..output.c {
                            let oi = ((n * output.h + oy) * output.w + ox) * output.c + c;
                            let a = arg[oi] as usize;
                            let (iy, ix) = (2 * oy + a / 2, 2 * ox + a % 2);
                            gin.data[((n * input.h + iy) * input.w + ix) * input.c + c] += grad_out.data[oi];
                        }
                    }
                }
            }
            gin
        }
        Layer::Dropout(_) => match aux {
            Aux::DropMask(mask) => {
                let mut g = grad_out;
                for (v, &m) in g.data.iter_mut().zip(mask) {
                    *v *= m;
                }
                g
            }
            _ => grad_out,
        },
        Layer::CenterVector => {
            let mut gin = Tensor::zeros(input.n, input.h, input.w, input.c);
            let (cy, cx) = (input.h / 2, input.w / 2);
            for n in 0..input.n {
                let dst = ((n * input.h + cy) * input.w + cx) * input.c;
                gin.data[dst..dst + input.c].copy_from_slice(grad_out.item(n));
            }
            gin
        }
        Layer::Dense(d) => {
            let (gw, gb) = param_grads.expect("dense has parameters");
            let outputs = d.outputs();
            let mut dpre = grad_out.data;
            for (g, &y) in dpre.iter_mut().zip(&output.data) {
                *g *= d.activation.derivative_from_output(y);
            }
            matmul(d.inputs, input.n, outputs, &input.data, Op::T, &dpre, Op::N, gw, true);
            for row in dpre.chunks_exact(outputs) {
                for (b, v) in gb.iter_mut().zip(row) {
                    *b += *v;
                }
            }
            let mut gin = Tensor::zeros(input.n, input.h, input.w, input.c);
            if need_input {
                matmul(input.n, outputs, d.inputs, &dpre, Op::N, &d.weight, Op::T, &mut gin.data, false);
            }
            gin
        }
        Layer::TransposeConv2x2(t) => {
            let (gw, gb) = param_grads.expect("transpose conv has parameters");
            tconv_backward(t, input, output, grad_out, gw, gb, need_input)
        }
        Layer::Decoder(dec) => {
            let mut gin = Tensor::zeros(input.n, input.h, input.w, input.c);
            for n in 0..input.n {
                decode_backward(
                    &dec.config,
                    input.item(n),
                    dec.grid.coords(),
                    output.item(n),
                    grad_out.item(n),
                    gin.item_mut(n),
                )
                .expect("decoder shapes checked by output_shape");
            }
            gin
        }
    }
}

fn im2col<T: Real>(input: &[T], h: usize, w: usize, conv: &Conv2d<T>, col: &mut [T]) {
    let (k, c, d) = (conv.kernel, conv.in_channels, conv.dilation as isize);
    let kk = conv.patch_len();
    let half = (k / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let row = &mut col[(y * w + x) * kk..(y * w + x + 1) * kk];
            for ky in 0..k {
                let sy = y as isize + (ky as isize - half) * d;
                for kx in 0..k {
                    let sx = x as isize + (kx as isize - half) * d;
                    let dst = &mut row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        let src = (sy as usize * w + sx as usize) * c;
                        dst.copy_from_slice(&input[src..src + c]);
                    } else {
                        dst.fill(T::zero());
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], h: usize, w: usize, conv: &Conv2d<T>, out: &mut [T]) {
    let (k, c, d) = (conv.kernel, conv.in_channels, conv.dilation as isize);
    let kk = conv.patch_len();
    let half = (k / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let row = &col[(y * w + x) * kk..(y * w + x + 1) * kk];
            for ky in 0..k {
                let sy = y as isize + (ky as isize - half) * d;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = x as isize + (kx as isize - half) * d;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = &row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    for (o, v) in out[dst..dst + c].iter_mut().zip(src) {
                        *o += *v;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(conv: &Conv2d<T>, x: &Tensor<T>, y: &mut Tensor<T>) {
    let hw = x.h * x.w;
    let kk = conv.patch_len();
    let oc = conv.out_channels;
    let mut col = if conv.kernel == 1 { Vec::new() } else { vec![T::zero(); hw * kk] };
    for n in 0..x.n {
        let src: &[T] = if conv.kernel == 1 {
            x.item(n)
        } else {
            im2col(x.item(n), x.h, x.w, conv, &mut col);
            &col
        };
        let out = y.item_mut(n);
        matmul(hw, kk, oc, src, Op::N, &conv.weight, Op::N, out, false);
        for row in out.chunks_exact_mut(oc) {
            for (v, b) in row.iter_mut().zip(&conv.bias) {
                *v = conv.activation.apply(*v + *b);
            }
        }
    }
}

fn conv_backward<T: Real>(
    conv: &Conv2d<T>,
    input: &Tensor<T>,
    output: &Tensor<T>,
    mut grad_out: Tensor<T>,
    gw: &mut [T],
    gb: &mut [T],
    need_input: bool,
) -> Tensor<T> {
    let hw = input.h * input.w;
    let kk = conv.patch_len();
    let oc = conv.out_channels;
    for (g, &y) in grad_out.data.iter_mut().zip(&output.data) {
        *g *= conv.activation.derivative_from_output(y);
    }
    let mut gin = Tensor::zeros(input.n, input.h, input.w, input.c);
    let lowered = conv.kernel != 1;
    let mut col = if lowered { vec![T::zero(); hw * kk] } else { Vec::new() };
    let mut dcol = if lowered && need_input { vec![T::zero(); hw * kk] } else { Vec::new() };
    for n in 0..input.n {
        let dpre = grad_out.item(n);
        let src: &[T] = if lowered {
            im2col(input.item(n), input.h, input.w, conv, &mut col);
            &col
        } else {
            input.item(n)
        };
        matmul(kk, hw, oc, src, Op::T, dpre, Op::N, gw, true);
        for row in dpre.chunks_exact(oc) {
            for (b, v) in gb.iter_mut().zip(row) {
                *b += *v;
            }
        }
        if need_input {
            if lowered {
                matmul(hw, oc, kk, dpre, Op::N, &conv.weight, Op::T, &mut dcol, false);
                col2im(&dcol, input.h, input.w, conv, gin.item_mut(n));
            } else {
                matmul(hw, oc, kk, dpre, Op::N, &conv.weight, Op::T, gin.item_mut(n), false);
            }
        }
    }
    gin
}

fn pool_forward<T: Real>(x: &Tensor<T>, y: &mut Tensor<T>) -> Vec<u8> {
    let mut arg = vec![0u8; y.data.len()];
    for n in 0..y.n {
        for oy in 0..y.h {
            for ox in 0..y.w {
                for c in 0..y.c {
                    let mut best = 0u8;
                    let mut best_v = x.at(n, 2 * oy, 2 * ox, c);
                    for a in 1..4u8 {
                        let v = x.at(n, 2 * oy + (a / 2) as usize, 2 * ox + (a % 2) as usize, c);
                        // first maximum wins ties
                        if v > best_v {
                            best_v = v;
                            best = a;
                        }
                    }
                    let oi = ((n * y.h + oy) * y.w + ox) * y.c + c;
                    y.data[oi] = best_v;
                    arg[oi] = best;
                }
            }
        }
    }
    arg
}

fn tconv_forward<T: Real>(t: &TransposeConv2x2<T>, x: &Tensor<T>, y: &mut Tensor<T>) {
    let hw = x.h * x.w;
    let oc = t.out_channels;
    let mut tmp = vec![T::zero(); hw * 4 * oc];
    for n in 0..x.n {
        matmul(hw, t.in_channels, 4 * oc, x.item(n), Op::N, &t.weight, Op::N, &mut tmp, false);
        let out = y.item_mut(n);
        for iy in 0..x.h {
            for ix in 0..x.w {
                for a in 0..4 {
                    let (oy, ox) = (2 * iy + a / 2, 2 * ix + a % 2);
                    let src = &tmp[((iy * x.w + ix) * 4 + a) * oc..][..oc];
                    let dst = &mut out[(oy * 2 * x.w + ox) * oc..][..oc];
                    for ((o, &s), &b) in dst.iter_mut().zip(src).zip(&t.bias) {
                        *o = t.activation.apply(s + b);
                    }
                }
            }
        }
    }
}

fn tconv_backward<T: Real>(
    t: &TransposeConv2x2<T>,
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad_out: Tensor<T>,
    gw: &mut [T],
    gb: &mut [T],
    need_input: bool,
) -> Tensor<T> {
    let hw = input.h * input.w;
    let oc = t.out_channels;
    let mut dtmp = vec![T::zero(); hw * 4 * oc];
    let mut gin = Tensor::zeros(input.n, input.h, input.w, input.c);
    for n in 0..input.n {
        let go = grad_out.item(n);
        let out = output.item(n);
        for iy in 0..input.h {
            for ix in 0..input.w {
                for a in 0..4 {
                    let (oy, ox) = (2 * iy + a / 2, 2 * ix + a % 2);
                    let o = (oy * 2 * input.w + ox) * oc;
                    let d = ((iy * input.w + ix) * 4 + a) * oc;
                    for j in 0..oc {
                        let v = go[o + j] * t.activation.derivative_from_output(out[o + j]);
                        dtmp[d + j] = v;
                        gb[j] += v;
                    }
                }
            }
        }
        matmul(t.in_channels, hw, 4 * oc, input.item(n), Op::T, &dtmp, Op::N, gw, true);
        if need_input {
            matmul(hw, 4 * oc, t.in_channels, &dtmp, Op::N, &t.weight, Op::T, gin.item_mut(n), false);
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::decoder::decode_mask;

    /// Direct-summation convolution used as an oracle for the im2col path.
    fn conv_naive(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut y = Tensor::zeros(x.n, x.h, x.w, conv.out_channels);
        let half = (conv.kernel / 2) as isize;
        let d = conv.dilation as isize;
        for n in 0..x.n {
            for oy in 0..x.h {
                for ox in 0..x.w {
                    for co in 0..conv.out_channels {
                        let mut acc = conv.bias[co];
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                let sy = oy as isize + (ky as isize - half) * d;
                                let sx = ox as isize + (kx as isize - half) * d;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                for ci in 0..conv.in_channels {
                                    let wi = ((ky * conv.kernel + kx) * conv.in_channels + ci) * conv.out_channels + co;
                                    acc += conv.weight[wi] * x.at(n, sy as usize, sx as usize, ci);
                                }
                            }
                        }
                        y.data[((n * x.h + oy) * x.w + ox) * conv.out_channels + co] = conv.activation.apply(acc);
                    }
                }
            }
        }
        y
    }

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(n, h, w, c, (0..n * h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn dilated_conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, d) in [(3, 1), (3, 2), (1, 1)] {
            let mut net = Network::new(
                "t",
                (7, 6, 3),
                vec![Layer::Conv2d(Conv2d::new(3, 4, k, d, Activation::Linear))],
            );
            net.init_uniform(&mut rng);
            if let Layer::Conv2d(c) = &mut net.layers[0] {
                c.bias.iter_mut().enumerate().for_each(|(i, b)| *b = i as f64 * 0.1);
            }
            let x = random_tensor(&mut rng, 2, 7, 6, 3);
            let got = net.forward(&x);
            let Layer::Conv2d(c) = &net.layers[0] else { unreachable!() };
            let want = conv_naive(c, &x);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn maxpool_picks_maximum() {
        let x = Tensor::from_vec(1, 2, 2, 1, vec![1.0f32, 5.0, 3.0, 2.0]);
        let net = Network::new("p", (2, 2, 1), vec![Layer::<f32>::MaxPool2]);
        assert_eq!(net.forward(&x).data, vec![5.0]);
    }

    #[test]
    fn transpose_conv_places_kernel_taps() {
        let mut t = TransposeConv2x2::<f64>::new(1, 1, Activation::Linear);
        t.weight = vec![1.0, 2.0, 3.0, 4.0];
        let net = Network::new("t", (1, 1, 1), vec![Layer::TransposeConv2x2(t)]);
        let y = net.forward(&Tensor::from_vec(1, 1, 1, 1, vec![2.0]));
        assert_eq!(y.data, vec![2.0, 4.0, 6.0, 8.0]);
    }

    /// Every layer kind in one stack, checked against central differences in f64.
    #[test]
    fn backward_matches_finite_differences_for_all_layer_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = DecoderConfig::new(2, 3, 1).unwrap();
        let mut net = Network::new(
            "grad",
            (8, 8, 2),
            vec![
                Layer::Conv2d(Conv2d::new(2, 3, 3, 1, Activation::Relu)),
                Layer::Dropout(0.25),
                Layer::Conv2d(Conv2d::new(3, 4, 3, 2, Activation::Relu)),
                Layer::MaxPool2,
                Layer::Conv2d(Conv2d::new(4, cfg.param_count(), 1, 1, Activation::Linear)),
                Layer::CenterVector,
                Layer::Dense(Dense::new(cfg.param_count(), 2, 2, 3, Activation::Relu)),
                Layer::TransposeConv2x2(TransposeConv2x2::new(3, 1, Activation::Sigmoid)),
                Layer::Conv2d(Conv2d::new(1, cfg.param_count(), 1, 1, Activation::Linear)),
                Layer::CenterVector,
                Layer::Decoder(CoordDecoder { config: cfg, grid: CoordinateGrid::new(5) }),
            ],
        );
        net.init_uniform(&mut rng);
        let x = random_tensor(&mut rng, 2, 8, 8, 2);
        let weights = random_tensor(&mut rng, 2, 5, 5, 1);
        let loss = |net: &Network<f64>| -> f64 {
            net.forward(&x).data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
        };
        let trace = net.forward_trace::<ChaCha8Rng>(x.clone(), None);
        let grads = net.backward(&trace, weights.clone());
        let total = net.param_count();
        assert_eq!(grads.flat_len(), total);
        let mut checked = 0;
        for idx in (0..total).step_by(7) {
            let g = grads.get(idx);
            let orig = *net.param_mut(idx);
            *net.param_mut(idx) = orig + 1e-6;
            let up = loss(&net);
            *net.param_mut(idx) = orig - 1e-6;
            let down = loss(&net);
            *net.param_mut(idx) = orig;
            let fd = (up - down) / 2e-6;
            assert!((fd - g).abs() <= 1e-5 * (1.0 + fd.abs()), "param {idx}: fd {fd} vs analytic {g}");
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn dropout_is_identity_without_rng() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::new("d", (2, 2, 1), vec![Layer::<f32>::Dropout(0.5)]);
        let x = Tensor::from_vec(1, 2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(net.forward(&x), x);
        let t = net.forward_trace(x.clone(), Some(&mut rng));
        assert!(t.output().data.iter().all(|&v| v == 0.0 || v >= 2.0));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn decoding_ignores_batch_composition(seed in 0u64..1000, batch in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = DecoderConfig::MASK;
            let net = Network::new(
                "dec",
                (1, 1, cfg.param_count()),
                vec![Layer::Decoder(CoordDecoder { config: cfg, grid: CoordinateGrid::new(64) })],
            );
            let x = random_tensor(&mut rng, batch, 1, 1, cfg.param_count());
            let together = net.forward(&x);
            let per = together.data.len() / batch;
            for b in 0..batch {
                let v = x.data[b * cfg.param_count()..(b + 1) * cfg.param_count()].to_vec();
                let alone = net.forward(&Tensor::from_vec(1, 1, 1, cfg.param_count(), v.clone()));
                let direct = decode_mask(&v, &CoordinateGrid::new(64)).unwrap();
                for ((a, t), d) in alone.data.iter().zip(&together.data[b * per..(b + 1) * per]).zip(&direct) {
                    proptest::prop_assert!((a - t).abs() <= 1e-6);
                    proptest::prop_assert!((a - d).abs() <= 1e-6);
                }
            }
        }
    }
}
