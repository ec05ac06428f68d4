//! Minimal feed-forward network toolkit: layers with explicit backward
//! passes, a sequential container, optimizers and a binary checkpoint format.
//!
//! Activations are flat `Vec<f64>` in channel-major layout `[c][h][w]`
//! (1-D signals use `h = 1`).

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MCNN1";

/// Activation shape `(channels, height, width)`.
pub type Shape = [usize; 3];

fn numel(s: Shape) -> usize {
    s[0] * s[1] * s[2]
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv2d { in_c: usize, out_c: usize, k: usize, pad: usize },
    MaxPool2 ,
    Conv1d { in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize },
    ConvT1d { in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, out_pad: usize },
    Relu,
    Dropout { p: f64 },
    /// Leaky rectifier with negative-side slope `slope`.
    LeakyRelu { slope: f64 },
}

impl LayerKind {
    fn code(&self) -> u8 {
        match self {
            LayerKind::Dense { .. } => 1,
            LayerKind::Conv2d { .. } => 2,
            LayerKind::MaxPool2 => 3,
            LayerKind::Conv1d { .. } => 4,
            LayerKind::ConvT1d { .. } => 5,
            LayerKind::Relu => 6,
            LayerKind::Dropout { .. } => 7,
            LayerKind::LeakyRelu { .. } => 8,
        }
    }

    fn dims(&self) -> [u32; 6] {
        match *self {
            LayerKind::Dense { inputs, outputs } => [inputs as u32, outputs as u32, 0, 0, 0, 0],
            LayerKind::Conv2d { in_c, out_c, k, pad } => [in_c as u32, out_c as u32, k as u32, pad as u32, 0, 0],
            LayerKind::Conv1d { in_c, out_c, k, stride, pad } => {
                [in_c as u32, out_c as u32, k as u32, stride as u32, pad as u32, 0]
            }
            LayerKind::ConvT1d { in_c, out_c, k, stride, pad, out_pad } => {
                [in_c as u32, out_c as u32, k as u32, stride as u32, pad as u32, out_pad as u32]
            }
            LayerKind::Dropout { p } => [(p * 1e6).round() as u32, 0, 0, 0, 0, 0],
            LayerKind::LeakyRelu { slope } => [(slope * 1e6).round() as u32, 0, 0, 0, 0, 0],
            LayerKind::MaxPool2 | LayerKind::Relu => [0; 6],
        }
    }

    fn from_code(code: u8, d: [u32; 6]) -> Result<Self> {
        let u = |i: usize| d[i] as usize;
        Ok(match code {
            1 => LayerKind::Dense { inputs: u(0), outputs: u(1) },
            2 => LayerKind::Conv2d { in_c: u(0), out_c: u(1), k: u(2), pad: u(3) },
            3 => LayerKind::MaxPool2,
            4 => LayerKind::Conv1d { in_c: u(0), out_c: u(1), k: u(2), stride: u(3), pad: u(4) },
            5 => LayerKind::ConvT1d { in_c: u(0), out_c: u(1), k: u(2), stride: u(3), pad: u(4), out_pad: u(5) },
            6 => LayerKind::Relu,
            7 => LayerKind::Dropout { p: d[0] as f64 / 1e6 },
            8 => LayerKind::LeakyRelu { slope: d[0] as f64 / 1e6 },
            c => return Err(Error::Format(format!("unknown layer code {c}"))),
        })
    }

    /// Weight and bias counts.
    fn param_counts(&self) -> (usize, usize) {
        match *self {
            LayerKind::Dense { inputs, outputs } => (inputs * outputs, outputs),
            LayerKind::Conv2d { in_c, out_c, k, .. } => (in_c * out_c * k * k, out_c),
            LayerKind::Conv1d { in_c, out_c, k, .. } => (in_c * out_c * k, out_c),
            LayerKind::ConvT1d { in_c, out_c, k, .. } => (in_c * out_c * k, out_c),
            _ => (0, 0),
        }
    }

    /// Fan-in and fan-out for Xavier initialization.
    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerKind::Dense { inputs, outputs } => (inputs, outputs),
            LayerKind::Conv2d { in_c, out_c, k, .. } => (in_c * k * k, out_c * k * k),
            LayerKind::Conv1d { in_c, out_c, k, .. } => (in_c * k, out_c * k),
            LayerKind::ConvT1d { in_c, out_c, k, stride, .. } => (in_c * k / stride.max(1), out_c * k),
            _ => (1, 1),
        }
    }

    pub fn output_shape(&self, s: Shape) -> Result<Shape> {
        Ok(match *self {
            LayerKind::Dense { inputs, outputs } => {
                if numel(s) != inputs {
                    return invalid(format!("dense expects {inputs} inputs, got {}", numel(s)));
                }
                [outputs, 1, 1]
            }
            LayerKind::Conv2d { in_c, out_c, k, pad } => {
                if s[0] != in_c || s[1] + 2 * pad < k || s[2] + 2 * pad < k {
                    return invalid("conv2d input shape mismatch");
                }
                [out_c, s[1] + 2 * pad - k + 1, s[2] + 2 * pad - k + 1]
            }
            LayerKind::MaxPool2 => [s[0], s[1] / 2, s[2] / 2],
            LayerKind::Conv1d { in_c, out_c, k, stride, pad } => {
                if s[0] != in_c || s[1] != 1 || s[2] + 2 * pad < k {
                    return invalid("conv1d input shape mismatch");
                }
                [out_c, 1, (s[2] + 2 * pad - k) / stride + 1]
            }
            LayerKind::ConvT1d { in_c, out_c, k, stride, pad, out_pad } => {
                if s[0] != in_c || s[1] != 1 || s[2] == 0 {
                    return invalid("conv-transpose input shape mismatch");
                }
                let len = (s[2] - 1) * stride + k + out_pad;
                if len <= 2 * pad {
                    return invalid("conv-transpose output would be empty");
                }
                [out_c, 1, len - 2 * pad]
            }
            LayerKind::Relu | LayerKind::Dropout { .. } | LayerKind::LeakyRelu { .. } => s,
        })
    }
}

/// One layer with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub enum Cache {
    Input(Vec<f64>),
    Mask(Vec<f64>),
    Argmax(Vec<usize>),
    None,
}

impl Layer {
    pub fn new(kind: LayerKind, in_shape: Shape) -> Result<Self> {
        let out_shape = kind.output_shape(in_shape)?;
        let (nw, nb) = kind.param_counts();
        Ok(Self { kind, in_shape, out_shape, weights: vec![0.0; nw], bias: vec![0.0; nb] })
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier_init(&mut self, rng: &mut impl Rng) {
        let (fi, fo) = self.kind.fans();
        let a = (6.0 / (fi + fo) as f64).sqrt();
        for w in self.weights.iter_mut() {
            *w = rng.gen_range(-a..a);
        }
        self.bias.fill(0.0);
    }

    /// Forward pass. `train` carries the RNG used for dropout masks.
    pub fn forward(&self, x: &[f64], train: Option<&mut ChaCha8Rng>) -> (Vec<f64>, Cache) {
        debug_assert_eq!(x.len(), numel(self.in_shape));
        match self.kind {
            LayerKind::Dense { inputs, outputs } => {
                let mut y = self.bias.clone();
                for o in 0..outputs {
                    let row = &self.weights[o * inputs..(o + 1) * inputs];
                    y[o] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
                (y, Cache::Input(x.to_vec()))
            }
            LayerKind::Conv2d { in_c, out_c, k, pad } => {
                let [_, h, w] = self.in_shape;
                let [_, oh, ow] = self.out_shape;
                let mut y = vec![0.0; out_c * oh * ow];
                for o in 0..out_c {
                    let yo = &mut y[o * oh * ow..(o + 1) * oh * ow];
                    yo.fill(self.bias[o]);
                    for i in 0..in_c {
                        let xi = &x[i * h * w..(i + 1) * h * w];
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = self.weights[((o * in_c + i) * k + ky) * k + kx];
                                for yy in 0..oh {
                                    let sy = yy + ky;
                                    if sy < pad || sy - pad >= h {
                                        continue;
                                    }
                                    let row = &xi[(sy - pad) * w..(sy - pad + 1) * w];
                                    let out = &mut yo[yy * ow..(yy + 1) * ow];
                                    for (xx, ov) in out.iter_mut().enumerate() {
                                        let sx = xx + kx;
                                        if sx >= pad && sx - pad < w {
                                            *ov += wv * row[sx - pad];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                (y, Cache::Input(x.to_vec()))
            }
            LayerKind::MaxPool2 => {
                let [c, h, w] = self.in_shape;
                let [_, oh, ow] = self.out_shape;
                let mut y = vec![0.0; c * oh * ow];
                let mut arg = vec![0; c * oh * ow];
                for ch in 0..c {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let mut best = f64::MIN;
                            let mut bi = 0;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = ch * h * w + (2 * yy + dy) * w + 2 * xx + dx;
                                    if x[idx] > best {
                                        best = x[idx];
                                        bi = idx;
                                    }
                                }
                            }
                            let o = ch * oh * ow + yy * ow + xx;
                            y[o] = best;
                            arg[o] = bi;
                        }
                    }
                }
                (y, Cache::Argmax(arg))
            }
            LayerKind::Conv1d { in_c, out_c, k, stride, pad } => {
                let l = self.in_shape[2];
                let ol = self.out_shape[2];
                let mut y = vec![0.0; out_c * ol];
                for o in 0..out_c {
                    let yo = &mut y[o * ol..(o + 1) * ol];
                    yo.fill(self.bias[o]);
                    for i in 0..in_c {
                        let xi = &x[i * l..(i + 1) * l];
                        for kk in 0..k {
                            let wv = self.weights[(o * in_c + i) * k + kk];
                            for (t, ov) in yo.iter_mut().enumerate() {
                                let s = t * stride + kk;
                                if s >= pad && s - pad < l {
                                    *ov += wv * xi[s - pad];
                                }
                            }
                        }
                    }
                }
                (y, Cache::Input(x.to_vec()))
            }
            LayerKind::ConvT1d { in_c, out_c, k, stride, pad, .. } => {
                let l = self.in_shape[2];
                let ol = self.out_shape[2];
                let mut y = vec![0.0; out_c * ol];
                for o in 0..out_c {
                    y[o * ol..(o + 1) * ol].fill(self.bias[o]);
                }
                for i in 0..in_c {
                    let xi = &x[i * l..(i + 1) * l];
                    for o in 0..out_c {
                        let yo = &mut y[o * ol..(o + 1) * ol];
                        for kk in 0..k {
                            let wv = self.weights[(i * out_c + o) * k + kk];
                            for (t, xv) in xi.iter().enumerate() {
                                let p = t * stride + kk;
                                if p >= pad && p - pad < ol {
                                    yo[p - pad] += wv * xv;
                                }
                            }
                        }
                    }
                }
                (y, Cache::Input(x.to_vec()))
            }
            LayerKind::Relu => {
                let y: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
                let mask = x.iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect();
                (y, Cache::Mask(mask))
            }
            LayerKind::LeakyRelu { slope } => {
                let mask: Vec<f64> = x.iter().map(|v| if *v > 0.0 { 1.0 } else { slope }).collect();
                (x.iter().zip(&mask).map(|(v, k)| v * k).collect(), Cache::Mask(mask))
            }
            LayerKind::Dropout { p } => match train {
                Some(rng) if p > 0.0 => {
                    let keep = 1.0 - p;
                    let mask: Vec<f64> =
                        x.iter().map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                    (x.iter().zip(&mask).map(|(a, b)| a * b).collect(), Cache::Mask(mask))
                }
                _ => (x.to_vec(), Cache::None),
            },
        }
    }

    /// Backward pass: accumulates parameter gradients into `gw`/`gb` and
    /// returns the input gradient.
    pub fn backward(&self, cache: &Cache, gy: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        match (&self.kind, cache) {
            (LayerKind::Dense { inputs, outputs }, Cache::Input(x)) => {
                let mut gx = vec![0.0; *inputs];
                for o in 0..*outputs {
                    let g = gy[o];
                    gb[o] += g;
                    if g == 0.0 {
                        continue;
                    }
                    let row = &self.weights[o * inputs..(o + 1) * inputs];
                    let grow = &mut gw[o * inputs..(o + 1) * inputs];
                    for j in 0..*inputs {
                        grow[j] += g * x[j];
                        gx[j] += g * row[j];
                    }
                }
                gx
            }
            (LayerKind::Conv2d { in_c, out_c, k, pad }, Cache::Input(x)) => {
                let (in_c, out_c, k, pad) = (*in_c, *out_c, *k, *pad);
                let [_, h, w] = self.in_shape;
                let [_, oh, ow] = self.out_shape;
                let mut gx = vec![0.0; x.len()];
                for o in 0..out_c {
                    let go = &gy[o * oh * ow..(o + 1) * oh * ow];
                    gb[o] += go.iter().sum::<f64>();
                    for i in 0..in_c {
                        let xi = &x[i * h * w..(i + 1) * h * w];
                        let gxi = &mut gx[i * h * w..(i + 1) * h * w];
                        for ky in 0..k {
                            for kx in 0..k {
                                let widx = ((o * in_c + i) * k + ky) * k + kx;
                                let wv = self.weights[widx];
                                let mut acc = 0.0;
                                for yy in 0..oh {
                                    let sy = yy + ky;
                                    if sy < pad || sy - pad >= h {
                                        continue;
                                    }
                                    let r0 = (sy - pad) * w;
                                    for xx in 0..ow {
                                        let sx = xx + kx;
                                        if sx >= pad && sx - pad < w {
                                            let g = go[yy * ow + xx];
                                            acc += g * xi[r0 + sx - pad];
                                            gxi[r0 + sx - pad] += g * wv;
                                        }
                                    }
                                }
                                gw[widx] += acc;
                            }
                        }
                    }
                }
                gx
            }
            (LayerKind::MaxPool2, Cache::Argmax(arg)) => {
                let mut gx = vec![0.0; numel(self.in_shape)];
                for (g, &i) in gy.iter().zip(arg) {
                    gx[i] += g;
                }
                gx
            }
            (LayerKind::Conv1d { in_c, out_c, k, stride, pad }, Cache::Input(x)) => {
                let (in_c, out_c, k, stride, pad) = (*in_c, *out_c, *k, *stride, *pad);
                let l = self.in_shape[2];
                let ol = self.out_shape[2];
                let mut gx = vec![0.0; x.len()];
                for o in 0..out_c {
                    let go = &gy[o * ol..(o + 1) * ol];
                    gb[o] += go.iter().sum::<f64>();
                    for i in 0..in_c {
                        let xi = &x[i * l..(i + 1) * l];
                        let gxi = &mut gx[i * l..(i + 1) * l];
                        for kk in 0..k {
                            let widx = (o * in_c + i) * k + kk;
                            let wv = self.weights[widx];
                            let mut acc = 0.0;
                            for (t, g) in go.iter().enumerate() {
                                let s = t * stride + kk;
                                if s >= pad && s - pad < l {
                                    acc += g * xi[s - pad];
                                    gxi[s - pad] += g * wv;
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
                gx
            }
            (LayerKind::ConvT1d { in_c, out_c, k, stride, pad, .. }, Cache::Input(x)) => {
                let (in_c, out_c, k, stride, pad) = (*in_c, *out_c, *k, *stride, *pad);
                let l = self.in_shape[2];
                let ol = self.out_shape[2];
                let mut gx = vec![0.0; x.len()];
                for o in 0..out_c {
                    gb[o] += gy[o * ol..(o + 1) * ol].iter().sum::<f64>();
                }
                for i in 0..in_c {
                    let xi = &x[i * l..(i + 1) * l];
                    let gxi = &mut gx[i * l..(i + 1) * l];
                    for o in 0..out_c {
                        let go = &gy[o * ol..(o + 1) * ol];
                        for kk in 0..k {
                            let widx = (i * out_c + o) * k + kk;
                            let wv = self.weights[widx];
                            let mut acc = 0.0;
                            for t in 0..l {
                                let p = t * stride + kk;
                                if p >= pad && p - pad < ol {
                                    let g = go[p - pad];
                                    acc += g * xi[t];
                                    gxi[t] += g * wv;
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
                gx
            }
            (LayerKind::Relu, Cache::Mask(m))
            | (LayerKind::LeakyRelu { .. }, Cache::Mask(m))
            | (LayerKind::Dropout { .. }, Cache::Mask(m)) => {
                gy.iter().zip(m).map(|(a, b)| a * b).collect()
            }
            (LayerKind::Dropout { .. }, Cache::None) => gy.to_vec(),
            _ => panic!("cache does not match layer kind"),
        }
    }
}

/// Parameter gradients of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Layers applied in sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

/// Forward caches of a [`Sequential`].
pub struct Trace {
    caches: Vec<Cache>,
}

impl Sequential {
    /// Build from layer kinds, inferring shapes from `input`.
    pub fn build(input: Shape, kinds: &[LayerKind]) -> Result<Self> {
        let mut s = input;
        let mut layers = Vec::with_capacity(kinds.len());
        for k in kinds {
            let l = Layer::new(k.clone(), s)?;
            s = l.out_shape;
            layers.push(l);
        }
        Ok(Self { layers })
    }

    pub fn input_shape(&self) -> Shape {
        self.layers.first().map_or([0, 0, 0], |l| l.in_shape)
    }

    pub fn output_shape(&self) -> Shape {
        self.layers.last().map_or([0, 0, 0], |l| l.out_shape)
    }

    pub fn xavier_init(&mut self, rng: &mut impl Rng) {
        for l in &mut self.layers {
            l.xavier_init(rng);
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn forward(&self, x: &[f64], mut train: Option<&mut ChaCha8Rng>) -> (Vec<f64>, Trace) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for l in &self.layers {
            let (y, c) = l.forward(&cur, train.as_deref_mut());
            caches.push(c);
            cur = y;
        }
        (cur, Trace { caches })
    }

    pub fn infer(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x, None).0
    }

    pub fn zero_grads(&self) -> Vec<LayerGrad> {
        self.layers
            .iter()
            .map(|l| LayerGrad { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
            .collect()
    }

    /// Backpropagate `gy`, accumulating into `grads` (or skipping parameter
    /// gradients when `grads` is `None`). Returns the input gradient.
    pub fn backward(&self, trace: &Trace, gy: &[f64], grads: Option<&mut [LayerGrad]>) -> Vec<f64> {
        let mut g = gy.to_vec();
        match grads {
            Some(grads) => {
                for (i, l) in self.layers.iter().enumerate().rev() {
                    let lg = &mut grads[i];
                    g = l.backward(&trace.caches[i], &g, &mut lg.weights, &mut lg.bias);
                }
            }
            None => {
                for (i, l) in self.layers.iter().enumerate().rev() {
                    let mut gw = vec![0.0; l.weights.len()];
                    let mut gb = vec![0.0; l.bias.len()];
                    g = l.backward(&trace.caches[i], &g, &mut gw, &mut gb);
                }
            }
        }
        g
    }

    /// All parameters flattened layer by layer (weights then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return invalid("parameter vector length mismatch");
        }
        let mut i = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[i..i + nw]);
            i += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[i..i + nb]);
            i += nb;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        let s = self.input_shape();
        for d in s {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for l in &self.layers {
            w.write_all(&[l.kind.code()])?;
            for d in l.kind.dims() {
                w.write_all(&d.to_le_bytes())?;
            }
            w.write_all(&(l.num_params() as u64).to_le_bytes())?;
        }
        for v in self.flat_params() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let n = read_u32(r)? as usize;
        let input = [read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize];
        let mut kinds = Vec::with_capacity(n);
        let mut counts = Vec::with_capacity(n);
        for _ in 0..n {
            let mut code = [0u8];
            r.read_exact(&mut code)?;
            let mut dims = [0u32; 6];
            for d in dims.iter_mut() {
                *d = read_u32(r)?;
            }
            kinds.push(LayerKind::from_code(code[0], dims)?);
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            counts.push(u64::from_le_bytes(b8) as usize);
        }
        let mut seq = Self::build(input, &kinds)?;
        for (l, c) in seq.layers.iter().zip(&counts) {
            if l.num_params() != *c {
                return Err(Error::Format("layer table parameter count mismatch".into()));
            }
        }
        let total = seq.num_params();
        let mut p = Vec::with_capacity(total);
        for _ in 0..total {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8).map_err(|_| Error::Format("truncated parameters".into()))?;
            p.push(f64::from_le_bytes(b8));
        }
        seq.set_flat_params(&p)?;
        Ok(seq)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Write a checkpoint holding several named networks plus extra raw vectors.
pub fn write_checkpoint<W: Write>(mut w: W, nets: &[&Sequential], extra: &[&[f64]]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(nets.len() as u32).to_le_bytes())?;
    for n in nets {
        n.write_to(&mut w)?;
    }
    w.write_all(&(extra.len() as u32).to_le_bytes())?;
    for e in extra {
        w.write_all(&(e.len() as u64).to_le_bytes())?;
        for v in e.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Vec<Sequential>, Vec<Vec<f64>>)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let n = read_u32(&mut r)? as usize;
    let nets = (0..n).map(|_| Sequential::read_from(&mut r)).collect::<Result<Vec<_>>>()?;
    let ne = read_u32(&mut r)? as usize;
    let mut extra = Vec::with_capacity(ne);
    for _ in 0..ne {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut b8).map_err(|_| Error::Format("truncated checkpoint".into()))?;
            v.push(f64::from_le_bytes(b8));
        }
        extra.push(v);
    }
    Ok((nets, extra))
}

/// SHA-256 of the little-endian parameter bytes.
pub fn param_digest(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in params {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Softmax cross-entropy on logits against a target distribution.
/// Returns the loss and the logit gradient.
/// Cross-entropy of softmax(logits) against `target`, with its logit
/// gradient. Both stay accurate when the prediction saturates.
pub fn softmax_xent(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let top = argmax(logits);
    let mx = logits[top];
    let ln_sum = logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    let rest = |k: usize| p.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, q)| q).sum::<f64>();
    let mut loss = 0.0;
    for (k, t) in target.iter().enumerate() {
        if *t > 0.0 {
            // -ln p_k; for the top logit as log1p of the others' mass.
            let nll = if k == top {
                logits.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, v)| (v - mx).exp()).sum::<f64>().ln_1p()
            } else {
                mx - logits[k] + ln_sum
            };
            loss += t * nll;
        }
    }
    let g = p
        .iter()
        .zip(target)
        .enumerate()
        .map(|(k, (a, b))| if k == top { (1.0 - b) - rest(k) } else { a - b })
        .collect();
    (loss, g)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn one_hot(label: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[label] = 1.0;
    v
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::MIN), |a, (i, &x)| if x > a.1 { (i, x) } else { a }).0
}

/// Per-parameter adaptive optimizers over flat parameter vectors.
#[derive(Clone, Debug)]
pub enum Optimizer {
    RmsProp { lr: f64, alpha: f64, eps: f64, sq: Vec<f64> },
    Adam { lr: f64, b1: f64, b2: f64, eps: f64, m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl Optimizer {
    pub fn rmsprop(lr: f64, n: usize) -> Self {
        Optimizer::RmsProp { lr, alpha: 0.99, eps: 1e-8, sq: vec![0.0; n] }
    }

    pub fn adam(lr: f64, n: usize) -> Self {
        Optimizer::Adam { lr, b1: 0.9, b2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Gradient-descent step on `params` with gradient `g`.
    pub fn step(&mut self, params: &mut [f64], g: &[f64]) {
        match self {
            Optimizer::RmsProp { lr, alpha, eps, sq } => {
                for i in 0..params.len() {
                    sq[i] = *alpha * sq[i] + (1.0 - *alpha) * g[i] * g[i];
                    params[i] -= *lr * g[i] / (sq[i].sqrt() + *eps);
                }
            }
            Optimizer::Adam { lr, b1, b2, eps, m, v, t } => {
                *t += 1;
                let c1 = 1.0 - b1.powi(*t as i32);
                let c2 = 1.0 - b2.powi(*t as i32);
                for i in 0..params.len() {
                    m[i] = *b1 * m[i] + (1.0 - *b1) * g[i];
                    v[i] = *b2 * v[i] + (1.0 - *b2) * g[i] * g[i];
                    params[i] -= *lr * (m[i] / c1) / ((v[i] / c2).sqrt() + *eps);
                }
            }
        }
    }
}

/// Flatten per-layer gradients in the order of [`Sequential::flat_params`].
pub fn flatten_grads(grads: &[LayerGrad]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend_from_slice(&g.weights);
        out.extend_from_slice(&g.bias);
    }
    out
}

/// Central-difference step balancing truncation and rounding error.
pub const FD_STEP: f64 = 6.055_454_452_393_343e-6; // f64::EPSILON.cbrt()

/// One probed coordinate of a gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradProbe {
    pub analytic: f64,
    pub numeric: f64,
    /// Rounding error of the central difference, `eps (|f+| + |f-|) / 2h`.
    pub resolution: f64,
}

impl GradProbe {
    pub fn abs_err(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    pub fn scale(&self) -> f64 {
        self.analytic.abs().max(self.numeric.abs())
    }

    /// Within `tol` relative error, or within the difference's own rounding
    /// error when the gradient is too small for `tol` to be resolvable.
    pub fn passed(&self, tol: f64) -> bool {
        self.abs_err() <= tol * self.scale() || self.abs_err() <= self.resolution
    }
}

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    /// Largest `|a - fd| / max(|a|, |fd|, 1e-7)` over the probes.
    pub max_rel_err: f64,
    /// True when no probe was requested; the check is then vacuous.
    pub no_probes: bool,
    pub samples: Vec<GradProbe>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.no_probes || self.samples.iter().all(|p| p.passed(tol))
    }

    /// Probes that pass only through the rounding bound.
    pub fn resolution_limited(&self, tol: f64) -> usize {
        self.samples.iter().filter(|p| p.abs_err() > tol * p.scale()).count()
    }

    /// Largest relative error among probes whose gradient `tol` can resolve.
    pub fn max_resolved_rel_err(&self, tol: f64) -> f64 {
        self.samples
            .iter()
            .filter(|p| tol * p.scale() > p.resolution)
            .map(|p| p.abs_err() / p.scale())
            .fold(0.0, f64::max)
    }
}

/// Compare `analytic[i]` with `(f(p + h e_i) - f(p - h e_i)) / 2h` at
/// `probes` random coordinates.
pub fn grad_check(
    params: &[f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return invalid("gradient length mismatch");
    }
    if probes == 0 || params.is_empty() {
        return Ok(GradCheckReport { probes: 0, max_rel_err: 0.0, no_probes: true, samples: Vec::new() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    let mut samples = Vec::with_capacity(probes);
    for _ in 0..probes {
        let i = rng.gen_range(0..params.len());
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p);
        p[i] = orig - h;
        let fm = f(&p);
        p[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7);
        worst = worst.max(rel);
        samples.push(GradProbe { analytic: a, numeric: fd, resolution: f64::EPSILON * (fp.abs() + fm.abs()) / (2.0 * h) });
    }
    Ok(GradCheckReport { probes, max_rel_err: worst, no_probes: false, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn check_net(net: &mut Sequential, seed: u64, tol: f64) {
        let mut r = rng(seed);
        net.xavier_init(&mut r);
        for l in &mut net.layers {
            for b in l.bias.iter_mut() {
                *b = r.gen_range(-0.1..0.1);
            }
        }
        let n_in = numel(net.input_shape());
        let x: Vec<f64> = (0..n_in).map(|_| r.gen_range(-1.0..1.0)).collect();
        let n_out = numel(net.output_shape());
        let c: Vec<f64> = (0..n_out).map(|_| r.gen_range(-1.0..1.0)).collect();
        let loss = |net: &Sequential, x: &[f64]| net.infer(x).iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let (_, tr) = net.forward(&x, None);
        let mut grads = net.zero_grads();
        let gx = net.backward(&tr, &c, Some(&mut grads));
        let flat = net.flat_params();
        let rep = grad_check(&flat, &flatten_grads(&grads), |p| {
            let mut n2 = net.clone();
            n2.set_flat_params(p).unwrap();
            loss(&n2, &x)
        }, 200, 1e-6, seed).unwrap();
        assert!(rep.passed(tol), "params: {rep:?}");
        let rep = grad_check(&x, &gx, |xx| loss(net, xx), 100, 1e-6, seed + 1).unwrap();
        assert!(rep.passed(tol), "inputs: {rep:?}");
    }

    #[test]
    fn linear_toy_gradient_exact() {
        let mut net = Sequential::build([5, 1, 1], &[LayerKind::Dense { inputs: 5, outputs: 3 }]).unwrap();
        check_net(&mut net, 1, 1e-8);
    }

    #[test]
    fn conv2d_stack_gradients() {
        let mut net = Sequential::build(
            [2, 6, 8],
            &[
                LayerKind::Conv2d { in_c: 2, out_c: 3, k: 3, pad: 1 },
                LayerKind::Relu,
                LayerKind::MaxPool2,
                LayerKind::Dense { inputs: 3 * 3 * 4, outputs: 4 },
            ],
        )
        .unwrap();
        check_net(&mut net, 2, 1e-4);
    }

    #[test]
    fn conv1d_and_transpose_gradients() {
        let mut net = Sequential::build(
            [2, 1, 12],
            &[
                LayerKind::Conv1d { in_c: 2, out_c: 3, k: 3, stride: 2, pad: 1 },
                LayerKind::Relu,
                LayerKind::ConvT1d { in_c: 3, out_c: 2, k: 3, stride: 2, pad: 1, out_pad: 1 },
            ],
        )
        .unwrap();
        assert_eq!(net.output_shape(), [2, 1, 12]);
        check_net(&mut net, 3, 1e-4);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights and zero bias.
        let mut r = rng(4);
        let mut c = Layer::new(LayerKind::Conv1d { in_c: 2, out_c: 3, k: 3, stride: 2, pad: 1 }, [2, 1, 10]).unwrap();
        c.xavier_init(&mut r);
        let mut t =
            Layer::new(LayerKind::ConvT1d { in_c: 3, out_c: 2, k: 3, stride: 2, pad: 1, out_pad: 1 }, [3, 1, 5]).unwrap();
        for i in 0..2 {
            for o in 0..3 {
                for k in 0..3 {
                    t.weights[(o * 2 + i) * 3 + k] = c.weights[(o * 2 + i) * 3 + k];
                }
            }
        }
        let x: Vec<f64> = (0..20).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..15).map(|_| r.gen_range(-1.0..1.0)).collect();
        let cx = c.forward(&x, None).0;
        let ty = t.forward(&y, None).0;
        let a: f64 = cx.iter().zip(&y).map(|(p, q)| p * q).sum();
        let b: f64 = x.iter().zip(&ty).map(|(p, q)| p * q).sum();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dropout_identity_at_inference() {
        let l = Layer::new(LayerKind::Dropout { p: 0.5 }, [4, 1, 1]).unwrap();
        assert_eq!(l.forward(&[1.0, 2.0, 3.0, 4.0], None).0, vec![1.0, 2.0, 3.0, 4.0]);
        let big = Layer::new(LayerKind::Dropout { p: 0.5 }, [1000, 1, 1]).unwrap();
        let mut r = rng(1);
        let (y, _) = big.forward(&[1.0; 1000], Some(&mut r));
        let kept = y.iter().filter(|v| **v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = Sequential::build(
            [1, 4, 4],
            &[LayerKind::Conv2d { in_c: 1, out_c: 2, k: 3, pad: 1 }, LayerKind::Relu, LayerKind::MaxPool2,
              LayerKind::Dropout { p: 0.5 }, LayerKind::Dense { inputs: 8, outputs: 3 }],
        )
        .unwrap();
        net.xavier_init(&mut rng(5));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[&net], &[&[1.0, 2.0]]).unwrap();
        let (nets, extra) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(nets[0], net);
        assert_eq!(extra, vec![vec![1.0, 2.0]]);
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        assert!(read_checkpoint(&b"XXXXX"[..]).is_err());
    }

    #[test]
    fn xent_uniform_is_ln_n() {
        let (l, g) = softmax_xent(&[0.0; 8], &one_hot(3, 8));
        assert!((l - 8f64.ln()).abs() < 1e-12);
        assert!((g.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn xent_keeps_precision_when_saturated() {
        let mut z = [0.0; 8];
        z[2] = 40.0;
        let tiny = 7.0 * (-40f64).exp();
        let (l, g) = softmax_xent(&z, &one_hot(2, 8));
        assert!((l - tiny).abs() < 1e-12 * tiny);
        assert!((g[2] + tiny).abs() < 1e-12 * tiny);
        let (l, g) = softmax_xent(&z, &one_hot(5, 8));
        assert!((l - 40.0).abs() < 1e-12);
        assert!((g[5] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_probes_vacuous() {
        let r = grad_check(&[1.0], &[0.0], |_| 0.0, 0, 1e-6, 0).unwrap();
        assert!(r.no_probes && r.passed(0.0));
    }
}
