use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::softmax;
use super::{NeuralError, Tensor};

/// Layer kinds and their size parameters, before initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Valid (unpadded) stride-1 convolution over `[channels, height, width]`.
    Conv2d { filters: usize, kernel: usize },
    Dense { units: usize },
    Relu,
    MaxPool2x2,
    Flatten,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// weight `[filters, in_channels, k, k]`, bias `[filters]`
    Conv2d { weight: Tensor, bias: Tensor },
    /// weight `[out, in]`, bias `[out]`
    Dense { weight: Tensor, bias: Tensor },
    Relu,
    MaxPool2x2,
    Flatten,
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Conv2d { .. } => "conv2d",
            Self::Dense { .. } => "dense",
            Self::Relu => "relu",
            Self::MaxPool2x2 => "maxpool2x2",
            Self::Flatten => "flatten",
            Self::Softmax => "softmax",
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Self::Conv2d { weight, bias } | Self::Dense { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Conv2d { weight, bias } | Self::Dense { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    /// Output shape for `input`, or a description of the mismatch.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match self {
            Self::Conv2d { weight, .. } => {
                let ws = weight.shape();
                let (f, c, k) = (ws[0], ws[1], ws[2]);
                match input {
                    [ic, h, w] if *ic == c && *h >= k && *w >= k => Ok(vec![f, h - k + 1, w - k + 1]),
                    _ => Err(format!("expected [{c}, >={k}, >={k}], got {input:?}")),
                }
            }
            Self::Dense { weight, .. } => {
                let (o, i) = (weight.shape()[0], weight.shape()[1]);
                match input {
                    [n] if *n == i => Ok(vec![o]),
                    _ => Err(format!("expected [{i}], got {input:?}")),
                }
            }
            Self::Relu => Ok(input.to_vec()),
            Self::MaxPool2x2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(format!("expected [c, >=2, >=2], got {input:?}")),
            },
            Self::Flatten => Ok(vec![input.iter().product()]),
            Self::Softmax => match input {
                [n] if *n > 0 => Ok(vec![*n]),
                _ => Err(format!("expected a non-empty vector, got {input:?}")),
            },
        }
    }

    fn forward(&self, x: &Tensor, out_shape: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(out_shape);
        match self {
            Self::Conv2d { weight, bias } => conv_forward(weight, bias, x, &mut out),
            Self::Dense { weight, bias } => {
                let (o, i) = (weight.shape()[0], weight.shape()[1]);
                let (w, xd) = (weight.data(), x.data());
                for (r, y) in out.data_mut().iter_mut().enumerate() {
                    *y = bias.data()[r] + dot(&w[r * i..(r + 1) * i], xd);
                }
                debug_assert_eq!(out.len(), o);
            }
            Self::Relu => {
                for (y, v) in out.data_mut().iter_mut().zip(x.data()) {
                    *y = v.max(0.0);
                }
            }
            Self::MaxPool2x2 => {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let xd = x.data();
                let od = out.data_mut();
                for ch in 0..c {
                    for r in 0..oh {
                        for col in 0..ow {
                            let (_, v) = pool_argmax(xd, ch, h, w, r, col);
                            od[(ch * oh + r) * ow + col] = v;
                        }
                    }
                }
            }
            Self::Flatten => out.data_mut().copy_from_slice(x.data()),
            Self::Softmax => out.data_mut().copy_from_slice(&softmax(x.data())),
        }
        out
    }

    /// Returns the input gradient and pushes parameter gradients (weight, bias).
    fn backward(&self, x: &Tensor, grad_out: &Tensor, param_grads: &mut Vec<Tensor>) -> Tensor {
        let mut gin = Tensor::zeros(x.shape());
        match self {
            Self::Conv2d { weight, .. } => {
                let mut gw = Tensor::zeros(weight.shape());
                let mut gb = Tensor::zeros(&[weight.shape()[0]]);
                conv_backward(weight, x, grad_out, &mut gw, &mut gb, &mut gin);
                param_grads.push(gw);
                param_grads.push(gb);
            }
            Self::Dense { weight, .. } => {
                let (o, i) = (weight.shape()[0], weight.shape()[1]);
                let mut gw = Tensor::zeros(&[o, i]);
                let (w, xd, g) = (weight.data(), x.data(), grad_out.data());
                {
                    let gwd = gw.data_mut();
                    for r in 0..o {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for (gwv, xv) in gwd[r * i..(r + 1) * i].iter_mut().zip(xd) {
                            *gwv = gr * xv;
                        }
                    }
                }
                let gid = gin.data_mut();
                for r in 0..o {
                    let gr = g[r];
                    if gr == 0.0 {
                        continue;
                    }
                    for (gi, wv) in gid.iter_mut().zip(&w[r * i..(r + 1) * i]) {
                        *gi += gr * wv;
                    }
                }
                param_grads.push(gw);
                param_grads.push(Tensor::vector(g.to_vec()));
            }
            Self::Relu => {
                for ((gi, g), v) in gin.data_mut().iter_mut().zip(grad_out.data()).zip(x.data()) {
                    *gi = if *v > 0.0 { *g } else { 0.0 };
                }
            }
            Self::MaxPool2x2 => {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let (xd, g) = (x.data(), grad_out.data());
                let gid = gin.data_mut();
                for ch in 0..c {
                    for r in 0..oh {
                        for col in 0..ow {
                            let (idx, _) = pool_argmax(xd, ch, h, w, r, col);
                            gid[idx] += g[(ch * oh + r) * ow + col];
                        }
                    }
                }
            }
            Self::Flatten => gin.data_mut().copy_from_slice(grad_out.data()),
            Self::Softmax => {
                // J^T g = p * (g - <p, g>)
                let p = softmax(x.data());
                let pg: f64 = p.iter().zip(grad_out.data()).map(|(a, b)| a * b).sum();
                for ((gi, pi), g) in gin.data_mut().iter_mut().zip(&p).zip(grad_out.data()) {
                    *gi = pi * (g - pg);
                }
            }
        }
        gin
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flat index and value of the maximum in a 2x2 pooling cell; ties keep the first.
fn pool_argmax(xd: &[f64], ch: usize, h: usize, w: usize, r: usize, col: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for dr in 0..2 {
        for dc in 0..2 {
            let idx = (ch * h + 2 * r + dr) * w + 2 * col + dc;
            if xd[idx] > best.1 || best.0 == usize::MAX {
                best = (idx, xd[idx]);
            }
        }
    }
    best
}

fn conv_forward(weight: &Tensor, bias: &Tensor, x: &Tensor, out: &mut Tensor) {
    let ws = weight.shape();
    let (f, c, k) = (ws[0], ws[1], ws[2]);
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let (wd, xd, bd) = (weight.data(), x.data(), bias.data());
    let od = out.data_mut();
    for fi in 0..f {
        let plane = &mut od[fi * oh * ow..(fi + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bd[fi]);
        for ci in 0..c {
            let xplane = &xd[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let wv = wd[((fi * c + ci) * k + ki) * k + kj];
                    for r in 0..oh {
                        let xrow = &xplane[(r + ki) * w + kj..(r + ki) * w + kj + ow];
                        let orow = &mut plane[r * ow..(r + 1) * ow];
                        for (o, xv) in orow.iter_mut().zip(xrow) {
                            *o += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(weight: &Tensor, x: &Tensor, g: &Tensor, gw: &mut Tensor, gb: &mut Tensor, gin: &mut Tensor) {
    let ws = weight.shape();
    let (f, c, k) = (ws[0], ws[1], ws[2]);
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let (wd, xd, gd) = (weight.data(), x.data(), g.data());
    let gwd = gw.data_mut();
    let gbd = gb.data_mut();
    let gid = gin.data_mut();
    for fi in 0..f {
        let gplane = &gd[fi * oh * ow..(fi + 1) * oh * ow];
        gbd[fi] = gplane.iter().sum();
        for ci in 0..c {
            let xplane = &xd[ci * h * w..(ci + 1) * h * w];
            let giplane = &mut gid[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let widx = ((fi * c + ci) * k + ki) * k + kj;
                    let wv = wd[widx];
                    let mut acc = 0.0;
                    for r in 0..oh {
                        let base = (r + ki) * w + kj;
                        let grow = &gplane[r * ow..(r + 1) * ow];
                        let xrow = &xplane[base..base + ow];
                        acc += dot(grow, xrow);
                        for (gi, gv) in giplane[base..base + ow].iter_mut().zip(grow) {
                            *gi += wv * gv;
                        }
                    }
                    gwd[widx] = acc;
                }
            }
        }
    }
}

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed)
}

/// Activations recorded by [`Network::forward`]; only valid for the network
/// state that produced them.
#[derive(Debug, Clone)]
pub struct Cache {
    network_id: u64,
    version: u64,
    inputs: Vec<Tensor>,
}

/// Parameter gradients in [`Network::params`] order, plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

impl Gradients {
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.add_assign(b);
        }
        self.input.add_assign(&other.input);
    }

    pub fn scale(&mut self, factor: f64) {
        self.params.iter_mut().for_each(|t| t.scale(factor));
        self.input.scale(factor);
    }
}

/// A sequential stack of layers with fixed input shape.
#[derive(Debug, Serialize, Deserialize)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    #[serde(skip, default = "fresh_id")]
    id: u64,
    /// Bumped on every mutable parameter access; stale caches are refused.
    #[serde(skip)]
    version: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers
    }
}

impl Network {
    /// Builds the stack with He-normal weights and zero biases.
    pub fn new<R: Rng + ?Sized>(input_shape: &[usize], specs: &[LayerSpec], rng: &mut R) -> Result<Self, NeuralError> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (idx, spec) in specs.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Conv2d { filters, kernel } => {
                    let channels = *shape.first().ok_or_else(|| NeuralError::Shape {
                        layer: idx,
                        kind: "conv2d",
                        detail: "input has no channel axis".into(),
                    })?;
                    let fan_in = channels * kernel * kernel;
                    Layer::Conv2d {
                        weight: he_init(&[filters, channels, kernel, kernel], fan_in, rng),
                        bias: Tensor::zeros(&[filters]),
                    }
                }
                LayerSpec::Dense { units } => {
                    let fan_in = match shape.as_slice() {
                        [n] => *n,
                        other => {
                            return Err(NeuralError::Shape {
                                layer: idx,
                                kind: "dense",
                                detail: format!("expected a vector input, got {other:?}"),
                            })
                        }
                    };
                    Layer::Dense {
                        weight: he_init(&[units, fan_in], fan_in, rng),
                        bias: Tensor::zeros(&[units]),
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool2x2 => Layer::MaxPool2x2,
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Softmax => Layer::Softmax,
            };
            shape = layer.output_shape(&shape).map_err(|detail| NeuralError::Shape {
                layer: idx,
                kind: layer.kind(),
                detail,
            })?;
            layers.push(layer);
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            id: fresh_id(),
            version: 0,
        })
    }

    /// Wraps explicit layers after checking shape compatibility.
    pub fn from_layers(input_shape: &[usize], layers: Vec<Layer>) -> Result<Self, NeuralError> {
        let net = Self {
            input_shape: input_shape.to_vec(),
            layers,
            id: fresh_id(),
            version: 0,
        };
        net.output_shape()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn output_shape(&self) -> Result<Vec<usize>, NeuralError> {
        let mut shape = self.input_shape.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|detail| NeuralError::Shape {
                layer: idx,
                kind: layer.kind(),
                detail,
            })?;
        }
        Ok(shape)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.version += 1;
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Copies parameter values from a network of identical architecture.
    pub fn copy_params_from(&mut self, other: &Network) -> Result<(), NeuralError> {
        if self.input_shape != other.input_shape || self.layers.len() != other.layers.len() {
            return Err(NeuralError::ArchitectureMismatch);
        }
        let src = other.params();
        let dst = self.params_mut();
        if src.len() != dst.len() || src.iter().zip(&dst).any(|(a, b)| a.shape() != b.shape()) {
            return Err(NeuralError::ArchitectureMismatch);
        }
        for (d, s) in dst.into_iter().zip(src) {
            d.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Cache), NeuralError> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(NeuralError::Shape {
                layer: 0,
                kind: self.layers.first().map_or("input", Layer::kind),
                detail: format!("expected input {:?}, got {:?}", self.input_shape, input.shape()),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let shape = layer.output_shape(x.shape()).map_err(|detail| NeuralError::Shape {
                layer: idx,
                kind: layer.kind(),
                detail,
            })?;
            let y = layer.forward(&x, &shape);
            inputs.push(x);
            x = y;
        }
        Ok((
            x,
            Cache {
                network_id: self.id,
                version: self.version,
                inputs,
            },
        ))
    }

    /// Output only, no cache.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor, NeuralError> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(NeuralError::Shape {
                layer: 0,
                kind: self.layers.first().map_or("input", Layer::kind),
                detail: format!("expected input {:?}, got {:?}", self.input_shape, input.shape()),
            });
        }
        let mut x = input.clone();
        for layer in &self.layers {
            let shape = layer.output_shape(x.shape()).expect("shapes checked at construction");
            x = layer.forward(&x, &shape);
        }
        Ok(x)
    }

    pub fn backward(&self, cache: &Cache, output_gradient: &Tensor) -> Result<Gradients, NeuralError> {
        if cache.network_id != self.id || cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(NeuralError::StaleCache);
        }
        let out_shape = self.output_shape()?;
        if output_gradient.shape() != out_shape.as_slice() {
            return Err(NeuralError::Shape {
                layer: self.layers.len().saturating_sub(1),
                kind: "output gradient",
                detail: format!("expected {:?}, got {:?}", out_shape, output_gradient.shape()),
            });
        }
        let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        let mut g = output_gradient.clone();
        for (layer, x) in self.layers.iter().zip(&cache.inputs).rev() {
            let mut pg = Vec::new();
            g = layer.backward(x, &g, &mut pg);
            per_layer.push(pg);
        }
        per_layer.reverse();
        Ok(Gradients {
            params: per_layer.into_iter().flatten().collect(),
            input: g,
        })
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            params: self.params().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            input: Tensor::zeros(&self.input_shape),
        }
    }
}

fn he_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let sd = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, sd).expect("positive sd");
    let data = (0..shape.iter().product::<usize>()).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}
