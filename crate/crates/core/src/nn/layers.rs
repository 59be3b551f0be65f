//! Stateful layers with cached forward activations and hand-written backward passes.

use super::batchnorm::{batch_norm, batch_norm_backward, BnCache, BnMode, RunningStats};
use super::conv::{conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward};
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};
use rand::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

fn missing_cache() -> Error {
    Error::State("backward called before forward".into())
}

/// He-style uniform init for a `[fH, fW, Cin, Cout]` filter.
fn init_filter<R: Rng>(fh: usize, fw: usize, cin: usize, cout: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(&[fh, fw, cin, cout], bound, rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new<R: Rng>(k: usize, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let w = init_filter(k, k, cin, cout, k * k * cin, rng);
        Conv2d {
            weight: Parameter::new(w).with_decay(),
            bias: Parameter::new(Tensor::zeros(&[cout])),
            stride,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight.value, Some(&self.bias.value), self.stride)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(missing_cache)?;
        let g = conv2d_backward(&x, &self.weight.value, gy, self.stride)?;
        self.weight.grad.add_assign(&g.weights);
        self.bias.grad.add_assign(&g.bias);
        Ok(g.input)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    /// `[fH, fW, Cout, Cin]` in conv2d terms: maps `Cin` channels to `Cout`.
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    input: Option<Tensor>,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(k: usize, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        // each output sees about k*k*cin/stride^2 inputs
        let fan_in = (k * k * cin / (stride * stride)).max(1);
        let w = init_filter(k, k, cout, cin, fan_in, rng);
        ConvTranspose2d {
            weight: Parameter::new(w).with_decay(),
            bias: Parameter::new(Tensor::zeros(&[cout])),
            stride,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose2d(x, &self.weight.value, Some(&self.bias.value), self.stride)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(missing_cache)?;
        let g = conv_transpose2d_backward(&x, &self.weight.value, gy, self.stride)?;
        self.weight.grad.add_assign(&g.weights);
        self.bias.grad.add_assign(&g.bias);
        Ok(g.input)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub stats: RunningStats,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Parameter::new(Tensor::full(&[c], 1.0)),
            beta: Parameter::new(Tensor::zeros(&[c])),
            stats: RunningStats::empty(BN_MOMENTUM),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let (y, cache) = batch_norm(x, &self.gamma.value, &self.beta.value, mode, &mut self.stats, BN_EPS)?;
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(missing_cache)?;
        let g = batch_norm_backward(&cache, &self.gamma.value, gy);
        self.gamma.grad.add_assign(&g.gamma);
        self.beta.grad.add_assign(&g.beta);
        Ok(g.input)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    output: Option<Tensor>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = x.map(|v| v.max(0.0));
        self.output = Some(y.clone());
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let y = self.output.take().ok_or_else(missing_cache)?;
        let mut g = gy.clone();
        for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
            if yv <= 0.0 {
                *gv = 0.0;
            }
        }
        Ok(g)
    }
}

/// Two 3x3 convolutions with batch norm and a skip connection: `x + BN(conv(relu(BN(conv(x)))))`.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    relu: Relu,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

impl ResidualUnit {
    pub fn new<R: Rng>(c: usize, rng: &mut R) -> Self {
        ResidualUnit {
            conv1: Conv2d::new(3, c, c, 1, rng),
            bn1: BatchNorm::new(c),
            relu: Relu::default(),
            conv2: Conv2d::new(3, c, c, 1, rng),
            bn2: BatchNorm::new(c),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let h = self.conv1.forward(x)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = self.relu.forward(&h);
        let h = self.conv2.forward(&h)?;
        let mut h = self.bn2.forward(&h, mode)?;
        h.add_assign(x);
        Ok(h)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let g = self.bn2.backward(gy)?;
        let g = self.conv2.backward(&g)?;
        let g = self.relu.backward(&g)?;
        let g = self.bn1.backward(&g)?;
        let mut g = self.conv1.backward(&g)?;
        g.add_assign(gy);
        Ok(g)
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        out.extend([
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
        ]);
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    Deconv(ConvTranspose2d),
    Bn(BatchNorm),
    Relu(Relu),
    Residual(Box<ResidualUnit>),
}

impl Layer {
    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::Deconv(l) => l.forward(x),
            Layer::Bn(l) => l.forward(x, mode),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::Residual(l) => l.forward(x, mode),
        }
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.backward(gy),
            Layer::Deconv(l) => l.backward(gy),
            Layer::Bn(l) => l.backward(gy),
            Layer::Relu(l) => l.backward(gy),
            Layer::Residual(l) => l.backward(gy),
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        match self {
            Layer::Conv(l) => out.extend([&mut l.weight, &mut l.bias]),
            Layer::Deconv(l) => out.extend([&mut l.weight, &mut l.bias]),
            Layer::Bn(l) => out.extend([&mut l.gamma, &mut l.beta]),
            Layer::Relu(_) => {}
            Layer::Residual(l) => l.params_mut(out),
        }
    }

    pub fn running_stats_mut<'a>(&'a mut self, out: &mut Vec<&'a mut RunningStats>) {
        match self {
            Layer::Bn(l) => out.push(&mut l.stats),
            Layer::Residual(l) => {
                out.push(&mut l.bn1.stats);
                out.push(&mut l.bn2.stats);
            }
            _ => {}
        }
    }
}

/// Layers applied in order.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let mut g = gy.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            l.params_mut(&mut out);
        }
        out
    }

    pub fn running_stats_mut(&mut self) -> Vec<&mut RunningStats> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            l.running_stats_mut(&mut out);
        }
        out
    }
}
