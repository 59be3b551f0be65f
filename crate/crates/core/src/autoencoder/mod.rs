//! Convolutional encoder/decoder with an importance-map head, the forward
//! pipeline that ties it to the quantizer and the context model, and the
//! concurrent training step.

mod pipeline;
mod train;

pub use pipeline::{distortion, ImageResult, Model, PipelineMode, PipelineTrace, QuantMode};
pub use train::{lr_at, train, RateModel, StepRecord, TrainConfig, Trainer};

use crate::error::{invalid, Error, Result};
use crate::nn::layers::{BatchNorm, Conv2d, ConvTranspose2d, Layer, Relu, ResidualUnit, Sequential};
use crate::nn::{BnMode, RunningStats};
use crate::tensor::{Parameter, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Layer sizes of the auto-encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeConfig {
    /// Output width of each stride-2 encoder stage.
    pub widths: Vec<usize>,
    /// Latent channels `K`.
    pub channels: usize,
    /// One residual unit after every stage.
    pub residual: bool,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            widths: vec![32, 64, 64],
            channels: 8,
            residual: true,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(invalid!("encoder widths must be nonempty and positive"));
        }
        if self.channels == 0 {
            return Err(invalid!("latent channel count K must be >= 1"));
        }
        Ok(())
    }

    pub fn downsampling(&self) -> usize {
        1 << self.widths.len()
    }
}

/// Per-channel input statistics used to normalize images before encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub var: [f64; 3],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: [0.5; 3],
            var: [1.0 / 12.0; 3],
        }
    }
}

impl NormStats {
    /// Mean and variance over every pixel of `images` (`[H, W, 3]` each).
    pub fn from_images(images: &[Tensor]) -> Result<Self> {
        if images.is_empty() {
            return Err(invalid!("no images to compute statistics from"));
        }
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut n = 0usize;
        for img in images {
            for px in img.data().chunks_exact(3) {
                for c in 0..3 {
                    sum[c] += px[c];
                    sq[c] += px[c] * px[c];
                }
                n += 1;
            }
        }
        let mean = sum.map(|s| s / n as f64);
        let mut var = [0.0; 3];
        for c in 0..3 {
            var[c] = (sq[c] / n as f64 - mean[c] * mean[c]).max(1e-4);
        }
        Ok(NormStats { mean, var })
    }

    fn std(&self) -> [f64; 3] {
        self.var.map(f64::sqrt)
    }
}

/// Encoder output for a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[N, h, w, K]`
    pub z: Tensor,
    /// Importance values in `[0, K]`, `[N, h, w, 1]`.
    pub y: Tensor,
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AeConfig,
    pub encoder: Sequential,
    pub decoder: Sequential,
    pub norm: NormStats,
    /// Sigmoid of the importance logits from the last training-mode encode.
    importance_sigmoid: Option<Tensor>,
    /// 1 where the last decode was not clamped.
    decode_pass: Option<Tensor>,
}

impl Autoencoder {
    pub fn new<R: Rng>(config: AeConfig, norm: NormStats, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let k = config.channels;
        let w = &config.widths;
        let mut encoder = Sequential::default();
        let mut prev = 3;
        for &width in w {
            encoder.push(Layer::Conv(Conv2d::new(5, prev, width, 2, rng)));
            encoder.push(Layer::Bn(BatchNorm::new(width)));
            encoder.push(Layer::Relu(Relu::default()));
            if config.residual {
                encoder.push(Layer::Residual(Box::new(ResidualUnit::new(width, rng))));
            }
            prev = width;
        }
        // Normalizing the head keeps latents inside the span of the centers,
        // where the soft quantizer still passes gradient.
        encoder.push(Layer::Conv(Conv2d::new(3, prev, k + 1, 1, rng)));
        encoder.push(Layer::Bn(BatchNorm::new(k + 1)));

        let mut decoder = Sequential::default();
        let last = *w.last().expect("validated");
        decoder.push(Layer::Deconv(ConvTranspose2d::new(3, k, last, 1, rng)));
        decoder.push(Layer::Bn(BatchNorm::new(last)));
        decoder.push(Layer::Relu(Relu::default()));
        for i in (0..w.len()).rev() {
            if config.residual {
                decoder.push(Layer::Residual(Box::new(ResidualUnit::new(w[i], rng))));
            }
            let out = if i == 0 { 3 } else { w[i - 1] };
            decoder.push(Layer::Deconv(ConvTranspose2d::new(5, w[i], out, 2, rng)));
            if i > 0 {
                decoder.push(Layer::Bn(BatchNorm::new(out)));
                decoder.push(Layer::Relu(Relu::default()));
            }
        }
        Ok(Autoencoder {
            config,
            encoder,
            decoder,
            norm,
            importance_sigmoid: None,
            decode_pass: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn downsampling(&self) -> usize {
        self.config.downsampling()
    }

    /// Encodes a `[N, H, W, 3]` batch (or a single `[H, W, 3]` image).
    pub fn encode(&mut self, x: &Tensor, mode: BnMode) -> Result<Encoded> {
        let x = as_batch(x)?;
        let [_, h, w, c] = *x.shape() else { unreachable!() };
        if c != 3 {
            return Err(invalid!("images must have 3 channels, got {c}"));
        }
        let f = self.downsampling();
        if h % f != 0 || w % f != 0 {
            return Err(invalid!("{h}x{w} is not a multiple of {f}; pad first"));
        }
        if !x.is_finite() {
            return Err(Error::Numeric("input image contains non-finite values".into()));
        }
        let std = self.norm.std();
        let mut xn = x;
        for px in xn.data_mut().chunks_exact_mut(3) {
            for ch in 0..3 {
                px[ch] = (px[ch] - self.norm.mean[ch]) / std[ch];
            }
        }
        let raw = self.encoder.forward(&xn, mode)?;
        let k = self.channels();
        let [n, lh, lw, _] = *raw.shape() else { unreachable!() };
        let mut z = Vec::with_capacity(n * lh * lw * k);
        let mut sig = Vec::with_capacity(n * lh * lw);
        for row in raw.data().chunks_exact(k + 1) {
            z.extend_from_slice(&row[..k]);
            sig.push(1.0 / (1.0 + (-row[k]).exp()));
        }
        let sig = Tensor::new(&[n, lh, lw, 1], sig)?;
        let y = sig.map(|s| k as f64 * s);
        self.importance_sigmoid = Some(sig);
        Ok(Encoded {
            z: Tensor::new(&[n, lh, lw, k], z)?,
            y,
        })
    }

    /// Backpropagates gradients w.r.t. `z` and `y` into the encoder parameters.
    pub fn encode_backward(&mut self, grad_z: &Tensor, grad_y: &Tensor) -> Result<()> {
        let sig = self
            .importance_sigmoid
            .take()
            .ok_or_else(|| Error::State("encode_backward without encode".into()))?;
        let k = self.channels();
        let [n, h, w, _] = *sig.shape() else { unreachable!() };
        let mut g = Vec::with_capacity(n * h * w * (k + 1));
        for ((gz, &gy), &s) in grad_z.data().chunks_exact(k).zip(grad_y.data()).zip(sig.data()) {
            g.extend_from_slice(gz);
            g.push(gy * k as f64 * s * (1.0 - s));
        }
        self.encoder.backward(&Tensor::new(&[n, h, w, k + 1], g)?)?;
        Ok(())
    }

    /// Decodes quantized latents `[N, h, w, K]` to images in `[0, 1]`.
    pub fn decode(&mut self, z_hat: &Tensor, mode: BnMode) -> Result<Tensor> {
        let z_hat = as_batch(z_hat)?;
        if *z_hat.shape().last().expect("rank 4") != self.channels() {
            return Err(invalid!(
                "latent has {} channels, decoder expects {}",
                z_hat.shape()[3],
                self.channels()
            ));
        }
        let out = self.decoder.forward(&z_hat, mode)?;
        let std = self.norm.std();
        let mut x = out;
        let mut pass = Tensor::zeros(x.shape());
        for (px, pp) in x.data_mut().chunks_exact_mut(3).zip(pass.data_mut().chunks_exact_mut(3)) {
            for ch in 0..3 {
                let v = px[ch] * std[ch] + self.norm.mean[ch];
                if (0.0..=1.0).contains(&v) {
                    pp[ch] = std[ch];
                }
                px[ch] = v.clamp(0.0, 1.0);
            }
        }
        self.decode_pass = Some(pass);
        Ok(x)
    }

    /// Backpropagates an image gradient through the decoder; returns the latent gradient.
    pub fn decode_backward(&mut self, grad_x: &Tensor) -> Result<Tensor> {
        let pass = self
            .decode_pass
            .take()
            .ok_or_else(|| Error::State("decode_backward without decode".into()))?;
        let mut g = grad_x.clone();
        for (gv, &p) in g.data_mut().iter_mut().zip(pass.data()) {
            *gv *= p;
        }
        self.decoder.backward(&g)
    }

    pub fn encoder_params_mut(&mut self) -> Vec<&mut Parameter> {
        self.encoder.params_mut()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn running_stats_mut(&mut self) -> Vec<&mut RunningStats> {
        let mut s = self.encoder.running_stats_mut();
        s.extend(self.decoder.running_stats_mut());
        s
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    match *x.shape() {
        [h, w, c] => x.clone().reshape(&[1, h, w, c]),
        [_, _, _, _] => Ok(x.clone()),
        ref s => Err(invalid!("expected [H,W,C] or [N,H,W,C], got {s:?}")),
    }
}
