use super::{AeConfig, Autoencoder, NormStats};
use crate::context_model::{
    coding_cost, cost_grad_logits, hwk_to_scan, scan_to_hwk, symbol_bits, ContextCache, ContextModel, SymbolVolume,
};
use crate::error::{invalid, Result};
use crate::importance::{apply_mask, apply_mask_backward, expand_map_backward, ImportanceState};
use crate::metrics::{ms_ssim, ms_ssim_with_grad, MsSsimConfig};
use crate::nn::BnMode;
use crate::quantizer::{quantize_soft_tensor, quantize_ste, quantize_ste_backward, CenterSet, DEFAULT_SIGMA};
use crate::tensor::{Parameter, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// `100 * (1 - MS-SSIM)`.
pub fn distortion(x: &Tensor, x_hat: &Tensor, cfg: &MsSsimConfig) -> Result<f64> {
    Ok(100.0 * (1.0 - ms_ssim(x, x_hat, cfg)?))
}

/// How latents are quantized and masked in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Hard assignments and binary mask; gradients via straight-through rules.
    Hard,
    /// Soft quantization and the smooth mask everywhere. Its exact gradient
    /// is what the straight-through backward pass computes.
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineMode {
    pub quant: QuantMode,
    pub bn: BnMode,
}

impl PipelineMode {
    pub const TRAIN: PipelineMode = PipelineMode {
        quant: QuantMode::Hard,
        bn: BnMode::Train,
    };
    pub const EVAL: PipelineMode = PipelineMode {
        quant: QuantMode::Hard,
        bn: BnMode::Eval,
    };
}

/// Which probability model the rate term of the auto-encoder loss uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateModel {
    /// Masked coding cost under the context model.
    #[default]
    Context,
    /// `log2 L` bits per unmasked voxel; the context model plays no part.
    Uniform,
}

/// Everything the pipeline computed for one image.
#[derive(Clone, Debug)]
pub struct ImageResult {
    pub z: Tensor,
    pub importance: ImportanceState,
    /// Mask weights used in the forward pass: `ceil(m)` or `m`.
    pub mask: Tensor,
    pub masked: Tensor,
    /// Quantized values fed to the decoder, `[h, w, K]`.
    pub q: Tensor,
    pub symbols: SymbolVolume,
    pub context: ContextCache,
    pub coding_cost: f64,
    pub masked_coding_cost: f64,
    pub ms_ssim: f64,
    pub distortion: f64,
    pub clamped: usize,
}

impl ImageResult {
    pub fn probs(&self) -> &Tensor {
        &self.context.probs
    }

    /// Rate term input in bits under `rate`.
    pub fn rate_bits(&self, rate: RateModel) -> f64 {
        match rate {
            RateModel::Context => self.masked_coding_cost,
            RateModel::Uniform => self.mask.sum() * (self.symbols.num_symbols() as f64).log2(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineTrace {
    pub mode: PipelineMode,
    pub x: Tensor,
    pub x_hat: Tensor,
    pub images: Vec<ImageResult>,
}

impl PipelineTrace {
    /// Pixels per input image.
    pub fn pixels(&self) -> f64 {
        (self.x.shape()[1] * self.x.shape()[2]) as f64
    }
}

/// Auto-encoder, quantization centers and context model.
#[derive(Clone, Debug)]
pub struct Model {
    pub ae: Autoencoder,
    pub centers: CenterSet,
    pub ctx: ContextModel,
    pub ms_ssim: MsSsimConfig,
}

impl Model {
    pub fn new<R: Rng>(ae: AeConfig, num_centers: usize, ctx_hidden: usize, norm: NormStats, rng: &mut R) -> Result<Self> {
        let ae = Autoencoder::new(ae, norm, rng)?;
        let centers = CenterSet::evenly_spaced(num_centers, DEFAULT_SIGMA)?;
        let mut ctx = ContextModel::new(num_centers, ctx_hidden, crate::context_model::DEFAULT_LAYERS)?;
        ctx.init(rng);
        Ok(Model {
            ae,
            centers,
            ctx,
            ms_ssim: MsSsimConfig::default(),
        })
    }

    pub fn channels(&self) -> usize {
        self.ae.channels()
    }

    pub fn num_symbols(&self) -> usize {
        self.centers.len()
    }

    /// encode, expand the importance map, mask, quantize, run the context model, decode.
    pub fn forward(&mut self, x: &Tensor, mode: PipelineMode) -> Result<PipelineTrace> {
        let x = match *x.shape() {
            [h, w, c] => x.clone().reshape(&[1, h, w, c])?,
            _ => x.clone(),
        };
        let k = self.channels();
        let enc = self.ae.encode(&x, mode.bn)?;
        let n = x.shape()[0];
        let mut images = Vec::with_capacity(n);
        let mut qs = Vec::with_capacity(n);
        for b in 0..n {
            let z = enc.z.batch_item(b);
            let (importance, clamped) = ImportanceState::from_importance(enc.y.batch_item(b), k)?;
            let (mask, masked) = match mode.quant {
                QuantMode::Hard => (importance.m_bin.clone(), apply_mask(&z, &importance.m)?),
                QuantMode::Soft => {
                    let mut zm = z.clone();
                    for (v, &m) in zm.data_mut().iter_mut().zip(importance.m.data()) {
                        *v *= m;
                    }
                    (importance.m.clone(), zm)
                }
            };
            let (q_hard, symbols) = quantize_ste(&masked, &self.centers)?;
            let q = match mode.quant {
                QuantMode::Hard => q_hard,
                QuantMode::Soft => quantize_soft_tensor(&masked, &self.centers),
            };
            let [h, w, _] = *q.shape() else { unreachable!() };
            let values = Tensor::new(&[k, h, w, 1], hwk_to_scan(&q)?)?;
            let context = self.ctx.forward(&values)?;
            let coding = coding_cost(&context.probs, &symbols)?;
            let weights = hwk_to_scan(&mask)?;
            let masked_cost = symbol_bits(&context.probs, &symbols)?
                .iter()
                .zip(&weights)
                .map(|(b, &m)| if m == 0.0 { 0.0 } else { m * b })
                .sum();
            qs.push(q.clone());
            images.push(ImageResult {
                z,
                importance,
                mask,
                masked,
                q,
                symbols,
                context,
                coding_cost: coding,
                masked_coding_cost: masked_cost,
                ms_ssim: 0.0,
                distortion: 0.0,
                clamped,
            });
        }
        let x_hat = self.ae.decode(&Tensor::stack(&qs)?, mode.bn)?;
        for (b, img) in images.iter_mut().enumerate() {
            img.ms_ssim = ms_ssim(&x.batch_item(b), &x_hat.batch_item(b), &self.ms_ssim)?;
            img.distortion = 100.0 * (1.0 - img.ms_ssim);
        }
        Ok(PipelineTrace { mode, x, x_hat, images })
    }

    /// Mean rate `R` of the batch in bits per pixel of the input crop.
    pub fn batch_rate(trace: &PipelineTrace, rate: RateModel) -> f64 {
        let n = trace.images.len() as f64;
        trace.images.iter().map(|r| r.rate_bits(rate)).sum::<f64>() / n / trace.pixels()
    }

    /// Auto-encoder loss `mean(d) + max(t, beta * R)`, with `R` the batch mean
    /// rate in bits per pixel. The clip acts on the batch estimate of the
    /// rate, so images above and below the target offset each other.
    pub fn edq_loss(trace: &PipelineTrace, beta: f64, target: f64, rate: RateModel) -> f64 {
        let n = trace.images.len() as f64;
        let d = trace.images.iter().map(|r| r.distortion).sum::<f64>() / n;
        d + target.max(beta * Self::batch_rate(trace, rate))
    }

    /// Context-model loss: mean coding cost.
    pub fn p_loss(trace: &PipelineTrace) -> f64 {
        trace.images.iter().map(|r| r.coding_cost).sum::<f64>() / trace.images.len() as f64
    }

    /// Accumulates gradients of [`Model::edq_loss`] into the auto-encoder and the centers.
    pub fn backward_edq(&mut self, trace: &PipelineTrace, beta: f64, target: f64, rate: RateModel) -> Result<()> {
        let n = trace.images.len();
        let inv_b = 1.0 / n as f64;
        let area = trace.pixels();
        let mut gx = Vec::with_capacity(n);
        for b in 0..n {
            let (_, mut g) = ms_ssim_with_grad(&trace.x.batch_item(b), &trace.x_hat.batch_item(b), &self.ms_ssim)?;
            g.scale(-100.0 * inv_b);
            gx.push(g);
        }
        let gq_batch = self.ae.decode_backward(&Tensor::stack(&gx)?)?;
        let k = self.channels();
        let mut gz_all = Vec::with_capacity(n);
        let mut gy_all = Vec::with_capacity(n);
        let rate_active = beta * Self::batch_rate(trace, rate) > target;
        for (b, img) in trace.images.iter().enumerate() {
            let mut gq = gq_batch.batch_item(b);
            let [h, w, _] = *gq.shape() else { unreachable!() };
            let mut gm_rate = Tensor::zeros(gq.shape());
            if rate_active {
                let s = beta * inv_b / area;
                match rate {
                    RateModel::Context => {
                        let weights = hwk_to_scan(&img.mask)?;
                        let g_logits = cost_grad_logits(img.probs(), &img.symbols, Some(&weights), s)?;
                        let g_vals = self
                            .ctx
                            .backward(&img.context, &g_logits, false, true)?
                            .expect("input gradient requested");
                        gq.add_assign(&scan_to_hwk(g_vals.data(), h, w, k)?);
                        let bits = symbol_bits(img.probs(), &img.symbols)?;
                        gm_rate = scan_to_hwk(&bits, h, w, k)?;
                        gm_rate.scale(s);
                    }
                    RateModel::Uniform => {
                        gm_rate.fill(s * (self.num_symbols() as f64).log2());
                    }
                }
            }
            let g_masked = quantize_ste_backward(&img.masked, &mut self.centers, &gq);
            let (gz, mut gm) = match trace.mode.quant {
                QuantMode::Hard => apply_mask_backward(&img.z, &img.importance.m, &g_masked),
                QuantMode::Soft => {
                    let mut gz = g_masked.clone();
                    let mut gm = g_masked;
                    for (((a, bm), &zv), &mv) in gz
                        .data_mut()
                        .iter_mut()
                        .zip(gm.data_mut().iter_mut())
                        .zip(img.z.data())
                        .zip(img.importance.m.data())
                    {
                        *a *= mv;
                        *bm *= zv;
                    }
                    (gz, gm)
                }
            };
            gm.add_assign(&gm_rate);
            gy_all.push(expand_map_backward(&img.importance.y, &gm));
            gz_all.push(gz);
        }
        self.ae.encode_backward(&Tensor::stack(&gz_all)?, &Tensor::stack(&gy_all)?)
    }

    /// Accumulates gradients of [`Model::p_loss`] into the context model only.
    pub fn backward_p(&mut self, trace: &PipelineTrace) -> Result<()> {
        let inv_b = 1.0 / trace.images.len() as f64;
        for img in &trace.images {
            let g = cost_grad_logits(img.probs(), &img.symbols, None, inv_b)?;
            self.ctx.backward(&img.context, &g, true, false)?;
        }
        Ok(())
    }

    /// Auto-encoder parameters followed by the centers.
    pub fn edq_params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.ae.params_mut();
        p.push(&mut self.centers.centers);
        p
    }

    pub fn zero_grad(&mut self) {
        self.edq_params_mut().into_iter().for_each(Parameter::zero_grad);
        self.ctx.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    /// Eval-mode analysis of a single `[H, W, 3]` image.
    pub fn analyze(&mut self, x: &Tensor) -> Result<(ImageResult, Tensor)> {
        let mut t = self.forward(x, PipelineMode::EVAL)?;
        let x_hat = t.x_hat.batch_item(0);
        Ok((t.images.remove(0), x_hat))
    }

    /// Decoder output for a symbol volume, `[H, W, 3]`.
    pub fn reconstruct(&mut self, symbols: &SymbolVolume) -> Result<Tensor> {
        if symbols.num_symbols() != self.num_symbols() || symbols.depth() != self.channels() {
            return Err(invalid!("symbol volume does not match the model's K and L"));
        }
        let c = self.centers.values();
        let scan: Vec<f64> = symbols.indices().iter().map(|&s| c[s as usize]).collect();
        let q = scan_to_hwk(&scan, symbols.height(), symbols.width(), symbols.depth())?;
        let x = self.ae.decode(&q, BnMode::Eval)?;
        Ok(x.batch_item(0))
    }
}
