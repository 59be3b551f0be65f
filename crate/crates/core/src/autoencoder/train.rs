use super::pipeline::{Model, PipelineMode};
use super::{AeConfig, NormStats};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::nn::Adam;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use super::pipeline::RateModel;

/// Hyperparameters of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    /// Rate target in bits per pixel.
    pub target_bpp: f64,
    pub channels: usize,
    pub centers: usize,
    pub widths: Vec<usize>,
    pub residual: bool,
    pub ctx_hidden: usize,
    pub lr_ae: f64,
    pub lr_ctx: f64,
    /// Divide learning rates by `lr_decay_factor` every this many steps (0 disables).
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub l2: f64,
    pub batch: usize,
    pub crop: usize,
    pub steps: usize,
    pub seed: u64,
    pub rate_model: RateModel,
    /// Give up after this many consecutive aborted steps.
    pub max_aborted_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 10.0,
            target_bpp: 0.6,
            channels: 8,
            centers: 6,
            widths: vec![32, 64, 64],
            residual: true,
            ctx_hidden: crate::context_model::DEFAULT_HIDDEN,
            lr_ae: 4e-3,
            lr_ctx: 1e-4,
            lr_decay_every: 0,
            lr_decay_factor: 10.0,
            l2: 1e-6,
            batch: 8,
            crop: 64,
            steps: 2000,
            seed: 0,
            rate_model: RateModel::Context,
            max_aborted_steps: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.target_bpp >= 0.0) {
            return Err(invalid!("beta and target_bpp must be nonnegative"));
        }
        if self.batch == 0 || self.crop == 0 {
            return Err(invalid!("batch and crop must be positive"));
        }
        if self.centers < 2 {
            return Err(invalid!("need at least 2 centers"));
        }
        if self.lr_decay_every > 0 && !(self.lr_decay_factor > 0.0) {
            return Err(invalid!("lr_decay_factor must be positive"));
        }
        self.ae_config().validate()?;
        let f = self.ae_config().downsampling();
        if self.crop % f != 0 {
            return Err(invalid!("crop {} is not a multiple of {f}", self.crop));
        }
        Ok(())
    }

    pub fn ae_config(&self) -> AeConfig {
        AeConfig {
            widths: self.widths.clone(),
            channels: self.channels,
            residual: self.residual,
        }
    }

    /// Threshold `t` of the clipped rate term `max(t, beta * R)`, with `R` the
    /// masked coding cost in bits per pixel. The clip engages when `R`
    /// reaches `target_bpp`.
    pub fn rate_target(&self) -> f64 {
        self.beta * self.target_bpp
    }
}

/// Learning rate after `step` steps of step decay.
pub fn lr_at(base: f64, step: usize, every: usize, factor: f64) -> f64 {
    if every == 0 {
        return base;
    }
    base / factor.powi((step / every) as i32)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr_ae: f64,
    pub lr_ctx: f64,
    pub loss_edq: f64,
    pub loss_p: f64,
    pub distortion: f64,
    pub ms_ssim: f64,
    pub coding_cost: f64,
    pub masked_coding_cost: f64,
    pub rate_term: f64,
    pub bpp: f64,
    /// Fraction of latent entries kept by the binarized mask.
    pub occupancy: f64,
    pub clamped: usize,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.channels() != config.channels || model.num_symbols() != config.centers {
            return Err(invalid!("model K/L do not match the configuration"));
        }
        Ok(Trainer { model, config, step: 0 })
    }

    /// Fresh model initialized from `rng`, with normalization statistics of `data`.
    pub fn init(config: TrainConfig, data: &Dataset, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let norm = NormStats::from_images(&data.images)?;
        let model = Model::new(config.ae_config(), config.centers, config.ctx_hidden, norm, rng)?;
        Self::new(model, config)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// One concurrent update of the auto-encoder (with centers) and of the
    /// context model from a single forward pass over `batch` (`[N, H, W, 3]`).
    ///
    /// On a non-finite loss or gradient nothing is changed and a numeric error is returned.
    pub fn train_step(&mut self, batch: &Tensor) -> Result<StepRecord> {
        let snapshot = self.model.clone();
        match self.try_step(batch) {
            Ok(r) => {
                self.step += 1;
                Ok(r)
            }
            Err(e) => {
                self.model = snapshot;
                Err(e)
            }
        }
    }

    fn try_step(&mut self, batch: &Tensor) -> Result<StepRecord> {
        let cfg = &self.config;
        if batch.shape().first() == Some(&0) || batch.rank() != 4 {
            return Err(invalid!("batch must be a nonempty [N,H,W,3] tensor"));
        }
        let area = (batch.shape()[1] * batch.shape()[2]) as f64;
        let t = cfg.rate_target();
        let model = &mut self.model;
        model.zero_grad();
        let trace = model.forward(batch, PipelineMode::TRAIN)?;
        let loss_edq = Model::edq_loss(&trace, cfg.beta, t, cfg.rate_model);
        let loss_p = Model::p_loss(&trace);
        if !loss_edq.is_finite() || !loss_p.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss (edq {loss_edq}, p {loss_p})")));
        }
        model.backward_edq(&trace, cfg.beta, t, cfg.rate_model)?;
        model.backward_p(&trace)?;
        let lr_ae = lr_at(cfg.lr_ae, self.step, cfg.lr_decay_every, cfg.lr_decay_factor);
        let lr_ctx = lr_at(cfg.lr_ctx, self.step, cfg.lr_decay_every, cfg.lr_decay_factor);
        Adam::new(lr_ae).with_l2(cfg.l2).step(&mut model.edq_params_mut())?;
        Adam::new(lr_ctx).with_l2(cfg.l2).step(&mut model.ctx.params_mut())?;
        model.ctx.remask();

        let n = trace.images.len() as f64;
        let mean = |f: &dyn Fn(&super::ImageResult) -> f64| trace.images.iter().map(f).sum::<f64>() / n;
        let mc = mean(&|r| r.masked_coding_cost);
        Ok(StepRecord {
            step: self.step,
            lr_ae,
            lr_ctx,
            loss_edq,
            loss_p,
            distortion: mean(&|r| r.distortion),
            ms_ssim: mean(&|r| r.ms_ssim),
            coding_cost: mean(&|r| r.coding_cost),
            masked_coding_cost: mc,
            rate_term: t.max(cfg.beta * Model::batch_rate(&trace, cfg.rate_model)),
            bpp: mean(&|r| r.rate_bits(cfg.rate_model)) / area,
            occupancy: mean(&|r| r.importance.m_bin.sum() / r.importance.m_bin.len() as f64),
            clamped: trace.images.iter().map(|r| r.clamped).sum(),
        })
    }

    /// Runs until `config.steps`, sampling crops from `data` with `rng`.
    pub fn fit(&mut self, data: &Dataset, rng: &mut ChaCha8Rng, mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        let mut aborted = 0;
        while self.step < self.config.steps {
            let batch = data.sample_batch(rng, self.config.batch, self.config.crop)?;
            match self.train_step(&batch) {
                Ok(rec) => {
                    aborted = 0;
                    on_step(&rec)?;
                }
                Err(Error::Numeric(msg)) => {
                    aborted += 1;
                    if aborted >= self.config.max_aborted_steps {
                        return Err(Error::Numeric(format!("{aborted} consecutive aborted steps; last: {msg}")));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

/// Trains a model from scratch; every random choice flows from `config.seed`.
pub fn train(config: &TrainConfig, data: &Dataset, on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trainer = Trainer::init(config.clone(), data, &mut rng)?;
    trainer.fit(data, &mut rng, on_step)?;
    Ok(trainer.model)
}
