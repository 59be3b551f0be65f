//! Rates of one frozen set of latents under progressively stronger
//! probability models: uniform, zeroth order, first order, and a context
//! model trained after the fact.

use crate::autoencoder::Model;
use crate::context_model::{
    coding_cost, cost_grad_logits, fit_first_order, fit_zeroth_order, ContextModel, SymbolVolume, DEFAULT_LAYERS,
};
use crate::error::{invalid, Result};
use crate::nn::Adam;
use crate::quantizer::CenterSet;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostHocConfig {
    pub hidden: usize,
    pub steps: usize,
    /// Volumes per step.
    pub batch: usize,
    pub lr: f64,
}

impl Default for PostHocConfig {
    fn default() -> Self {
        PostHocConfig {
            hidden: crate::context_model::DEFAULT_HIDDEN,
            steps: 1500,
            batch: 8,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub bits_per_symbol: f64,
    pub bpp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Symbols and pixels of the evaluation set.
    pub symbols: usize,
    pub pixels: usize,
}

impl AblationTable {
    pub fn rate(&self, model: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.model == model).map(|r| r.bits_per_symbol)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<28} {:>12} {:>10}\n", "probability model", "bits/symbol", "bpp");
        for r in &self.rows {
            s += &format!("{:<28} {:>12.4} {:>10.4}\n", r.model, r.bits_per_symbol, r.bpp);
        }
        s
    }
}

/// Hard symbol volumes of `images` (each `[H, W, 3]`) under the frozen model.
pub fn latent_volumes(model: &mut Model, images: &[Tensor]) -> Result<Vec<SymbolVolume>> {
    images.iter().map(|x| Ok(model.analyze(x)?.0.symbols)).collect()
}

/// Fits a fresh context model on `train` volumes with the mean coding cost as loss.
pub fn train_post_hoc<R: Rng>(
    train: &[SymbolVolume],
    centers: &CenterSet,
    cfg: &PostHocConfig,
    rng: &mut R,
    mut on_step: impl FnMut(usize, f64),
) -> Result<ContextModel> {
    if train.is_empty() || cfg.batch == 0 {
        return Err(invalid!("post-hoc training needs volumes and a positive batch"));
    }
    let inputs: Vec<Tensor> = train.iter().map(|v| v.center_volume(centers)).collect::<Result<_>>()?;
    let mut ctx = ContextModel::new(centers.len(), cfg.hidden, DEFAULT_LAYERS)?;
    ctx.init(rng);
    let adam = Adam::new(cfg.lr);
    for step in 0..cfg.steps {
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let i = rng.gen_range(0..train.len());
            let cache = ctx.forward(&inputs[i])?;
            loss += coding_cost(&cache.probs, &train[i])?;
            let g = cost_grad_logits(&cache.probs, &train[i], None, 1.0 / cfg.batch as f64)?;
            ctx.backward(&cache, &g, true, false)?;
        }
        adam.step(&mut ctx.params_mut())?;
        ctx.remask();
        on_step(step, loss / cfg.batch as f64);
    }
    Ok(ctx)
}

/// Average rates of `eval` volumes; histogram and post-hoc models are fit on `train`.
pub fn ablation_table<R: Rng>(
    train: &[SymbolVolume],
    eval: &[SymbolVolume],
    centers: &CenterSet,
    pixels: usize,
    cfg: &PostHocConfig,
    rng: &mut R,
) -> Result<AblationTable> {
    if eval.is_empty() || pixels == 0 {
        return Err(invalid!("empty evaluation set"));
    }
    let l = centers.len();
    let symbols: usize = eval.iter().map(SymbolVolume::len).sum();
    let zeroth = fit_zeroth_order(train, l)?;
    let first = fit_first_order(train, l)?;
    let ctx = train_post_hoc(train, centers, cfg, rng, |_, _| {})?;
    let mut p_bits = 0.0;
    for v in eval {
        p_bits += coding_cost(&ctx.forward(&v.center_volume(centers)?)?.probs, v)?;
    }
    let totals = [
        ("uniform", symbols as f64 * (l as f64).log2()),
        ("zeroth-order", eval.iter().map(|v| zeroth.cost(v)).sum()),
        ("first-order", eval.iter().map(|v| first.cost(v)).sum()),
        ("context model (post hoc)", p_bits),
    ];
    let rows = totals
        .iter()
        .map(|&(name, bits)| AblationRow {
            model: name.to_string(),
            bits_per_symbol: bits / symbols as f64,
            bpp: bits / pixels as f64,
        })
        .collect();
    Ok(AblationTable { rows, symbols, pixels })
}
