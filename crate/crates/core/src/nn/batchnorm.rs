//! Per-channel batch normalization over all leading axes.

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Exponential moving averages of the per-channel batch statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn empty(momentum: f64) -> Self {
        RunningStats {
            mean: Vec::new(),
            var: Vec::new(),
            momentum,
        }
    }

    pub fn is_populated(&self) -> bool {
        !self.mean.is_empty()
    }

    fn update(&mut self, mean: &[f64], var_unbiased: &[f64]) {
        if !self.is_populated() {
            self.mean = mean.to_vec();
            self.var = var_unbiased.to_vec();
            return;
        }
        let m = self.momentum;
        for (r, &v) in self.mean.iter_mut().zip(mean) {
            *r = m * *r + (1.0 - m) * v;
        }
        for (r, &v) in self.var.iter_mut().zip(var_unbiased) {
            *r = m * *r + (1.0 - m) * v;
        }
    }
}

/// Values saved by the forward pass for [`batch_norm_backward`].
#[derive(Clone, Debug)]
pub struct BnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub mode: BnMode,
}

fn channels(x: &Tensor) -> usize {
    *x.shape().last().expect("rank >= 1")
}

pub fn batch_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: BnMode,
    stats: &mut RunningStats,
    eps: f64,
) -> Result<(Tensor, BnCache)> {
    if eps <= 0.0 {
        return Err(invalid!("batch norm epsilon must be positive"));
    }
    let c = channels(input);
    if gamma.len() != c || beta.len() != c {
        return Err(invalid!("gamma/beta must have {c} entries"));
    }
    let count = input.len() / c;
    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0; c];
            for row in input.data().chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0.0; c];
            for row in input.data().chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let unbiased: Vec<f64> = var
                .iter()
                .map(|s| s / (count.max(2) - 1) as f64)
                .collect();
            var.iter_mut().for_each(|s| *s /= count as f64);
            stats.update(&mean, &unbiased);
            (mean, var)
        }
        BnMode::Eval => {
            if !stats.is_populated() {
                return Err(Error::State("batch norm running statistics are empty".into()));
            }
            if stats.mean.len() != c {
                return Err(invalid!("running statistics have wrong channel count"));
            }
            (stats.mean.clone(), stats.var.clone())
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = input.clone();
    let mut out = input.clone();
    for (xr, or) in x_hat
        .data_mut()
        .chunks_exact_mut(c)
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            let xh = (xr[ch] - mean[ch]) * inv_std[ch];
            xr[ch] = xh;
            or[ch] = gamma.data()[ch] * xh + beta.data()[ch];
        }
    }
    Ok((out, BnCache { x_hat, inv_std, mode }))
}

pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batch_norm_backward(cache: &BnCache, gamma: &Tensor, grad_out: &Tensor) -> BnGrads {
    let c = gamma.len();
    let count = grad_out.len() / c;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (gr, xr) in grad_out
        .data()
        .chunks_exact(c)
        .zip(cache.x_hat.data().chunks_exact(c))
    {
        for ch in 0..c {
            dgamma[ch] += gr[ch] * xr[ch];
            dbeta[ch] += gr[ch];
        }
    }
    let mut din = grad_out.clone();
    let g = gamma.data();
    match cache.mode {
        BnMode::Train => {
            // dx = inv_std / M * (M * dxh - sum(dxh) - xh * sum(dxh * xh)), dxh = dy * gamma
            let m = count as f64;
            for (dr, xr) in din
                .data_mut()
                .chunks_exact_mut(c)
                .zip(cache.x_hat.data().chunks_exact(c))
            {
                for ch in 0..c {
                    let dxh = dr[ch] * g[ch];
                    dr[ch] = cache.inv_std[ch] / m
                        * (m * dxh - dbeta[ch] * g[ch] - xr[ch] * dgamma[ch] * g[ch]);
                }
            }
        }
        BnMode::Eval => {
            for dr in din.data_mut().chunks_exact_mut(c) {
                for ch in 0..c {
                    dr[ch] *= g[ch] * cache.inv_std[ch];
                }
            }
        }
    }
    BnGrads {
        input: din,
        gamma: Tensor::new(&[c], dgamma).expect("c >= 1"),
        beta: Tensor::new(&[c], dbeta).expect("c >= 1"),
    }
}
