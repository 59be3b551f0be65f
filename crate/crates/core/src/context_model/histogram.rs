//! Histogram baselines: symbol frequencies (zeroth order) and frequencies
//! conditioned on the previous symbol in scan order (first order).

use super::{SymbolVolume, PROB_FLOOR};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Additive (Krichevsky-Trofimov) smoothing count.
pub const SMOOTHING: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ZerothOrderModel {
    pub table: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FirstOrderModel {
    pub first: ZerothOrderModel,
    /// `conditional[prev][cur]`
    pub conditional: Vec<Vec<f64>>,
}

fn normalize(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().map(|c| c + SMOOTHING).sum();
    counts.iter().map(|c| (c + SMOOTHING) / total).collect()
}

fn check_input(volumes: &[SymbolVolume], l: usize) -> Result<()> {
    if volumes.is_empty() {
        return Err(invalid!("cannot fit a histogram to zero volumes"));
    }
    if l < 2 {
        return Err(invalid!("alphabet must have at least 2 symbols"));
    }
    if volumes.iter().any(|v| v.num_symbols() != l) {
        return Err(invalid!("volume alphabet size differs from L={l}"));
    }
    Ok(())
}

pub fn fit_zeroth_order(volumes: &[SymbolVolume], l: usize) -> Result<ZerothOrderModel> {
    check_input(volumes, l)?;
    let mut counts = vec![0.0; l];
    for v in volumes {
        for &s in v.indices() {
            counts[s as usize] += 1.0;
        }
    }
    Ok(ZerothOrderModel {
        table: normalize(&counts),
    })
}

pub fn fit_first_order(volumes: &[SymbolVolume], l: usize) -> Result<FirstOrderModel> {
    let first = fit_zeroth_order(volumes, l)?;
    let mut counts = vec![vec![0.0; l]; l];
    for v in volumes {
        for pair in v.indices().windows(2) {
            counts[pair[0] as usize][pair[1] as usize] += 1.0;
        }
    }
    Ok(FirstOrderModel {
        first,
        conditional: counts.iter().map(|row| normalize(row)).collect(),
    })
}

impl ZerothOrderModel {
    pub fn cost(&self, volume: &SymbolVolume) -> f64 {
        volume
            .indices()
            .iter()
            .map(|&s| -self.table[s as usize].max(PROB_FLOOR).log2())
            .sum()
    }

    /// The table broadcast to a `[D, H, W, L]` probability tensor.
    pub fn probs_for(&self, volume: &SymbolVolume) -> Tensor {
        let l = self.table.len();
        let mut t = Tensor::zeros(&[volume.depth(), volume.height(), volume.width(), l]);
        for row in t.data_mut().chunks_exact_mut(l) {
            row.copy_from_slice(&self.table);
        }
        t
    }
}

impl FirstOrderModel {
    pub fn cost(&self, volume: &SymbolVolume) -> f64 {
        let idx = volume.indices();
        let mut bits = -self.first.table[idx[0] as usize].max(PROB_FLOOR).log2();
        for pair in idx.windows(2) {
            bits -= self.conditional[pair[0] as usize][pair[1] as usize].max(PROB_FLOOR).log2();
        }
        bits
    }

    /// Per-position distributions as a `[D, H, W, L]` tensor.
    pub fn probs_for(&self, volume: &SymbolVolume) -> Tensor {
        let l = self.first.table.len();
        let mut t = self.first.probs_for(volume);
        let idx = volume.indices();
        for (i, row) in t.data_mut().chunks_exact_mut(l).enumerate().skip(1) {
            row.copy_from_slice(&self.conditional[idx[i - 1] as usize]);
        }
        t
    }
}
