//! Scalar quantization to a small set of learnable centers.
//!
//! The forward pass uses hard nearest-center assignments. The backward pass
//! uses the gradient of a softmin-weighted average of the centers
//! (straight-through estimation).

use crate::context_model::SymbolVolume;
use crate::error::{invalid, Error, Result};
use crate::tensor::{Parameter, Tensor};

pub const DEFAULT_SIGMA: f64 = 1.0;

/// The `L` quantization centers and the softness of the backward surrogate.
#[derive(Clone, Debug)]
pub struct CenterSet {
    pub centers: Parameter,
    pub sigma: f64,
}

impl CenterSet {
    pub fn new(centers: Vec<f64>, sigma: f64) -> Result<Self> {
        if centers.len() < 2 {
            return Err(invalid!("need at least 2 centers, got {}", centers.len()));
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("centers must be finite".into()));
        }
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(invalid!("sigma must be positive, got {sigma}"));
        }
        let n = centers.len();
        Ok(CenterSet {
            centers: Parameter::new(Tensor::new(&[n], centers)?),
            sigma,
        })
    }

    /// `l` evenly spaced centers spanning `[-1, 1]`.
    pub fn evenly_spaced(l: usize, sigma: f64) -> Result<Self> {
        if l < 2 {
            return Err(invalid!("need at least 2 centers, got {l}"));
        }
        let step = 2.0 / (l - 1) as f64;
        Self::new((0..l).map(|j| -1.0 + step * j as f64).collect(), sigma)
    }

    pub fn len(&self) -> usize {
        self.centers.value.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        self.centers.value.data()
    }

    /// Index of the center closest to zero, the symbol masked-out voxels map to.
    pub fn zero_symbol_index(&self) -> usize {
        nearest(0.0, self.values())
    }
}

#[inline]
fn nearest(z: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = (z - centers[0]).abs();
    for (j, &c) in centers.iter().enumerate().skip(1) {
        let d = (z - c).abs();
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Nearest center index; ties go to the lowest index.
pub fn quantize_hard(z: f64, centers: &CenterSet) -> Result<usize> {
    if !z.is_finite() {
        return Err(Error::Numeric(format!("cannot quantize non-finite value {z}")));
    }
    Ok(nearest(z, centers.values()))
}

/// Softmin weights `exp(-sigma |z - c_j|) / sum_l exp(-sigma |z - c_l|)`.
fn soft_weights(z: f64, centers: &[f64], sigma: f64, w: &mut [f64]) {
    let dmin = centers.iter().fold(f64::INFINITY, |m, c| m.min((z - c).abs()));
    let mut s = 0.0;
    for (wj, c) in w.iter_mut().zip(centers) {
        *wj = (-sigma * ((z - c).abs() - dmin)).exp();
        s += *wj;
    }
    w.iter_mut().for_each(|wj| *wj /= s);
}

pub fn quantize_soft(z: f64, centers: &CenterSet) -> f64 {
    let c = centers.values();
    let mut w = vec![0.0; c.len()];
    soft_weights(z, c, centers.sigma, &mut w);
    w.iter().zip(c).map(|(wj, cj)| wj * cj).sum()
}

/// Gradient of [`quantize_soft`] scaled by `grad_out`. Returns `d/dz` and
/// accumulates `d/dc_j` into `grad_centers`.
pub fn quantize_soft_backward(z: f64, centers: &CenterSet, grad_out: f64, grad_centers: &mut [f64]) -> f64 {
    let c = centers.values();
    let sigma = centers.sigma;
    let mut w = vec![0.0; c.len()];
    soft_weights(z, c, sigma, &mut w);
    let soft: f64 = w.iter().zip(c).map(|(wj, cj)| wj * cj).sum();
    let mut dz = 0.0;
    for j in 0..c.len() {
        // sign(z - c_j), with 0 at the kink
        let s = if z > c[j] {
            1.0
        } else if z < c[j] {
            -1.0
        } else {
            0.0
        };
        let dlogit = w[j] * (c[j] - soft);
        dz += dlogit * (-sigma * s);
        grad_centers[j] += grad_out * (w[j] + dlogit * sigma * s);
    }
    grad_out * dz
}

/// Straight-through quantization of a `[H, W, K]` latent.
///
/// Returns center values (forward equals hard assignment) and symbol indices.
pub fn quantize_ste(z: &Tensor, centers: &CenterSet) -> Result<(Tensor, SymbolVolume)> {
    let [h, w, k] = *z.shape() else {
        return Err(invalid!("latent must be [H,W,K], got {:?}", z.shape()));
    };
    let c = centers.values();
    let mut idx = Vec::with_capacity(z.len());
    for &v in z.data() {
        idx.push(quantize_hard(v, centers)?);
    }
    let values = Tensor::new(z.shape(), idx.iter().map(|&i| c[i]).collect())?;
    let symbols = SymbolVolume::from_hwk(h, w, k, &idx, c.len())?;
    Ok((values, symbols))
}

/// Backward of [`quantize_ste`]: the soft-quantization gradient evaluated at `z`.
/// Accumulates center gradients into `centers.centers.grad`.
pub fn quantize_ste_backward(z: &Tensor, centers: &mut CenterSet, grad_values: &Tensor) -> Tensor {
    let mut gc = vec![0.0; centers.len()];
    let mut gz = Tensor::zeros(z.shape());
    for ((dz, &v), &g) in gz.data_mut().iter_mut().zip(z.data()).zip(grad_values.data()) {
        if g != 0.0 {
            *dz = quantize_soft_backward(v, centers, g, &mut gc);
        }
    }
    for (a, b) in centers.centers.grad.data_mut().iter_mut().zip(&gc) {
        *a += b;
    }
    gz
}

/// Elementwise soft quantization of a tensor (smooth surrogate used for gradient checks).
pub fn quantize_soft_tensor(z: &Tensor, centers: &CenterSet) -> Tensor {
    z.map(|v| quantize_soft(v, centers))
}
