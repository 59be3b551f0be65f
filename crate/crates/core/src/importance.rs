//! Importance map: a single-channel encoder output that decides, per spatial
//! location, how many leading latent channels are kept.

use crate::context_model::SymbolVolume;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Importance values, their smooth per-channel expansion, and its binarization.
#[derive(Clone, Debug)]
pub struct ImportanceState {
    pub y: Tensor,
    pub m: Tensor,
    pub m_bin: Tensor,
}

impl ImportanceState {
    pub fn from_importance(y: Tensor, k: usize) -> Result<(Self, usize)> {
        let (m, clamped) = expand_map(&y, k)?;
        let m_bin = binarize(&m);
        Ok((ImportanceState { y, m, m_bin }, clamped))
    }
}

fn hw1(y: &Tensor) -> Result<(usize, usize)> {
    match *y.shape() {
        [h, w, 1] => Ok((h, w)),
        ref s => Err(invalid!("importance map must be [H,W,1], got {s:?}")),
    }
}

/// `m[i,j,k] = clamp(y[i,j] - k, 0, 1)` for `k` in `0..K`.
///
/// Values of `y` outside `[0, K]` are clamped; the second return value counts them.
pub fn expand_map(y: &Tensor, k: usize) -> Result<(Tensor, usize)> {
    let (h, w) = hw1(y)?;
    if k == 0 {
        return Err(invalid!("channel count must be >= 1"));
    }
    let mut clamped = 0;
    let mut m = Tensor::zeros(&[h, w, k]);
    for (col, &yv) in m.data_mut().chunks_exact_mut(k).zip(y.data()) {
        let yc = if (0.0..=k as f64).contains(&yv) {
            yv
        } else {
            clamped += 1;
            yv.clamp(0.0, k as f64)
        };
        for (ch, mv) in col.iter_mut().enumerate() {
            *mv = (yc - ch as f64).clamp(0.0, 1.0);
        }
    }
    Ok((m, clamped))
}

/// Subgradient of [`expand_map`]: 1 where `0 < y - k < 1`, else 0.
pub fn expand_map_backward(y: &Tensor, grad_m: &Tensor) -> Tensor {
    let k = *grad_m.shape().last().expect("rank 3");
    let mut gy = Tensor::zeros(y.shape());
    for ((g, &yv), col) in gy
        .data_mut()
        .iter_mut()
        .zip(y.data())
        .zip(grad_m.data().chunks_exact(k))
    {
        for (ch, &gm) in col.iter().enumerate() {
            let t = yv - ch as f64;
            if t > 0.0 && t < 1.0 {
                *g += gm;
            }
        }
    }
    gy
}

pub fn binarize(m: &Tensor) -> Tensor {
    m.map(f64::ceil)
}

/// Forward: `z * ceil(m)`.
pub fn apply_mask(z: &Tensor, m: &Tensor) -> Result<Tensor> {
    if z.shape() != m.shape() {
        return Err(invalid!("mask shape {:?} != latent shape {:?}", m.shape(), z.shape()));
    }
    let mut out = z.clone();
    for (o, &mv) in out.data_mut().iter_mut().zip(m.data()) {
        *o *= mv.ceil();
    }
    Ok(out)
}

/// Backward of [`apply_mask`] with the ceiling treated as identity:
/// returns `(upstream * ceil(m), upstream * z)`.
pub fn apply_mask_backward(z: &Tensor, m: &Tensor, upstream: &Tensor) -> (Tensor, Tensor) {
    let mut gz = upstream.clone();
    let mut gm = upstream.clone();
    for ((a, b), (&zv, &mv)) in gz
        .data_mut()
        .iter_mut()
        .zip(gm.data_mut().iter_mut())
        .zip(z.data().iter().zip(m.data()))
    {
        *a *= mv.ceil();
        *b *= zv;
    }
    (gz, gm)
}

/// Binary mask implied by a masked symbol volume: per column, everything
/// before the trailing run of zero symbols is 1. Returned as `[H, W, K]`.
pub fn recover_mask(symbols: &SymbolVolume, zero_symbol_index: usize) -> Tensor {
    let (h, w, k) = (symbols.height(), symbols.width(), symbols.depth());
    let mut out = Tensor::zeros(&[h, w, k]);
    for i in 0..h {
        for j in 0..w {
            let mut keep = k;
            while keep > 0 && symbols.get(i, j, keep - 1) == zero_symbol_index {
                keep -= 1;
            }
            let base = (i * w + j) * k;
            for ch in 0..keep {
                out.data_mut()[base + ch] = 1.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(y: f64, k: usize) -> Vec<f64> {
        let t = Tensor::new(&[1, 1, 1], vec![y]).unwrap();
        expand_map(&t, k).unwrap().0.into_data()
    }

    #[test]
    fn expand_examples() {
        let c = col(2.4, 4);
        assert_eq!(c[..2], [1.0, 1.0]);
        assert!((c[2] - 0.4).abs() < 1e-12);
        assert_eq!(c[3], 0.0);
        assert_eq!(col(0.0, 4), vec![0.0; 4]);
        assert_eq!(col(4.0, 4), vec![1.0; 4]);
    }

    #[test]
    fn out_of_range_is_clamped_and_counted() {
        let t = Tensor::new(&[1, 2, 1], vec![-1.0, 9.0]).unwrap();
        let (m, n) = expand_map(&t, 3).unwrap();
        assert_eq!(n, 2);
        assert_eq!(m.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn apply_mask_examples() {
        let z = Tensor::new(&[1, 1, 4], vec![0.3, -0.7, 0.9, 0.5]).unwrap();
        let m = Tensor::new(&[1, 1, 4], vec![1.0, 1.0, 0.4, 0.0]).unwrap();
        assert_eq!(apply_mask(&z, &m).unwrap().data(), &[0.3, -0.7, 0.9, 0.0]);
        assert_eq!(apply_mask(&z, &Tensor::full(&[1, 1, 4], 1.0)).unwrap(), z);
        assert!(apply_mask(&z, &Tensor::zeros(&[1, 1, 4])).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(apply_mask(&z, &Tensor::zeros(&[1, 1, 3])).is_err());
    }

    #[test]
    fn recover_examples() {
        let zero = 1;
        let s = 3;
        let vol = |c: [usize; 4]| SymbolVolume::from_hwk(1, 1, 4, &c, 4).unwrap();
        assert_eq!(recover_mask(&vol([s, s, zero, zero]), zero).data(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(recover_mask(&vol([zero; 4]), zero).data(), &[0.0; 4]);
        assert_eq!(recover_mask(&vol([zero, s, zero, zero]), zero).data(), &[1.0, 1.0, 0.0, 0.0]);
    }
}
