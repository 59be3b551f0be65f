//! Image quality and rate metrics.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Conventional per-scale exponents, finest scale first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Terms are floored here before the weighted geometric mean.
const TERM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsSsimConfig {
    pub scales: usize,
    pub weights: Vec<f64>,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        MsSsimConfig {
            scales: 5,
            weights: MS_SSIM_WEIGHTS.to_vec(),
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl MsSsimConfig {
    /// Small window and two scales, for tiny test images.
    pub fn tiny() -> Self {
        MsSsimConfig {
            scales: 2,
            weights: vec![0.4, 0.6],
            window: 3,
            sigma: 1.0,
            ..Self::default()
        }
    }

    /// Number of scales that fit an `h x w` image (at most `self.scales`).
    pub fn effective_scales(&self, h: usize, w: usize) -> Result<usize> {
        let mut s = 0;
        while s < self.scales && (h >> s) >= self.window && (w >> s) >= self.window {
            s += 1;
        }
        if s == 0 {
            return Err(invalid!("{h}x{w} image is smaller than the {} px window", self.window));
        }
        Ok(s)
    }

    /// Weights for `s` scales, renormalized to sum to one.
    pub fn effective_weights(&self, s: usize) -> Vec<f64> {
        let total: f64 = self.weights[..s].iter().sum();
        self.weights[..s].iter().map(|w| w / total).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.weights.len() < self.scales {
            return Err(invalid!("need one weight per scale"));
        }
        if self.window == 0 || self.window % 2 == 0 || self.sigma <= 0.0 {
            return Err(invalid!("window must be odd and sigma positive"));
        }
        Ok(())
    }

    fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| {
                let t = i as f64 - r;
                (-t * t / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// A single-channel plane.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channel(t: &Tensor, c: usize) -> Plane {
        let [h, w, nc] = *t.shape() else { unreachable!() };
        Plane {
            h,
            w,
            v: t.data().iter().skip(c).step_by(nc).copied().collect(),
        }
    }

    fn zeros(h: usize, w: usize) -> Plane {
        Plane { h, w, v: vec![0.0; h * w] }
    }

    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// 2x2 average pooling; an odd trailing row/column is dropped.
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut out = Plane::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                let a = |di: usize, dj: usize| self.v[(2 * i + di) * self.w + 2 * j + dj];
                out.v[i * w + j] = 0.25 * (a(0, 0) + a(0, 1) + a(1, 0) + a(1, 1));
            }
        }
        out
    }

    /// Adjoint of [`Plane::downsample`] onto an `h x w` plane.
    fn downsample_adjoint(&self, h: usize, w: usize) -> Plane {
        let mut out = Plane::zeros(h, w);
        for i in 0..self.h {
            for j in 0..self.w {
                let g = 0.25 * self.v[i * self.w + j];
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    out.v[(2 * i + di) * w + 2 * j + dj] += g;
                }
            }
        }
        out
    }

    /// Separable 'valid' filtering.
    fn filter(&self, g: &[f64]) -> Plane {
        let n = g.len();
        let ow = self.w + 1 - n;
        let oh = self.h + 1 - n;
        let mut tmp = Plane::zeros(self.h, ow);
        for i in 0..self.h {
            for j in 0..ow {
                let row = &self.v[i * self.w + j..i * self.w + j + n];
                tmp.v[i * ow + j] = row.iter().zip(g).map(|(a, b)| a * b).sum();
            }
        }
        let mut out = Plane::zeros(oh, ow);
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for (a, &gv) in g.iter().enumerate() {
                    s += gv * tmp.v[(i + a) * ow + j];
                }
                out.v[i * ow + j] = s;
            }
        }
        out
    }

    /// Adjoint of [`Plane::filter`] onto an `h x w` plane.
    fn filter_adjoint(&self, g: &[f64], h: usize, w: usize) -> Plane {
        let ow = self.w;
        let mut tmp = Plane::zeros(h, ow);
        for i in 0..self.h {
            for j in 0..ow {
                let v = self.v[i * ow + j];
                for (a, &gv) in g.iter().enumerate() {
                    tmp.v[(i + a) * ow + j] += gv * v;
                }
            }
        }
        let mut out = Plane::zeros(h, w);
        for i in 0..h {
            for j in 0..ow {
                let v = tmp.v[i * ow + j];
                for (b, &gv) in g.iter().enumerate() {
                    out.v[i * w + j + b] += gv * v;
                }
            }
        }
        out
    }
}

/// Local statistics of one scale, kept for the backward pass.
struct ScaleStats {
    ex: Plane,
    ey: Plane,
    sxx: Plane,
    syy: Plane,
    sxy: Plane,
}

impl ScaleStats {
    fn new(x: &Plane, y: &Plane, g: &[f64]) -> Self {
        let ex = x.filter(g);
        let ey = y.filter(g);
        let exx = x.zip(x, |a, b| a * b).filter(g);
        let eyy = y.zip(y, |a, b| a * b).filter(g);
        let exy = x.zip(y, |a, b| a * b).filter(g);
        let sxx = exx.zip(&ex, |e2, e| e2 - e * e);
        let syy = eyy.zip(&ey, |e2, e| e2 - e * e);
        let mut sxy = exy;
        for ((s, &a), &b) in sxy.v.iter_mut().zip(&ex.v).zip(&ey.v) {
            *s -= a * b;
        }
        ScaleStats { ex, ey, sxx, syy, sxy }
    }
}

struct Constants {
    c1: f64,
    c2: f64,
}

/// Mean of cs (or of l*cs when `luminance`), and optionally the gradients of
/// that mean w.r.t. (E[y], E[y^2], E[xy]) per map entry.
fn scale_term(st: &ScaleStats, k: &Constants, luminance: bool, want_grad: bool) -> (f64, Option<[Plane; 3]>) {
    let n = st.ex.v.len();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grads = want_grad.then(|| {
        let z = Plane::zeros(st.ex.h, st.ex.w);
        [z.clone(), z.clone(), z]
    });
    for i in 0..n {
        let (ex, ey) = (st.ex.v[i], st.ey.v[i]);
        let a = 2.0 * st.sxy.v[i] + k.c2;
        let b = st.sxx.v[i] + st.syy.v[i] + k.c2;
        let cs = a / b;
        let (p, q) = (2.0 * ex * ey + k.c1, ex * ex + ey * ey + k.c1);
        let l = if luminance { p / q } else { 1.0 };
        total += l * cs;
        if let Some(g) = grads.as_mut() {
            // sxy = E[xy] - ex ey, syy = E[y^2] - ey^2
            let dcs_dsxy = 2.0 / b;
            let dcs_dsyy = -a / (b * b);
            let dcs_dey = dcs_dsxy * -ex + dcs_dsyy * -2.0 * ey;
            let (mut d_ey, d_eyy, d_exy) = (l * dcs_dey, l * dcs_dsyy, l * dcs_dsxy);
            if luminance {
                d_ey += cs * (2.0 * ex / q - p / (q * q) * 2.0 * ey);
            }
            g[0].v[i] = d_ey * inv_n;
            g[1].v[i] = d_eyy * inv_n;
            g[2].v[i] = d_exy * inv_n;
        }
    }
    (total * inv_n, grads)
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<(usize, usize, usize)> {
    if x.shape() != y.shape() {
        return Err(invalid!("image shapes differ: {:?} vs {:?}", x.shape(), y.shape()));
    }
    match *x.shape() {
        [h, w, c] if c > 0 => Ok((h, w, c)),
        ref s => Err(invalid!("images must be [H,W,C], got {s:?}")),
    }
}

/// Returns MS-SSIM and, if requested, its gradient w.r.t. `y`.
fn ms_ssim_impl(x: &Tensor, y: &Tensor, cfg: &MsSsimConfig, want_grad: bool) -> Result<(f64, usize, Option<Tensor>)> {
    cfg.validate()?;
    let (h, w, nc) = check_pair(x, y)?;
    let scales = cfg.effective_scales(h, w)?;
    let weights = cfg.effective_weights(scales);
    let g = cfg.kernel();
    let k = Constants {
        c1: (cfg.k1 * cfg.data_range).powi(2),
        c2: (cfg.k2 * cfg.data_range).powi(2),
    };
    let mut value = 0.0;
    let mut grad = want_grad.then(|| Tensor::zeros(x.shape()));
    for c in 0..nc {
        let mut xs = vec![Plane::channel(x, c)];
        let mut ys = vec![Plane::channel(y, c)];
        for s in 1..scales {
            xs.push(xs[s - 1].downsample());
            ys.push(ys[s - 1].downsample());
        }
        let mut terms = Vec::with_capacity(scales);
        let mut term_grads = Vec::with_capacity(scales);
        for s in 0..scales {
            let st = ScaleStats::new(&xs[s], &ys[s], &g);
            let (t, tg) = scale_term(&st, &k, s + 1 == scales, want_grad);
            terms.push(t);
            term_grads.push(tg);
        }
        let ms: f64 = terms
            .iter()
            .zip(&weights)
            .map(|(t, wt)| t.max(TERM_FLOOR).powf(*wt))
            .product();
        value += ms / nc as f64;
        let Some(grad) = grad.as_mut() else { continue };
        // dL/dy accumulated from the coarsest scale back to full resolution
        let mut acc: Option<Plane> = None;
        for s in (0..scales).rev() {
            let (xp, yp) = (&xs[s], &ys[s]);
            let mut gy = match acc.take() {
                Some(coarse) => coarse.downsample_adjoint(yp.h, yp.w),
                None => Plane::zeros(yp.h, yp.w),
            };
            if terms[s] > TERM_FLOOR {
                let scale = ms * weights[s] / terms[s] / nc as f64;
                let [d_ey, d_eyy, d_exy] = term_grads[s].take().expect("requested");
                let a = d_ey.filter_adjoint(&g, yp.h, yp.w);
                let b = d_eyy.filter_adjoint(&g, yp.h, yp.w);
                let e = d_exy.filter_adjoint(&g, yp.h, yp.w);
                for i in 0..gy.v.len() {
                    gy.v[i] += scale * (a.v[i] + 2.0 * yp.v[i] * b.v[i] + xp.v[i] * e.v[i]);
                }
            }
            acc = Some(gy);
        }
        let full = acc.expect("at least one scale");
        for (p, &v) in full.v.iter().enumerate() {
            grad.data_mut()[p * nc + c] = v;
        }
    }
    Ok((value, scales, grad))
}

/// Multi-scale structural similarity of two `[H, W, C]` images, averaged over channels.
pub fn ms_ssim(x: &Tensor, y: &Tensor, cfg: &MsSsimConfig) -> Result<f64> {
    Ok(ms_ssim_impl(x, y, cfg, false)?.0)
}

/// MS-SSIM together with its gradient w.r.t. `y`.
pub fn ms_ssim_with_grad(x: &Tensor, y: &Tensor, cfg: &MsSsimConfig) -> Result<(f64, Tensor)> {
    let (v, _, g) = ms_ssim_impl(x, y, cfg, true)?;
    Ok((v, g.expect("requested")))
}

/// Payload bits per pixel of the original image.
pub fn bpp(payload_bits: u64, width: usize, height: usize) -> f64 {
    if payload_bits == 0 {
        return 0.0;
    }
    payload_bits as f64 / (width * height) as f64
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y)?;
    Ok(x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(-10.0 * mse(x, y)?.log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::new(&[h, w, c], (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn noisy(rng: &mut ChaCha8Rng, x: &Tensor, amp: f64) -> Tensor {
        let v = x.data().iter().map(|v| (v + rng.gen_range(-amp..=amp)).clamp(0.0, 1.0)).collect();
        Tensor::new(x.shape(), v).unwrap()
    }

    #[test]
    fn identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = MsSsimConfig::default();
        let x = img(&mut rng, 48, 40, 3);
        assert!((ms_ssim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-9);
        let y = noisy(&mut rng, &x, 0.2);
        let a = ms_ssim(&x, &y, &cfg).unwrap();
        let b = ms_ssim(&y, &x, &cfg).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!(a < 1.0 && a > 0.0);
    }

    #[test]
    fn scale_count_adapts() {
        let cfg = MsSsimConfig::default();
        assert_eq!(cfg.effective_scales(64, 64).unwrap(), 3);
        assert_eq!(cfg.effective_scales(176, 176).unwrap(), 5);
        assert_eq!(cfg.effective_scales(11, 30).unwrap(), 1);
        assert!(cfg.effective_scales(10, 64).is_err());
        let w = cfg.effective_weights(3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_ladder_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = MsSsimConfig::default();
        let x = Tensor::from_fn(&[64, 64, 1], |i| 0.5 + 0.4 * ((i % 64) as f64 / 6.0).sin() * ((i / 64) as f64 / 9.0).cos());
        let vals: Vec<f64> = (1..=10)
            .map(|a| ms_ssim(&x, &noisy(&mut rng, &x, 0.03 * a as f64), &cfg).unwrap())
            .collect();
        let inversions = vals.windows(2).filter(|p| p[1] > p[0]).count();
        assert!(inversions <= 1, "{vals:?}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = MsSsimConfig::tiny();
        let x = img(&mut rng, 8, 8, 2);
        let y = noisy(&mut rng, &x, 0.3);
        let (_, g) = ms_ssim_with_grad(&x, &y, &cfg).unwrap();
        let eps = 1e-6;
        for i in 0..y.len() {
            let mut yp = y.clone();
            yp.data_mut()[i] += eps;
            let mut ym = y.clone();
            ym.data_mut()[i] -= eps;
            let fd = (ms_ssim(&x, &yp, &cfg).unwrap() - ms_ssim(&x, &ym, &cfg).unwrap()) / (2.0 * eps);
            let a = g.data()[i];
            assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()) + 1e-9, "i={i} fd={fd} an={a}");
        }
    }

    #[test]
    fn bpp_arithmetic() {
        assert_eq!(bpp(640, 8, 8), 10.0);
        assert_eq!(bpp(0, 8, 8), 0.0);
    }
}
