//! Causally masked 3D convolution over `[D, H, W, C]` volumes.

use crate::error::{invalid, Error, Result};
use crate::tensor::{Parameter, Tensor};
use rand::Rng;

/// Causal filter mask of shape `[fD, fH, fW]`.
///
/// Entries are visited depth-outer, then rows, then columns, with a 1-based
/// counter. Entries whose counter is below the center index
/// `ceil(fD*fH*fW / 2)` are 1; the `inclusive` variant also keeps the center.
pub fn build_mask(f_w: usize, f_h: usize, f_d: usize, inclusive: bool) -> Result<Tensor> {
    for (name, e) in [("fW", f_w), ("fH", f_h), ("fD", f_d)] {
        if e == 0 || e % 2 == 0 {
            return Err(invalid!("mask extent {name}={e} must be odd"));
        }
    }
    let total = f_w * f_h * f_d;
    let central = total.div_ceil(2);
    let mut mask = Tensor::zeros(&[f_d, f_h, f_w]);
    for (i, m) in mask.data_mut().iter_mut().enumerate() {
        let current = i + 1;
        let on = if inclusive {
            current <= central
        } else {
            current < central
        };
        *m = if on { 1.0 } else { 0.0 };
    }
    Ok(mask)
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    dd: isize,
    dh: isize,
    dw: isize,
    /// Offset of this tap's `[Cin, Cout]` block in the filter.
    base: usize,
}

/// Dimensions of a `[D, H, W, C]` volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VolumeDims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl VolumeDims {
    #[inline]
    pub fn pos(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.h + h) * self.w + w
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.d * self.h * self.w
    }

    #[inline]
    pub fn coords(&self, p: usize) -> (usize, usize, usize) {
        (p / (self.h * self.w), (p / self.w) % self.h, p % self.w)
    }

    #[inline]
    pub(crate) fn contains(&self, d: isize, h: isize, w: isize) -> bool {
        d >= 0 && h >= 0 && w >= 0 && (d as usize) < self.d && (h as usize) < self.h && (w as usize) < self.w
    }
}

pub(crate) fn volume_dims(t: &Tensor) -> Result<(VolumeDims, usize)> {
    match *t.shape() {
        [d, h, w, c] => Ok((VolumeDims { d, h, w }, c)),
        ref s => Err(invalid!("volume must be [D,H,W,C], got {s:?}")),
    }
}

/// Masked 3D convolution, stride 1, zero padding, extents preserved.
#[derive(Clone, Debug)]
pub struct MaskedConv3d {
    /// `[fD, fH, fW, Cin, Cout]`
    pub weight: Parameter,
    pub bias: Parameter,
    pub mask: Tensor,
    pub cin: usize,
    pub cout: usize,
    taps: Vec<Tap>,
}

impl MaskedConv3d {
    pub fn new(f: usize, cin: usize, cout: usize, inclusive: bool) -> Result<Self> {
        let mask = build_mask(f, f, f, inclusive)?;
        let weight = Parameter::new(Tensor::zeros(&[f, f, f, cin, cout])).with_decay();
        let bias = Parameter::new(Tensor::zeros(&[cout]));
        let mut layer = MaskedConv3d {
            weight,
            bias,
            mask,
            cin,
            cout,
            taps: Vec::new(),
        };
        layer.rebuild_taps();
        Ok(layer)
    }

    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R) {
        let fan_in = (self.taps.len() * self.cin).max(1);
        let bound = (6.0 / fan_in as f64).sqrt();
        for v in self.weight.value.data_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
        self.remask();
    }

    fn filter_extent(&self) -> usize {
        self.mask.shape()[0]
    }

    fn rebuild_taps(&mut self) {
        let f = self.filter_extent();
        let r = (f / 2) as isize;
        let block = self.cin * self.cout;
        self.taps = self
            .mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0.0)
            .map(|(t, _)| {
                let (kd, kh, kw) = (t / (f * f), (t / f) % f, t % f);
                Tap {
                    dd: kd as isize - r,
                    dh: kh as isize - r,
                    dw: kw as isize - r,
                    base: t * block,
                }
            })
            .collect();
    }

    /// Half-width of the filter along each axis.
    pub fn radius(&self) -> usize {
        self.filter_extent() / 2
    }

    pub fn active_taps(&self) -> usize {
        self.taps.len()
    }

    /// Zero every filter entry outside the mask.
    pub fn remask(&mut self) {
        let block = self.cin * self.cout;
        for (t, &m) in self.mask.data().iter().enumerate() {
            if m == 0.0 {
                self.weight.value.data_mut()[t * block..(t + 1) * block].fill(0.0);
            }
        }
    }

    pub fn check_mask(&self) -> Result<()> {
        let block = self.cin * self.cout;
        for (t, &m) in self.mask.data().iter().enumerate() {
            if m == 0.0 && self.weight.value.data()[t * block..(t + 1) * block].iter().any(|&v| v != 0.0) {
                return Err(Error::State(format!("filter is nonzero at masked tap {t}")));
            }
        }
        Ok(())
    }

    /// Output channels at one position. `fetch` returns the input channel
    /// vector at a coordinate, or `None` outside the volume.
    ///
    /// This is the only place outputs are accumulated, so whole-volume and
    /// windowed evaluation agree bit for bit.
    #[inline]
    pub(crate) fn point<'a, F>(&self, fetch: F, d: usize, h: usize, w: usize, out: &mut [f64])
    where
        F: Fn(isize, isize, isize) -> Option<&'a [f64]>,
    {
        let wt = self.weight.value.data();
        out.copy_from_slice(self.bias.value.data());
        for tap in &self.taps {
            let Some(x) = fetch(d as isize + tap.dd, h as isize + tap.dh, w as isize + tap.dw) else {
                continue;
            };
            for (ci, &v) in x.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let row = &wt[tap.base + ci * self.cout..tap.base + (ci + 1) * self.cout];
                for (o, &wv) in out.iter_mut().zip(row) {
                    *o += v * wv;
                }
            }
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_mask()?;
        let (dims, c) = volume_dims(input)?;
        if c != self.cin {
            return Err(invalid!("volume has {c} channels, layer expects {}", self.cin));
        }
        let mut out = Tensor::zeros(&[dims.d, dims.h, dims.w, self.cout]);
        let x = input.data();
        let cin = self.cin;
        let fetch = |d: isize, h: isize, w: isize| {
            dims.contains(d, h, w).then(|| {
                let p = dims.pos(d as usize, h as usize, w as usize);
                &x[p * cin..(p + 1) * cin]
            })
        };
        let cout = self.cout;
        for (p, o) in out.data_mut().chunks_exact_mut(cout).enumerate() {
            let (d, h, w) = dims.coords(p);
            self.point(fetch, d, h, w, o);
        }
        Ok(out)
    }

    /// Accumulates filter and bias gradients; returns the input gradient if requested.
    pub fn backward(&mut self, input: &Tensor, grad_out: &Tensor, param_grads: bool, input_grad: bool) -> Result<Option<Tensor>> {
        let (dims, c) = volume_dims(input)?;
        if c != self.cin || grad_out.len() != dims.count() * self.cout {
            return Err(invalid!("masked conv backward shape mismatch"));
        }
        let (cin, cout) = (self.cin, self.cout);
        let x = input.data();
        let g = grad_out.data();
        if param_grads {
            let dw = self.weight.grad.data_mut();
            for p in 0..dims.count() {
                let (d, h, w) = dims.coords(p);
                let grow = &g[p * cout..(p + 1) * cout];
                for tap in &self.taps {
                    let (sd, sh, sw) = (d as isize + tap.dd, h as isize + tap.dh, w as isize + tap.dw);
                    if !dims.contains(sd, sh, sw) {
                        continue;
                    }
                    let q = dims.pos(sd as usize, sh as usize, sw as usize);
                    for ci in 0..cin {
                        let v = x[q * cin + ci];
                        if v == 0.0 {
                            continue;
                        }
                        let row = &mut dw[tap.base + ci * cout..tap.base + (ci + 1) * cout];
                        for (a, &gv) in row.iter_mut().zip(grow) {
                            *a += v * gv;
                        }
                    }
                }
            }
            let db = self.bias.grad.data_mut();
            for grow in g.chunks_exact(cout) {
                for (a, &gv) in db.iter_mut().zip(grow) {
                    *a += gv;
                }
            }
        }
        if !input_grad {
            return Ok(None);
        }
        let wt = self.weight.value.data();
        let mut gin = Tensor::zeros(input.shape());
        for (q, acc) in gin.data_mut().chunks_exact_mut(cin).enumerate() {
            let (d, h, w) = dims.coords(q);
            for tap in &self.taps {
                // output position that read this input through `tap`
                let (od, oh, ow) = (d as isize - tap.dd, h as isize - tap.dh, w as isize - tap.dw);
                if !dims.contains(od, oh, ow) {
                    continue;
                }
                let p = dims.pos(od as usize, oh as usize, ow as usize);
                let grow = &g[p * cout..(p + 1) * cout];
                for (ci, a) in acc.iter_mut().enumerate() {
                    let row = &wt[tap.base + ci * cout..tap.base + (ci + 1) * cout];
                    let mut s = 0.0;
                    for (&gv, &wv) in grow.iter().zip(row) {
                        s += gv * wv;
                    }
                    *a += s;
                }
            }
        }
        Ok(Some(gin))
    }
}
