//! 2D convolution and its transpose with SAME zero padding.
//!
//! Activations are `[N, H, W, C]` (a rank-3 `[H, W, C]` input is treated as
//! a batch of one). Filters are `[fH, fW, Cin, Cout]`. The transposed
//! convolution reuses the filter of the convolution it is the adjoint of, so
//! it maps `Cout` channels back to `Cin`.
//!
//! Every output element is accumulated in a fixed order (filter row, filter
//! column, input channel) so results are bit-reproducible.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Spatial geometry of a strided SAME convolution from `in_*` to `out_*`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn same(in_h: usize, in_w: usize, k_h: usize, k_w: usize, stride: usize) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + k_h).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + k_w).saturating_sub(in_w);
        ConvGeometry {
            in_h,
            in_w,
            out_h,
            out_w,
            k_h,
            k_w,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    #[inline]
    fn in_coord(&self, out: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let c = (out * self.stride + k) as isize - pad as isize;
        (c >= 0 && (c as usize) < limit).then_some(c as usize)
    }

    /// Output index reached from input coordinate `inp` through filter tap `k`.
    #[inline]
    fn out_coord(&self, inp: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let t = inp as isize + pad as isize - k as isize;
        if t < 0 || t as usize % self.stride != 0 {
            return None;
        }
        let o = t as usize / self.stride;
        (o < limit).then_some(o)
    }
}

fn as_batch(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((1, h, w, c)),
        [n, h, w, c] => Ok((n, h, w, c)),
        ref s => Err(invalid!("expected [H,W,C] or [N,H,W,C] activations, got {s:?}")),
    }
}

fn with_batch_shape(x: &Tensor, n: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    if x.rank() == 3 {
        vec![h, w, c]
    } else {
        vec![n, h, w, c]
    }
}

fn filter_dims(w: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *w.shape() {
        [fh, fw, ci, co] => Ok((fh, fw, ci, co)),
        ref s => Err(invalid!("filter must be [fH,fW,Cin,Cout], got {s:?}")),
    }
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(invalid!("stride must be 1 or 2, got {stride}"))
    }
}

fn check_bias(bias: Option<&Tensor>, c: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != c => Err(invalid!("bias has {} entries, need {c}", b.len())),
        _ => Ok(()),
    }
}

/// Cross-correlation with SAME zero padding; output extent is `ceil(extent / stride)`.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    check_stride(stride)?;
    let (n, h, w, cin) = as_batch(input)?;
    let (fh, fw, wcin, cout) = filter_dims(weights)?;
    if wcin != cin {
        return Err(invalid!("input has {cin} channels, filter expects {wcin}"));
    }
    if fh % 2 == 0 || fw % 2 == 0 {
        return Err(invalid!("filter extents must be odd, got {fh}x{fw}"));
    }
    check_bias(bias, cout)?;
    let g = ConvGeometry::same(h, w, fh, fw, stride);
    let mut out = Tensor::zeros(&with_batch_shape(input, n, g.out_h, g.out_w, cout));
    conv_forward_kernel(input.data(), weights.data(), bias.map(|b| b.data()), n, cin, cout, &g, out.data_mut());
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward_kernel(
    x: &[f64],
    wt: &[f64],
    bias: Option<&[f64]>,
    n: usize,
    cin: usize,
    cout: usize,
    g: &ConvGeometry,
    out: &mut [f64],
) {
    for b in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o0 = ((b * g.out_h + oy) * g.out_w + ox) * cout;
                let acc = &mut out[o0..o0 + cout];
                if let Some(bias) = bias {
                    acc.copy_from_slice(bias);
                }
                for ky in 0..g.k_h {
                    let Some(iy) = g.in_coord(oy, ky, g.pad_top, g.in_h) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.in_coord(ox, kx, g.pad_left, g.in_w) else { continue };
                        let i0 = ((b * g.in_h + iy) * g.in_w + ix) * cin;
                        let w0 = (ky * g.k_w + kx) * cin * cout;
                        for ci in 0..cin {
                            let v = x[i0 + ci];
                            let wrow = &wt[w0 + ci * cout..w0 + (ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gather form of the adjoint: maps `[N, out_h, out_w, Cout]` back to `[N, in_h, in_w, Cin]`.
#[allow(clippy::too_many_arguments)]
fn conv_adjoint_kernel(
    gy: &[f64],
    wt: &[f64],
    bias: Option<&[f64]>,
    n: usize,
    cin: usize,
    cout: usize,
    g: &ConvGeometry,
    out: &mut [f64],
) {
    for b in 0..n {
        for iy in 0..g.in_h {
            for ix in 0..g.in_w {
                let o0 = ((b * g.in_h + iy) * g.in_w + ix) * cin;
                let acc = &mut out[o0..o0 + cin];
                if let Some(bias) = bias {
                    acc.copy_from_slice(bias);
                }
                for ky in 0..g.k_h {
                    let Some(oy) = g.out_coord(iy, ky, g.pad_top, g.out_h) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ox) = g.out_coord(ix, kx, g.pad_left, g.out_w) else { continue };
                        let g0 = ((b * g.out_h + oy) * g.out_w + ox) * cout;
                        let grow = &gy[g0..g0 + cout];
                        let w0 = (ky * g.k_w + kx) * cin * cout;
                        for (ci, a) in acc.iter_mut().enumerate() {
                            let wrow = &wt[w0 + ci * cout..w0 + (ci + 1) * cout];
                            let mut s = 0.0;
                            for (&gv, &wv) in grow.iter().zip(wrow) {
                                s += gv * wv;
                            }
                            *a += s;
                        }
                    }
                }
            }
        }
    }
}

/// dW[ky,kx,ci,co] = sum over (n, oy, ox) of x[n, iy, ix, ci] * gy[n, oy, ox, co].
fn conv_weight_grad_kernel(
    x: &[f64],
    gy: &[f64],
    n: usize,
    cin: usize,
    cout: usize,
    g: &ConvGeometry,
    dw: &mut [f64],
) {
    for b in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let g0 = ((b * g.out_h + oy) * g.out_w + ox) * cout;
                let grow = &gy[g0..g0 + cout];
                for ky in 0..g.k_h {
                    let Some(iy) = g.in_coord(oy, ky, g.pad_top, g.in_h) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.in_coord(ox, kx, g.pad_left, g.in_w) else { continue };
                        let i0 = ((b * g.in_h + iy) * g.in_w + ix) * cin;
                        let w0 = (ky * g.k_w + kx) * cin * cout;
                        for ci in 0..cin {
                            let v = x[i0 + ci];
                            if v == 0.0 {
                                continue;
                            }
                            let drow = &mut dw[w0 + ci * cout..w0 + (ci + 1) * cout];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += v * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn channel_sums(gy: &[f64], c: usize) -> Tensor {
    let mut s = vec![0.0; c];
    for row in gy.chunks_exact(c) {
        for (a, v) in s.iter_mut().zip(row) {
            *a += v;
        }
    }
    Tensor::new(&[c], s).expect("channel count >= 1")
}

/// Gradients of `conv2d` with respect to input, weights and bias.
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor, stride: usize) -> Result<ConvGrads> {
    check_stride(stride)?;
    let (n, h, w, cin) = as_batch(input)?;
    let (fh, fw, wcin, cout) = filter_dims(weights)?;
    if wcin != cin {
        return Err(invalid!("input has {cin} channels, filter expects {wcin}"));
    }
    let g = ConvGeometry::same(h, w, fh, fw, stride);
    let (gn, gh, gw, gc) = as_batch(grad_out)?;
    if (gn, gh, gw, gc) != (n, g.out_h, g.out_w, cout) {
        return Err(invalid!("grad_out shape {:?} does not match conv output", grad_out.shape()));
    }
    let mut gin = Tensor::zeros(input.shape());
    conv_adjoint_kernel(grad_out.data(), weights.data(), None, n, cin, cout, &g, gin.data_mut());
    let mut gw_t = Tensor::zeros(weights.shape());
    conv_weight_grad_kernel(input.data(), grad_out.data(), n, cin, cout, &g, gw_t.data_mut());
    Ok(ConvGrads {
        input: gin,
        weights: gw_t,
        bias: channel_sums(grad_out.data(), cout),
    })
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same filter.
///
/// Input `[N, h, w, Cout]`, filter `[fH, fW, Cin, Cout]`, bias `[Cin]`;
/// output `[N, h*stride, w*stride, Cin]`.
pub fn conv_transpose2d(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    check_stride(stride)?;
    let (n, h, w, c) = as_batch(input)?;
    let (fh, fw, wcin, wcout) = filter_dims(weights)?;
    if wcout != c {
        return Err(invalid!("input has {c} channels, transposed filter expects {wcout}"));
    }
    if fh % 2 == 0 || fw % 2 == 0 {
        return Err(invalid!("filter extents must be odd, got {fh}x{fw}"));
    }
    check_bias(bias, wcin)?;
    let g = ConvGeometry::same(h * stride, w * stride, fh, fw, stride);
    let mut out = Tensor::zeros(&with_batch_shape(input, n, g.in_h, g.in_w, wcin));
    conv_adjoint_kernel(input.data(), weights.data(), bias.map(|b| b.data()), n, wcin, wcout, &g, out.data_mut());
    Ok(out)
}

pub fn conv_transpose2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    stride: usize,
) -> Result<ConvGrads> {
    check_stride(stride)?;
    let (n, h, w, c) = as_batch(input)?;
    let (fh, fw, wcin, wcout) = filter_dims(weights)?;
    if wcout != c {
        return Err(invalid!("input has {c} channels, transposed filter expects {wcout}"));
    }
    let g = ConvGeometry::same(h * stride, w * stride, fh, fw, stride);
    let (gn, gh, gw, gc) = as_batch(grad_out)?;
    if (gn, gh, gw, gc) != (n, g.in_h, g.in_w, wcin) {
        return Err(invalid!("grad_out shape {:?} does not match transposed conv output", grad_out.shape()));
    }
    let mut gin = Tensor::zeros(input.shape());
    conv_forward_kernel(grad_out.data(), weights.data(), None, n, wcin, wcout, &g, gin.data_mut());
    let mut gw_t = Tensor::zeros(weights.shape());
    conv_weight_grad_kernel(grad_out.data(), input.data(), n, wcin, wcout, &g, gw_t.data_mut());
    Ok(ConvGrads {
        input: gin,
        weights: gw_t,
        bias: channel_sums(grad_out.data(), wcin),
    })
}
