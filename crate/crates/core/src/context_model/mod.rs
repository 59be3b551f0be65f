//! Causal context model over quantized latent volumes.
//!
//! A stack of masked 3D convolutions maps the volume of center values to a
//! distribution over the `L` symbols at every voxel. Masks guarantee that the
//! distribution at a voxel only depends on voxels earlier in scan order
//! (columns fastest, then rows, then channels), which is what lets the
//! decoder reproduce it symbol by symbol.

mod histogram;
mod masked_conv;

pub use histogram::{fit_first_order, fit_zeroth_order, FirstOrderModel, ZerothOrderModel};
pub use masked_conv::{build_mask, MaskedConv3d, VolumeDims};

use crate::error::{invalid, Result};
use crate::quantizer::CenterSet;
use crate::tensor::{Parameter, Tensor};
use masked_conv::volume_dims;
use rand::Rng;
use std::f64::consts::LN_2;

/// Probabilities are floored at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-9;
pub const DEFAULT_HIDDEN: usize = 24;
pub const DEFAULT_LAYERS: usize = 4;
pub const FILTER_SIZE: usize = 3;

/// Grid of symbol indices for an `H x W x K` latent, stored in scan order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SymbolVolume {
    height: usize,
    width: usize,
    depth: usize,
    num_symbols: usize,
    indices: Vec<u16>,
}

impl SymbolVolume {
    /// Builds from scan-ordered indices (`(k * H + h) * W + w`).
    pub fn new(height: usize, width: usize, depth: usize, indices: Vec<u16>, num_symbols: usize) -> Result<Self> {
        if height * width * depth != indices.len() || height * width * depth == 0 {
            return Err(invalid!(
                "{} indices do not fill a {height}x{width}x{depth} volume",
                indices.len()
            ));
        }
        if num_symbols < 1 || num_symbols > u16::MAX as usize {
            return Err(invalid!("unsupported alphabet size {num_symbols}"));
        }
        if let Some(&bad) = indices.iter().find(|&&s| s as usize >= num_symbols) {
            return Err(invalid!("symbol {bad} out of range for L={num_symbols}"));
        }
        Ok(SymbolVolume {
            height,
            width,
            depth,
            num_symbols,
            indices,
        })
    }

    /// Builds from indices laid out like an `[H, W, K]` tensor.
    pub fn from_hwk(height: usize, width: usize, depth: usize, hwk: &[usize], num_symbols: usize) -> Result<Self> {
        if hwk.len() != height * width * depth {
            return Err(invalid!("index count does not match {height}x{width}x{depth}"));
        }
        let mut scan = vec![0u16; hwk.len()];
        for h in 0..height {
            for w in 0..width {
                for k in 0..depth {
                    scan[(k * height + h) * width + w] = hwk[(h * width + w) * depth + k] as u16;
                }
            }
        }
        Self::new(height, width, depth, scan, num_symbols)
    }

    pub fn filled(height: usize, width: usize, depth: usize, symbol: usize, num_symbols: usize) -> Result<Self> {
        Self::new(height, width, depth, vec![symbol as u16; height * width * depth], num_symbols)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn num_symbols(&self) -> usize {
        self.num_symbols
    }
    pub fn len(&self) -> usize {
        self.indices.len()
    }
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
    pub fn dims(&self) -> VolumeDims {
        VolumeDims {
            d: self.depth,
            h: self.height,
            w: self.width,
        }
    }

    /// Scan-ordered symbols.
    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    pub fn get(&self, h: usize, w: usize, k: usize) -> usize {
        self.indices[self.scan_index(h, w, k)] as usize
    }

    pub fn set_scan(&mut self, i: usize, symbol: usize) {
        assert!(symbol < self.num_symbols);
        self.indices[i] = symbol as u16;
    }

    pub fn scan_index(&self, h: usize, w: usize, k: usize) -> usize {
        (k * self.height + h) * self.width + w
    }

    /// Center values as a `[K, H, W, 1]` volume.
    pub fn center_volume(&self, centers: &CenterSet) -> Result<Tensor> {
        if centers.len() != self.num_symbols {
            return Err(invalid!("{} centers for an alphabet of {}", centers.len(), self.num_symbols));
        }
        let c = centers.values();
        Tensor::new(
            &[self.depth, self.height, self.width, 1],
            self.indices.iter().map(|&s| c[s as usize]).collect(),
        )
    }
}

/// Reorders an `[H, W, K]` tensor into scan order.
pub fn hwk_to_scan(t: &Tensor) -> Result<Vec<f64>> {
    let [h, w, k] = *t.shape() else {
        return Err(invalid!("expected [H,W,K], got {:?}", t.shape()));
    };
    let mut out = vec![0.0; t.len()];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..k {
                out[(ch * h + i) * w + j] = t.data()[(i * w + j) * k + ch];
            }
        }
    }
    Ok(out)
}

/// Inverse of [`hwk_to_scan`].
pub fn scan_to_hwk(scan: &[f64], h: usize, w: usize, k: usize) -> Result<Tensor> {
    if scan.len() != h * w * k {
        return Err(invalid!("scan vector has wrong length"));
    }
    let mut out = vec![0.0; scan.len()];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..k {
                out[(i * w + j) * k + ch] = scan[(ch * h + i) * w + j];
            }
        }
    }
    Tensor::new(&[h, w, k], out)
}

#[inline]
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let mx = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut s = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - mx).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Activations saved by [`ContextModel::forward`].
#[derive(Clone, Debug)]
pub struct ContextCache {
    /// Input of each layer (post-activation of the previous one).
    inputs: Vec<Tensor>,
    /// Pre-activation output of each layer.
    pre: Vec<Tensor>,
    pub probs: Tensor,
}

/// Four masked 3D convolutions with rectifiers in between and a softmax head.
#[derive(Clone, Debug)]
pub struct ContextModel {
    pub layers: Vec<MaskedConv3d>,
    pub num_symbols: usize,
}

impl ContextModel {
    /// All-zero parameters (uniform output); call [`ContextModel::init`] to randomize.
    pub fn new(num_symbols: usize, hidden: usize, num_layers: usize) -> Result<Self> {
        if num_symbols < 2 {
            return Err(invalid!("context model needs L >= 2"));
        }
        if num_layers < 2 || hidden == 0 {
            return Err(invalid!("context model needs >= 2 layers and hidden width >= 1"));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            let cin = if i == 0 { 1 } else { hidden };
            let cout = if i + 1 == num_layers { num_symbols } else { hidden };
            layers.push(MaskedConv3d::new(FILTER_SIZE, cin, cout, i > 0)?);
        }
        Ok(ContextModel { layers, num_symbols })
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        for l in &mut self.layers {
            l.init_uniform(rng);
            l.bias.value.fill(0.0);
        }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].cout
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Verifies that every filter is zero outside its causal mask.
    pub fn check_masks(&self) -> Result<()> {
        self.layers.iter().try_for_each(MaskedConv3d::check_mask)
    }

    pub fn remask(&mut self) {
        self.layers.iter_mut().for_each(MaskedConv3d::remask);
    }

    /// Receptive-field half-width of the whole stack.
    pub fn receptive_radius(&self) -> usize {
        self.layers.iter().map(|l| l.radius()).sum()
    }

    /// Probabilities `[D, H, W, L]` for a `[D, H, W, 1]` volume of center values.
    pub fn forward(&self, values: &Tensor) -> Result<ContextCache> {
        let (_, c) = volume_dims(values)?;
        if c != 1 {
            return Err(invalid!("context model input must have one channel"));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut h = values.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&h)?;
            inputs.push(h);
            h = if i + 1 < n { y.map(|v| v.max(0.0)) } else { y.clone() };
            pre.push(y);
        }
        let mut probs = h;
        let l = self.num_symbols;
        let mut buf = vec![0.0; l];
        for row in probs.data_mut().chunks_exact_mut(l) {
            softmax_into(row, &mut buf);
            row.copy_from_slice(&buf);
        }
        Ok(ContextCache { inputs, pre, probs })
    }

    /// Convenience: probabilities for a symbol volume.
    pub fn context_forward(&self, symbols: &SymbolVolume, centers: &CenterSet) -> Result<Tensor> {
        Ok(self.forward(&symbols.center_volume(centers)?)?.probs)
    }

    /// Backpropagates `grad_logits` (`[D, H, W, L]`). Parameter gradients are
    /// accumulated when `param_grads`; the gradient w.r.t. the input values is
    /// returned when `input_grad`.
    pub fn backward(&mut self, cache: &ContextCache, grad_logits: &Tensor, param_grads: bool, input_grad: bool) -> Result<Option<Tensor>> {
        let n = self.layers.len();
        let mut g = grad_logits.clone();
        for i in (0..n).rev() {
            let need_in = i > 0 || input_grad;
            let gin = self.layers[i].backward(&cache.inputs[i], &g, param_grads, need_in)?;
            if i == 0 {
                return Ok(gin);
            }
            let mut gin = gin.expect("requested");
            for (gv, &pv) in gin.data_mut().iter_mut().zip(cache.pre[i - 1].data()) {
                if pv <= 0.0 {
                    *gv = 0.0;
                }
            }
            g = gin;
        }
        unreachable!("loop returns at layer 0")
    }

    /// Probability vector at scan position `pos`, reading only the receptive
    /// field around it. Matches [`ContextModel::forward`] bit for bit.
    ///
    /// Only entries of `values` strictly before `pos` in scan order are read.
    pub fn probs_at(&self, values: &Tensor, pos: usize) -> Result<Vec<f64>> {
        let (dims, c) = volume_dims(values)?;
        if c != 1 || pos >= dims.count() {
            return Err(invalid!("bad volume or position for windowed evaluation"));
        }
        let (pd, ph, pw) = dims.coords(pos);
        let n = self.layers.len();
        // radius of the box each layer's output must cover
        let mut radius = vec![0usize; n];
        for i in (0..n - 1).rev() {
            radius[i] = radius[i + 1] + self.layers[i + 1].radius();
        }
        let vals = values.data();
        let mut prev: Option<LocalBox> = None;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let bx = LocalBox::around(dims, (pd, ph, pw), radius[i], layer.cout);
            let mut cur = bx.clone();
            {
                let fetch = |d: isize, h: isize, w: isize| -> Option<&[f64]> {
                    if !dims.contains(d, h, w) {
                        return None;
                    }
                    match &prev {
                        None => {
                            let p = dims.pos(d as usize, h as usize, w as usize);
                            Some(&vals[p..p + 1])
                        }
                        Some(b) => Some(b.get(d as usize, h as usize, w as usize)),
                    }
                };
                for d in bx.lo.0..=bx.hi.0 {
                    for h in bx.lo.1..=bx.hi.1 {
                        for w in bx.lo.2..=bx.hi.2 {
                            if dims.pos(d, h, w) > pos {
                                continue;
                            }
                            let slot = cur.slot_mut(d, h, w);
                            layer.point(fetch, d, h, w, slot);
                            if i + 1 < n {
                                for v in slot.iter_mut() {
                                    *v = v.max(0.0);
                                }
                            }
                        }
                    }
                }
            }
            if i + 1 == n {
                let logits = cur.get(pd, ph, pw);
                out = vec![0.0; logits.len()];
                softmax_into(logits, &mut out);
            }
            prev = Some(cur);
        }
        Ok(out)
    }
}

/// Dense storage for a clipped box of a volume.
#[derive(Clone, Debug)]
struct LocalBox {
    lo: (usize, usize, usize),
    hi: (usize, usize, usize),
    ext: (usize, usize, usize),
    c: usize,
    data: Vec<f64>,
}

impl LocalBox {
    fn around(dims: VolumeDims, p: (usize, usize, usize), r: usize, c: usize) -> Self {
        let lo = (p.0.saturating_sub(r), p.1.saturating_sub(r), p.2.saturating_sub(r));
        let hi = ((p.0 + r).min(dims.d - 1), (p.1 + r).min(dims.h - 1), (p.2 + r).min(dims.w - 1));
        let ext = (hi.0 - lo.0 + 1, hi.1 - lo.1 + 1, hi.2 - lo.2 + 1);
        LocalBox {
            lo,
            hi,
            ext,
            c,
            data: vec![0.0; ext.0 * ext.1 * ext.2 * c],
        }
    }

    #[inline]
    fn offset(&self, d: usize, h: usize, w: usize) -> usize {
        debug_assert!(d >= self.lo.0 && d <= self.hi.0 && h >= self.lo.1 && h <= self.hi.1 && w >= self.lo.2 && w <= self.hi.2);
        (((d - self.lo.0) * self.ext.1 + (h - self.lo.1)) * self.ext.2 + (w - self.lo.2)) * self.c
    }

    #[inline]
    fn get(&self, d: usize, h: usize, w: usize) -> &[f64] {
        let o = self.offset(d, h, w);
        &self.data[o..o + self.c]
    }

    #[inline]
    fn slot_mut(&mut self, d: usize, h: usize, w: usize) -> &mut [f64] {
        let o = self.offset(d, h, w);
        &mut self.data[o..o + self.c]
    }
}

fn check_probs_symbols(probs: &Tensor, symbols: &SymbolVolume) -> Result<usize> {
    let l = *probs.shape().last().expect("rank >= 1");
    if l != symbols.num_symbols() || probs.len() != symbols.len() * l {
        return Err(invalid!(
            "probabilities {:?} do not match a volume of {} symbols over L={}",
            probs.shape(),
            symbols.len(),
            symbols.num_symbols()
        ));
    }
    Ok(l)
}

#[inline]
fn bits(p: f64) -> f64 {
    -p.max(PROB_FLOOR).log2()
}

/// `C = sum_i -log2 P[i, s_i]` in bits.
pub fn coding_cost(probs: &Tensor, symbols: &SymbolVolume) -> Result<f64> {
    let l = check_probs_symbols(probs, symbols)?;
    Ok(symbols
        .indices()
        .iter()
        .zip(probs.data().chunks_exact(l))
        .map(|(&s, row)| bits(row[s as usize]))
        .sum())
}

/// `MC = sum_i -ceil(m_i) log2 P[i, s_i]` with `m_bin` given as `[H, W, K]`.
pub fn masked_coding_cost(probs: &Tensor, symbols: &SymbolVolume, m_bin: &Tensor) -> Result<f64> {
    let l = check_probs_symbols(probs, symbols)?;
    let weights = hwk_to_scan(m_bin)?;
    if weights.len() != symbols.len() {
        return Err(invalid!("mask does not match symbol volume"));
    }
    Ok(symbols
        .indices()
        .iter()
        .zip(probs.data().chunks_exact(l))
        .zip(&weights)
        .map(|((&s, row), &m)| if m.ceil() == 0.0 { 0.0 } else { m.ceil() * bits(row[s as usize]) })
        .sum())
}

/// Batch mean of the coding cost.
pub fn cross_entropy_loss(batch: &[(Tensor, SymbolVolume)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let mut total = 0.0;
    for (p, s) in batch {
        total += coding_cost(p, s)?;
    }
    Ok(total / batch.len() as f64)
}

/// Gradient w.r.t. the logits of `scale * sum_i -w_i log2 max(P[i, s_i], floor)`
/// where `w` is an optional scan-ordered weight per voxel.
pub fn cost_grad_logits(probs: &Tensor, symbols: &SymbolVolume, weights: Option<&[f64]>, scale: f64) -> Result<Tensor> {
    let l = check_probs_symbols(probs, symbols)?;
    let mut g = Tensor::zeros(probs.shape());
    for (i, ((&s, prow), grow)) in symbols
        .indices()
        .iter()
        .zip(probs.data().chunks_exact(l))
        .zip(g.data_mut().chunks_exact_mut(l))
        .enumerate()
    {
        let w = weights.map_or(1.0, |w| w[i]) * scale;
        if w == 0.0 || prow[s as usize] < PROB_FLOOR {
            continue;
        }
        for (j, (gv, &pv)) in grow.iter_mut().zip(prow).enumerate() {
            let onehot = if j == s as usize { 1.0 } else { 0.0 };
            *gv = w * (pv - onehot) / LN_2;
        }
    }
    Ok(g)
}

/// Per-voxel `-log2 P[i, s_i]` in scan order.
pub fn symbol_bits(probs: &Tensor, symbols: &SymbolVolume) -> Result<Vec<f64>> {
    let l = check_probs_symbols(probs, symbols)?;
    Ok(symbols
        .indices()
        .iter()
        .zip(probs.data().chunks_exact(l))
        .map(|(&s, row)| bits(row[s as usize]))
        .collect())
}
