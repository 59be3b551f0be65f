//! Image-level compression: pad, encode, code the symbol volume with the
//! context model driving a range coder, and the inverse.

pub mod bitstream;
pub mod range_coder;

pub use bitstream::Bitstream;
pub use range_coder::{apply_floor, quantize_probs, range_decode, range_encode, EncodedStream};

use crate::autoencoder::Model;
use crate::context_model::{ContextModel, SymbolVolume};
use crate::error::{invalid, Result};
use crate::quantizer::CenterSet;
use crate::tensor::Tensor;

/// Mirror index for reflect padding; period `2(n-1)`.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let p = 2 * (n - 1);
    let r = i % p;
    if r < n {
        r
    } else {
        p - r
    }
}

/// Reflect-pads `[H, W, C]` at the bottom and right to multiples of `multiple`.
pub fn pad_to_multiple(x: &Tensor, multiple: usize) -> Result<(Tensor, usize, usize)> {
    let [h, w, c] = *x.shape() else {
        return Err(invalid!("image must be [H,W,C], got {:?}", x.shape()));
    };
    if h == 0 || w == 0 || multiple == 0 {
        return Err(invalid!("empty image"));
    }
    let ph = (multiple - h % multiple) % multiple;
    let pw = (multiple - w % multiple) % multiple;
    let (hh, ww) = (h + ph, w + pw);
    let src = x.data();
    let mut out = Vec::with_capacity(hh * ww * c);
    for i in 0..hh {
        let si = reflect(i, h);
        for j in 0..ww {
            let s = (si * w + reflect(j, w)) * c;
            out.extend_from_slice(&src[s..s + c]);
        }
    }
    Ok((Tensor::new(&[hh, ww, c], out)?, ph, pw))
}

/// Top-left `h x w` window of an `[H, W, C]` image.
pub fn crop_top_left(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [hh, ww, c] = *x.shape() else {
        return Err(invalid!("image must be [H,W,C]"));
    };
    if h > hh || w > ww {
        return Err(invalid!("crop {h}x{w} exceeds {hh}x{ww}"));
    }
    let mut out = Vec::with_capacity(h * w * c);
    for i in 0..h {
        out.extend_from_slice(&x.data()[i * ww * c..(i * ww + w) * c]);
    }
    Tensor::new(&[h, w, c], out)
}

/// Everything produced while compressing one image.
#[derive(Clone, Debug)]
pub struct Compressed {
    pub bitstream: Bitstream,
    pub symbols: SymbolVolume,
    /// Model-predicted cost of all symbols, in bits.
    pub coding_cost: f64,
    pub masked_coding_cost: f64,
    /// The reconstruction the decoder will produce, unpadded.
    pub x_hat: Tensor,
}

fn check_image(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [h, w, 3] if h > 0 && w > 0 => {}
        ref s => return Err(invalid!("image must be [H,W,3], got {s:?}")),
    }
    if !x.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(invalid!("pixel values must lie in [0, 1]"));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// Compresses an `[H, W, 3]` image with values in `[0, 1]`.
pub fn compress_image(model: &mut Model, model_hash: [u8; 8], x: &Tensor) -> Result<Compressed> {
    let (h, w) = check_image(x)?;
    if h > u32::MAX as usize || w > u32::MAX as usize {
        return Err(invalid!("image too large"));
    }
    let f = model.ae.downsampling();
    let (padded, ph, pw) = pad_to_multiple(x, f)?;
    if ph > u8::MAX as usize || pw > u8::MAX as usize {
        return Err(invalid!("padding does not fit the header"));
    }
    let (res, x_hat) = model.analyze(&padded)?;
    let probs = res.probs();
    let l = model.num_symbols();
    let rows = probs.data();
    let stream = range_encode(res.symbols.indices(), |i, _| Ok(apply_floor(&rows[i * l..(i + 1) * l])))?;
    let bitstream = Bitstream {
        width: w as u32,
        height: h as u32,
        pad_h: ph as u8,
        pad_w: pw as u8,
        channels: u16::try_from(model.channels()).map_err(|_| invalid!("K too large"))?,
        num_symbols: u16::try_from(l).map_err(|_| invalid!("L too large"))?,
        model_hash,
        payload: stream.payload,
        checksum: stream.checksum,
    };
    Ok(Compressed {
        bitstream,
        coding_cost: res.coding_cost,
        masked_coding_cost: res.masked_coding_cost,
        symbols: res.symbols,
        x_hat: crop_top_left(&x_hat, h, w)?,
    })
}

/// How the decoder evaluates the context model for each symbol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeStrategy {
    /// Only the receptive field around the current position.
    Windowed,
    /// The whole volume, recomputed per symbol. Slow; kept as a reference.
    FullVolume,
}

/// Decodes a symbol volume of the given extents from a coded stream.
pub fn decode_symbols(
    ctx: &ContextModel,
    centers: &CenterSet,
    (h, w, k): (usize, usize, usize),
    payload: &[u8],
    checksum: u32,
    strategy: DecodeStrategy,
) -> Result<SymbolVolume> {
    let l = centers.len();
    if ctx.num_symbols != l {
        return Err(invalid!("context model and centers disagree on L"));
    }
    let n = h * w * k;
    let c = centers.values();
    // unknown positions hold 0.0; causality keeps them from being read
    let mut values = Tensor::zeros(&[k, h, w, 1]);
    let decoded = range_decode(payload, checksum, n, |i, prev| {
        if i > 0 {
            values.data_mut()[i - 1] = c[prev[i - 1] as usize];
        }
        let p = match strategy {
            DecodeStrategy::Windowed => ctx.probs_at(&values, i)?,
            DecodeStrategy::FullVolume => ctx.forward(&values)?.probs.data()[i * l..(i + 1) * l].to_vec(),
        };
        Ok(apply_floor(&p))
    })?;
    SymbolVolume::new(h, w, k, decoded, l)
}

/// Symbols and unpadded reconstruction from a bitstream.
pub fn decompress_symbols(model: &mut Model, model_hash: [u8; 8], bs: &Bitstream) -> Result<(SymbolVolume, Tensor)> {
    if bs.model_hash != model_hash {
        return Err(invalid!("bitstream was produced by a different model (hash mismatch)"));
    }
    if bs.channels as usize != model.channels() || bs.num_symbols as usize != model.num_symbols() {
        return Err(invalid!(
            "bitstream K={} L={} but model K={} L={}",
            bs.channels,
            bs.num_symbols,
            model.channels(),
            model.num_symbols()
        ));
    }
    let f = model.ae.downsampling();
    let (hh, ww) = (bs.height as usize + bs.pad_h as usize, bs.width as usize + bs.pad_w as usize);
    if hh % f != 0 || ww % f != 0 || bs.pad_h as usize >= f || bs.pad_w as usize >= f {
        return Err(invalid!("header padding inconsistent with the model's downsampling"));
    }
    let dims = (hh / f, ww / f, model.channels());
    let symbols = decode_symbols(&model.ctx, &model.centers, dims, &bs.payload, bs.checksum, DecodeStrategy::Windowed)?;
    let x_hat = model.reconstruct(&symbols)?;
    let x_hat = crop_top_left(&x_hat, bs.height as usize, bs.width as usize)?;
    Ok((symbols, x_hat))
}

pub fn decompress_image(model: &mut Model, model_hash: [u8; 8], bs: &Bitstream) -> Result<Tensor> {
    Ok(decompress_symbols(model, model_hash, bs)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::{AeConfig, NormStats};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reflect_padding() {
        let x = Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let (p, ph, pw) = pad_to_multiple(&x, 8).unwrap();
        assert_eq!((ph, pw), (7, 5));
        assert_eq!(&p.data()[..8], &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0, 2.0]);
        assert!(p.data().chunks(8).all(|r| r == &p.data()[..8]));
        let (same, 0, 0) = pad_to_multiple(&p, 8).unwrap() else { panic!() };
        assert_eq!(same, p);
        assert_eq!(crop_top_left(&p, 1, 3).unwrap(), x);
    }

    fn tiny_model(seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AeConfig {
            widths: vec![4, 4],
            channels: 3,
            residual: false,
        };
        let norm = NormStats {
            mean: [0.5; 3],
            var: [0.05; 3],
        };
        let mut m = Model::new(cfg, 5, 6, norm, &mut rng).unwrap();
        let x = crate::data::procedural_texture(seed, 16, 16).reshape(&[1, 16, 16, 3]).unwrap();
        m.forward(&x, crate::autoencoder::PipelineMode::TRAIN).unwrap();
        m
    }

    #[test]
    fn image_round_trip_and_mismatches() {
        let mut m = tiny_model(3);
        let x = crate::data::procedural_texture(9, 13, 18);
        let c = compress_image(&mut m, [7; 8], &x).unwrap();
        assert_eq!((c.bitstream.pad_h, c.bitstream.pad_w), (3, 2));
        let bs = Bitstream::from_bytes(&c.bitstream.to_bytes()).unwrap();
        let (sym, y) = decompress_symbols(&mut m, [7; 8], &bs).unwrap();
        assert_eq!(sym, c.symbols);
        assert_eq!(y, c.x_hat);
        assert_eq!(y.shape(), &[13, 18, 3]);
        assert!(decompress_image(&mut m, [8; 8], &bs).is_err());
        let mut other = tiny_model(4);
        other.centers = CenterSet::evenly_spaced(4, 1.0).unwrap();
        assert!(decompress_image(&mut other, [7; 8], &bs).is_err());
    }
}
