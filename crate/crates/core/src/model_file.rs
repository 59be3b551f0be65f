//! Binary model file: a JSON header followed by every tensor as little-endian f32.
//!
//! Layout: magic `CPDM`, version u8, K u16, L u16, header length u32, header
//! JSON, tensor count u32, then per tensor its element count u32 and values.
//! Tensors appear in a fixed order: centers, auto-encoder parameters, batch
//! norm running means and variances, context-model parameters.

use crate::autoencoder::{AeConfig, Model, NormStats, TrainConfig};
use crate::context_model::DEFAULT_LAYERS;
use crate::error::{Error, Result};
use crate::metrics::MsSsimConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CPDM";
pub const VERSION: u8 = 1;

/// Everything needed to rebuild the model's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub autoencoder: AeConfig,
    pub num_centers: usize,
    pub sigma: f64,
    pub ctx_hidden: usize,
    pub ctx_layers: usize,
    pub norm: NormStats,
    pub ms_ssim: MsSsimConfig,
    /// Crop size and the rest of the training configuration, when known.
    pub train: Option<TrainConfig>,
}

impl ModelHeader {
    pub fn describe(model: &Model, train: Option<&TrainConfig>) -> Self {
        ModelHeader {
            autoencoder: model.ae.config.clone(),
            num_centers: model.num_symbols(),
            sigma: model.centers.sigma,
            ctx_hidden: model.ctx.hidden(),
            ctx_layers: model.ctx.layers.len(),
            norm: model.ae.norm.clone(),
            ms_ssim: model.ms_ssim.clone(),
            train: train.cloned(),
        }
    }
}

/// A model as read from disk, with the identifier stored in bitstreams.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub model: Model,
    pub header: ModelHeader,
    pub hash: [u8; 8],
}

/// First 8 bytes of the SHA-256 of a model file.
pub fn model_hash(bytes: &[u8]) -> [u8; 8] {
    let d = Sha256::digest(bytes);
    d[..8].try_into().expect("digest has 32 bytes")
}

/// Visits every stored array of `model` in file order.
fn for_each_array(model: &mut Model, mut f: impl FnMut(&mut [f64], Option<&mut Vec<f64>>) -> Result<()>) -> Result<()> {
    f(model.centers.centers.value.data_mut(), None)?;
    for p in model.ae.params_mut() {
        f(p.value.data_mut(), None)?;
    }
    for s in model.ae.running_stats_mut() {
        f(&mut [], Some(&mut s.mean))?;
        f(&mut [], Some(&mut s.var))?;
    }
    for p in model.ctx.params_mut() {
        f(p.value.data_mut(), None)?;
    }
    Ok(())
}

pub fn to_bytes(model: &Model, train: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let header = ModelHeader::describe(model, train);
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(model.channels() as u16).to_le_bytes());
    out.extend_from_slice(&(model.num_symbols() as u16).to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut arrays: Vec<Vec<f64>> = Vec::new();
    let mut m = model.clone();
    for_each_array(&mut m, |fixed, grow| {
        arrays.push(match grow {
            Some(v) => v.clone(),
            None => fixed.to_vec(),
        });
        Ok(())
    })?;
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in &arrays {
        out.extend_from_slice(&(a.len() as u32).to_le_bytes());
        for &v in a {
            if !v.is_finite() {
                return Err(Error::Numeric("refusing to save a non-finite parameter".into()));
            }
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated model file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<LoadedModel> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a CPDM model file".into()));
    }
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported model file version {version}")));
    }
    let k = c.u16()? as usize;
    let l = c.u16()? as usize;
    let len = c.u32()? as usize;
    let header: ModelHeader =
        serde_json::from_slice(c.take(len)?).map_err(|e| Error::Format(format!("model header: {e}")))?;
    if header.autoencoder.channels != k || header.num_centers != l {
        return Err(Error::Format("K/L in the model header disagree".into()));
    }
    // structure only; every value is overwritten below
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(header.autoencoder.clone(), l, header.ctx_hidden, header.norm.clone(), &mut rng)?;
    if header.ctx_layers != DEFAULT_LAYERS {
        model.ctx = crate::context_model::ContextModel::new(l, header.ctx_hidden, header.ctx_layers)?;
    }
    model.centers = crate::quantizer::CenterSet::new(model.centers.values().to_vec(), header.sigma)?;
    model.ms_ssim = header.ms_ssim.clone();
    let count = c.u32()? as usize;
    let mut seen = 0;
    for_each_array(&mut model, |fixed, grow| {
        seen += 1;
        if seen > count {
            return Err(Error::Format("model file has too few tensors".into()));
        }
        let n = c.u32()? as usize;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let vals = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64);
        match grow {
            Some(v) => *v = vals.collect(),
            None => {
                if n != fixed.len() {
                    return Err(Error::Format(format!("tensor has {n} values, expected {}", fixed.len())));
                }
                fixed.iter_mut().zip(vals).for_each(|(d, s)| *d = s);
            }
        }
        Ok(())
    })?;
    if seen != count || c.pos != bytes.len() {
        return Err(Error::Format("model file tensor count or length mismatch".into()));
    }
    let vals = model.centers.values();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("centers must be finite".into()));
    }
    for s in model.ae.running_stats_mut() {
        if s.mean.len() != s.var.len() {
            return Err(Error::Format("running statistics have mismatched lengths".into()));
        }
    }
    model.ctx.check_masks().map_err(|e| Error::Format(format!("context model: {e}")))?;
    Ok(LoadedModel {
        model,
        header,
        hash: model_hash(bytes),
    })
}

pub fn save(path: &Path, model: &Model, train: Option<&TrainConfig>) -> Result<[u8; 8]> {
    let bytes = to_bytes(model, train)?;
    std::fs::write(path, &bytes)?;
    Ok(model_hash(&bytes))
}

pub fn load(path: &Path) -> Result<LoadedModel> {
    from_bytes(&std::fs::read(path)?)
}

/// The model exactly as a reader of its file will see it (parameters rounded to f32).
pub fn round_trip(model: &Model, train: Option<&TrainConfig>) -> Result<LoadedModel> {
    from_bytes(&to_bytes(model, train)?)
}
