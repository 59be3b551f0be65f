//! On-disk container for a compressed image.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CPDC";
pub const VERSION: u8 = 1;
/// Bytes before the payload.
pub const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 1 + 1 + 2 + 2 + 8 + 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    /// Original (unpadded) image size.
    pub width: u32,
    pub height: u32,
    pub pad_h: u8,
    pub pad_w: u8,
    pub channels: u16,
    pub num_symbols: u16,
    pub model_hash: [u8; 8],
    pub payload: Vec<u8>,
    pub checksum: u32,
}

impl Bitstream {
    /// Size of the coded symbols alone; header and checksum are not counted.
    pub fn payload_bits(&self) -> u64 {
        self.payload.len() as u64 * 8
    }

    pub fn bpp(&self) -> f64 {
        crate::metrics::bpp(self.payload_bits(), self.width as usize, self.height as usize)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.pad_h);
        out.push(self.pad_w);
        out.extend_from_slice(&self.channels.to_le_bytes());
        out.extend_from_slice(&self.num_symbols.to_le_bytes());
        out.extend_from_slice(&self.model_hash);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a CPDC bitstream".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported bitstream version {version}")));
        }
        let width = r.u32()?;
        let height = r.u32()?;
        let pad_h = r.u8()?;
        let pad_w = r.u8()?;
        let channels = r.u16()?;
        let num_symbols = r.u16()?;
        let model_hash: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
        let len = r.u32()? as usize;
        let payload = r.take(len)?.to_vec();
        let checksum = r.u32()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if width == 0 || height == 0 || channels == 0 || num_symbols < 2 {
            return Err(Error::Format("degenerate header".into()));
        }
        Ok(Bitstream {
            width,
            height,
            pad_h,
            pad_w,
            channels,
            num_symbols,
            model_hash,
            payload,
            checksum,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated bitstream".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
