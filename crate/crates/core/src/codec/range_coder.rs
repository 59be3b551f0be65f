//! Byte-oriented range coder with carry propagation and 16-bit frequencies.

use crate::context_model::PROB_FLOOR;
use crate::error::{invalid, Error, Result};

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;
const TOP: u32 = 1 << 24;

/// Mixes a distribution with the floor so every entry is at least `PROB_FLOOR`.
pub fn apply_floor(p: &[f64]) -> Vec<f64> {
    let l = p.len() as f64;
    p.iter().map(|&v| v * (1.0 - l * PROB_FLOOR) + PROB_FLOOR).collect()
}

fn validate(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.len() > (FREQ_TOTAL / 2) as usize {
        return Err(invalid!("unsupported alphabet size {}", p.len()));
    }
    let mut sum = 0.0;
    for &v in p {
        if !v.is_finite() || v < PROB_FLOOR * (1.0 - 1e-9) {
            return Err(invalid!("probability {v} below floor {PROB_FLOOR}"));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(invalid!("probabilities sum to {sum}"));
    }
    Ok(())
}

/// Integer frequencies summing to `FREQ_TOTAL`, each at least 1.
///
/// `floor(p_j * (T - L)) + 1` per symbol, with the shortfall handed out by
/// largest fractional remainder (ties to the lowest index).
pub fn quantize_probs(p: &[f64]) -> Result<Vec<u32>> {
    validate(p)?;
    let l = p.len();
    let scale = (FREQ_TOTAL as usize - l) as f64;
    let mut freqs = Vec::with_capacity(l);
    let mut rem = Vec::with_capacity(l);
    for &v in p {
        let raw = v * scale;
        let f = raw.floor();
        freqs.push(f as u32 + 1);
        rem.push(raw - f);
    }
    let assigned: u32 = freqs.iter().sum();
    let deficit = FREQ_TOTAL.checked_sub(assigned).ok_or_else(|| invalid!("frequencies overflow"))? as usize;
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| rem[b].total_cmp(&rem[a]).then(a.cmp(&b)));
    for &j in order.iter().cycle().take(deficit) {
        freqs[j] += 1;
    }
    Ok(freqs)
}

/// `-log2` of the quantized probability of `symbol`.
pub fn quantized_bits(freqs: &[u32], symbol: usize) -> f64 {
    FREQ_BITS as f64 - (freqs[symbol] as f64).log2()
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn encode(&mut self, freqs: &[u32], symbol: usize) -> Result<()> {
        if symbol >= freqs.len() {
            return Err(invalid!("symbol {symbol} outside alphabet of {}", freqs.len()));
        }
        let cum: u32 = freqs[..symbol].iter().sum();
        let r = self.range >> FREQ_BITS;
        self.low += u64::from(r) * u64::from(cum);
        self.range = r * freqs[symbol];
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < 5 || bytes[0] != 0 {
            return Err(Error::Decode("payload too short or malformed".into()));
        }
        let code = bytes[1..5].iter().fold(0u32, |c, &b| (c << 8) | u32::from(b));
        Ok(RangeDecoder {
            bytes,
            pos: 5,
            range: u32::MAX,
            code,
        })
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| Error::Decode("payload ended early".into()))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, freqs: &[u32]) -> Result<usize> {
        let r = self.range >> FREQ_BITS;
        let v = self.code / r;
        if v >= FREQ_TOTAL {
            return Err(Error::Decode("code value outside the coding interval".into()));
        }
        let mut cum = 0;
        let mut symbol = freqs.len();
        for (j, &f) in freqs.iter().enumerate() {
            if v < cum + f {
                symbol = j;
                break;
            }
            cum += f;
        }
        if symbol == freqs.len() {
            return Err(Error::Decode("frequencies do not cover the code value".into()));
        }
        self.code -= r * cum;
        self.range = r * freqs[symbol];
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
        }
        Ok(symbol)
    }

    /// A well-formed stream leaves the code at exactly zero with every byte consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() || self.code != 0 {
            return Err(Error::Decode("payload has trailing or inconsistent bytes".into()));
        }
        Ok(())
    }
}

/// CRC-32 of the symbols as little-endian u16 values.
pub fn symbol_checksum(symbols: &[u16]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for s in symbols {
        h.update(&s.to_le_bytes());
    }
    h.finalize()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedStream {
    pub payload: Vec<u8>,
    pub checksum: u32,
}

/// Encodes `symbols`; `prob_fn(i, &symbols[..i])` supplies the distribution at `i`.
pub fn range_encode<F>(symbols: &[u16], mut prob_fn: F) -> Result<EncodedStream>
where
    F: FnMut(usize, &[u16]) -> Result<Vec<f64>>,
{
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        let freqs = quantize_probs(&prob_fn(i, &symbols[..i])?)?;
        enc.encode(&freqs, s as usize)?;
    }
    Ok(EncodedStream {
        payload: enc.finish(),
        checksum: symbol_checksum(symbols),
    })
}

/// Decodes `count` symbols, feeding each one back before asking for the next distribution.
pub fn range_decode<F>(payload: &[u8], checksum: u32, count: usize, mut prob_fn: F) -> Result<Vec<u16>>
where
    F: FnMut(usize, &[u16]) -> Result<Vec<f64>>,
{
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let freqs = quantize_probs(&prob_fn(i, &out)?)?;
        out.push(dec.decode(&freqs)? as u16);
    }
    dec.finish()?;
    if symbol_checksum(&out) != checksum {
        return Err(Error::Decode("symbol checksum mismatch".into()));
    }
    Ok(out)
}
