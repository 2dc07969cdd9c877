//! Carry-less range coder over quantized categorical distributions,
//! plus the bitstream container. The coder is bit-exact: the same
//! (indices, CDFs) pair always produces the same bytes, and decoding
//! with the same CDF sequence recovers the indices losslessly.
//!
//! 64-bit state, byte-at-a-time renormalization. When the top byte of
//! `low` and `low + range` disagree and `range` has shrunk below 32
//! bits, the range is clipped to the next 32-bit boundary instead of
//! propagating a carry, so emitted bytes are never revised.

use crate::error::{Error, Result};

const TOP: u64 = 1 << 56;
const BOT: u64 = 1 << 32;

// ---------------------------------------------------------------------------
// Quantized distributions
// ---------------------------------------------------------------------------

/// Integer cumulative distribution: `cum` has K+1 entries, starts at 0,
/// ends at 2^precision, and is strictly increasing (every symbol keeps
/// at least one count).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedCdf {
    pub cum: Vec<u32>,
    pub precision: u32,
}

impl QuantizedCdf {
    /// Largest-remainder quantization of a probability row. Zero or
    /// negative entries still receive one count, stolen from the
    /// currently largest symbol.
    pub fn from_probs(probs: &[f64], precision: u32) -> Result<Self> {
        let k = probs.len();
        if k == 0 {
            return Err(Error::contract("quantize: empty probability row"));
        }
        if !(2..=24).contains(&precision) || (1u64 << precision) < k as u64 {
            return Err(Error::contract(format!(
                "quantize: precision {precision} cannot hold {k} symbols"
            )));
        }
        let total = 1u64 << precision;
        let clean: Vec<f64> = probs
            .iter()
            .map(|&p| if p.is_finite() && p > 0.0 { p } else { 0.0 })
            .collect();
        let sum: f64 = clean.iter().sum();
        let norm: Vec<f64> = if sum > 0.0 {
            clean.iter().map(|&p| p / sum).collect()
        } else {
            vec![1.0 / k as f64; k]
        };

        let mut counts = vec![0u64; k];
        let mut remainders = Vec::with_capacity(k);
        let mut assigned = 0u64;
        for (i, &p) in norm.iter().enumerate() {
            let ideal = p * total as f64;
            let floor = ideal.floor().min((total - 1) as f64) as u64;
            counts[i] = floor;
            assigned += floor;
            remainders.push((ideal - floor as f64, i));
        }
        if assigned < total {
            let mut deficit = total - assigned;
            remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut cursor = 0;
            while deficit > 0 {
                counts[remainders[cursor % k].1] += 1;
                cursor += 1;
                deficit -= 1;
            }
        }
        while assigned_total(&counts) > total {
            let max = argmax_count(&counts);
            counts[max] -= 1;
        }
        for i in 0..k {
            if counts[i] == 0 {
                let max = argmax_count(&counts);
                counts[max] -= 1;
                counts[i] = 1;
            }
        }
        debug_assert_eq!(assigned_total(&counts), total);

        let mut cum = Vec::with_capacity(k + 1);
        let mut acc = 0u64;
        cum.push(0);
        for &c in &counts {
            acc += c;
            cum.push(acc as u32);
        }
        Ok(Self { cum, precision })
    }

    pub fn uniform(k: usize, precision: u32) -> Result<Self> {
        Self::from_probs(&vec![1.0; k], precision)
    }

    pub fn num_symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn count(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    /// Ideal code length of a symbol under this quantized model.
    pub fn bits(&self, s: usize) -> f64 {
        let total = (1u64 << self.precision) as f64;
        -(self.count(s) as f64 / total).log2()
    }

    /// The symbol whose span contains `target`.
    fn find(&self, target: u32) -> usize {
        let mut lo = 0usize;
        let mut hi = self.num_symbols();
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cum[mid] <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

fn assigned_total(counts: &[u64]) -> u64 {
    counts.iter().sum()
}

fn argmax_count(counts: &[u64]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Range encoder
// ---------------------------------------------------------------------------

pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
    symbols: usize,
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u64::MAX,
            out: Vec::new(),
            symbols: 0,
        }
    }

    pub fn encode(&mut self, symbol: usize, cdf: &QuantizedCdf) -> Result<()> {
        if symbol >= cdf.num_symbols() {
            return Err(Error::contract(format!(
                "encode: symbol {symbol} out of range for {} symbols",
                cdf.num_symbols()
            )));
        }
        let total_bits = cdf.precision;
        let lo = cdf.cum[symbol] as u64;
        let hi = cdf.cum[symbol + 1] as u64;
        let r = self.range >> total_bits;
        self.low = self.low.wrapping_add(r * lo);
        if hi == 1u64 << total_bits {
            // the last symbol absorbs the rounding remainder of range
            self.range -= r * lo;
        } else {
            self.range = r * (hi - lo);
        }
        self.normalize();
        self.symbols += 1;
        Ok(())
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
                // top byte settled, emit it
            } else if self.range < BOT {
                // straddling a boundary with a tiny range: clip the
                // range to the boundary so no carry can occur
                self.range = self.low.wrapping_neg() & (BOT - 1);
            } else {
                break;
            }
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Close the stream with the fewest bytes that keep it decodable
    /// (the decoder reads missing bytes as zero).
    pub fn finish(mut self) -> Vec<u8> {
        if self.symbols == 0 {
            return Vec::new();
        }
        for k in 0..=8u32 {
            let value = if k == 0 {
                0u64
            } else if k == 8 {
                self.low
            } else {
                let step = 1u64 << (64 - 8 * k);
                let mask = step - 1;
                match self.low.checked_add(mask) {
                    Some(v) => v & !mask,
                    None => 0,
                }
            };
            if value.wrapping_sub(self.low) < self.range {
                for b in 0..k {
                    self.out.push((value >> (56 - 8 * b)) as u8);
                }
                return self.out;
            }
        }
        unreachable!("an 8-byte flush always fits");
    }
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Range decoder
// ---------------------------------------------------------------------------

pub struct RangeDecoder<'a> {
    low: u64,
    range: u64,
    code: u64,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = Self {
            low: 0,
            range: u64::MAX,
            code: 0,
            bytes,
            pos: 0,
        };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte().unwrap_or(0) as u64;
        }
        d
    }

    fn next_byte(&mut self) -> Option<u8> {
        let b = self.bytes.get(self.pos).copied();
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, cdf: &QuantizedCdf) -> Result<usize> {
        if self.pos > self.bytes.len() + 16 {
            return Err(Error::format("range payload truncated"));
        }
        let total_bits = cdf.precision;
        let total = 1u64 << total_bits;
        let r = self.range >> total_bits;
        let off = self.code.wrapping_sub(self.low);
        let target = (off / r).min(total - 1) as u32;
        let symbol = cdf.find(target);
        let lo = cdf.cum[symbol] as u64;
        let hi = cdf.cum[symbol + 1] as u64;
        self.low = self.low.wrapping_add(r * lo);
        if hi == total {
            self.range -= r * lo;
        } else {
            self.range = r * (hi - lo);
        }
        self.normalize();
        Ok(symbol)
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
                // settled
            } else if self.range < BOT {
                self.range = self.low.wrapping_neg() & (BOT - 1);
            } else {
                break;
            }
            self.code = (self.code << 8) | self.next_byte().unwrap_or(0) as u64;
            self.low <<= 8;
            self.range <<= 8;
        }
    }
}

// ---------------------------------------------------------------------------
// Sequence helpers
// ---------------------------------------------------------------------------

/// Encode a full index sequence against per-token CDFs.
pub fn encode_sequence(indices: &[u32], cdfs: &[QuantizedCdf]) -> Result<Vec<u8>> {
    if indices.len() != cdfs.len() {
        return Err(Error::contract(format!(
            "encode_sequence: {} indices but {} distributions",
            indices.len(),
            cdfs.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (&idx, cdf) in indices.iter().zip(cdfs) {
        enc.encode(idx as usize, cdf)?;
    }
    Ok(enc.finish())
}

/// Decode `count` indices; the provider supplies the t-th CDF given
/// everything decoded so far, mirroring the encoder's model exactly.
pub fn decode_sequence<F>(bytes: &[u8], count: usize, mut provider: F) -> Result<Vec<u32>>
where
    F: FnMut(usize, &[u32]) -> Result<QuantizedCdf>,
{
    let mut dec = RangeDecoder::new(bytes);
    let mut out: Vec<u32> = Vec::with_capacity(count);
    for t in 0..count {
        let cdf = provider(t, &out)?;
        let s = dec.decode(&cdf)?;
        out.push(s as u32);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Bitstream container
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"RDVQ";
const VERSION: u16 = 1;

/// Token-grid dimensions of one scale, as carried in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleDim {
    pub factor: u16,
    pub height: u16,
    pub width: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHeader {
    pub orig_h: u32,
    pub orig_w: u32,
    pub scales: Vec<ScaleDim>,
    /// Order levels actually transmitted; completion starts here.
    pub prefix_cut: u32,
    /// Hash of the model parameters the stream was coded with.
    pub model_hash: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: StreamHeader,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn total_bytes(&self) -> usize {
        header_len(self.header.scales.len()) + 4 + self.payload.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        if h.scales.len() > u8::MAX as usize {
            return Err(Error::format("too many scales for the header"));
        }
        if self.payload.len() > u32::MAX as usize {
            return Err(Error::format("payload too large for the header"));
        }
        let mut out = Vec::with_capacity(self.total_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&h.orig_h.to_le_bytes());
        out.extend_from_slice(&h.orig_w.to_le_bytes());
        out.push(h.scales.len() as u8);
        for s in &h.scales {
            out.extend_from_slice(&s.factor.to_le_bytes());
            out.extend_from_slice(&s.height.to_le_bytes());
            out.extend_from_slice(&s.width.to_le_bytes());
        }
        out.extend_from_slice(&h.prefix_cut.to_le_bytes());
        out.extend_from_slice(&h.model_hash.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::format("bad stream magic"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(format!("unsupported stream version {version}")));
        }
        let orig_h = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let orig_w = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let num_scales = r.take(1)?[0] as usize;
        let mut scales = Vec::with_capacity(num_scales);
        for _ in 0..num_scales {
            scales.push(ScaleDim {
                factor: u16::from_le_bytes(r.take(2)?.try_into().unwrap()),
                height: u16::from_le_bytes(r.take(2)?.try_into().unwrap()),
                width: u16::from_le_bytes(r.take(2)?.try_into().unwrap()),
            });
        }
        let prefix_cut = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let model_hash = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let payload_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let payload = r.take(payload_len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after the payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            header: StreamHeader {
                orig_h,
                orig_w,
                scales,
                prefix_cut,
                model_hash,
            },
            payload,
        })
    }
}

fn header_len(num_scales: usize) -> usize {
    4 + 2 + 4 + 4 + 1 + num_scales * 6 + 4 + 8
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "stream truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Bits per pixel of the whole stream, header included.
pub fn measure_rate(stream: &Bitstream, h: u32, w: u32) -> f64 {
    8.0 * stream.total_bytes() as f64 / (h as f64 * w as f64)
}

// ---------------------------------------------------------------------------


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn weights(k: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, k)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn quantize_always_yields_a_valid_cdf(w in (1usize..300).prop_flat_map(weights)) {
            let cdf = QuantizedCdf::from_probs(&w, 16).unwrap();
            prop_assert_eq!(cdf.cum[0], 0);
            prop_assert_eq!(*cdf.cum.last().unwrap(), 1 << 16);
            for i in 0..cdf.num_symbols() {
                prop_assert!(cdf.cum[i] < cdf.cum[i + 1]);
            }
        }

        #[test]
        fn random_streams_round_trip(
            seed in 0u64..1_000_000,
            k in 2usize..96,
            len in 0usize..64,
        ) {
            let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(seed);
            let cdfs: Vec<QuantizedCdf> = (0..len)
                .map(|_| {
                    let w: Vec<f64> =
                        (0..k).map(|_| rand::Rng::random::<f64>(&mut rng).powi(4)).collect();
                    QuantizedCdf::from_probs(&w, 16).unwrap()
                })
                .collect();
            let indices: Vec<u32> = (0..len)
                .map(|_| rand::Rng::random_range(&mut rng, 0..k as u32))
                .collect();
            let bytes = encode_sequence(&indices, &cdfs).unwrap();
            let back = decode_sequence(&bytes, len, |t, _| Ok(cdfs[t].clone())).unwrap();
            prop_assert_eq!(back, indices);
        }
    }
}
