//! The `.gsir` container: a little-endian header followed by bit-packed
//! symbols. See FORMAT.md for the field order.

use crate::error::{Error, FormatError, Result};
use crate::gaussian::GaussianSet;

use super::{dequantize, quantize, AttrRange, Attribute, QuantSpec, QuantSymbols, RangeStrategy};

pub const MAGIC: [u8; 4] = *b"GSIR";
pub const FORMAT_VERSION: u16 = 1;
/// Raw bit-packing; other values are reserved for entropy coders.
pub const CODING_RAW: u8 = 0;

/// Everything besides the primitives that the header carries.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamMeta {
    pub width: u32,
    pub height: u32,
    pub strategy: RangeStrategy,
    /// Primitives per stage, stage 1 first. Its length is S.
    pub stage_counts: Vec<u32>,
}

impl StreamMeta {
    pub fn n_stages(&self) -> usize {
        self.stage_counts.len()
    }

    pub fn count(&self) -> usize {
        self.stage_counts.iter().map(|&c| c as usize).sum()
    }
}

/// Header bytes for a stream with `n_stages` stages.
pub fn header_len(n_stages: usize) -> usize {
    4 + 2 + 1 + 1 + 4 + 4 + 2 + 4 * n_stages + 5 * (1 + 4 + 4)
}

/// Payload bytes for `count` primitives.
pub fn payload_len(spec: &QuantSpec, count: usize) -> usize {
    (count * spec.bits_per_primitive()).div_ceil(8)
}

struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    n: u32,
}

impl BitWriter {
    fn new() -> Self {
        Self { bytes: Vec::new(), acc: 0, n: 0 }
    }

    /// Appends the low `bits` bits of `v`, least significant first.
    fn put(&mut self, v: u16, bits: u8) {
        self.acc |= (v as u64 & ((1u64 << bits) - 1)) << self.n;
        self.n += bits as u32;
        while self.n >= 8 {
            self.bytes.push(self.acc as u8);
            self.acc >>= 8;
            self.n -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.n > 0 {
            self.bytes.push(self.acc as u8);
        }
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    n: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0, acc: 0, n: 0 }
    }

    fn get(&mut self, bits: u8) -> u16 {
        while self.n < bits as u32 {
            self.acc |= (self.bytes[self.pos] as u64) << self.n;
            self.pos += 1;
            self.n += 8;
        }
        let v = (self.acc & ((1u64 << bits) - 1)) as u16;
        self.acc >>= bits;
        self.n -= bits as u32;
        v
    }
}

/// Serializes a stage-sorted set. Counts come from the stage tags, so every
/// tag must lie in `[1, meta.stage_counts.len()]`; `meta.stage_counts` is
/// only used for its length.
pub fn encode_bitstream(set: &GaussianSet, spec: &QuantSpec, width: usize, height: usize, n_stages: usize, strategy: RangeStrategy) -> Result<Vec<u8>> {
    spec.validate()?;
    set.validate()?;
    if n_stages < 1 || n_stages > u16::MAX as usize {
        return Err(Error::InvalidParameter(format!("stage count {n_stages} outside [1, 65535]")));
    }
    if width > u32::MAX as usize || height > u32::MAX as usize || width == 0 || height == 0 {
        return Err(Error::InvalidParameter(format!("canvas {width}x{height} not representable")));
    }
    if !set.is_stage_sorted() || set.stage.iter().any(|&s| s < 1 || s as usize > n_stages) {
        return Err(Error::InvalidParameter(format!("stream needs stage tags sorted within [1, {n_stages}]")));
    }
    let counts = set.stage_counts(n_stages);
    let mut out = Vec::with_capacity(header_len(n_stages) + payload_len(spec, set.len()));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(strategy.tag());
    out.push(CODING_RAW);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(n_stages as u16).to_le_bytes());
    for c in &counts {
        out.extend_from_slice(&(*c as u32).to_le_bytes());
    }
    for r in &spec.attrs {
        out.push(r.bits);
        out.extend_from_slice(&r.alpha.to_le_bytes());
        out.extend_from_slice(&r.beta.to_le_bytes());
    }
    let q = quantize(set, spec, width, height)?;
    let mut bw = BitWriter::new();
    for a in Attribute::ALL {
        let bits = spec.get(a).bits;
        for &s in &q.symbols[a.index()] {
            bw.put(s, bits);
        }
    }
    out.extend_from_slice(&bw.finish());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(FormatError::Truncated { needed: self.pos + n, available: self.bytes.len() }.into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
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

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn malformed(msg: String) -> Error {
    FormatError::Malformed(msg).into()
}

/// Parses a stream into its dequantized set (stage-tagged), spec and meta,
/// plus the raw symbols.
pub fn decode_symbols(bytes: &[u8]) -> Result<(QuantSymbols, QuantSpec, StreamMeta)> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic { expected: MAGIC, found: magic }.into());
    }
    let version = c.u16()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let strategy = c.u8()?;
    let strategy = RangeStrategy::from_tag(strategy).ok_or_else(|| malformed(format!("unknown strategy tag {strategy}")))?;
    let coding = c.u8()?;
    if coding != CODING_RAW {
        return Err(malformed(format!("unsupported coding tag {coding}")));
    }
    let width = c.u32()?;
    let height = c.u32()?;
    if width == 0 || height == 0 {
        return Err(malformed(format!("empty canvas {width}x{height}")));
    }
    let n_stages = c.u16()? as usize;
    if n_stages == 0 {
        return Err(malformed("zero stages".into()));
    }
    let mut stage_counts = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        stage_counts.push(c.u32()?);
    }
    let mut attrs = [AttrRange { bits: 1, alpha: 1.0, beta: 0.0 }; 5];
    for a in attrs.iter_mut() {
        *a = AttrRange { bits: c.u8()?, alpha: c.f32()?, beta: c.f32()? };
        a.validate().map_err(|e| malformed(e.to_string()))?;
    }
    let spec = QuantSpec { attrs };
    let meta = StreamMeta { width, height, strategy, stage_counts };
    let count = meta.count();
    let need = payload_len(&spec, count);
    let payload = c.take(need)?;
    if c.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let mut br = BitReader::new(payload);
    let symbols = Attribute::ALL.map(|a| {
        let bits = spec.get(a).bits;
        (0..count * a.arity()).map(|_| br.get(bits)).collect()
    });
    Ok((QuantSymbols { count, symbols }, spec, meta))
}

pub fn decode_bitstream(bytes: &[u8]) -> Result<(GaussianSet, QuantSpec, StreamMeta)> {
    let (q, spec, meta) = decode_symbols(bytes)?;
    let (w, h) = (meta.width as usize, meta.height as usize);
    let mut set = dequantize(&q, &spec, w, h, 1)?;
    set.stage = meta.stage_counts.iter().enumerate().flat_map(|(i, &n)| std::iter::repeat_n(i as u16 + 1, n as usize)).collect();
    Ok((set, spec, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_set_is_header_only() {
        let spec = QuantSpec::default_global_base();
        let bytes = encode_bitstream(&GaussianSet::new(), &spec, 8, 8, 4, RangeStrategy::Global).unwrap();
        assert_eq!(bytes.len(), header_len(4));
        let (set, s2, meta) = decode_bitstream(&bytes).unwrap();
        assert!(set.is_empty());
        assert_eq!(s2, spec);
        assert_eq!(meta.stage_counts, vec![0; 4]);
    }

    #[test]
    fn bit_packing_roundtrip() {
        let mut w = BitWriter::new();
        let vals = [(1u16, 1u8), (5, 3), (65535, 16), (0, 7), (300, 9), (12, 12)];
        for (v, b) in vals {
            w.put(v, b);
        }
        let bytes = w.finish();
        assert_eq!(bytes.len(), (1 + 3 + 16 + 7 + 9 + 12usize).div_ceil(8));
        let mut r = BitReader::new(&bytes);
        for (v, b) in vals {
            assert_eq!(r.get(b), v);
        }
    }

    #[test]
    fn unsorted_stages_rejected() {
        let mut set = GaussianSet::new();
        let g = crate::gaussian::Gaussian2D::new([1.0, 1.0], [1.0, 1.0], 0.0, [0.1; 3]).unwrap();
        set.push(g, 2);
        set.push(g, 1);
        assert!(encode_bitstream(&set, &QuantSpec::default_global_base(), 4, 4, 2, RangeStrategy::Global).is_err());
    }
}
