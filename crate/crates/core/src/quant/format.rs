//! Binary layer file format (`.qzol`), little-endian throughout.
//!
//! ```text
//! magic        4 bytes  "QZOL"
//! version      u32      FORMAT_VERSION
//! kind         u8       0 = scalar, 1 = codebook
//! out_dim      u32
//! in_dim       u32
//! bits         u8       scalar: weight bits; codebook: code bits
//! group        u32      scalar: group size; codebook: group length
//! payload_len  u64      bytes of packed integers that follow
//! payload               scalar: k-bit two's-complement weights
//!                       codebook: b-bit code indices
//!                       both packed LSB-first, row-major
//! [codebook]   f64 × 2^b·g          (codebook kind only)
//! n_scales     u64
//! scales       f64 × n_scales
//! has_bias     u8       0 or 1
//! [bias]       f64 × out_dim
//! ```
//!
//! Files must be consumed exactly; trailing bytes are an error.

use std::io::{Read, Write};
use std::path::Path;

use super::{CodebookLinear, QuantLayer, QuantizedLinear};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"QZOL";
pub const FORMAT_VERSION: u32 = 1;

const KIND_SCALAR: u8 = 0;
const KIND_CODEBOOK: u8 = 1;

/// Pack the low `bits` of each value, LSB-first.
pub fn pack_bits(values: impl IntoIterator<Item = u32>, bits: u8) -> Vec<u8> {
    let mut out = Vec::new();
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mask = (1u64 << bits) - 1;
    for v in values {
        acc |= (v as u64 & mask) << filled;
        filled += bits as u32;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u32>> {
    let needed = (count * bits as usize).div_ceil(8);
    if bytes.len() != needed {
        return Err(Error::Format(format!(
            "packed payload is {} bytes, expected {needed}",
            bytes.len()
        )));
    }
    let mask = (1u64 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut it = bytes.iter();
    for _ in 0..count {
        while filled < bits as u32 {
            acc |= (*it.next().expect("length checked") as u64) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= bits;
        filled -= bits as u32;
    }
    Ok(out)
}

fn sign_extend(v: u32, bits: u8) -> i8 {
    let shift = 32 - bits as u32;
    (((v << shift) as i32) >> shift) as i8
}

/// Bytes occupied by the packed integer payload.
pub fn payload_bytes(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(layer: &QuantLayer) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    match layer {
        QuantLayer::Scalar(l) => {
            buf.push(KIND_SCALAR);
            put_u32(&mut buf, l.out_dim() as u32);
            put_u32(&mut buf, l.in_dim() as u32);
            buf.push(l.bits());
            put_u32(&mut buf, l.group_size() as u32);
            let payload = pack_bits(l.qweights().iter().map(|&q| q as i32 as u32), l.bits());
            put_u64(&mut buf, payload.len() as u64);
            buf.extend_from_slice(&payload);
        }
        QuantLayer::Codebook(l) => {
            buf.push(KIND_CODEBOOK);
            put_u32(&mut buf, l.out_dim() as u32);
            put_u32(&mut buf, l.in_dim() as u32);
            buf.push(l.code_bits());
            put_u32(&mut buf, l.group_len() as u32);
            let payload = pack_bits(l.indices().iter().copied(), l.code_bits());
            put_u64(&mut buf, payload.len() as u64);
            buf.extend_from_slice(&payload);
            put_f64s(&mut buf, l.codebook().data());
        }
    }
    let scales = layer.scales();
    put_u64(&mut buf, scales.len() as u64);
    put_f64s(&mut buf, scales);
    match layer.bias() {
        Some(b) => {
            buf.push(1);
            put_f64s(&mut buf, b);
        }
        None => buf.push(0),
    }
    buf
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
            .ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<QuantLayer> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let kind = cur.u8()?;
    let out_dim = cur.u32()? as usize;
    let in_dim = cur.u32()? as usize;
    let bits = cur.u8()?;
    let group = cur.u32()? as usize;
    if bits == 0 || bits > 16 || group == 0 || in_dim % group != 0 {
        return Err(Error::Format(format!("invalid bits/group header ({bits}, {group})")));
    }
    let payload_len = cur.u64()? as usize;
    let payload = cur.take(payload_len)?;

    let layer = match kind {
        KIND_SCALAR => {
            let q = unpack_bits(payload, bits, out_dim * in_dim)?;
            let qweights = q.into_iter().map(|v| sign_extend(v, bits)).collect();
            let n = cur.u64()? as usize;
            let scales = cur.f64s(n)?;
            let bias = read_bias(&mut cur, out_dim)?;
            QuantLayer::Scalar(QuantizedLinear::from_parts(
                out_dim, in_dim, bits, group, qweights, scales, bias,
            )?)
        }
        KIND_CODEBOOK => {
            let indices = unpack_bits(payload, bits, out_dim * in_dim / group)?;
            let n_codes = 1usize << bits;
            let codebook = Matrix::new(n_codes, group, cur.f64s(n_codes * group)?)?;
            let n = cur.u64()? as usize;
            let scales = cur.f64s(n)?;
            let bias = read_bias(&mut cur, out_dim)?;
            QuantLayer::Codebook(CodebookLinear::from_parts(
                out_dim, in_dim, bits, group, codebook, indices, scales, bias,
            )?)
        }
        other => return Err(Error::Format(format!("unknown layer kind {other}"))),
    };
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(layer)
}

fn read_bias(cur: &mut Cursor<'_>, out_dim: usize) -> Result<Option<Vec<f64>>> {
    match cur.u8()? {
        0 => Ok(None),
        1 => Ok(Some(cur.f64s(out_dim)?)),
        f => Err(Error::Format(format!("bad bias flag {f}"))),
    }
}

pub fn write_layer(path: impl AsRef<Path>, layer: &QuantLayer) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(layer))?;
    Ok(())
}

pub fn read_layer(path: impl AsRef<Path>) -> Result<QuantLayer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
