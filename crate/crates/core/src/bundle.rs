//! Binary formats for artifacts that leave a party.
//!
//! `.flra` adapter bundle, all integers little-endian:
//!
//! ```text
//! "FLRA" | u32 version=1 | u32 rank | f32 alpha | u32 layer_count
//! per layer: u32 id_len | id bytes (UTF-8) | u32 d | u32 k | A (d·r f32) | B (r·k f32)
//! ```
//!
//! Backbone checkpoints (`"FBKB"`) use the same conventions: version, a
//! length-prefixed JSON config blob, then named f32 tensors.
//!
//! A bundle has no field for classification heads or data rows.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraAdapterStack, StackMeta};
use crate::tensor::Tensor;

pub const BUNDLE_MAGIC: &[u8; 4] = b"FLRA";
pub const BACKBONE_MAGIC: &[u8; 4] = b"FBKB";
pub const FORMAT_VERSION: u32 = 1;

/// Fixed bytes before the first layer record.
pub const BUNDLE_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Self { buf }
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub(crate) fn f32s(&mut self, t: &Tensor) {
        for &v in t.data() {
            self.f32(v as f32);
        }
    }

    pub(crate) fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Self { bytes, pos: 0 };
        let m = r.take(4)?;
        if m != magic {
            return Err(Error::format(0, format!("bad magic {:?}", String::from_utf8_lossy(m))));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos,
                format!("truncated: needed {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn str(&mut self) -> Result<String> {
        let at = self.pos;
        let len = self.u32()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(at, "invalid UTF-8 string"))
    }

    pub(crate) fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(self.pos, "tensor size overflow"))?;
        let raw = self.take(n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Tensor::new(rows, cols, data)
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn encode_bundle(stack: &LoraAdapterStack) -> Vec<u8> {
    let mut w = Writer::new(BUNDLE_MAGIC);
    w.u32(stack.rank() as u32);
    w.f32(stack.alpha() as f32);
    w.u32(stack.len() as u32);
    for ad in stack.iter() {
        w.str(&ad.layer_id);
        w.u32(ad.in_dim() as u32);
        w.u32(ad.out_dim() as u32);
        w.f32s(&ad.a);
        w.f32s(&ad.b);
    }
    w.finish()
}

pub fn decode_bundle(bytes: &[u8]) -> Result<LoraAdapterStack> {
    let mut r = Reader::new(bytes, BUNDLE_MAGIC)?;
    let rank = r.u32()? as usize;
    let alpha_at = r.offset();
    let alpha = r.f32()? as f64;
    if rank == 0 {
        return Err(Error::format(8, "rank must be positive"));
    }
    if !alpha.is_finite() {
        return Err(Error::format(alpha_at, "alpha is not finite"));
    }
    let count = r.u32()? as usize;
    let mut adapters = Vec::new();
    for _ in 0..count {
        let layer_id = r.str()?;
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let at = r.offset();
        let a = r.tensor(d, rank)?;
        let b = r.tensor(rank, k)?;
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::format(at, format!("non-finite factor in layer {layer_id}")));
        }
        adapters.push(LoraAdapter {
            layer_id,
            a,
            b,
            rank,
            alpha,
        });
    }
    let end = r.offset();
    r.finish()?;
    LoraAdapterStack::from_adapters(
        adapters,
        StackMeta {
            rank,
            alpha,
            seed: 0,
            strategy: String::new(),
        },
    )
    .map_err(|e| Error::format(end, e.to_string()))
}

pub fn save_bundle(stack: &LoraAdapterStack, path: &Path) -> Result<()> {
    std::fs::write(path, encode_bundle(stack))?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<LoraAdapterStack> {
    decode_bundle(&std::fs::read(path)?)
}

/// Size in bytes of the encoded form of a stack.
pub fn bundle_len(stack: &LoraAdapterStack) -> usize {
    BUNDLE_HEADER_LEN
        + stack
            .iter()
            .map(|ad| 4 + ad.layer_id.len() + 8 + 4 * ad.rank * (ad.in_dim() + ad.out_dim()))
            .sum::<usize>()
}
