//! `WNN1` weight layout.
//!
//! ```text
//! magic      b"WNN1"
//! u32 LE     layer count L
//! L × (u32 LE in_dim, u32 LE out_dim)
//! L × (f32 LE weights, row-major in×out, then f32 LE biases)
//! ```
//!
//! The hidden activation is not part of the layout; containers that embed a
//! blob record it alongside.

use super::mlp::{Activation, Linear, Mlp};
use super::tensor::Tensor;
use super::NnError;

pub const MAGIC: &[u8; 4] = b"WNN1";

pub fn write_wnn(net: &Mlp) -> Vec<u8> {
    let layers = net.layers();
    let mut out = Vec::with_capacity(8 + 8 * layers.len() + 4 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
    }
    for l in layers {
        for &w in l.weight.data().iter().chain(l.bias.data()) {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Format("truncated WNN1 blob".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, NnError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| NnError::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }
}

pub fn read_wnn(bytes: &[u8], hidden: Activation) -> Result<Mlp, NnError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NnError::Format("bad magic, expected WNN1".into()));
    }
    let count = r.u32()? as usize;
    if count == 0 || count > 1024 {
        return Err(NnError::Format(format!("implausible layer count {count}")));
    }
    let mut dims = Vec::with_capacity(count);
    for _ in 0..count {
        dims.push((r.u32()? as usize, r.u32()? as usize));
    }
    let mut layers = Vec::with_capacity(count);
    for &(i, o) in &dims {
        let w = r.f32s(i * o)?;
        let b = r.f32s(o)?;
        layers.push(Linear { weight: Tensor::matrix(i, o, w)?, bias: Tensor::vector(b) });
    }
    if r.pos != bytes.len() {
        return Err(NnError::Format("trailing bytes after WNN1 payload".into()));
    }
    Mlp::from_layers(layers, hidden)
}
