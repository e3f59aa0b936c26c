//! Binary checkpoint container.
//!
//! All integers and reals are little-endian.
//!
//! ```text
//! magic      8 bytes  "GZSNNCK\0"
//! version    u32      1
//! config     u32 length + UTF-8 JSON of the ModelConfig
//! lif        4 × f64  v_threshold, v_reset, leak, surrogate_width
//! count      u32      number of tensor records
//! record     u16 name length + UTF-8 name
//!            u8 kind  (0 = trainable parameter, 1 = buffer)
//!            u8 rank, rank × u64 extents
//!            numel × f64 values
//! ```
//!
//! Buffers are the batch-norm running statistics, named
//! `<layer>.running_mean` and `<layer>.running_var`. Fused RepConv kernels
//! are derived state and are not stored.

use std::path::Path;

use crate::error::{Error, Result};
use crate::lif::LifParams;
use crate::model::{EgSpikeFormer, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GZSNNCK\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    Param = 0,
    Buffer = 1,
}

/// Serialises weights, running statistics and the architecture.
pub fn encode_checkpoint(model: &EgSpikeFormer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let l = &model.config.lif;
    for v in [l.v_threshold, l.v_reset, l.leak, l.surrogate_width] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut records: Vec<(String, RecordKind, &[usize], &[f64])> = model
        .params
        .names()
        .iter()
        .zip(model.params.tensors())
        .map(|(n, t)| (n.clone(), RecordKind::Param, t.shape(), t.data()))
        .collect();
    for bn in model.batch_norms() {
        let c = &bn.running;
        records.push((format!("{}.running_mean", bn.name), RecordKind::Buffer, &[], &c.mean));
        records.push((format!("{}.running_var", bn.name), RecordKind::Buffer, &[], &c.var));
    }
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, kind, shape, data) in records {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(kind as u8);
        let len = [data.len()];
        let shape = if shape.is_empty() { &len[..] } else { shape };
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::format("checkpoint", msg)
}

/// Rebuilds a model from [`encode_checkpoint`] output.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<EgSpikeFormer> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?).map_err(|e| bad(format!("config echo: {e}")))?;
    let lif = LifParams {
        v_threshold: r.f64()?,
        v_reset: r.f64()?,
        leak: r.f64()?,
        surrogate_width: r.f64()?,
    };
    if lif != config.lif {
        return Err(bad("LIF parameters disagree with the config echo"));
    }
    let mut model = EgSpikeFormer::new(config, 0)?;
    let expected = model.params.len() + 2 * model.batch_norms().len();
    let count = r.u32()? as usize;
    if count != expected {
        return Err(bad(format!("expected {expected} tensors, found {count}")));
    }
    let mut seen = vec![false; model.params.len()];
    let mut buffers = Vec::new();
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let kind = r.u8()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| bad("extent overflow"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("extent overflow"))?;
        if numel > bytes.len() / 8 {
            return Err(bad(format!("{name}: extents exceed file size")));
        }
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        match kind {
            0 => {
                let id = model
                    .params
                    .find(&name)
                    .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
                let t = model.params.get_mut(id);
                if t.shape() != shape.as_slice() {
                    return Err(bad(format!("{name}: shape {shape:?}, model expects {:?}", t.shape())));
                }
                *t = Tensor::new(shape, data)?;
                seen[id.index()] = true;
            }
            1 => buffers.push((name, data)),
            k => return Err(bad(format!("{name}: unknown record kind {k}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(bad(format!("missing parameter {}", model.params.names()[i])));
    }
    for bn in model.batch_norms_mut() {
        for (suffix, slot) in [
            ("running_mean", &mut bn.running.mean),
            ("running_var", &mut bn.running.var),
        ] {
            let key = format!("{}.{suffix}", bn.name);
            let (_, data) = buffers
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| bad(format!("missing buffer {key}")))?;
            if data.len() != slot.len() {
                return Err(bad(format!("{key}: length {}, expected {}", data.len(), slot.len())));
            }
            slot.copy_from_slice(data);
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &EgSpikeFormer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EgSpikeFormer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
