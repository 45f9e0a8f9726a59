//! Binary checkpoint format.
//!
//! ```text
//! "IDCN"                      4 bytes
//! version                     u16 LE
//! config length               u32 LE
//! config                      UTF-8 JSON (ModelConfig)
//! entry count                 u32 LE
//! entry × count:
//!     name length             u16 LE
//!     name                    UTF-8
//!     rank                    u8
//!     dims                    u32 LE × rank
//!     data                    f32 LE × prod(dims)
//! ```
//!
//! Entries hold every trainable parameter followed by every BN running statistic.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::network::Model;
use super::registry::{ParamRegistry, TensorSet};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IDCN";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<W: Write>(model: &Model<f32>, mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let reg = model.registry();
    let count = reg.params.len() + reg.buffers.len();
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in reg.params.iter().chain(reg.buffers.iter()) {
        let name = name.as_bytes();
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long ({} bytes)", name.len())))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.reserve(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint>", e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not an IDCN checkpoint".into()));
    }
    let version = cur.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = cur.u32("config length")? as usize;
    let header = cur.take(header_len, "config")?;
    let config: ModelConfig = serde_json::from_slice(header)?;

    let count = cur.u32("entry count")? as usize;
    let mut entries: HashMap<String, Tensor<f32>> = HashMap::with_capacity(count);
    let mut order = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = cur.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("dims")? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = cur.take(numel * 4, &name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if entries.insert(name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry {name}")));
        }
        order.push(name);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }

    let template = Model::<f32>::build(&config, 0)?;
    let mut fill = |set: &TensorSet<f32>| -> Result<TensorSet<f32>> {
        let mut out = TensorSet::new();
        for (name, want) in set.iter() {
            let got = entries
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {name} {}", fmt_shape(want.shape()))))?;
            if got.shape() != want.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{name} {} from config", fmt_shape(want.shape())),
                    format!("{} in file", fmt_shape(got.shape())),
                ));
            }
            out.push(name, got);
        }
        Ok(out)
    };
    let params = fill(&template.registry().params)?;
    let buffers = fill(&template.registry().buffers)?;
    if let Some(extra) = order.iter().find(|n| entries.contains_key(*n)) {
        return Err(Error::Checkpoint(format!("entry {extra} not part of the model config")));
    }
    Model::with_registry(config, ParamRegistry { params, buffers })
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let model = Model::<f32>::build(&ModelConfig::miniature(), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"IDCN");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        let hlen = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
        let cfg: ModelConfig = serde_json::from_slice(&buf[10..10 + hlen]).unwrap();
        assert_eq!(&cfg, model.config());
        let count = u32::from_le_bytes(buf[10 + hlen..14 + hlen].try_into().unwrap()) as usize;
        assert_eq!(count, model.registry().params.len() + model.registry().buffers.len());
        // first entry: name, rank, dims
        let p = 14 + hlen;
        let nlen = u16::from_le_bytes([buf[p], buf[p + 1]]) as usize;
        let first = model.registry().params.iter().next().unwrap();
        assert_eq!(&buf[p + 2..p + 2 + nlen], first.0.as_bytes());
        assert_eq!(buf[p + 2 + nlen] as usize, first.1.rank());
    }

    #[test]
    fn roundtrip_preserves_tensors() {
        let model = Model::<f32>::build(&ModelConfig::miniature(), 9).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.registry(), model.registry());
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::<f32>::build(&ModelConfig::miniature(), 9).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
    }

    #[test]
    fn rejects_config_mismatch_with_both_shapes() {
        let model = Model::<f32>::build(&ModelConfig::miniature(), 9).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        // Swap the header for a config whose head is wider.
        let hlen = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
        let mut cfg = ModelConfig::miniature();
        cfg.hidden = vec![32, 16];
        let header = serde_json::to_vec(&cfg).unwrap();
        let mut forged = buf[..6].to_vec();
        forged.extend_from_slice(&(header.len() as u32).to_le_bytes());
        forged.extend_from_slice(&header);
        forged.extend_from_slice(&buf[10 + hlen..]);
        let err = read_checkpoint(&forged[..]).unwrap_err().to_string();
        assert!(err.contains("fc0.weight") && err.contains("[1152, 32]") && err.contains("[1152, 16]"), "{err}");
    }
}
