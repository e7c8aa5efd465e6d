//! Binary checkpoints.
//!
//! Layout (little-endian): magic `MSF2`, `u32` version, `u32` length + TOML config,
//! `u32` tensor count, then per tensor `u32` name length, name, `u8` dtype tag,
//! `u32` rank, `u64` dims, raw data; finally a CRC-32 of everything before it.

use std::path::Path;

use crate::config::{ConfigFile, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 4] = b"MSF2";
pub const VERSION: u32 = 1;

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode_checkpoint<S: Scalar>(model: &Model<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = ConfigFile::from_model(&model.cfg, TrainConfig::default()).to_toml();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(S::DTYPE_TAG);
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            if S::DTYPE_TAG == 0 {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ck("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ck("string is not UTF-8"))
    }
}

struct Decoded {
    config: ConfigFile,
    tensors: Vec<(String, u8, Vec<usize>, Vec<f64>)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(ck("bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(ck("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(ck(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let config = ConfigFile::parse(&r.string()?).map_err(|e| ck(format!("config block: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let tag = r.u8()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = match tag {
            0 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                .collect(),
            1 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                .collect(),
            t => return Err(ck(format!("unknown dtype tag {t} for `{name}`"))),
        };
        tensors.push((name, tag, shape, data));
    }
    if r.pos != body.len() {
        return Err(ck("trailing bytes after tensor table"));
    }
    Ok(Decoded { config, tensors })
}

fn fill<S: Scalar>(
    model: &mut Model<S>,
    tensors: Vec<(String, u8, Vec<usize>, Vec<f64>)>,
) -> Result<()> {
    if tensors.len() != model.store.len() {
        return Err(ck(format!(
            "{} tensors stored, model has {}",
            tensors.len(),
            model.store.len()
        )));
    }
    for (name, tag, shape, data) in tensors {
        if tag != S::DTYPE_TAG {
            return Err(ck(format!(
                "`{name}` stored with dtype tag {tag}, loading as {}",
                S::DTYPE
            )));
        }
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| ck(format!("unknown tensor `{name}`")))?;
        if model.store.get(id).shape() != shape.as_slice() {
            return Err(ck(format!(
                "`{name}` has shape {shape:?}, model expects {:?}",
                model.store.get(id).shape()
            )));
        }
        let t = DenseTensor::new(shape, data.into_iter().map(S::of).collect())?;
        model.store.set(id, t)?;
    }
    Ok(())
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

/// Rebuild the model described by the stored config and restore its parameters.
pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Model<S>> {
    let dec = decode(&std::fs::read(path)?)?;
    let cfg = dec.config.model_config().map_err(|e| ck(e.to_string()))?;
    let mut model = build_model::<S>(&cfg)?;
    fill(&mut model, dec.tensors)?;
    Ok(model)
}

/// Restore parameters into an existing model; the stored config must match its own
/// (the init seed aside).
pub fn load_into<S: Scalar>(model: &mut Model<S>, path: impl AsRef<Path>) -> Result<()> {
    let dec = decode(&std::fs::read(path)?)?;
    let cfg = dec.config.model_config().map_err(|e| ck(e.to_string()))?;
    if (ModelConfig {
        seed: model.cfg.seed,
        ..cfg
    }) != model.cfg
    {
        return Err(ck(
            "checkpoint was written for a different model configuration",
        ));
    }
    fill(model, dec.tensors)
}
