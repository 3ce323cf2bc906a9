//! Binary checkpoints.
//!
//! Layout, little-endian: magic `FPMM`, version `u32`, the 32-byte
//! architecture digest, then one block per parameter until end of file:
//! name length `u16`, name bytes, rank `u8`, `rank` dims as `u32`, and the
//! values as `f32`. The config travels in a `<checkpoint>.config.json`
//! sidecar so a checkpoint can be rebuilt without other inputs.

use std::path::{Path, PathBuf};

use microanim_tensor::Tensor;

use crate::config::Config;
use crate::model::Model;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FPMM";
pub const VERSION: u32 = 1;

/// Path of the config sidecar of `checkpoint`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

/// A named parameter as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode(digest: &[u8; 32], blocks: &[Block]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(digest);
    for b in blocks {
        let name = b.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("parameter name too long: {}", b.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = b.tensor.shape();
        let rank = u8::try_from(shape.len()).map_err(|_| Error::invalid(format!("rank of {} too large", b.name)))?;
        out.push(rank);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension of {} too large", b.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in b.tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint into its digest and blocks.
pub fn decode(bytes: &[u8]) -> std::result::Result<([u8; 32], Vec<Block>), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let mut blocks = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or("block too large")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| format!("block {name}: {e}"))?;
        blocks.push(Block { name, tensor });
    }
    Ok((digest, blocks))
}

/// Writes the model parameters and the config sidecar.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let store = model.store();
    let blocks: Vec<Block> = store
        .iter()
        .map(|(name, t)| Block {
            name: name.to_string(),
            tensor: t.clone(),
        })
        .collect();
    let bytes = encode(&model.config().digest(), &blocks)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    std::fs::write(&side, model.config().to_json()).map_err(|e| Error::io(&side, e))
}

/// Rebuilds a model from a checkpoint and its sidecar.
pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let config = Config::load(&sidecar_path(path))?;
    load_with_config(path, &bytes, &config)
}

fn load_with_config(path: &Path, bytes: &[u8], config: &Config) -> Result<Model> {
    let (digest, blocks) = decode(bytes).map_err(|m| Error::format(path, m))?;
    if digest != config.digest() {
        return Err(Error::format(path, "architecture digest does not match the config"));
    }
    let mut model = Model::new(config)?;
    let store = model.store_mut();
    if blocks.len() != store.ids().count() {
        return Err(Error::format(
            path,
            format!("{} parameter blocks, the model has {}", blocks.len(), store.ids().count()),
        ));
    }
    for b in blocks {
        store.set(&b.name, b.tensor).map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(model)
}
