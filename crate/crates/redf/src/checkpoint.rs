//! Binary checkpoint: magic, format version, configuration echo, the
//! normalisation convention and every parameter as a named `f64` array.
//!
//! All integers are little-endian `u32`/`u64`; strings are `u32` length
//! prefixed UTF-8.

use std::fs;
use std::path::Path;

use redf_core::{Config, RedF, Tensor};

use crate::error::{Result, RunError};

pub const MAGIC: &[u8; 8] = b"REDFCKPT";
pub const VERSION: u32 = 1;
/// Instance normalisation: per-window, per-channel mean and population std
/// clamped at `epsilon`; statistics are never shared between REM and DFM.
pub const NORM_TAG: &str = "instance-norm/population-std/clamp-epsilon/per-window";

pub fn encode(model: &RedF) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &model.config.to_kv_text());
    put_str(&mut out, NORM_TAG);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, t) in model.store.iter() {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| RunError::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| RunError::Data("checkpoint string is not UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<RedF> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(RunError::Data("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(RunError::Data(format!("unsupported checkpoint version {version}")));
    }
    let config = Config::from_kv_text(&r.string()?).map_err(|e| RunError::Data(format!("checkpoint config: {e}")))?;
    let tag = r.string()?;
    if tag != NORM_TAG {
        return Err(RunError::Data(format!("unknown normalisation convention `{tag}`")));
    }
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or_else(|| RunError::Data("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(RunError::Data("trailing bytes after checkpoint".into()));
    }
    Ok(RedF::from_params(config, params.iter().map(|(n, t)| (n.as_str(), t.clone())))?)
}

pub fn save(path: &Path, model: &RedF) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    }
    fs::write(path, encode(model)).map_err(|e| RunError::io(path, e))
}

pub fn load(path: &Path) -> Result<RedF> {
    decode(&fs::read(path).map_err(|e| RunError::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        Config {
            num_channels: 2,
            lookback: 16,
            horizon: 4,
            patch_size: 4,
            patch_stride: 2,
            hidden_dim: 8,
            heads: 2,
            msp_count: 1,
            seed: 5,
            learning_rate: 0.1 + 0.2,
            ..Config::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = RedF::new(small()).unwrap();
        let bytes = encode(&model);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.store, model.store);
        assert_eq!(back.config, model.config);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode(&RedF::new(small()).unwrap());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
