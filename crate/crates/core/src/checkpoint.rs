//! Versioned container of named parameter arrays plus a config echo.
//!
//! ```text
//! "QLCK"                      4 bytes magic
//! version                     u32 (1)
//! config_len                  u32, then config_len bytes of UTF-8 `key = value` text
//! count                       u32 number of arrays
//! per array:
//!   name_len u16, name bytes (UTF-8)
//!   dtype u8                  0 = float32, 1 = float64
//!   ndim u8, dims u32 × ndim
//!   payload                   prod(dims) elements, little-endian
//! ```
//! All integers are little-endian. Arrays are written in name order.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, QlipModel};
use crate::nn::ParamStore;
use crate::tokcodec::write_file_atomic;

pub const MAGIC: [u8; 4] = *b"QLCK";
pub const VERSION: u32 = 1;

pub fn encode(config: &KvConfig, store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.render();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, var) in store.iter() {
        let t = var.as_tensor();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = t.dims();
        match t.dtype() {
            DType::F32 => out.push(0),
            DType::F64 => out.push(1),
            other => return Err(Error::invalid(format!("cannot checkpoint dtype {other:?}"))),
        }
        out.push(dims.len() as u8);
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            _ => flat.to_vec1::<f64>()?.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
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
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format { context: "checkpoint".into(), detail: format!("truncated at byte {}", self.pos) });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(KvConfig, ParamStore)> {
    let bad = |d: &str| Error::Format { context: "checkpoint".into(), detail: d.to_string() };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let clen = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(clen)?).map_err(|_| bad("config is not UTF-8"))?;
    let config = KvConfig::parse(text)?;
    let count = r.u32()?;
    let mut store: Option<ParamStore> = None;
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| bad("name is not UTF-8"))?.to_string();
        let dtype = match r.u8()? {
            0 => DType::F32,
            1 => DType::F64,
            d => return Err(bad(&format!("unknown dtype tag {d}"))),
        };
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let t = match dtype {
            DType::F32 => {
                let data: Vec<f32> =
                    r.take(n * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
                Tensor::from_vec(data, dims.as_slice(), &Device::Cpu)?
            }
            _ => {
                let data: Vec<f64> = r
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                    .collect();
                Tensor::from_vec(data, dims.as_slice(), &Device::Cpu)?
            }
        };
        let s = store.get_or_insert_with(|| ParamStore::new(dtype));
        s.insert(name, &t)?;
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((config, store.unwrap_or_else(|| ParamStore::new(DType::F32))))
}

pub fn save(path: &Path, config: &KvConfig, store: &ParamStore) -> Result<()> {
    write_file_atomic(path, &encode(config, store)?)
}

pub fn load(path: &Path) -> Result<(KvConfig, ParamStore)> {
    decode(&std::fs::read(path)?)
}

/// Config echo of a tokenizer checkpoint.
pub fn qlip_config(model: &QlipModel) -> KvConfig {
    let mut kv = KvConfig::default();
    kv.set("kind", "qlip");
    for (k, v) in model.cfg.to_kv().iter() {
        kv.set(&format!("model.{k}"), v);
    }
    kv
}

pub fn save_qlip(path: &Path, model: &QlipModel) -> Result<()> {
    save(path, &qlip_config(model), &model.store)
}

pub fn load_qlip(path: &Path) -> Result<QlipModel> {
    let (mut kv, store) = load(path)?;
    match kv.take("kind").as_deref() {
        Some("qlip") => {}
        other => return Err(Error::Format { context: path.display().to_string(), detail: format!("not a tokenizer checkpoint (kind {other:?})") }),
    }
    let cfg = ModelConfig::from_kv(&kv.take_prefixed("model"))?;
    QlipModel::from_store(cfg, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn qlip_checkpoint_roundtrip() {
        let m = QlipModel::new(ModelConfig::small(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_qlip(&p, &m).unwrap();
        let back = load_qlip(&p).unwrap();
        assert_eq!(back.cfg, m.cfg);
        let all = [""];
        assert_eq!(back.store.fingerprint(&all).unwrap(), m.store.fingerprint(&all).unwrap());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let m = QlipModel::new(ModelConfig::tiny_f64(), 1).unwrap();
        let bytes = encode(&qlip_config(&m), &m.store).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
