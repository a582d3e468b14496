//! Single-file checkpoint archive.
//!
//! Layout (little-endian): magic `CSLSCKPT`, `u32` format version, `u32`
//! config length and the model config as JSON, `u32` parameter count, then per
//! parameter: `u32` name length, UTF-8 name, `u8` dtype tag (1 = f64), `u32`
//! rank, `u64` per dimension, and the row-major data. Values are stored as raw
//! IEEE-754 bits so reloading is exact.

use std::fs;
use std::path::Path;

use crate::error::{CslsError, Result};
use crate::model::{CslsModel, ModelConfig};

const MAGIC: &[u8; 8] = b"CSLSCKPT";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

pub fn save(model: &CslsModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CslsModel> {
    from_bytes(&fs::read(path)?)
}

pub fn to_bytes(model: &CslsModel) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + model.params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.cfg)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CslsError::Checkpoint("unexpected end of archive".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<CslsModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CslsError::Checkpoint("not a checkpoint archive".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CslsError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    // rebuild the module layout, then overwrite every parameter by name
    let mut model = CslsModel::new(cfg, 0)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(CslsError::Checkpoint(format!(
            "archive has {count} parameters, model expects {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| CslsError::Checkpoint(format!("parameter name: {e}")))?
            .to_owned();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(CslsError::Checkpoint(format!(
                "{name}: unsupported dtype tag {dtype}"
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| CslsError::Checkpoint(format!("unknown parameter {name}")))?;
        let param = model.params.get_mut(id);
        if param.shape != shape {
            return Err(CslsError::Checkpoint(format!(
                "{name}: shape {shape:?} does not match {:?}",
                param.shape
            )));
        }
        let bytes = r.take(param.data.len() * 8)?;
        for (dst, chunk) in param.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if r.pos != buf.len() {
        return Err(CslsError::Checkpoint(
            "trailing bytes after parameters".into(),
        ));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.line_encoder.layers = 1;
        cfg.global_encoder.layers = 1;
        cfg.structure.layers = 1;
        cfg
    }

    #[test]
    fn reload_is_bit_exact() {
        let model = CslsModel::new(small(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&model, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.cfg, model.cfg);
        for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
    }

    #[test]
    fn namespaces() {
        let model = CslsModel::new(small(), 1).unwrap();
        let names: Vec<&str> = model.params.iter().map(|(_, p)| p.name.as_str()).collect();
        assert!(names.iter().any(|n| n.starts_with("structure.")));
        assert!(names.iter().any(|n| n.starts_with("head.")));
        assert!(names.iter().any(|n| n.starts_with("line_encoder.")));
        assert!(names.iter().any(|n| n.starts_with("global_encoder.")));
    }

    #[test]
    fn rejects_corrupt_archives() {
        let model = CslsModel::new(small(), 1).unwrap();
        let bytes = to_bytes(&model).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
