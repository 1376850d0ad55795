//! Versioned binary parameter container.
//!
//! Layout (little-endian):
//! `b"RVCKPT01"`, `u32` format version, `u32` + kind string, `u64` + JSON
//! metadata, `u32` tensor count, then per tensor `u32` + name, `u32` rows,
//! `u32` cols, `rows * cols` `f64` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Mat, ParamStore};

const MAGIC: &[u8; 8] = b"RVCKPT01";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

pub fn encode(kind: &str, meta: &serde_json::Value, params: &ParamStore) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_str(&mut buf, kind);
    let meta = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    put_u32(&mut buf, params.tensors.len() as u32);
    for (name, t) in params.names.iter().zip(&params.tensors) {
        put_str(&mut buf, name);
        put_u32(&mut buf, t.nrows() as u32);
        put_u32(&mut buf, t.ncols() as u32);
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("truncated container".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn decode(data: &[u8], expected_kind: &str) -> Result<(serde_json::Value, ParamStore)> {
    let mut c = Cursor { data, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint container".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let kind = c.string()?;
    if kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "container holds a {kind} model, expected {expected_kind}"
        )));
    }
    let meta_len = c.u64()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(c.take(meta_len)?)?;
    let n = c.u32()? as usize;
    let mut params = ParamStore::default();
    for _ in 0..n {
        let name = c.string()?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let raw = c.take(rows * cols * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Mat::from_shape_vec((rows, cols), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.add(name, t);
    }
    if c.pos != data.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok((meta, params))
}

pub fn save(path: &Path, kind: &str, meta: &serde_json::Value, params: &ParamStore) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let bytes = encode(kind, meta, params)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path, kind: &str) -> Result<(serde_json::Value, ParamStore)> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    decode(&data, kind).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Copy loaded tensors into a freshly built store after checking names and shapes.
pub fn restore_into(target: &mut ParamStore, loaded: ParamStore) -> Result<()> {
    if !target.same_layout(&loaded) {
        return Err(Error::Checkpoint(
            "parameter layout does not match the model configuration".into(),
        ));
    }
    target.tensors = loaded.tensors;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_other_versions_and_kinds() {
        let mut ps = ParamStore::default();
        ps.add("a", Mat::from_elem((2, 3), 1.25));
        let meta = serde_json::json!({"x": 1});
        let mut bytes = encode("vc", &meta, &ps).unwrap();
        let (m, back) = decode(&bytes, "vc").unwrap();
        assert_eq!(m, meta);
        assert_eq!(back, ps);
        assert!(decode(&bytes, "denoiser").is_err());
        bytes[8] = 9;
        let err = decode(&bytes, "vc").unwrap_err().to_string();
        assert!(err.contains("version"));
    }

    #[test]
    fn rejects_truncation() {
        let mut ps = ParamStore::default();
        ps.add("a", Mat::zeros((4, 4)));
        let bytes = encode("vc", &serde_json::Value::Null, &ps).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3], "vc").is_err());
    }
}
