//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CFANETCK"
//! version  u32
//! header   u32 length + JSON (kind, step, config, rng, extra)
//! blobs    u32 count, then per blob:
//!          u16 name length, name, u8 rank, rank x u64 dims, f32 data
//! digest   32 bytes SHA-256 of everything above
//! ```
//!
//! Files are written to a temporary sibling and renamed into place, so a
//! crash never leaves a half-written checkpoint under the final name.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{nn::VarStore, Kind, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CFANETCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub step: usize,
    pub config: serde_json::Value,
    #[serde(default)]
    pub rng: Option<serde_json::Value>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub shape: Vec<i64>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub blobs: BTreeMap<String, Blob>,
}

impl Checkpoint {
    pub fn new(kind: &str, step: usize, config: serde_json::Value) -> Self {
        Self {
            header: Header { kind: kind.into(), step, config, rng: None, extra: serde_json::Value::Null },
            blobs: BTreeMap::new(),
        }
    }

    /// Copies every variable of `vs` under `prefix/`.
    pub fn add_var_store(&mut self, prefix: &str, vs: &VarStore) {
        for (name, t) in vs.variables() {
            let shape = t.size();
            let data = crate::data::tensor_to_vec(&t.to_kind(Kind::Float));
            self.blobs.insert(format!("{prefix}/{name}"), Blob { shape, data });
        }
    }

    /// Writes blobs under `prefix/` into `vs`. Every variable must be present
    /// with the right shape; nothing is written unless all of them are.
    pub fn load_var_store(&self, prefix: &str, vs: &VarStore) -> Result<()> {
        let vars = vs.variables();
        let mut plan = Vec::with_capacity(vars.len());
        for (name, t) in &vars {
            let key = format!("{prefix}/{name}");
            let blob = self
                .blobs
                .get(&key)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing parameter {key}")))?;
            if blob.shape != t.size() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "parameter {key}: checkpoint shape {:?} vs model {:?}",
                    blob.shape,
                    t.size()
                )));
            }
            plan.push((t.shallow_clone(), blob));
        }
        tch::no_grad(|| {
            for (mut t, blob) in plan {
                let src = Tensor::from_slice(&blob.data).view(blob.shape.as_slice()).to_kind(t.kind());
                t.copy_(&src);
            }
        });
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, blob) in &self.blobs {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(blob.shape.len() as u8);
            for d in &blob.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &blob.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::IncompatibleCheckpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "format version {version}, this build reads {VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (truncated or corrupted file)"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("bad header: {e}")))?;
        let n = r.u32()?;
        let mut blobs = BTreeMap::new();
        for _ in 0..n {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| bad("blob name is not utf-8"))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as i64);
            }
            let numel: i64 = shape.iter().product();
            let raw = r.take(numel as usize * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            blobs.insert(name, Blob { shape, data });
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after blobs"));
        }
        Ok(Self { header, blobs })
    }

    /// Atomic write: temporary sibling, fsync, rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.header.kind
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::IncompatibleCheckpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
}

/// Compares two JSON objects on `fields`, naming the first mismatch.
pub fn check_fields(stored: &serde_json::Value, expected: &serde_json::Value, fields: &[&str]) -> Result<()> {
    for f in fields {
        let (a, b) = (&stored[*f], &expected[*f]);
        if a != b {
            return Err(Error::IncompatibleCheckpoint(format!("field {f}: checkpoint has {a}, config expects {b}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("generator", 3, serde_json::json!({"d_id": 8}));
        c.blobs.insert("a/w".into(), Blob { shape: vec![2, 2], data: vec![1.0, -2.0, 3.5, 0.25] });
        c.blobs.insert("b".into(), Blob { shape: vec![], data: vec![7.0] });
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn truncation_and_version_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::IncompatibleCheckpoint(_))));
        }
        let mut v2 = bytes.clone();
        v2[8] = 2;
        let err = Checkpoint::from_bytes(&v2).unwrap_err();
        assert!(err.to_string().contains("version 2"));
    }

    #[test]
    fn field_mismatch_is_named() {
        let err = check_fields(&serde_json::json!({"d_id": 64}), &serde_json::json!({"d_id": 32}), &["d_id"])
            .unwrap_err();
        assert!(err.to_string().contains("d_id"));
    }

    #[test]
    fn save_is_atomic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), sample());
        assert!(fs::read_dir(dir.path()).unwrap().count() == 1);
    }
}
