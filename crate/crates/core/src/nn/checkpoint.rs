//! Binary parameter checkpoints.
//!
//! Layout (little endian): magic `WBMC`, `u32` version, `u32` config length
//! and UTF-8 JSON config, `u64` initialization seed, `u32` tensor count, then per tensor a `u8` kind
//! (0 trainable, 1 buffer), `u32` name length, name, `u32` rank, `u64`
//! dims, `f32` data. A SHA-256 digest of everything before it closes the
//! file.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::matrix::Matrix;
use super::params::ParameterTree;
use crate::io::{atomic_write, Reader};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"WBMC";
const VERSION: u32 = 1;

pub fn encode(params: &ParameterTree<f32>, config_json: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(params.seed()).to_le_bytes());
    let manifest = params.manifest();
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    for (name, (rows, cols), is_buffer) in manifest {
        let m = params.get(&name).expect("manifest entries exist");
        out.push(is_buffer as u8);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(rows as u64).to_le_bytes());
        out.extend_from_slice(&(cols as u64).to_le_bytes());
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode(bytes: &[u8]) -> Result<(ParameterTree<f32>, String)> {
    if bytes.len() < 32 + 8 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader::new(body);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let clen = r.u32()? as usize;
    let config =
        String::from_utf8(r.take(clen)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
    let seed = r.u64()?;
    let count = r.u32()?;
    let mut tree = ParameterTree::new(seed);
    for _ in 0..count {
        let kind = r.u8()?;
        let nlen = r.u32()? as usize;
        let name =
            String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let rank = r.u32()?;
        if rank != 2 {
            return Err(Error::Format(format!("{name}: unsupported rank {rank}")));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f32()?);
        }
        let m = Matrix::from_vec(rows, cols, data);
        match kind {
            0 => tree.insert(name, m)?,
            1 => tree.insert_buffer(name, m)?,
            k => return Err(Error::Format(format!("{name}: unknown tensor kind {k}"))),
        }
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok((tree, config))
}

pub fn save(path: &Path, params: &ParameterTree<f32>, config_json: &str) -> Result<()> {
    atomic_write(path, &encode(params, config_json))
}

pub fn load(path: &Path) -> Result<(ParameterTree<f32>, String)> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

/// Loads into `target`, rejecting any name or shape difference.
pub fn load_into(path: &Path, target: &mut ParameterTree<f32>) -> Result<String> {
    let (tree, config) = load(path)?;
    target.assign_from(&tree)?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterTree<f32> {
        let mut p = ParameterTree::new(5);
        p.glorot("a.w", 3, 2).unwrap();
        p.zeros("a.b", 1, 2).unwrap();
        p.insert_buffer("bn.mean", Matrix::filled(1, 2, 0.5))
            .unwrap();
        p
    }

    #[test]
    fn round_trip() {
        let p = sample();
        let bytes = encode(&p, "{\"k\":1}");
        let (q, cfg) = decode(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(cfg, "{\"k\":1}");
        assert_eq!(encode(&q, &cfg), bytes);
    }

    #[test]
    fn corruption_and_mismatch_rejected() {
        let p = sample();
        let mut bytes = encode(&p, "{}");
        bytes[20] ^= 1;
        assert!(decode(&bytes).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wbmc");
        save(&path, &p, "{}").unwrap();
        let mut other = ParameterTree::new(5);
        other.glorot("a.w", 2, 3).unwrap();
        other.zeros("a.b", 1, 2).unwrap();
        other
            .insert_buffer("bn.mean", Matrix::filled(1, 2, 0.5))
            .unwrap();
        assert!(load_into(&path, &mut other).is_err());
    }
}
