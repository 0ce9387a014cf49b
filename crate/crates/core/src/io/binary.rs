use std::path::Path;

use serde::{Deserialize, Serialize};

use super::atomic_write;
use crate::pipeline::{WeekGrid, HOURS_PER_WEEK, N_VARS};
use crate::{Error, Result};

const EMB_MAGIC: &[u8; 4] = b"WBME";
const GRID_MAGIC: &[u8; 4] = b"WBMG";
const VERSION: u32 = 1;
const CELLS: usize = HOURS_PER_WEEK * N_VARS;

/// One week embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub subject_id: u64,
    pub week_index: u32,
    pub vector: Vec<f32>,
}

/// Little-endian cursor over a byte slice.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "unexpected end of data at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn header(r: &mut Reader, magic: &[u8; 4], what: &str) -> Result<()> {
    if r.take(4)? != magic {
        return Err(Error::Format(format!("not a {what} file (bad magic)")));
    }
    let v = r.u32()?;
    if v != VERSION {
        return Err(Error::Format(format!("unsupported {what} version {v}")));
    }
    Ok(())
}

pub fn encode_embeddings(dim: usize, records: &[EmbeddingRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + records.len() * (12 + 4 * dim));
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::contract(format!(
                "embedding for subject {} week {} has dimension {}, expected {dim}",
                r.subject_id,
                r.week_index,
                r.vector.len()
            )));
        }
        out.extend_from_slice(&r.subject_id.to_le_bytes());
        out.extend_from_slice(&r.week_index.to_le_bytes());
        for v in &r.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<(usize, Vec<EmbeddingRecord>)> {
    let mut r = Reader::new(bytes);
    header(&mut r, EMB_MAGIC, "embedding")?;
    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let subject_id = r.u64()?;
        let week_index = r.u32()?;
        let vector = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        out.push(EmbeddingRecord {
            subject_id,
            week_index,
            vector,
        });
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes in embedding file".into()));
    }
    Ok((dim, out))
}

/// Grid layout: magic, version, `u64` count, then per grid `u64` subject,
/// `u32` week, `168*27` `f32` values and `168*27` mask bytes, row-major by
/// hour.
pub fn encode_grids(grids: &[WeekGrid]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + grids.len() * (12 + 5 * CELLS));
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(grids.len() as u64).to_le_bytes());
    for g in grids {
        out.extend_from_slice(&g.subject_id.to_le_bytes());
        out.extend_from_slice(&g.week_index.to_le_bytes());
        for &v in &g.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend(g.mask.iter().map(|&m| m as u8));
    }
    out
}

pub fn decode_grids(bytes: &[u8]) -> Result<Vec<WeekGrid>> {
    let mut r = Reader::new(bytes);
    header(&mut r, GRID_MAGIC, "grid")?;
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let subject_id = r.u64()?;
        let week_index = r.u32()?;
        let values = (0..CELLS)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let mask = r
            .take(CELLS)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::Format(format!("mask byte {b} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(WeekGrid {
            subject_id,
            week_index,
            values,
            mask,
        });
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes in grid file".into()));
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))
}

pub fn write_embeddings(path: &Path, dim: usize, records: &[EmbeddingRecord]) -> Result<()> {
    atomic_write(path, &encode_embeddings(dim, records)?)
}

pub fn read_embeddings(path: &Path) -> Result<(usize, Vec<EmbeddingRecord>)> {
    decode_embeddings(&read(path)?)
}

pub fn write_grids(path: &Path, grids: &[WeekGrid]) -> Result<()> {
    atomic_write(path, &encode_grids(grids))
}

pub fn read_grids(path: &Path) -> Result<Vec<WeekGrid>> {
    decode_grids(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_round_trip_is_byte_exact() {
        let recs = vec![
            EmbeddingRecord {
                subject_id: 7,
                week_index: 2900,
                vector: vec![0.1, -2.5, f32::MIN_POSITIVE],
            },
            EmbeddingRecord {
                subject_id: 1 << 40,
                week_index: 0,
                vector: vec![0.0, 1.0, 3.0],
            },
        ];
        let bytes = encode_embeddings(3, &recs).unwrap();
        let (dim, back) = decode_embeddings(&bytes).unwrap();
        assert_eq!((dim, &back), (3, &recs));
        assert_eq!(encode_embeddings(dim, &back).unwrap(), bytes);
        assert!(encode_embeddings(2, &recs).is_err());
    }

    #[test]
    fn grid_round_trip_is_byte_exact() {
        let mut g = WeekGrid::empty(3, 2801);
        g.set(0, 4, 1.25);
        g.set(167, 26, -0.1);
        let bytes = encode_grids(&[g.clone(), WeekGrid::empty(4, 2802)]);
        let back = decode_grids(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].mask, g.mask);
        assert_eq!(encode_grids(&back), bytes);
        assert!(decode_grids(&bytes[..bytes.len() - 1]).is_err());
    }
}
