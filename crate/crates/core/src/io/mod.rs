//! File formats: measurement and label CSVs, embedding and grid binaries,
//! and atomic writes.

mod binary;
mod tables;

pub use binary::{
    decode_embeddings, decode_grids, encode_embeddings, encode_grids, read_embeddings, read_grids,
    write_embeddings, write_grids, EmbeddingRecord, Reader,
};
pub use tables::{read_labels, read_measurements, write_labels, write_measurements, LabelRow};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::Result;

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
