//! Run configuration, file formats and atomic output.

mod checkpoint;
mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use checkpoint::{
    dataset_from_bytes, dataset_to_bytes, read_dataset, write_dataset, Checkpoint, Stage, CHECKPOINT_MAGIC,
    DATASET_MAGIC, FORMAT_VERSION,
};
pub use config::{AnalysisConfig, DataConfig, DataSource, RunConfig};

use crate::error::{Error, Result};

fn temp_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// Writes `bytes` to a temporary sibling of `path`, syncs, and renames it
/// into place. Parent directories are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = temp_path(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// One compact JSON object per line.
pub fn to_json_lines<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn to_pretty_json<T: Serialize>(item: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(item).map_err(|e| Error::Format(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}
