//! On-disk formats: raw volume bundles, masks, label maps, relevance maps and
//! a read-only NIfTI-1 loader.

mod bundle;
mod labels;
mod nifti;
mod relfile;

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub use bundle::{load_bundle, load_mask, save_bundle, save_mask, Bundle, BundleMeta, META_FILE};
pub use labels::{load_label_map, save_label_map, LABELS_FILE, LABELS_META_FILE};
pub use nifti::{load_nifti, load_nifti_mask, parse_nifti, NiftiDatatype, NiftiHeader};
pub use relfile::{load_relevance, save_relevance, RELMAP_FILE, RELMAP_META_FILE};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            path: path.to_path_buf(),
        },
        _ => Error::io(path, e),
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline; field order follows the type.
pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::MalformedMetadata {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub(crate) fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::MalformedMetadata {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub(crate) fn expect_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(())
}
