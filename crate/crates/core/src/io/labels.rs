use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{expect_len, read_file, read_json, write_file, write_json};
use crate::error::{Error, Result};
use crate::superpixel::{SlicParams, SuperpixelLabelMap};
use crate::volume::Dims;

pub const LABELS_FILE: &str = "labels.u32";
pub const LABELS_META_FILE: &str = "labels.json";

#[derive(Debug, Serialize, Deserialize)]
struct LabelSidecar {
    dims: Dims,
    count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<SlicParams>,
}

/// Writes `labels.u32` (little-endian u32, C order) and the `labels.json` sidecar.
pub fn save_label_map(lm: &SuperpixelLabelMap, dir: &Path) -> Result<()> {
    let bytes: Vec<u8> = lm.labels().iter().flat_map(|l| l.to_le_bytes()).collect();
    write_file(&dir.join(LABELS_FILE), &bytes)?;
    write_json(
        &dir.join(LABELS_META_FILE),
        &LabelSidecar {
            dims: lm.dims(),
            count: lm.count(),
            params: lm.params().copied(),
        },
    )
}

pub fn load_label_map(dir: &Path) -> Result<SuperpixelLabelMap> {
    let meta_path = dir.join(LABELS_META_FILE);
    let meta: LabelSidecar = read_json(&meta_path)?;
    let path = dir.join(LABELS_FILE);
    let bytes = read_file(&path)?;
    expect_len(&path, &bytes, meta.dims.len() * 4)?;
    let labels = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let lm = SuperpixelLabelMap::new(meta.dims, labels, meta.params).map_err(|e| {
        Error::MalformedMetadata {
            path: path.clone(),
            message: e.to_string(),
        }
    })?;
    if lm.count() != meta.count {
        return Err(Error::MalformedMetadata {
            path: meta_path,
            message: format!("sidecar count {} but labels use {}", meta.count, lm.count()),
        });
    }
    Ok(lm)
}
