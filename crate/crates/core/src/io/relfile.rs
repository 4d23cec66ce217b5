use std::path::Path;

use serde::{Deserialize, Serialize};

use super::labels::{load_label_map, save_label_map};
use super::{expect_len, read_file, read_json, write_file, write_json};
use crate::error::{Error, Result};
use crate::perturbation::{FillVector, LOSS_EPSILON};
use crate::relevance::{MethodFamily, RelevanceMap};
use crate::superpixel::SlicParams;
use crate::volume::Dims;

pub const RELMAP_META_FILE: &str = "relmap.json";
pub const RELMAP_FILE: &str = "relmap.u8";

#[derive(Debug, Serialize, Deserialize)]
struct RelmapMeta {
    dims: Dims,
    count: usize,
    method: MethodFamily,
    p_original: f64,
    epsilon: f64,
    uninformative: bool,
    oracle: String,
    #[serde(default)]
    slic: Option<SlicParams>,
    raw_scores: Vec<f64>,
    normalized_scores: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fills: Option<Vec<FillVector>>,
}

/// Writes `relmap.json`, `relmap.u8` (one 0-100 byte per voxel) and the label map.
pub fn save_relevance(relmap: &RelevanceMap, dir: &Path) -> Result<()> {
    let lm = relmap.label_map();
    save_label_map(lm, dir)?;
    write_file(&dir.join(RELMAP_FILE), relmap.voxel_map())?;
    write_json(
        &dir.join(RELMAP_META_FILE),
        &RelmapMeta {
            dims: lm.dims(),
            count: relmap.count(),
            method: relmap.method(),
            p_original: relmap.p_original(),
            epsilon: LOSS_EPSILON,
            uninformative: relmap.is_uninformative(),
            oracle: relmap.oracle().to_string(),
            slic: lm.params().copied(),
            raw_scores: relmap.raw_scores().to_vec(),
            normalized_scores: relmap.normalized_scores().to_vec(),
            fills: relmap.fills().map(<[_]>::to_vec),
        },
    )
}

pub fn load_relevance(dir: &Path) -> Result<RelevanceMap> {
    let meta_path = dir.join(RELMAP_META_FILE);
    let meta: RelmapMeta = read_json(&meta_path)?;
    let lm = load_label_map(dir)?;
    let malformed = |message: String| Error::MalformedMetadata {
        path: meta_path.clone(),
        message,
    };
    if lm.dims() != meta.dims || lm.count() != meta.count {
        return Err(malformed(format!(
            "relevance map {} / {} superpixels does not match label map {} / {}",
            meta.dims,
            meta.count,
            lm.dims(),
            lm.count()
        )));
    }
    let relmap = RelevanceMap::from_raw(
        lm,
        meta.raw_scores,
        meta.method,
        meta.p_original,
        meta.fills,
        meta.oracle,
    )
    .map_err(|e| malformed(e.to_string()))?;
    if relmap.normalized_scores() != meta.normalized_scores.as_slice() {
        return Err(malformed("normalized scores disagree with raw scores".into()));
    }
    let path = dir.join(RELMAP_FILE);
    let bytes = read_file(&path)?;
    expect_len(&path, &bytes, meta.dims.len())?;
    if bytes != relmap.voxel_map() {
        return Err(Error::MalformedMetadata {
            path,
            message: "voxel scores disagree with the per-superpixel scores".into(),
        });
    }
    Ok(relmap)
}
