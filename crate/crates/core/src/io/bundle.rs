use std::collections::BTreeMap;
use std::path::Path;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use super::{expect_len, read_file, read_json, write_file, write_json};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{BinaryMask, Dims, MultiSequenceVolume, ScalarVolume, SequenceKind};

pub const META_FILE: &str = "meta.json";

/// `meta.json` of a volume bundle. Unknown keys are ignored on read.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct BundleMeta {
    pub dims: Dims,
    #[serde(serialize_with = "ordered_sequences")]
    pub sequences: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

fn ordered_sequences<S: Serializer>(map: &BTreeMap<String, String>, s: S) -> Result<S::Ok, S::Error> {
    let mut out = s.serialize_map(Some(map.len()))?;
    for kind in SequenceKind::ALL {
        if let Some(file) = map.get(kind.name()) {
            out.serialize_entry(kind.name(), file)?;
        }
    }
    out.end()
}

/// A loaded bundle: the volume and, when declared, its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle<T> {
    pub volume: MultiSequenceVolume<T>,
    pub ground_truth: Option<BinaryMask>,
}

fn default_file_name(kind: SequenceKind) -> String {
    format!("{}.f32", kind.name().to_ascii_lowercase())
}

fn decode_f32<T: Scalar>(path: &Path, bytes: &[u8], dims: Dims) -> Result<ScalarVolume<T>> {
    expect_len(path, bytes, dims.len() * 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::from_f32_bits(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    ScalarVolume::new(dims, data).map_err(|e| Error::MalformedMetadata {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_mask(path: &Path, dims: Dims) -> Result<BinaryMask> {
    let bytes = read_file(path)?;
    expect_len(path, &bytes, dims.len())?;
    let mut data = Vec::with_capacity(bytes.len());
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            0 => data.push(false),
            1 => data.push(true),
            other => {
                return Err(Error::MalformedMetadata {
                    path: path.to_path_buf(),
                    message: format!("mask byte {other} at offset {i} is not 0 or 1"),
                })
            }
        }
    }
    BinaryMask::new(dims, data)
}

/// One byte per voxel, 0 or 1.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&b| u8::from(b)).collect();
    write_file(path, &bytes)
}

/// Reads `meta.json` and the raw files it references.
pub fn load_bundle<T: Scalar>(dir: &Path) -> Result<Bundle<T>> {
    let meta_path = dir.join(META_FILE);
    let meta: BundleMeta = read_json(&meta_path)?;
    if meta.dims.is_empty() {
        return Err(Error::MalformedMetadata {
            path: meta_path,
            message: format!("dims {} contain a zero axis", meta.dims),
        });
    }
    let mut sequences = Vec::with_capacity(meta.sequences.len());
    for (name, file) in &meta.sequences {
        let kind: SequenceKind = name.parse()?;
        let path = dir.join(file);
        let bytes = read_file(&path)?;
        sequences.push((kind, decode_f32(&path, &bytes, meta.dims)?));
    }
    if sequences.is_empty() {
        return Err(Error::MalformedMetadata {
            path: meta_path,
            message: "no sequences declared".into(),
        });
    }
    let volume = MultiSequenceVolume::new(sequences)?;
    let ground_truth = match &meta.ground_truth {
        Some(file) => Some(load_mask(&dir.join(file), meta.dims)?),
        None => None,
    };
    Ok(Bundle {
        volume,
        ground_truth,
    })
}

/// Writes a bundle with the conventional file names (`t2w.f32`, `seg.u8`, ...).
pub fn save_bundle<T: Scalar>(
    dir: &Path,
    volume: &MultiSequenceVolume<T>,
    ground_truth: Option<&BinaryMask>,
) -> Result<BundleMeta> {
    let mut sequences = BTreeMap::new();
    for (kind, v) in volume.iter() {
        let file = default_file_name(kind);
        let bytes: Vec<u8> = v
            .data()
            .iter()
            .flat_map(|x| x.as_f32().to_le_bytes())
            .collect();
        write_file(&dir.join(&file), &bytes)?;
        sequences.insert(kind.name().to_string(), file);
    }
    let ground_truth = match ground_truth {
        Some(mask) => {
            mask.ensure_dims(volume.dims())?;
            save_mask(mask, &dir.join("seg.u8"))?;
            Some("seg.u8".to_string())
        }
        None => None,
    };
    let meta = BundleMeta {
        dims: volume.dims(),
        sequences,
        ground_truth,
    };
    write_json(&dir.join(META_FILE), &meta)?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_meta(dir: &Path, json: &str) {
        fs::write(dir.join(META_FILE), json).unwrap();
    }

    #[test]
    fn loads_declared_dims() {
        let dir = tempfile::tempdir().unwrap();
        write_meta(dir.path(), r#"{"dims":[4,4,4],"sequences":{"T2w":"t2w.f32"},"extra":1}"#);
        fs::write(dir.path().join("t2w.f32"), vec![0u8; 256]).unwrap();
        let b = load_bundle::<f32>(dir.path()).unwrap();
        assert_eq!(b.volume.dims(), Dims::cube(4));
        assert!(b.ground_truth.is_none());
    }

    #[test]
    fn size_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_meta(dir.path(), r#"{"dims":[4,4,4],"sequences":{"T2w":"t2w.f32"}}"#);
        fs::write(dir.path().join("t2w.f32"), vec![0u8; 128]).unwrap();
        match load_bundle::<f32>(dir.path()) {
            Err(Error::SizeMismatch {
                expected, actual, ..
            }) => assert_eq!((expected, actual), (256, 128)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_bundle::<f32>(dir.path()), Err(Error::MissingFile { .. })));

        write_meta(dir.path(), r#"{"dims":[4,4,4],"sequences":{"T2w":"t2w.f32"}}"#);
        assert!(matches!(load_bundle::<f32>(dir.path()), Err(Error::MissingFile { .. })));

        write_meta(dir.path(), r#"{"dims":[4,4,4],"sequences":{"PD":"pd.f32"}}"#);
        assert!(matches!(load_bundle::<f32>(dir.path()), Err(Error::UnknownSequence(_))));

        write_meta(dir.path(), r#"{"dims":[4,4],"sequences":{}}"#);
        assert!(matches!(
            load_bundle::<f32>(dir.path()),
            Err(Error::MalformedMetadata { .. })
        ));
    }

    #[test]
    fn bundle_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(2, 3, 4);
        let vols = SequenceKind::ALL.map(|k| {
            let data = (0..dims.len()).map(|i| (i as f32 + k.index() as f32) / 7.0).collect();
            (k, ScalarVolume::new(dims, data).unwrap())
        });
        let mv = MultiSequenceVolume::new(vols).unwrap();
        let gt = BinaryMask::from_fn(dims, |z, y, x| z + y + x == 3);
        let meta = save_bundle(dir.path(), &mv, Some(&gt)).unwrap();
        let text = fs::read_to_string(dir.path().join(META_FILE)).unwrap();
        let t1 = text.find("\"T1w\"").unwrap();
        let flair = text.find("\"FLAIR\"").unwrap();
        assert!(t1 < flair);
        assert_eq!(meta.ground_truth.as_deref(), Some("seg.u8"));
        let back = load_bundle::<f32>(dir.path()).unwrap();
        assert_eq!(back.volume, mv);
        assert_eq!(back.ground_truth, Some(gt));
    }

    #[test]
    fn zero_mask_file_is_all_zero_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.u8");
        save_mask(&BinaryMask::empty(Dims::cube(3)), &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), vec![0u8; 27]);
    }
}
