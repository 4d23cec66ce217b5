use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;
use proptest::prelude::*;

use relmap_core::classifier::{SyntheticOracle, SyntheticParams};
use relmap_core::io::{
    load_bundle, load_label_map, load_nifti, load_nifti_mask, load_relevance, save_bundle, save_label_map,
    save_relevance,
};
use relmap_core::perturbation::SearchBudget;
use relmap_core::phantom::PhantomSpec;
use relmap_core::relevance::{compute_relevance, MethodFamily};
use relmap_core::superpixel::{slic3d, SlicParams};
use relmap_core::volume::{Dims, SequenceKind};
use relmap_core::Error;

/// Minimal NIfTI-1 writer used as the reference encoding.
fn nifti(dims: [usize; 3], datatype: i16, payload: &[u8], little: bool, slope: f32, inter: f32) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    let put16 = |h: &mut Vec<u8>, off: usize, v: i16| {
        let b = if little { v.to_le_bytes() } else { v.to_be_bytes() };
        h[off..off + 2].copy_from_slice(&b);
    };
    let put32 = |h: &mut Vec<u8>, off: usize, b: [u8; 4]| h[off..off + 4].copy_from_slice(&b);
    let f = |v: f32| if little { v.to_le_bytes() } else { v.to_be_bytes() };
    put32(&mut h, 0, if little { 348i32.to_le_bytes() } else { 348i32.to_be_bytes() });
    put16(&mut h, 40, 3);
    for (a, &d) in dims.iter().enumerate() {
        put16(&mut h, 42 + 2 * a, d as i16);
    }
    put16(&mut h, 70, datatype);
    let bitpix = match datatype {
        2 => 8,
        4 => 16,
        16 => 32,
        _ => 64,
    };
    put16(&mut h, 72, bitpix);
    put32(&mut h, 108, f(352.0));
    put32(&mut h, 112, f(slope));
    put32(&mut h, 116, f(inter));
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend_from_slice(payload);
    h
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut e = GzEncoder::new(Vec::new(), Compression::default());
    e.write_all(bytes).unwrap();
    e.finish().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn int16_nifti_matches_reference_decoding(
        d in 1usize..4, h in 1usize..5, w in 1usize..6,
        seed in prop::collection::vec(any::<i16>(), 80),
        little in any::<bool>(), gz in any::<bool>(),
        slope in prop_oneof![Just(0.0f32), Just(1.0f32), 0.25f32..4.0],
        inter in -10.0f32..10.0,
    ) {
        let n = d * h * w;
        let raw: Vec<i16> = seed.iter().cycle().take(n).copied().collect();
        let payload: Vec<u8> = raw
            .iter()
            .flat_map(|v| if little { v.to_le_bytes() } else { v.to_be_bytes() })
            .collect();
        let mut file = nifti([w, h, d], 4, &payload, little, slope, inter);
        if gz {
            file = gzip(&file);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if gz { "x.nii.gz" } else { "x.nii" });
        std::fs::write(&path, &file).unwrap();
        let v = load_nifti::<f64>(&path, SequenceKind::T1w).unwrap();
        prop_assert_eq!(v.dims(), Dims::new(d, h, w));
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let stored = f64::from(raw[(z * h + y) * w + x]);
                    let expected = if slope == 0.0 {
                        stored
                    } else {
                        stored * f64::from(slope) + f64::from(inter)
                    };
                    prop_assert_eq!(v.get(z, y, x), expected);
                }
            }
        }
    }
}

#[test]
fn float_and_mask_images() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
    let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let path = dir.path().join("f.nii");
    std::fs::write(&path, nifti([4, 3, 2], 16, &payload, true, 0.0, 0.0)).unwrap();
    let v = load_nifti::<f32>(&path, SequenceKind::FLAIR).unwrap();
    assert_eq!(v.data(), &values[..]);

    let labels: Vec<u8> = (0..24).map(|i| [0, 1, 2, 4][i % 4]).collect();
    let path = dir.path().join("seg.nii.gz");
    std::fs::write(&path, gzip(&nifti([4, 3, 2], 2, &labels, true, 0.0, 0.0))).unwrap();
    let m = load_nifti_mask(&path).unwrap();
    assert_eq!(m.count(), 18);
}

#[test]
fn corrupt_nifti_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut file = nifti([2, 2, 2], 2, &[0; 8], true, 0.0, 0.0);
    file[344] = b'x';
    let path = dir.path().join("bad.nii");
    std::fs::write(&path, &file).unwrap();
    assert!(matches!(load_nifti::<f32>(&path, SequenceKind::T1w), Err(Error::Nifti { .. })));

    let truncated = &nifti([2, 2, 2], 4, &[0; 16], true, 0.0, 0.0)[..360];
    std::fs::write(&path, truncated).unwrap();
    assert!(matches!(load_nifti::<f32>(&path, SequenceKind::T1w), Err(Error::Nifti { .. })));

    assert!(matches!(
        load_nifti::<f32>(&dir.path().join("absent.nii"), SequenceKind::T1w),
        Err(Error::MissingFile { .. })
    ));
}

#[test]
fn artifacts_round_trip() {
    let spec = PhantomSpec {
        dims: Dims::cube(16),
        ..PhantomSpec::with_seed(9)
    };
    let p = spec.generate::<f32>().unwrap();
    let dir = tempfile::tempdir().unwrap();

    save_bundle(dir.path(), &p.volume, Some(&p.lesion)).unwrap();
    let b = load_bundle::<f32>(dir.path()).unwrap();
    assert_eq!(b.volume, p.volume);
    assert_eq!(b.ground_truth.as_ref(), Some(&p.lesion));

    let lm = slic3d(p.volume.require(SequenceKind::T2w).unwrap(), &SlicParams::with_segments(20)).unwrap();
    let lm_dir = dir.path().join("slic");
    save_label_map(&lm, &lm_dir).unwrap();
    assert_eq!(load_label_map(&lm_dir).unwrap(), lm);

    let oracle = SyntheticOracle::new(SyntheticParams::focused(p.lesion.clone(), SequenceKind::T2w, 10.0, 0.5)).unwrap();
    let rm = compute_relevance(&p.volume, &lm, &oracle, MethodFamily::Max, &SearchBudget::default()).unwrap();
    let rm_dir = dir.path().join("relmap");
    save_relevance(&rm, &rm_dir).unwrap();
    let first = std::fs::read(rm_dir.join("relmap.json")).unwrap();
    let back = load_relevance(&rm_dir).unwrap();
    assert_eq!(back.voxel_map(), rm.voxel_map());
    assert_eq!(back.raw_scores(), rm.raw_scores());
    save_relevance(&back, &rm_dir).unwrap();
    assert_eq!(std::fs::read(rm_dir.join("relmap.json")).unwrap(), first);
}
