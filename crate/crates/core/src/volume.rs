//! Multi-sequence MRI volumes, binary masks and the preprocessing applied
//! before anything is clustered or scored.
//!
//! All voxel buffers are stored in C order with `(z, y, x)` indexing, so `x`
//! varies fastest. This matches the on-disk layout of NIfTI files and the raw
//! bundle format, which keeps loading a straight copy.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// MRI sequence carried by one channel of a [`MultiSequenceVolume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SequenceKind {
    T1w,
    T1wCE,
    T2w,
    FLAIR,
}

impl SequenceKind {
    /// Fixed serialization and iteration order.
    pub const ALL: [SequenceKind; 4] = [
        SequenceKind::T1w,
        SequenceKind::T1wCE,
        SequenceKind::T2w,
        SequenceKind::FLAIR,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SequenceKind::T1w => "T1w",
            SequenceKind::T1wCE => "T1wCE",
            SequenceKind::T2w => "T2w",
            SequenceKind::FLAIR => "FLAIR",
        }
    }
}

impl fmt::Display for SequenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SequenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SequenceKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownSequence(s.to_string()))
    }
}

/// Voxel counts along `(depth, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Dims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(depth: usize, height: usize, width: usize) -> Self {
        Dims {
            depth,
            height,
            width,
        }
    }

    pub const fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.width;
        let y = (i / self.width) % self.height;
        let z = i / (self.width * self.height);
        (z, y, x)
    }

    fn ensure_same(&self, other: Dims) -> Result<()> {
        if *self == other {
            Ok(())
        } else {
            Err(Error::DimsMismatch {
                expected: *self,
                found: other,
            })
        }
    }
}

impl From<[usize; 3]> for Dims {
    fn from(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }
}

impl From<Dims> for [usize; 3] {
    fn from(d: Dims) -> Self {
        d.as_array()
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.depth, self.height, self.width)
    }
}

/// A single 3D intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> ScalarVolume<T> {
    /// Builds a volume, rejecting length mismatches and non-finite voxels.
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::validation(format!(
                "volume {dims} needs {} voxels, got {}",
                dims.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite voxel at index {i} ({:?})",
                dims.coords(i)
            )));
        }
        Ok(ScalarVolume { dims, data })
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        ScalarVolume {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for in-crate writers that preserve finiteness.
    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.dims.index(z, y, x)]
    }

    /// `(min, max)` over all voxels. Volumes are never empty once built with
    /// nonzero dims; an empty volume yields `(0, 0)`.
    pub fn min_max(&self) -> (T, T) {
        let mut it = self.data.iter().copied();
        let Some(first) = it.next() else {
            return (T::zero(), T::zero());
        };
        it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Result<ScalarVolume<U>> {
        ScalarVolume::new(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Aligned set of sequences sharing one voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSequenceVolume<T> {
    dims: Dims,
    sequences: [Option<ScalarVolume<T>>; 4],
}

impl<T: Scalar> MultiSequenceVolume<T> {
    /// Collects sequences; all must share dims and at least one is required.
    pub fn new(sequences: impl IntoIterator<Item = (SequenceKind, ScalarVolume<T>)>) -> Result<Self> {
        let mut slots: [Option<ScalarVolume<T>>; 4] = Default::default();
        let mut dims: Option<Dims> = None;
        for (kind, vol) in sequences {
            match dims {
                Some(d) => d.ensure_same(vol.dims())?,
                None => dims = Some(vol.dims()),
            }
            if slots[kind.index()].is_some() {
                return Err(Error::validation(format!("sequence {kind} given twice")));
            }
            slots[kind.index()] = Some(vol);
        }
        let dims = dims.ok_or_else(|| Error::validation("no sequences given"))?;
        Ok(MultiSequenceVolume {
            dims,
            sequences: slots,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn get(&self, kind: SequenceKind) -> Option<&ScalarVolume<T>> {
        self.sequences[kind.index()].as_ref()
    }

    pub(crate) fn get_mut(&mut self, kind: SequenceKind) -> Option<&mut ScalarVolume<T>> {
        self.sequences[kind.index()].as_mut()
    }

    /// Looks up a sequence, failing with a validation error naming it.
    pub fn require(&self, kind: SequenceKind) -> Result<&ScalarVolume<T>> {
        self.get(kind)
            .ok_or_else(|| Error::validation(format!("sequence {kind} is missing")))
    }

    pub fn is_complete(&self) -> bool {
        self.sequences.iter().all(Option::is_some)
    }

    pub fn ensure_complete(&self) -> Result<()> {
        match SequenceKind::ALL.into_iter().find(|k| self.get(*k).is_none()) {
            None => Ok(()),
            Some(k) => Err(Error::validation(format!(
                "volume is incomplete: sequence {k} is missing"
            ))),
        }
    }

    /// Present sequences in the fixed order.
    pub fn iter(&self) -> impl Iterator<Item = (SequenceKind, &ScalarVolume<T>)> {
        SequenceKind::ALL
            .into_iter()
            .filter_map(move |k| self.get(k).map(|v| (k, v)))
    }

    pub fn map_sequences<U: Scalar>(
        &self,
        mut f: impl FnMut(SequenceKind, &ScalarVolume<T>) -> Result<ScalarVolume<U>>,
    ) -> Result<MultiSequenceVolume<U>> {
        let mapped = self
            .iter()
            .map(|(k, v)| f(k, v).map(|out| (k, out)))
            .collect::<Result<Vec<_>>>()?;
        MultiSequenceVolume::new(mapped)
    }
}

/// One flag per voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::validation(format!(
                "mask {dims} needs {} voxels, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(BinaryMask { dims, data })
    }

    pub fn empty(dims: Dims) -> Self {
        BinaryMask {
            dims,
            data: vec![false; dims.len()],
        }
    }

    pub fn full(dims: Dims) -> Self {
        BinaryMask {
            dims,
            data: vec![true; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let data = (0..dims.len())
            .map(|i| {
                let (z, y, x) = dims.coords(i);
                f(z, y, x)
            })
            .collect();
        BinaryMask { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.dims.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, value: bool) {
        let i = self.dims.index(z, y, x);
        self.data[i] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Linear indices of set voxels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.dims.ensure_same(other.dims)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count())
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.dims.ensure_same(other.dims)?;
        Ok(BinaryMask {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        })
    }

    pub fn ensure_dims(&self, dims: Dims) -> Result<()> {
        dims.ensure_same(self.dims)
    }
}

pub(crate) fn ensure_dims(expected: Dims, found: Dims) -> Result<()> {
    expected.ensure_same(found)
}

/// Rescales intensities to `[0, 1]`. A constant volume maps to all zeros.
pub fn min_max_normalize<T: Scalar>(v: &ScalarVolume<T>) -> Result<ScalarVolume<T>> {
    if v.data.is_empty() {
        return Err(Error::validation("cannot normalize an empty volume"));
    }
    if let Some(i) = v.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::validation(format!("non-finite voxel at index {i}")));
    }
    let (lo, hi) = v.min_max();
    if lo == hi {
        warn!("constant volume ({lo}); normalized to zeros");
        return Ok(ScalarVolume::filled(v.dims, T::zero()));
    }
    let range = hi - lo;
    let data = v
        .data
        .iter()
        .map(|&x| ((x - lo) / range).max(T::zero()).min(T::one()))
        .collect();
    Ok(ScalarVolume { dims: v.dims, data })
}

/// Normalizes every present sequence independently.
pub fn normalize_all<T: Scalar>(mv: &MultiSequenceVolume<T>) -> Result<MultiSequenceVolume<T>> {
    mv.map_sequences(|_, v| min_max_normalize(v))
}

/// Start offsets of a centered crop: `floor((src - tgt) / 2)` per axis.
pub fn crop_start(source: Dims, target: Dims) -> Result<Dims> {
    if target.depth > source.depth || target.height > source.height || target.width > source.width
    {
        return Err(Error::CropTooLarge { volume: source, target });
    }
    Ok(Dims::new(
        (source.depth - target.depth) / 2,
        (source.height - target.height) / 2,
        (source.width - target.width) / 2,
    ))
}

fn crop_buffer<V: Copy>(src: &[V], source: Dims, target: Dims, start: Dims) -> Vec<V> {
    let mut out = Vec::with_capacity(target.len());
    for z in 0..target.depth {
        for y in 0..target.height {
            let row = source.index(z + start.depth, y + start.height, start.width);
            out.extend_from_slice(&src[row..row + target.width]);
        }
    }
    out
}

pub fn center_crop<T: Scalar>(v: &ScalarVolume<T>, target: Dims) -> Result<ScalarVolume<T>> {
    let start = crop_start(v.dims, target)?;
    Ok(ScalarVolume {
        dims: target,
        data: crop_buffer(&v.data, v.dims, target, start),
    })
}

pub fn center_crop_mask(m: &BinaryMask, target: Dims) -> Result<BinaryMask> {
    let start = crop_start(m.dims, target)?;
    Ok(BinaryMask {
        dims: target,
        data: crop_buffer(&m.data, m.dims, target, start),
    })
}

pub fn center_crop_all<T: Scalar>(
    mv: &MultiSequenceVolume<T>,
    target: Dims,
) -> Result<MultiSequenceVolume<T>> {
    mv.map_sequences(|_, v| center_crop(v, target))
}

/// Which of the two preprocessing steps runs first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreprocessOrder {
    #[default]
    CropThenNormalize,
    NormalizeThenCrop,
}

impl FromStr for PreprocessOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crop-then-normalize" => Ok(PreprocessOrder::CropThenNormalize),
            "normalize-then-crop" => Ok(PreprocessOrder::NormalizeThenCrop),
            other => Err(Error::validation(format!("unknown preprocessing order {other:?}"))),
        }
    }
}

/// Per-sequence min-max normalization plus an optional center crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocess {
    pub order: PreprocessOrder,
    pub crop: Option<Dims>,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            order: PreprocessOrder::CropThenNormalize,
            crop: Some(Dims::cube(128)),
        }
    }
}

impl Preprocess {
    pub fn apply<T: Scalar>(&self, mv: &MultiSequenceVolume<T>) -> Result<MultiSequenceVolume<T>> {
        let Some(target) = self.crop else {
            return normalize_all(mv);
        };
        match self.order {
            PreprocessOrder::CropThenNormalize => normalize_all(&center_crop_all(mv, target)?),
            PreprocessOrder::NormalizeThenCrop => center_crop_all(&normalize_all(mv)?, target),
        }
    }

    pub fn apply_mask(&self, m: &BinaryMask) -> Result<BinaryMask> {
        match self.crop {
            Some(target) => center_crop_mask(m, target),
            None => Ok(m.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(data: &[f64]) -> ScalarVolume<f64> {
        ScalarVolume::new(Dims::new(1, 1, data.len()), data.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(min_max_normalize(&vol(&[0.0, 5.0, 10.0])).unwrap().data(), &[0.0, 0.5, 1.0]);
        assert_eq!(min_max_normalize(&vol(&[3.0, 3.0, 3.0])).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(min_max_normalize(&vol(&[-2.0, 0.0, 2.0])).unwrap().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(ScalarVolume::new(Dims::new(1, 1, 2), vec![0.0f32, f32::NAN]).is_err());
        let bad = ScalarVolume {
            dims: Dims::new(1, 1, 2),
            data: vec![0.0f64, f64::INFINITY],
        };
        assert!(matches!(min_max_normalize(&bad), Err(Error::Validation(_))));
    }

    #[test]
    fn normalize_all_is_per_sequence() {
        let mv = MultiSequenceVolume::new([
            (SequenceKind::T1w, vol(&[0.0, 10.0])),
            (SequenceKind::T2w, vol(&[0.0, 2.0])),
        ])
        .unwrap();
        let out = normalize_all(&mv).unwrap();
        assert_eq!(out.get(SequenceKind::T1w).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(out.get(SequenceKind::T2w).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(out.dims(), mv.dims());

        let single = MultiSequenceVolume::new([(SequenceKind::FLAIR, vol(&[1.0, 4.0, 7.0]))]).unwrap();
        let out = normalize_all(&single).unwrap();
        assert_eq!(
            out.get(SequenceKind::FLAIR).unwrap(),
            &min_max_normalize(single.get(SequenceKind::FLAIR).unwrap()).unwrap()
        );

        let unit = MultiSequenceVolume::new([(SequenceKind::T2w, vol(&[0.0, 0.25, 1.0]))]).unwrap();
        assert_eq!(normalize_all(&unit).unwrap(), unit);
    }

    #[test]
    fn crop_start_brats() {
        let start = crop_start(Dims::new(240, 240, 155), Dims::cube(128)).unwrap();
        assert_eq!(start, Dims::new(56, 56, 13));
        assert_eq!(crop_start(Dims::cube(5), Dims::cube(3)).unwrap(), Dims::cube(1));
        assert!(matches!(
            crop_start(Dims::cube(5), Dims::new(3, 6, 3)),
            Err(Error::CropTooLarge { .. })
        ));
    }

    #[test]
    fn crop_matches_brute_force_indexing() {
        let src = Dims::new(9, 7, 6);
        let v = ScalarVolume::new(src, (0..src.len()).map(|i| i as f32).collect()).unwrap();
        let target = Dims::new(4, 4, 3);
        let out = center_crop(&v, target).unwrap();
        let (sz, sy, sx) = ((9 - 4) / 2, (7 - 4) / 2, (6 - 3) / 2);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..3 {
                    assert_eq!(out.get(z, y, x), v.get(z + sz, y + sy, x + sx));
                }
            }
        }
        assert_eq!(center_crop(&v, src).unwrap(), v);
    }

    #[test]
    fn sequence_names_parse() {
        for k in SequenceKind::ALL {
            assert_eq!(k.name().parse::<SequenceKind>().unwrap(), k);
        }
        assert!(matches!("T3w".parse::<SequenceKind>(), Err(Error::UnknownSequence(_))));
    }
}
