//! Minimal read-only NIfTI-1 support.
//!
//! Only the fields needed to pull out a 3D voxel grid are interpreted:
//! `sizeof_hdr`, `dim`, `datatype`, `bitpix`, `vox_offset`, `scl_slope`,
//! `scl_inter` and `magic`. Orientation is ignored; the grid is taken as
//! stored. NIfTI stores `x` fastest, which is exactly C order over
//! `(z, y, x)`, so voxels are copied without reordering.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use log::debug;

use super::read_file;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{BinaryMask, Dims, ScalarVolume, SequenceKind};

const HEADER_SIZE: usize = 348;
const MAGIC_OFFSET: usize = 344;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Float32,
    Float64,
}

impl NiftiDatatype {
    fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(NiftiDatatype::Uint8),
            4 => Some(NiftiDatatype::Int16),
            16 => Some(NiftiDatatype::Float32),
            64 => Some(NiftiDatatype::Float64),
            _ => None,
        }
    }

    pub fn bits(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 8,
            NiftiDatatype::Int16 => 16,
            NiftiDatatype::Float32 => 32,
            NiftiDatatype::Float64 => 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub little_endian: bool,
    pub dims: Dims,
    pub datatype: NiftiDatatype,
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

fn err(field: &'static str, offset: usize, message: impl Into<String>) -> Error {
    Error::Nifti {
        field,
        offset,
        message: message.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    le: bool,
}

impl Reader<'_> {
    fn take<const N: usize>(&self, offset: usize) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[offset..offset + N]);
        out
    }

    fn i16(&self, offset: usize) -> i16 {
        let b = self.take::<2>(offset);
        if self.le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }

    fn f32(&self, offset: usize) -> f32 {
        let b = self.take::<4>(offset);
        if self.le {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    }

    fn f64(&self, offset: usize) -> f64 {
        let b = self.take::<8>(offset);
        if self.le {
            f64::from_le_bytes(b)
        } else {
            f64::from_be_bytes(b)
        }
    }
}

fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(err(
            "sizeof_hdr",
            0,
            format!("file has {} bytes, header needs {HEADER_SIZE}", bytes.len()),
        ));
    }
    let raw = [bytes[0], bytes[1], bytes[2], bytes[3]];
    let le = if i32::from_le_bytes(raw) == HEADER_SIZE as i32 {
        true
    } else if i32::from_be_bytes(raw) == HEADER_SIZE as i32 {
        false
    } else {
        return Err(err("sizeof_hdr", 0, "expected 348 in either byte order"));
    };
    let r = Reader { bytes, le };

    let magic = &bytes[MAGIC_OFFSET..MAGIC_OFFSET + 4];
    if magic != b"n+1\0" {
        return Err(err(
            "magic",
            MAGIC_OFFSET,
            format!("expected \"n+1\\0\", found {magic:?}"),
        ));
    }

    let rank = r.i16(40);
    if rank != 3 {
        return Err(err("dim", 40, format!("dim[0] is {rank}, only 3D volumes are supported")));
    }
    let mut extent = [0usize; 3];
    for (a, e) in extent.iter_mut().enumerate() {
        let off = 42 + 2 * a;
        let v = r.i16(off);
        if v < 1 {
            return Err(err("dim", off, format!("dim[{}] is {v}", a + 1)));
        }
        *e = v as usize;
    }
    let code = r.i16(70);
    let datatype = NiftiDatatype::from_code(code)
        .ok_or_else(|| err("datatype", 70, format!("unsupported datatype code {code}")))?;
    let bitpix = r.i16(72);
    if bitpix != datatype.bits() {
        return Err(err(
            "bitpix",
            72,
            format!("bitpix {bitpix} does not match {datatype:?}"),
        ));
    }
    let vox_offset = r.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(err("vox_offset", 108, format!("invalid vox_offset {vox_offset}")));
    }
    Ok(NiftiHeader {
        little_endian: le,
        dims: Dims::new(extent[2], extent[1], extent[0]),
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope: r.f32(112),
        scl_inter: r.f32(116),
    })
}

fn maybe_gunzip(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| err("gzip", 0, e.to_string()))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Parses an in-memory `.nii` or `.nii.gz` image into header and raw voxel values.
pub fn parse_nifti(bytes: Vec<u8>) -> Result<(NiftiHeader, Vec<f64>)> {
    let bytes = maybe_gunzip(bytes)?;
    let header = parse_header(&bytes)?;
    let n = header.dims.len();
    let width = header.datatype.bits() as usize / 8;
    let end = header.vox_offset + n * width;
    if bytes.len() < end {
        return Err(err(
            "vox_offset",
            108,
            format!("data truncated: need {end} bytes, file has {}", bytes.len()),
        ));
    }
    let r = Reader {
        bytes: &bytes,
        le: header.little_endian,
    };
    let base = header.vox_offset;
    let mut values: Vec<f64> = (0..n)
        .map(|i| {
            let off = base + i * width;
            match header.datatype {
                NiftiDatatype::Uint8 => f64::from(bytes[off]),
                NiftiDatatype::Int16 => f64::from(r.i16(off)),
                NiftiDatatype::Float32 => f64::from(r.f32(off)),
                NiftiDatatype::Float64 => r.f64(off),
            }
        })
        .collect();
    let slope = f64::from(header.scl_slope);
    if slope != 0.0 && slope.is_finite() {
        let inter = f64::from(header.scl_inter);
        let inter = if inter.is_finite() { inter } else { 0.0 };
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    Ok((header, values))
}

/// Loads one sequence from a NIfTI-1 file.
pub fn load_nifti<T: Scalar>(path: &Path, sequence: SequenceKind) -> Result<ScalarVolume<T>> {
    let (header, values) = parse_nifti(read_file(path)?)?;
    debug!(
        "{sequence}: {} {:?} from {}",
        header.dims,
        header.datatype,
        path.display()
    );
    ScalarVolume::new(header.dims, values.into_iter().map(T::from_f64_lossy).collect())
        .map_err(|e| Error::validation(format!("{sequence} ({}): {e}", path.display())))
}

/// Loads a label image as a mask of nonzero voxels.
pub fn load_nifti_mask(path: &Path) -> Result<BinaryMask> {
    let (header, values) = parse_nifti(read_file(path)?)?;
    BinaryMask::new(header.dims, values.into_iter().map(|v| v > 0.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(datatype: i16, bitpix: i16, dims: [i16; 3]) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        h[40..42].copy_from_slice(&3i16.to_le_bytes());
        for (a, d) in dims.iter().enumerate() {
            h[42 + 2 * a..44 + 2 * a].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        h[72..74].copy_from_slice(&bitpix.to_le_bytes());
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h
    }

    #[test]
    fn minimal_float32() {
        let mut f = header(16, 32, [2, 2, 2]);
        for i in 0..8 {
            f.extend_from_slice(&(i as f32 * 0.5).to_le_bytes());
        }
        let (h, v) = parse_nifti(f).unwrap();
        assert_eq!(h.dims, Dims::cube(2));
        assert_eq!(v.len(), 8);
        assert_eq!(v[7], 3.5);
    }

    #[test]
    fn zeroed_magic_names_field() {
        let mut f = header(16, 32, [1, 1, 1]);
        f.extend_from_slice(&0f32.to_le_bytes());
        f[344..348].fill(0);
        match parse_nifti(f) {
            Err(Error::Nifti { field, offset, .. }) => assert_eq!((field, offset), ("magic", 344)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn int16_widens_losslessly() {
        let mut f = header(4, 16, [2, 1, 1]);
        f.extend_from_slice(&0i16.to_le_bytes());
        f.extend_from_slice(&100i16.to_le_bytes());
        let (_, v) = parse_nifti(f).unwrap();
        assert_eq!(v, vec![0.0, 100.0]);
    }

    #[test]
    fn rejects_bad_rank_and_type() {
        let mut f = header(16, 32, [1, 1, 1]);
        f[40..42].copy_from_slice(&4i16.to_le_bytes());
        assert!(matches!(parse_nifti(f), Err(Error::Nifti { field: "dim", .. })));
        let f = header(512, 16, [1, 1, 1]);
        assert!(matches!(parse_nifti(f), Err(Error::Nifti { field: "datatype", .. })));
    }

    #[test]
    fn slope_and_intercept_apply() {
        let mut f = header(2, 8, [3, 1, 1]);
        f[112..116].copy_from_slice(&2f32.to_le_bytes());
        f[116..120].copy_from_slice(&(-1f32).to_le_bytes());
        f.extend_from_slice(&[0, 1, 5]);
        let (_, v) = parse_nifti(f).unwrap();
        assert_eq!(v, vec![-1.0, 1.0, 9.0]);
    }
}
