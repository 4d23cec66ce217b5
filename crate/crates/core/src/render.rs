//! PNG montages of volume slices with optional mask or relevance overlays.
//!
//! Tiles are laid out row by row in a grid of `ceil(sqrt(n))` columns.
//! Intensities are scaled with the volume's global min and max. Relevance
//! overlays use [`heat_ramp`]: a 256-entry black-red-yellow-white ramp in
//! integer arithmetic, blended 50/50 with the gray base wherever the score is
//! nonzero. Mask overlays blend red 50/50 inside the mask and draw the
//! in-slice contour in solid red.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relevance::RelevanceMap;
use crate::scalar::Scalar;
use crate::volume::{BinaryMask, Dims, ScalarVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Z,
    Y,
    X,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" | "Z" => Ok(Axis::Z),
            "y" | "Y" => Ok(Axis::Y),
            "x" | "X" => Ok(Axis::X),
            other => Err(Error::validation(format!("unknown axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Overlay<'a> {
    None,
    Mask(&'a BinaryMask),
    Relevance(&'a RelevanceMap),
}

/// Color for ramp index `i`: red rises over the first third, green over the
/// second, blue over the last.
pub fn heat_ramp() -> [[u8; 3]; 256] {
    std::array::from_fn(|i| {
        let t = 3 * i as i32;
        [t, t - 255, t - 510].map(|c| c.clamp(0, 255) as u8)
    })
}

fn ramp_index(score: u8) -> usize {
    (score as usize * 255 + 50) / 100
}

struct SliceGeometry {
    rows: usize,
    cols: usize,
    count: usize,
}

fn geometry(dims: Dims, axis: Axis) -> SliceGeometry {
    match axis {
        Axis::Z => SliceGeometry { rows: dims.height, cols: dims.width, count: dims.depth },
        Axis::Y => SliceGeometry { rows: dims.depth, cols: dims.width, count: dims.height },
        Axis::X => SliceGeometry { rows: dims.depth, cols: dims.height, count: dims.width },
    }
}

fn voxel_index(dims: Dims, axis: Axis, slice: usize, r: usize, c: usize) -> usize {
    match axis {
        Axis::Z => dims.index(slice, r, c),
        Axis::Y => dims.index(r, slice, c),
        Axis::X => dims.index(r, c, slice),
    }
}

fn blend(a: u8, b: u8) -> u8 {
    ((a as u16 + b as u16 + 1) / 2) as u8
}

/// Renders the requested slices as one PNG; grayscale without overlay, RGBA with.
pub fn render_montage<T: Scalar>(
    v: &ScalarVolume<T>,
    overlay: Overlay<'_>,
    axis: Axis,
    slices: &[usize],
) -> Result<Vec<u8>> {
    let dims = v.dims();
    let g = geometry(dims, axis);
    if slices.is_empty() {
        return Err(Error::validation("no slices requested"));
    }
    if let Some(&bad) = slices.iter().find(|&&s| s >= g.count) {
        return Err(Error::OutOfRange { index: bad, limit: g.count });
    }
    match overlay {
        Overlay::Mask(m) => m.ensure_dims(dims)?,
        Overlay::Relevance(r) => crate::volume::ensure_dims(dims, r.label_map().dims())?,
        Overlay::None => {}
    }

    let n = slices.len();
    let grid_cols = (n as f64).sqrt().ceil() as usize;
    let grid_rows = n.div_ceil(grid_cols);
    let width = grid_cols * g.cols;
    let height = grid_rows * g.rows;
    let (lo, hi) = v.min_max();
    let (lo, hi) = (lo.as_f64(), hi.as_f64());
    let gray = |i: usize| -> u8 {
        if hi == lo {
            0
        } else {
            (255.0 * (v.data()[i].as_f64() - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8
        }
    };
    let ramp = heat_ramp();
    let channels = if matches!(overlay, Overlay::None) { 1 } else { 4 };
    let mut pixels = vec![0u8; width * height * channels];
    if channels == 4 {
        for px in pixels.chunks_exact_mut(4) {
            px[3] = 255;
        }
    }

    for (tile, &slice) in slices.iter().enumerate() {
        let (tr, tc) = (tile / grid_cols, tile % grid_cols);
        for r in 0..g.rows {
            for c in 0..g.cols {
                let i = voxel_index(dims, axis, slice, r, c);
                let base = gray(i);
                let rgb = match overlay {
                    Overlay::None => [base; 3],
                    Overlay::Relevance(rm) => {
                        let s = rm.voxel_map()[i];
                        if s == 0 {
                            [base; 3]
                        } else {
                            ramp[ramp_index(s)].map(|c| blend(base, c))
                        }
                    }
                    Overlay::Mask(m) => {
                        if !m.data()[i] {
                            [base; 3]
                        } else {
                            let inside = |rr: Option<usize>, cc: Option<usize>| match (rr, cc) {
                                (Some(rr), Some(cc)) if rr < g.rows && cc < g.cols => {
                                    m.data()[voxel_index(dims, axis, slice, rr, cc)]
                                }
                                _ => false,
                            };
                            let edge = !inside(r.checked_sub(1), Some(c))
                                || !inside(Some(r + 1), Some(c))
                                || !inside(Some(r), c.checked_sub(1))
                                || !inside(Some(r), Some(c + 1));
                            if edge {
                                [255, 0, 0]
                            } else {
                                [blend(base, 255), blend(base, 0), blend(base, 0)]
                            }
                        }
                    }
                };
                let y = tr * g.rows + r;
                let x = tc * g.cols + c;
                let at = (y * width + x) * channels;
                if channels == 1 {
                    pixels[at] = rgb[0];
                } else {
                    pixels[at..at + 3].copy_from_slice(&rgb);
                }
            }
        }
    }

    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(if channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgba });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&pixels)?;
        writer.finish()?;
    }
    Ok(out)
}
