//! Three-dimensional SLIC supervoxels.
//!
//! Clustering runs in the joint (intensity, z, y, x) space of one sequence.
//! Each center only competes for voxels inside a `(2S)^3` window around it,
//! where `S` is the nominal grid step, and the distance is
//! `sqrt(dc^2 + (ds / S)^2 * m^2)` with `m` the compactness.

use std::collections::VecDeque;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{ensure_dims, BinaryMask, Dims, ScalarVolume, SequenceKind};

const UNASSIGNED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub n_segments: usize,
    pub compactness: f64,
    pub max_iterations: usize,
    pub enforce_connectivity: bool,
    pub seed_sequence: SequenceKind,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            n_segments: 100,
            compactness: 0.1,
            max_iterations: 10,
            enforce_connectivity: true,
            seed_sequence: SequenceKind::T2w,
        }
    }
}

impl SlicParams {
    pub fn with_segments(n_segments: usize) -> Self {
        SlicParams {
            n_segments,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_segments < 1 {
            return Err(Error::validation("n_segments must be at least 1"));
        }
        if !(self.compactness.is_finite() && self.compactness > 0.0) {
            return Err(Error::validation(format!(
                "compactness must be positive, got {}",
                self.compactness
            )));
        }
        if self.max_iterations < 1 {
            return Err(Error::validation("max_iterations must be at least 1"));
        }
        Ok(())
    }
}

/// Partition of a voxel grid into `count` labelled superpixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelLabelMap {
    dims: Dims,
    labels: Vec<u32>,
    count: usize,
    params: Option<SlicParams>,
}

impl SuperpixelLabelMap {
    /// Wraps raw labels, checking that they cover `[0, K)` with every label used.
    pub fn new(dims: Dims, labels: Vec<u32>, params: Option<SlicParams>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::validation(format!(
                "label map {dims} needs {} labels, got {}",
                dims.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::validation("empty label map"));
        }
        let count = labels.iter().copied().max().unwrap_or(0) as usize + 1;
        let mut seen = vec![false; count];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::validation(format!(
                "label {missing} does not occur (labels must be compact in [0, {count}))"
            )));
        }
        Ok(SuperpixelLabelMap {
            dims,
            labels,
            count,
            params,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn params(&self) -> Option<&SlicParams> {
        self.params.as_ref()
    }

    pub fn label_at(&self, z: usize, y: usize, x: usize) -> u32 {
        self.labels[self.dims.index(z, y, x)]
    }

    /// Voxel indices of every superpixel, each list ascending.
    pub fn regions(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.count];
        for &l in &self.labels {
            out[l as usize] += 1;
        }
        out
    }

    /// True when every label's voxels form one 6-connected set.
    pub fn is_six_connected(&self) -> bool {
        let (comp, n_comp) = label_components(&self.labels, self.dims);
        if n_comp != self.count {
            return false;
        }
        // Exactly one component per label: check each label maps to a single component.
        let mut owner = vec![UNASSIGNED; self.count];
        for (l, c) in self.labels.iter().zip(&comp) {
            let slot = &mut owner[*l as usize];
            if *slot == UNASSIGNED {
                *slot = *c;
            } else if *slot != *c {
                return false;
            }
        }
        true
    }
}

/// Mask of the voxels carrying label `id`.
pub fn superpixel_mask(lm: &SuperpixelLabelMap, id: usize) -> Result<BinaryMask> {
    if id >= lm.count {
        return Err(Error::OutOfRange {
            index: id,
            limit: lm.count,
        });
    }
    let id = id as u32;
    BinaryMask::new(lm.dims, lm.labels.iter().map(|&l| l == id).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuperpixelStats {
    pub voxel_count: usize,
    pub mean_intensity: f64,
    /// `(z, y, x)` in voxel units.
    pub centroid: [f64; 3],
}

pub fn superpixel_stats<T: Scalar>(
    lm: &SuperpixelLabelMap,
    v: &ScalarVolume<T>,
) -> Result<Vec<SuperpixelStats>> {
    ensure_dims(lm.dims, v.dims())?;
    let mut acc = vec![[0.0f64; 4]; lm.count];
    let mut counts = vec![0usize; lm.count];
    for (i, (&l, &val)) in lm.labels.iter().zip(v.data()).enumerate() {
        let (z, y, x) = lm.dims.coords(i);
        let a = &mut acc[l as usize];
        a[0] += val.as_f64();
        a[1] += z as f64;
        a[2] += y as f64;
        a[3] += x as f64;
        counts[l as usize] += 1;
    }
    Ok(acc
        .into_iter()
        .zip(counts)
        .map(|(a, n)| {
            let nf = n as f64;
            SuperpixelStats {
                voxel_count: n,
                mean_intensity: a[0] / nf,
                centroid: [a[1] / nf, a[2] / nf, a[3] / nf],
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy)]
struct Center {
    intensity: f64,
    pos: [f64; 3],
}

/// Nominal grid step `round(cbrt(N / n_segments))`, at least 1.
pub fn grid_step(voxels: usize, n_segments: usize) -> usize {
    ((voxels as f64 / n_segments as f64).cbrt().round() as usize).max(1)
}

/// Seeds per axis: `round(dim / S)` clamped to `[1, dim]`, then thinned on the
/// most densely seeded axis until the product is at most `n_segments`.
fn seeds_per_axis(dims: Dims, step: usize, n_segments: usize) -> [usize; 3] {
    let d = dims.as_array();
    let mut c = d.map(|len| ((len as f64 / step as f64).round() as usize).clamp(1, len.max(1)));
    while c.iter().product::<usize>() > n_segments {
        let axis = (0..3)
            .filter(|&a| c[a] > 1)
            .min_by(|&a, &b| {
                let sa = d[a] as f64 / c[a] as f64;
                let sb = d[b] as f64 / c[b] as f64;
                sa.total_cmp(&sb)
            })
            .expect("product above n_segments >= 1 implies some axis has more than one seed");
        c[axis] -= 1;
    }
    c
}

fn initial_centers(intensity: &[f64], dims: Dims, step: usize, n_segments: usize) -> Vec<Center> {
    let counts = seeds_per_axis(dims, step, n_segments);
    let d = dims.as_array();
    let axis_pos = |a: usize, i: usize| (i as f64 + 0.5) * d[a] as f64 / counts[a] as f64 - 0.5;
    let mut centers = Vec::with_capacity(counts.iter().product());
    for iz in 0..counts[0] {
        for iy in 0..counts[1] {
            for ix in 0..counts[2] {
                let pos = [axis_pos(0, iz), axis_pos(1, iy), axis_pos(2, ix)];
                let r = pos.map(|p| p.round().max(0.0) as usize);
                let idx = dims.index(
                    r[0].min(d[0] - 1),
                    r[1].min(d[1] - 1),
                    r[2].min(d[2] - 1),
                );
                centers.push(Center {
                    intensity: intensity[idx],
                    pos,
                });
            }
        }
    }
    centers
}

fn window(center: f64, step: f64, len: usize) -> std::ops::RangeInclusive<usize> {
    let lo = (center - step).ceil().max(0.0) as usize;
    let hi = ((center + step).floor().max(0.0) as usize).min(len - 1);
    lo..=hi
}

/// Runs 3D SLIC on one sequence.
pub fn slic3d<T: Scalar>(v: &ScalarVolume<T>, params: &SlicParams) -> Result<SuperpixelLabelMap> {
    params.validate()?;
    let dims = v.dims();
    let n = dims.len();
    if n == 0 {
        return Err(Error::validation("cannot cluster an empty volume"));
    }
    if params.n_segments > n {
        return Err(Error::validation(format!(
            "n_segments {} exceeds voxel count {n}",
            params.n_segments
        )));
    }
    let (lo, hi) = v.min_max();
    if lo < T::zero() || hi > T::one() {
        warn!("SLIC input spans [{lo}, {hi}], expected a [0, 1]-normalized volume");
    }

    let intensity: Vec<f64> = v.data().iter().map(|x| x.as_f64()).collect();
    let step = grid_step(n, params.n_segments);
    let s = step as f64;
    let spatial_weight = (params.compactness / s).powi(2);
    let mut centers = initial_centers(&intensity, dims, step, params.n_segments);

    let mut labels = vec![UNASSIGNED; n];
    let mut dist = vec![f64::INFINITY; n];
    let [depth, height, width] = dims.as_array();

    for iter in 0..params.max_iterations {
        labels.fill(UNASSIGNED);
        dist.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            for z in window(c.pos[0], s, depth) {
                let dz = z as f64 - c.pos[0];
                for y in window(c.pos[1], s, height) {
                    let dy = y as f64 - c.pos[1];
                    let row = dims.index(z, y, 0);
                    for x in window(c.pos[2], s, width) {
                        let dx = x as f64 - c.pos[2];
                        let i = row + x;
                        let dc = intensity[i] - c.intensity;
                        let d = dc * dc + (dz * dz + dy * dy + dx * dx) * spatial_weight;
                        if d < dist[i] {
                            dist[i] = d;
                            labels[i] = k as u32;
                        }
                    }
                }
            }
        }
        // Voxels outside every window fall back to the globally nearest center.
        for i in 0..n {
            if labels[i] != UNASSIGNED {
                continue;
            }
            let (z, y, x) = dims.coords(i);
            let p = [z as f64, y as f64, x as f64];
            let mut best = (f64::INFINITY, 0u32);
            for (k, c) in centers.iter().enumerate() {
                let dc = intensity[i] - c.intensity;
                let ds2: f64 = (0..3).map(|a| (p[a] - c.pos[a]).powi(2)).sum();
                let d = dc * dc + ds2 * spatial_weight;
                if d < best.0 {
                    best = (d, k as u32);
                }
            }
            labels[i] = best.1;
        }

        let mut sums = vec![[0.0f64; 4]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            let (z, y, x) = dims.coords(i);
            let a = &mut sums[l as usize];
            a[0] += intensity[i];
            a[1] += z as f64;
            a[2] += y as f64;
            a[3] += x as f64;
            counts[l as usize] += 1;
        }
        let mut moved = 0.0;
        for ((c, a), &cnt) in centers.iter_mut().zip(&sums).zip(&counts) {
            if cnt == 0 {
                continue;
            }
            let nf = cnt as f64;
            let pos = [a[1] / nf, a[2] / nf, a[3] / nf];
            moved += (0..3).map(|ax| (pos[ax] - c.pos[ax]).powi(2)).sum::<f64>().sqrt();
            c.pos = pos;
            c.intensity = a[0] / nf;
        }
        let mean_move = moved / centers.len() as f64;
        debug!("slic iteration {iter}: mean center movement {mean_move:.4}");
        if mean_move < 0.5 {
            break;
        }
    }

    let labels = if params.enforce_connectivity {
        let min_size = (step * step * step) / 4;
        enforce_connectivity(&labels, dims, min_size, params.n_segments)
    } else {
        compact_labels(&labels)
    };
    SuperpixelLabelMap::new(dims, labels, Some(*params))
}

/// Renumbers labels to `[0, K)` in order of first appearance.
fn compact_labels(labels: &[u32]) -> Vec<u32> {
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut map = vec![UNASSIGNED; max + 1];
    let mut next = 0u32;
    labels
        .iter()
        .map(|&l| {
            let slot = &mut map[l as usize];
            if *slot == UNASSIGNED {
                *slot = next;
                next += 1;
            }
            *slot
        })
        .collect()
}

fn neighbors6(dims: Dims, i: usize) -> impl Iterator<Item = usize> {
    let (z, y, x) = dims.coords(i);
    let plane = dims.height * dims.width;
    let w = dims.width;
    [
        (z > 0).then(|| i - plane),
        (z + 1 < dims.depth).then(|| i + plane),
        (y > 0).then(|| i - w),
        (y + 1 < dims.height).then(|| i + w),
        (x > 0).then(|| i - 1),
        (x + 1 < dims.width).then(|| i + 1),
    ]
    .into_iter()
    .flatten()
}

/// 6-connected components of equal labels, numbered in scan order.
fn label_components(labels: &[u32], dims: Dims) -> (Vec<u32>, usize) {
    let mut comp = vec![UNASSIGNED; labels.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if comp[start] != UNASSIGNED {
            continue;
        }
        comp[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for j in neighbors6(dims, i) {
                if comp[j] == UNASSIGNED && labels[j] == labels[start] {
                    comp[j] = next;
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    (comp, next as usize)
}

struct Merger {
    parent: Vec<u32>,
    size: Vec<usize>,
    adjacent: Vec<Vec<u32>>,
    roots: usize,
}

impl Merger {
    fn find(&mut self, mut c: u32) -> u32 {
        while self.parent[c as usize] != c {
            let p = self.parent[c as usize];
            self.parent[c as usize] = self.parent[p as usize];
            c = p;
        }
        c
    }

    /// Largest adjacent group of root `r`; ties go to the lower root id.
    fn best_neighbor(&mut self, r: u32) -> Option<u32> {
        let adj = std::mem::take(&mut self.adjacent[r as usize]);
        let mut roots: Vec<u32> = adj.iter().map(|&a| self.find(a)).filter(|&a| a != r).collect();
        roots.sort_unstable();
        roots.dedup();
        self.adjacent[r as usize] = roots.clone();
        roots
            .into_iter()
            .max_by(|&a, &b| self.size[a as usize].cmp(&self.size[b as usize]).then(b.cmp(&a)))
    }

    fn merge_into(&mut self, small: u32, target: u32) {
        self.parent[small as usize] = target;
        self.size[target as usize] += self.size[small as usize];
        let moved = std::mem::take(&mut self.adjacent[small as usize]);
        self.adjacent[target as usize].extend(moved);
        self.roots -= 1;
    }
}

/// Merges components smaller than `min_size` into their largest neighbor, then
/// keeps merging the smallest component while more than `max_labels` remain.
fn enforce_connectivity(labels: &[u32], dims: Dims, min_size: usize, max_labels: usize) -> Vec<u32> {
    let (comp, n_comp) = label_components(labels, dims);
    let mut size = vec![0usize; n_comp];
    for &c in &comp {
        size[c as usize] += 1;
    }
    let mut adjacent = vec![Vec::new(); n_comp];
    let plane = dims.height * dims.width;
    for i in 0..comp.len() {
        let (z, y, x) = dims.coords(i);
        let forward = [
            (x + 1 < dims.width).then(|| i + 1),
            (y + 1 < dims.height).then(|| i + dims.width),
            (z + 1 < dims.depth).then(|| i + plane),
        ];
        for j in forward.into_iter().flatten() {
            let (a, b) = (comp[i], comp[j]);
            if a != b {
                adjacent[a as usize].push(b);
                adjacent[b as usize].push(a);
            }
        }
    }
    for adj in &mut adjacent {
        adj.sort_unstable();
        adj.dedup();
    }
    let mut m = Merger {
        parent: (0..n_comp as u32).collect(),
        size,
        adjacent,
        roots: n_comp,
    };

    for c in 0..n_comp as u32 {
        let r = m.find(c);
        if r != c || m.size[r as usize] >= min_size {
            continue;
        }
        if let Some(nb) = m.best_neighbor(r) {
            m.merge_into(r, nb);
        }
    }

    while m.roots > max_labels {
        let smallest = (0..n_comp as u32)
            .filter(|&c| m.parent[c as usize] == c)
            .min_by_key(|&c| (m.size[c as usize], c))
            .expect("at least one root");
        match m.best_neighbor(smallest) {
            Some(nb) => m.merge_into(smallest, nb),
            None => break,
        }
    }

    let roots: Vec<u32> = comp.iter().map(|&c| m.find(c)).collect();
    compact_labels(&roots)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(dims: Dims, v: f64) -> ScalarVolume<f64> {
        ScalarVolume::filled(dims, v)
    }

    #[test]
    fn seeds_never_exceed_request() {
        for (dims, n) in [
            (Dims::cube(64), 100),
            (Dims::cube(32), 250),
            (Dims::new(2, 100, 100), 1),
            (Dims::new(8, 8, 16), 2),
            (Dims::cube(128), 50),
        ] {
            let c = seeds_per_axis(dims, grid_step(dims.len(), n), n);
            assert!(c.iter().product::<usize>() <= n, "{dims} {n} {c:?}");
        }
    }

    #[test]
    fn uniform_cube_splits_into_balanced_blocks() {
        let params = SlicParams {
            n_segments: 8,
            compactness: 1.0,
            ..Default::default()
        };
        let lm = slic3d(&uniform(Dims::cube(8), 0.5), &params).unwrap();
        assert_eq!(lm.count(), 8);
        for s in lm.sizes() {
            assert!((32..=96).contains(&s), "size {s}");
        }
        assert!(lm.is_six_connected());
    }

    #[test]
    fn single_segment_covers_everything() {
        let lm = slic3d(&uniform(Dims::new(5, 6, 7), 0.3), &SlicParams::with_segments(1)).unwrap();
        assert_eq!(lm.count(), 1);
        assert!(lm.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn two_regions_follow_the_intensity_edge() {
        let dims = Dims::new(8, 8, 16);
        let data = (0..dims.len())
            .map(|i| if dims.coords(i).2 < 8 { 0.0 } else { 1.0 })
            .collect();
        let v = ScalarVolume::new(dims, data).unwrap();
        let params = SlicParams {
            n_segments: 2,
            compactness: 0.01,
            ..Default::default()
        };
        let lm = slic3d(&v, &params).unwrap();
        for side in [0..8usize, 8..16] {
            let mut hist = vec![0usize; lm.count()];
            let mut total = 0;
            for i in 0..dims.len() {
                if side.contains(&dims.coords(i).2) {
                    hist[lm.labels()[i] as usize] += 1;
                    total += 1;
                }
            }
            let agree = *hist.iter().max().unwrap();
            assert!(agree * 100 >= total * 95, "{hist:?}");
        }
    }

    #[test]
    fn errors_on_bad_requests() {
        let v = uniform(Dims::cube(2), 0.0);
        assert!(slic3d(&v, &SlicParams::with_segments(9)).is_err());
        assert!(slic3d(&v, &SlicParams::with_segments(0)).is_err());
        let bad = SlicParams {
            compactness: 0.0,
            ..Default::default()
        };
        assert!(slic3d(&v, &bad).is_err());
    }

    #[test]
    fn masks_partition_the_grid() {
        let dims = Dims::cube(6);
        let v = ScalarVolume::new(dims, (0..dims.len()).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let lm = slic3d(&v, &SlicParams::with_segments(8)).unwrap();
        let mut union = BinaryMask::empty(dims);
        for id in 0..lm.count() {
            let m = superpixel_mask(&lm, id).unwrap();
            assert_eq!(m.count(), lm.labels().iter().filter(|&&l| l as usize == id).count());
            assert_eq!(union.intersection_count(&m).unwrap(), 0);
            union = union.union(&m).unwrap();
        }
        assert_eq!(union, BinaryMask::full(dims));
        assert!(matches!(
            superpixel_mask(&lm, lm.count()),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn stats_aggregate_exactly() {
        let dims = Dims::new(2, 2, 4);
        let data: Vec<f64> = (0..16).map(|i| if i % 4 < 2 { 0.0 } else { 1.0 }).collect();
        let v = ScalarVolume::new(dims, data).unwrap();
        let single = SuperpixelLabelMap::new(dims, vec![0; 16], None).unwrap();
        let st = superpixel_stats(&single, &v).unwrap();
        assert_eq!(st[0].mean_intensity, v.mean());

        let halves: Vec<u32> = (0..16).map(|i| u32::from(i % 4 >= 2)).collect();
        let lm = SuperpixelLabelMap::new(dims, halves, None).unwrap();
        let st = superpixel_stats(&lm, &v).unwrap();
        assert_eq!(st[0].mean_intensity, 0.0);
        assert_eq!(st[1].mean_intensity, 1.0);
        assert_eq!(st.iter().map(|s| s.voxel_count).sum::<usize>(), 16);
        assert_eq!(st[0].centroid, [0.5, 0.5, 0.5]);

        let other = SuperpixelLabelMap::new(Dims::cube(2), vec![0; 8], None).unwrap();
        assert!(superpixel_stats(&other, &v).is_err());
    }

    #[test]
    fn label_map_rejects_gaps() {
        assert!(SuperpixelLabelMap::new(Dims::new(1, 1, 3), vec![0, 2, 2], None).is_err());
        assert!(SuperpixelLabelMap::new(Dims::new(1, 1, 3), vec![0, 1], None).is_err());
    }

    #[test]
    fn connectivity_pass_splits_disconnected_labels() {
        // Label 0 appears in two separate blocks of 4 voxels; min_size 1 keeps both.
        let dims = Dims::new(1, 1, 12);
        let labels = vec![0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0];
        let out = enforce_connectivity(&labels, dims, 1, 10);
        assert_eq!(out, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        // A singleton orphan merges into its larger neighbour.
        let labels = vec![0, 0, 0, 1, 2, 2, 2, 2, 2, 2, 2, 2];
        let out = enforce_connectivity(&labels, dims, 2, 10);
        assert_eq!(out, vec![0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1]);
        // Cap on the number of labels.
        let labels = vec![0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1];
        let out = enforce_connectivity(&labels, dims, 1, 3);
        assert_eq!(out.iter().copied().max().unwrap() + 1, 3);
        let lm = SuperpixelLabelMap::new(dims, out, None).unwrap();
        assert!(lm.is_six_connected());
    }
}
