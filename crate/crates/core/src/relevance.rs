//! Relevance maps: how much perturbing each superpixel moves the classifier.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::classifier::Oracle;
use crate::error::{Error, Result};
use crate::perturbation::{
    fill_values, search_fill, write_region, FillVector, PerturbationMethod, SearchBudget,
};
use crate::scalar::Scalar;
use crate::superpixel::SuperpixelLabelMap;
use crate::volume::{ensure_dims, BinaryMask, MultiSequenceVolume, SequenceKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodFamily {
    Blank,
    Min,
    Max,
    Optimal,
}

impl MethodFamily {
    pub const TRIVIAL: [MethodFamily; 3] = [MethodFamily::Blank, MethodFamily::Min, MethodFamily::Max];

    pub fn name(self) -> &'static str {
        match self {
            MethodFamily::Blank => "blank",
            MethodFamily::Min => "min",
            MethodFamily::Max => "max",
            MethodFamily::Optimal => "optimal",
        }
    }

    fn trivial_method(self) -> Option<PerturbationMethod> {
        match self {
            MethodFamily::Blank => Some(PerturbationMethod::Blank),
            MethodFamily::Min => Some(PerturbationMethod::Min),
            MethodFamily::Max => Some(PerturbationMethod::Max),
            MethodFamily::Optimal => None,
        }
    }
}

impl fmt::Display for MethodFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "blank" => Ok(MethodFamily::Blank),
            "min" => Ok(MethodFamily::Min),
            "max" => Ok(MethodFamily::Max),
            "optimal" => Ok(MethodFamily::Optimal),
            other => Err(Error::validation(format!("unknown perturbation method {other:?}"))),
        }
    }
}

/// Per-superpixel confidence changes and their 0-100 voxel rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    labels: SuperpixelLabelMap,
    raw_scores: Vec<f64>,
    normalized_scores: Vec<u8>,
    voxel_map: Vec<u8>,
    method: MethodFamily,
    p_original: f64,
    fills: Option<Vec<FillVector>>,
    oracle: String,
}

impl RelevanceMap {
    /// Builds a map from raw `|p - p'|` scores, one per superpixel.
    pub fn from_raw(
        labels: SuperpixelLabelMap,
        raw_scores: Vec<f64>,
        method: MethodFamily,
        p_original: f64,
        fills: Option<Vec<FillVector>>,
        oracle: String,
    ) -> Result<Self> {
        if raw_scores.len() != labels.count() {
            return Err(Error::validation(format!(
                "{} raw scores for {} superpixels",
                raw_scores.len(),
                labels.count()
            )));
        }
        if let Some(v) = raw_scores.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::validation(format!("raw score {v} outside [0, 1]")));
        }
        if let Some(f) = &fills {
            if f.len() != labels.count() {
                return Err(Error::validation("one fill vector per superpixel required"));
            }
        }
        let normalized_scores = normalize_scores(&raw_scores);
        let voxel_map = labels
            .labels()
            .iter()
            .map(|&l| normalized_scores[l as usize])
            .collect();
        Ok(RelevanceMap {
            labels,
            raw_scores,
            normalized_scores,
            voxel_map,
            method,
            p_original,
            fills,
            oracle,
        })
    }

    pub fn label_map(&self) -> &SuperpixelLabelMap {
        &self.labels
    }

    pub fn raw_scores(&self) -> &[f64] {
        &self.raw_scores
    }

    pub fn normalized_scores(&self) -> &[u8] {
        &self.normalized_scores
    }

    pub fn voxel_map(&self) -> &[u8] {
        &self.voxel_map
    }

    pub fn method(&self) -> MethodFamily {
        self.method
    }

    pub fn p_original(&self) -> f64 {
        self.p_original
    }

    /// Winning fill per superpixel, for optimal-fill maps.
    pub fn fills(&self) -> Option<&[FillVector]> {
        self.fills.as_deref()
    }

    pub fn oracle(&self) -> &str {
        &self.oracle
    }

    pub fn count(&self) -> usize {
        self.raw_scores.len()
    }

    /// All raw scores equal: nothing distinguishes one superpixel from another.
    pub fn is_uninformative(&self) -> bool {
        match self.raw_scores.first() {
            Some(first) => self.raw_scores.iter().all(|v| v == first),
            None => true,
        }
    }
}

/// `round(100 * (x - min) / (max - min))`, half rounded up; all zeros when
/// every value is equal.
pub fn normalize_scores(raw: &[f64]) -> Vec<u8> {
    let Some(&first) = raw.first() else {
        return Vec::new();
    };
    let (lo, hi) = raw
        .iter()
        .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo == hi {
        return vec![0; raw.len()];
    }
    raw.iter()
        .map(|&v| (100.0 * (v - lo) / (hi - lo) + 0.5).floor().clamp(0.0, 100.0) as u8)
        .collect()
}

/// Superpixel ids ordered by raw score, highest first; ties keep lower ids first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelRanking(pub Vec<usize>);

pub fn rank_superpixels(relmap: &RelevanceMap) -> SuperpixelRanking {
    let raw = &relmap.raw_scores;
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
    SuperpixelRanking(order)
}

/// Voxels whose normalized score is at least `t` (`t` in `0..=100`).
pub fn threshold_mask(relmap: &RelevanceMap, t: u8) -> Result<BinaryMask> {
    if t > 100 {
        return Err(Error::validation(format!("threshold {t} outside 0..=100")));
    }
    BinaryMask::new(
        relmap.labels.dims(),
        relmap.voxel_map.iter().map(|&s| s >= t).collect(),
    )
}

/// Scores every superpixel of `lm` by perturbing it with `method`.
pub fn compute_relevance<T: Scalar, O: Oracle<T>>(
    mv: &MultiSequenceVolume<T>,
    lm: &SuperpixelLabelMap,
    oracle: &O,
    method: MethodFamily,
    budget: &SearchBudget,
) -> Result<RelevanceMap> {
    let order: Vec<usize> = (0..lm.count()).collect();
    compute_relevance_in_order(mv, lm, oracle, method, budget, &order)
}

/// As [`compute_relevance`], visiting superpixels in `order`. The result
/// does not depend on the order; it only changes scheduling.
pub fn compute_relevance_in_order<T: Scalar, O: Oracle<T>>(
    mv: &MultiSequenceVolume<T>,
    lm: &SuperpixelLabelMap,
    oracle: &O,
    method: MethodFamily,
    budget: &SearchBudget,
    order: &[usize],
) -> Result<RelevanceMap> {
    ensure_dims(mv.dims(), lm.dims())?;
    mv.ensure_complete()?;
    budget.validate()?;
    let k = lm.count();
    let mut seen = vec![false; k];
    for &id in order {
        if id >= k || std::mem::replace(&mut seen[id], true) {
            return Err(Error::validation("processing order must be a permutation of the superpixel ids"));
        }
    }
    if order.len() != k {
        return Err(Error::validation("processing order must be a permutation of the superpixel ids"));
    }

    let p_original = oracle.score(mv).map_err(|e| Error::Oracle {
        superpixel: None,
        source: e,
    })?;
    let p_original = p_original.probability();
    let regions = lm.regions();
    let trivial = method.trivial_method().map(|m| fill_values(mv, &m));

    let workers = oracle.max_in_flight().clamp(1, k);
    let cursor = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<(f64, Option<FillVector>)>>>> =
        Mutex::new((0..k).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let mut work = trivial.as_ref().map(|_| mv.clone());
                loop {
                    if abort.load(Ordering::Relaxed) {
                        break;
                    }
                    let pos = cursor.fetch_add(1, Ordering::Relaxed);
                    let Some(&id) = order.get(pos) else { break };
                    let region = &regions[id];
                    let result = match (&trivial, work.as_mut()) {
                        (Some(values), Some(work)) => {
                            score_trivial(mv, work, region, values, oracle, p_original, id)
                        }
                        _ => search_fill(mv, region, oracle, budget, p_original)
                            .map(|r| (r.outcome.delta, Some(r.fill)))
                            .map_err(|e| attach_superpixel(e, id)),
                    };
                    if result.is_err() {
                        abort.store(true, Ordering::Relaxed);
                    }
                    slots.lock().unwrap_or_else(|e| e.into_inner())[id] = Some(result);
                }
            });
        }
    });

    let slots = slots.into_inner().unwrap_or_else(|e| e.into_inner());
    let mut raw = Vec::with_capacity(k);
    let mut fills = Vec::with_capacity(k);
    let mut first_err = None;
    for slot in slots {
        match slot {
            Some(Ok((delta, fill))) => {
                raw.push(delta);
                fills.push(fill.unwrap_or([0.0; 4]));
            }
            Some(Err(e)) => {
                first_err.get_or_insert(e);
            }
            None => {}
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    debug!("relevance: {k} superpixels, p_original {p_original}");
    RelevanceMap::from_raw(
        lm.clone(),
        raw,
        method,
        p_original,
        (method == MethodFamily::Optimal).then_some(fills),
        oracle.identity(),
    )
}

fn attach_superpixel(e: Error, id: usize) -> Error {
    match e {
        Error::Oracle { source, .. } => Error::Oracle {
            superpixel: Some(id),
            source,
        },
        other => other,
    }
}

fn score_trivial<T: Scalar, O: Oracle<T>>(
    original: &MultiSequenceVolume<T>,
    work: &mut MultiSequenceVolume<T>,
    region: &[usize],
    values: &[Option<T>; 4],
    oracle: &O,
    p_original: f64,
    id: usize,
) -> Result<(f64, Option<FillVector>)> {
    write_region(work, region, values);
    let scored = oracle.score(work);
    // Restore the region so the buffer can be reused for the next superpixel.
    for kind in SequenceKind::ALL {
        if let (Some(src), Some(dst)) = (original.get(kind), work.get_mut(kind)) {
            let (src, dst) = (src.data(), dst.data_mut());
            for &i in region {
                dst[i] = src[i];
            }
        }
    }
    let p = scored.map_err(|e| Error::Oracle {
        superpixel: Some(id),
        source: e,
    })?;
    Ok(((p_original - p.probability()).abs(), None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn map_with(raw: Vec<f64>) -> RelevanceMap {
        let k = raw.len();
        let dims = Dims::new(1, 1, k);
        let lm = SuperpixelLabelMap::new(dims, (0..k as u32).collect(), None).unwrap();
        RelevanceMap::from_raw(lm, raw, MethodFamily::Blank, 0.9, None, "test".into()).unwrap()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_scores(&[0.2, 0.2]), vec![0, 0]);
        assert_eq!(normalize_scores(&[0.0, 1.0]), vec![0, 100]);
        assert_eq!(normalize_scores(&[0.1, 0.3, 0.5]), vec![0, 50, 100]);
        assert_eq!(normalize_scores(&[0.0, 0.005, 1.0]), vec![0, 1, 100]);
    }

    #[test]
    fn single_superpixel_is_uninformative() {
        let m = map_with(vec![0.4]);
        assert_eq!(m.normalized_scores(), &[0]);
        assert!(m.is_uninformative());
    }

    #[test]
    fn ranking_rules() {
        assert_eq!(rank_superpixels(&map_with(vec![0.5, 0.9, 0.1])).0, vec![1, 0, 2]);
        assert_eq!(rank_superpixels(&map_with(vec![0.3; 4])).0, vec![0, 1, 2, 3]);
        assert_eq!(rank_superpixels(&map_with(vec![0.3])).0, vec![0]);
    }

    #[test]
    fn thresholds() {
        let m = map_with(vec![0.1, 0.3, 0.5]);
        assert_eq!(threshold_mask(&m, 0).unwrap().count(), 3);
        assert_eq!(threshold_mask(&m, 100).unwrap().indices(), vec![2]);
        assert!(threshold_mask(&m, 101).is_err());
        for t in 0..100u8 {
            let a = threshold_mask(&m, t).unwrap();
            let b = threshold_mask(&m, t + 1).unwrap();
            assert_eq!(a.intersection_count(&b).unwrap(), b.count());
        }
    }

    #[test]
    fn from_raw_validates() {
        let lm = SuperpixelLabelMap::new(Dims::new(1, 1, 2), vec![0, 1], None).unwrap();
        assert!(RelevanceMap::from_raw(lm.clone(), vec![0.1], MethodFamily::Blank, 0.5, None, String::new()).is_err());
        assert!(RelevanceMap::from_raw(lm, vec![0.1, 1.5], MethodFamily::Blank, 0.5, None, String::new()).is_err());
    }

    #[test]
    fn method_names() {
        for m in [MethodFamily::Blank, MethodFamily::Min, MethodFamily::Max, MethodFamily::Optimal] {
            assert_eq!(m.name().parse::<MethodFamily>().unwrap(), m);
        }
    }
}
