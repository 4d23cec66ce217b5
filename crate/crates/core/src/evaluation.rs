//! Overlap metrics between relevance maps and ground-truth segmentations,
//! plus the report tables built on them.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::classifier::Oracle;
use crate::error::{Error, Result};
use crate::perturbation::SearchBudget;
use crate::relevance::{compute_relevance, rank_superpixels, MethodFamily, RelevanceMap};
use crate::scalar::Scalar;
use crate::superpixel::{slic3d, SlicParams};
use crate::volume::{ensure_dims, BinaryMask, MultiSequenceVolume, SequenceKind};

fn dice_from_counts(overlap: usize, predicted: usize, truth: usize) -> f64 {
    (2 * overlap) as f64 / (predicted + truth) as f64
}

/// `2|a ∩ b| / (|a| + |b|)`; `b` is the ground truth and must be nonempty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    ensure_dims(b.dims(), a.dims())?;
    let truth = b.count();
    if truth == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let overlap = a.intersection_count(b)?;
    Ok(dice_from_counts(overlap, a.count(), truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub best_threshold: u8,
    pub dsc: f64,
    /// DSC at thresholds `1..=100`; entry `i` is threshold `i + 1`.
    pub curve: Vec<f64>,
}

/// Sweeps every integer threshold `1..=100` and keeps the best DSC, lowest
/// threshold on ties.
pub fn optimal_threshold_dsc(relmap: &RelevanceMap, gt: &BinaryMask) -> Result<ThresholdResult> {
    ensure_dims(gt.dims(), relmap.label_map().dims())?;
    let truth = gt.count();
    if truth == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    // Histograms of voxel scores overall and inside the ground truth; the
    // predicted set at threshold t is the suffix sum from t upward.
    let mut all = [0usize; 101];
    let mut inside = [0usize; 101];
    for (&s, &g) in relmap.voxel_map().iter().zip(gt.data()) {
        all[s as usize] += 1;
        if g {
            inside[s as usize] += 1;
        }
    }
    let mut curve = vec![0.0; 100];
    let (mut predicted, mut overlap) = (0usize, 0usize);
    for t in (1..=100usize).rev() {
        predicted += all[t];
        overlap += inside[t];
        curve[t - 1] = dice_from_counts(overlap, predicted, truth);
    }
    let mut best = 0;
    for (i, &d) in curve.iter().enumerate() {
        if d > curve[best] {
            best = i;
        }
    }
    Ok(ThresholdResult {
        best_threshold: best as u8 + 1,
        dsc: curve[best],
        curve,
    })
}

/// Per-superpixel `(size, overlap with gt)`.
fn superpixel_overlaps(relmap: &RelevanceMap, gt: &BinaryMask) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let lm = relmap.label_map();
    ensure_dims(gt.dims(), lm.dims())?;
    let truth = gt.count();
    if truth == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let mut size = vec![0usize; lm.count()];
    let mut overlap = vec![0usize; lm.count()];
    for (&l, &g) in lm.labels().iter().zip(gt.data()) {
        size[l as usize] += 1;
        if g {
            overlap[l as usize] += 1;
        }
    }
    Ok((size, overlap, truth))
}

/// DSC of each of the top `max_rank` superpixels taken alone.
pub fn ranked_dsc(relmap: &RelevanceMap, gt: &BinaryMask, max_rank: usize) -> Result<Vec<f64>> {
    if max_rank > relmap.count() {
        return Err(Error::OutOfRange {
            index: max_rank,
            limit: relmap.count(),
        });
    }
    let (size, overlap, truth) = superpixel_overlaps(relmap, gt)?;
    let ranking = rank_superpixels(relmap);
    Ok(ranking.0[..max_rank]
        .iter()
        .map(|&id| dice_from_counts(overlap[id], size[id], truth))
        .collect())
}

/// DSC of the union of the top `k` superpixels for `k = 1..=max_k`.
pub fn cumulative_dsc(relmap: &RelevanceMap, gt: &BinaryMask, max_k: usize) -> Result<Vec<f64>> {
    if max_k > relmap.count() {
        return Err(Error::OutOfRange {
            index: max_k,
            limit: relmap.count(),
        });
    }
    let (size, overlap, truth) = superpixel_overlaps(relmap, gt)?;
    let ranking = rank_superpixels(relmap);
    let (mut pred, mut inter) = (0, 0);
    Ok(ranking.0[..max_k]
        .iter()
        .map(|&id| {
            pred += size[id];
            inter += overlap[id];
            dice_from_counts(inter, pred, truth)
        })
        .collect())
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDice {
    pub case_id: String,
    pub best_threshold: u8,
    pub dsc_at_best: f64,
    pub threshold_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub cases: Vec<CaseDice>,
    pub mean_dsc: f64,
}

impl DiceReport {
    pub fn from_cases<'a>(cases: impl IntoIterator<Item = (&'a str, &'a RelevanceMap, &'a BinaryMask)>) -> Result<Self> {
        let cases = cases
            .into_iter()
            .map(|(id, relmap, gt)| {
                let r = optimal_threshold_dsc(relmap, gt)?;
                Ok(CaseDice {
                    case_id: id.to_string(),
                    best_threshold: r.best_threshold,
                    dsc_at_best: r.dsc,
                    threshold_curve: r.curve,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_dsc = mean(cases.iter().map(|c| c.dsc_at_best)).unwrap_or(0.0);
        Ok(DiceReport { cases, mean_dsc })
    }

    pub fn to_document(&self, params: Value) -> ReportDocument {
        ReportDocument {
            kind: "dice".into(),
            params,
            rows: self
                .cases
                .iter()
                .map(|c| serde_json::to_value(c).expect("serializable"))
                .collect(),
            best: json!({ "mean_dsc": self.mean_dsc }),
        }
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>9} {:>8}", "Case", "Threshold", "DSC");
        for c in &self.cases {
            let _ = writeln!(out, "{:<24} {:>9} {:>8.4}", c.case_id, c.best_threshold, c.dsc_at_best);
        }
        let _ = writeln!(out, "{:<24} {:>9} {:>8.4}", "Average", "", self.mean_dsc);
        out
    }
}

/// Average DSC per rank and per cumulative prefix across cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub method: MethodFamily,
    pub cases: usize,
    pub ranked: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl RankReport {
    pub fn from_cases<'a>(
        method: MethodFamily,
        cases: impl IntoIterator<Item = (&'a RelevanceMap, &'a BinaryMask)>,
        max_rank: usize,
        max_k: usize,
    ) -> Result<Self> {
        let mut ranked = vec![0.0; max_rank];
        let mut cumulative = vec![0.0; max_k];
        let mut n = 0usize;
        for (relmap, gt) in cases {
            for (acc, v) in ranked.iter_mut().zip(ranked_dsc(relmap, gt, max_rank)?) {
                *acc += v;
            }
            for (acc, v) in cumulative.iter_mut().zip(cumulative_dsc(relmap, gt, max_k)?) {
                *acc += v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::validation("rank report needs at least one case"));
        }
        for v in ranked.iter_mut().chain(cumulative.iter_mut()) {
            *v /= n as f64;
        }
        Ok(RankReport {
            method,
            cases: n,
            ranked,
            cumulative,
        })
    }

    pub fn to_document(reports: &[RankReport], params: Value) -> ReportDocument {
        let rows = reports
            .iter()
            .map(|r| {
                json!({
                    "method": r.method,
                    "cases": r.cases,
                    "ranked": r.ranked,
                    "cumulative": r.cumulative,
                })
            })
            .collect();
        let best = reports
            .iter()
            .filter_map(|r| {
                let (k, v) = r
                    .cumulative
                    .iter()
                    .enumerate()
                    .fold(None, |acc: Option<(usize, f64)>, (i, &v)| match acc {
                        Some((_, b)) if b >= v => acc,
                        _ => Some((i + 1, v)),
                    })?;
                Some(json!({ "method": r.method, "k": k, "dsc": v }))
            })
            .collect::<Vec<_>>();
        ReportDocument {
            kind: "rank".into(),
            params,
            rows,
            best: Value::Array(best),
        }
    }

    /// Ranked table followed by the cumulative table, one column per method.
    pub fn render_tables(reports: &[RankReport]) -> String {
        let mut out = String::new();
        let header: String = reports
            .iter()
            .map(|r| format!(" {:>12}", format!("Avg. DSC {}", r.method)))
            .collect();
        let _ = writeln!(out, "Average DSC on ranked superpixels");
        let _ = writeln!(out, "{:<8}{header}", "Rank");
        let rows = reports.iter().map(|r| r.ranked.len()).max().unwrap_or(0);
        for i in 0..rows {
            let _ = write!(out, "{:<8}", i + 1);
            for r in reports {
                match r.ranked.get(i) {
                    Some(v) => {
                        let _ = write!(out, " {:>12.2}", v);
                    }
                    None => {
                        let _ = write!(out, " {:>12}", "-");
                    }
                }
            }
            out.push('\n');
        }
        let _ = writeln!(out, "\nAverage DSC on cumulative top ranking superpixels");
        let _ = writeln!(out, "{:<8}{header}", "Rank");
        let rows = reports.iter().map(|r| r.cumulative.len()).max().unwrap_or(0);
        for i in 0..rows {
            let label = if i == 0 { "1".to_string() } else if i == 1 { "1+2".to_string() } else { format!("1+..+{}", i + 1) };
            let _ = write!(out, "{:<8}", label);
            for r in reports {
                match r.cumulative.get(i) {
                    Some(v) => {
                        let _ = write!(out, " {:>12.2}", v);
                    }
                    None => {
                        let _ = write!(out, " {:>12}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// One evaluation case: a complete volume with its ground-truth mask.
#[derive(Debug, Clone)]
pub struct Case<T> {
    pub id: String,
    pub volume: MultiSequenceVolume<T>,
    pub ground_truth: BinaryMask,
}

/// Cartesian grid of SLIC sequence × superpixel count × perturbation method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub sequences: Vec<SequenceKind>,
    pub n_segments: Vec<usize>,
    pub methods: Vec<MethodFamily>,
    pub compactness: f64,
    pub max_iterations: usize,
    pub budget: SearchBudget,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sequences.is_empty() || self.n_segments.is_empty() || self.methods.is_empty() {
            return Err(Error::validation("grid search needs at least one value on every axis"));
        }
        Ok(())
    }

    /// Cells in row-major order: sequence, then method, then n_segments.
    pub fn cells(&self) -> Vec<(SequenceKind, MethodFamily, usize)> {
        let mut out = Vec::new();
        for &s in &self.sequences {
            for &m in &self.methods {
                for &n in &self.n_segments {
                    out.push((s, m, n));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub sequence: SequenceKind,
    pub method: MethodFamily,
    pub n_segments: usize,
    pub mean_dsc: Option<f64>,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchReport {
    pub spec: GridSpec,
    pub cells: Vec<GridCell>,
    /// Index into `cells` of the highest mean DSC, first in grid order on ties.
    pub best: Option<usize>,
}

impl GridSearchReport {
    pub fn cell(&self, sequence: SequenceKind, method: MethodFamily, n_segments: usize) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.sequence == sequence && c.method == method && c.n_segments == n_segments)
    }

    pub fn best_cell(&self) -> Option<&GridCell> {
        self.best.map(|i| &self.cells[i])
    }

    /// `"T2w/100/blank → 0.4000"`.
    pub fn best_line(&self) -> Option<String> {
        let c = self.best_cell()?;
        Some(format!(
            "{}/{}/{} → {:.4}",
            c.sequence,
            c.n_segments,
            c.method,
            c.mean_dsc.unwrap_or(0.0)
        ))
    }

    pub fn to_document(&self) -> ReportDocument {
        ReportDocument {
            kind: "grid".into(),
            params: serde_json::to_value(&self.spec).expect("serializable"),
            rows: self
                .cells
                .iter()
                .map(|c| serde_json::to_value(c).expect("serializable"))
                .collect(),
            best: match self.best_cell() {
                Some(c) => serde_json::to_value(c).expect("serializable"),
                None => Value::Null,
            },
        }
    }

    /// Plain-text table: one row per sequence, one column block per method,
    /// one column per superpixel count inside each block.
    pub fn render_table(&self) -> String {
        let spec = &self.spec;
        let col = 7;
        let block = spec.n_segments.len() * col;
        let mut out = String::from("Parameter grid search results.\n");
        let _ = write!(out, "{:<8}", "");
        for m in &spec.methods {
            let name = match m {
                MethodFamily::Blank => "Blank",
                MethodFamily::Min => "Min",
                MethodFamily::Max => "Max",
                MethodFamily::Optimal => "Optimal",
            };
            let _ = write!(out, "|{:^block$}", name);
        }
        out.push('\n');
        let _ = write!(out, "{:<8}", "");
        for _ in &spec.methods {
            out.push('|');
            for n in &spec.n_segments {
                let _ = write!(out, "{:>col$}", n);
            }
        }
        out.push('\n');
        for &s in &spec.sequences {
            let _ = write!(out, "{:<8}", s.name());
            for &m in &spec.methods {
                out.push('|');
                for &n in &spec.n_segments {
                    let cell = self.cell(s, m, n);
                    let best = self.best_cell().is_some_and(|b| std::ptr::eq(b, cell.unwrap()));
                    let text = match cell.and_then(|c| c.mean_dsc) {
                        Some(v) if best => format!("*{v:.2}"),
                        Some(v) => format!("{v:.2}"),
                        None => "-".into(),
                    };
                    let _ = write!(out, "{:>col$}", text);
                }
            }
            out.push('\n');
        }
        out
    }
}

/// `report.json` layout shared by every report kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub kind: String,
    pub params: Value,
    pub rows: Vec<Value>,
    pub best: Value,
}

/// Runs SLIC, relevance and optimal thresholding for every grid cell.
///
/// `oracle_for` supplies the classifier for a case. Cases within a cell run
/// concurrently; cells run one after another. A failing case is logged and
/// left out of its cell's mean.
pub fn grid_search<T, O, F>(cases: &[Case<T>], spec: &GridSpec, oracle_for: F) -> Result<GridSearchReport>
where
    T: Scalar,
    O: Oracle<T>,
    F: Fn(&Case<T>) -> Result<O> + Sync,
{
    spec.validate()?;
    if cases.is_empty() {
        return Err(Error::validation("grid search needs at least one case"));
    }
    let mut cells = Vec::new();
    for (sequence, method, n_segments) in spec.cells() {
        let params = SlicParams {
            n_segments,
            compactness: spec.compactness,
            max_iterations: spec.max_iterations,
            enforce_connectivity: true,
            seed_sequence: sequence,
        };
        let results: Vec<Result<f64>> = std::thread::scope(|scope| {
            let handles: Vec<_> = cases
                .iter()
                .map(|case| {
                    let oracle_for = &oracle_for;
                    scope.spawn(move || -> Result<f64> {
                        let oracle = oracle_for(case)?;
                        let lm = slic3d(case.volume.require(sequence)?, &params)?;
                        let relmap = compute_relevance(&case.volume, &lm, &oracle, method, &spec.budget)?;
                        Ok(optimal_threshold_dsc(&relmap, &case.ground_truth)?.dsc)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::validation("case worker panicked"))))
                .collect()
        });
        let mut ok = Vec::new();
        let mut failures = 0;
        for (case, r) in cases.iter().zip(results) {
            match r {
                Ok(v) => ok.push(v),
                Err(e) => {
                    warn!("{sequence}/{n_segments}/{method}: case {} failed: {e}", case.id);
                    failures += 1;
                }
            }
        }
        cells.push(GridCell {
            sequence,
            method,
            n_segments,
            mean_dsc: mean(ok.iter().copied()),
            successes: ok.len(),
            failures,
        });
    }
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        if let Some(v) = c.mean_dsc {
            if best.is_none_or(|b| v > cells[b].mean_dsc.unwrap_or(f64::NEG_INFINITY)) {
                best = Some(i);
            }
        }
    }
    Ok(GridSearchReport {
        spec: spec.clone(),
        cells,
        best,
    })
}
