use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;

use relmap_core::classifier::{CountingOracle, OracleBinding, RemoteConfig, RemoteOracle, SyntheticOracle};
use relmap_core::evaluation::{grid_search, Case, DiceReport, GridSpec, RankReport};
use relmap_core::io::{
    load_bundle, load_label_map, load_mask, load_nifti, load_nifti_mask, load_relevance, save_bundle,
    save_label_map, save_relevance, write_json, Bundle, LABELS_FILE, META_FILE,
};
use relmap_core::phantom::PhantomSpec;
use relmap_core::relevance::{compute_relevance, rank_superpixels, RelevanceMap};
use relmap_core::render::{render_montage, Axis, Overlay};
use relmap_core::superpixel::slic3d;
use relmap_core::volume::{BinaryMask, Dims, MultiSequenceVolume, ScalarVolume, SequenceKind};
use relmap_core::MethodFamily;

use crate::config::{OracleTarget, RunConfig};
use crate::error::CliError;
use crate::run::EFFECTIVE_CONFIG;

fn write_effective_config(cfg: &RunConfig) -> Result<(), CliError> {
    write_json(&cfg.out.join(EFFECTIVE_CONFIG), cfg)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| relmap_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn case_id(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn single_input(cfg: &RunConfig, what: &str) -> Result<PathBuf, CliError> {
    match &cfg.inputs[..] {
        [one] => Ok(one.clone()),
        [] => Err(CliError::usage(format!("{what}: no input given"))),
        _ => Err(CliError::usage(format!("{what}: expected exactly one input"))),
    }
}

fn require_bundle(dir: &Path) -> Result<Bundle<f32>, CliError> {
    if !dir.join(META_FILE).is_file() {
        return Err(CliError::usage(format!("{}: not a bundle (no {META_FILE})", dir.display())));
    }
    Ok(load_bundle::<f32>(dir)?)
}

/// Resolves the oracle; a remote endpoint must pass its health check first.
fn build_oracle(cfg: &RunConfig, target_region: Option<&BinaryMask>) -> Result<OracleBinding, CliError> {
    match cfg.oracle_target() {
        OracleTarget::Synthetic => {
            let region = target_region.ok_or_else(|| {
                CliError::usage("the synthetic oracle needs a ground-truth mask as its target region")
            })?;
            let oracle = SyntheticOracle::new(cfg.synthetic.params(region.clone()))?;
            Ok(OracleBinding::Synthetic(oracle))
        }
        OracleTarget::Remote(url) => Ok(OracleBinding::Remote(connect(&url)?)),
    }
}

pub fn connect(url: &str) -> Result<RemoteOracle, CliError> {
    let remote = RemoteOracle::new(RemoteConfig::new(url));
    match remote.health() {
        Ok(model) => {
            info!("oracle {url} healthy, model {model}");
            Ok(remote)
        }
        Err(e) => Err(CliError::Oracle {
            endpoint: url.to_string(),
            message: format!("health check failed: {e}"),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Sequence(SequenceKind),
    GroundTruth,
}

fn classify_nifti(name: &str) -> Option<Role> {
    let lower = name.to_ascii_lowercase();
    let stem = lower.strip_suffix(".nii.gz").or_else(|| lower.strip_suffix(".nii"))?;
    let token = stem.rsplit(['_', '-', '.']).next()?;
    Some(match token {
        "t1" | "t1w" | "t1n" => Role::Sequence(SequenceKind::T1w),
        "t1ce" | "t1wce" | "t1gd" | "t1c" => Role::Sequence(SequenceKind::T1wCE),
        "t2" | "t2w" => Role::Sequence(SequenceKind::T2w),
        "flair" | "t2f" => Role::Sequence(SequenceKind::FLAIR),
        "seg" | "mask" | "label" | "labels" => Role::GroundTruth,
        _ => return None,
    })
}

fn load_nifti_set(dir: &Path) -> Result<Bundle<f32>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| relmap_core::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut found: BTreeMap<usize, PathBuf> = BTreeMap::new();
    let mut gt = None;
    let mut names: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    names.sort();
    for path in names {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        match classify_nifti(name) {
            Some(Role::Sequence(k)) => {
                if let Some(prev) = found.insert(k.index(), path.clone()) {
                    return Err(CliError::usage(format!(
                        "{}: two {k} files ({} and {})",
                        dir.display(),
                        prev.display(),
                        path.display()
                    )));
                }
            }
            Some(Role::GroundTruth) => gt = Some(path),
            None => {}
        }
    }
    let mut sequences = Vec::new();
    for kind in SequenceKind::ALL {
        let path = found.get(&kind.index()).ok_or_else(|| {
            CliError::usage(format!("{}: missing {kind} file", dir.display()))
        })?;
        sequences.push((kind, load_nifti::<f32>(path, kind)?));
    }
    let volume = MultiSequenceVolume::new(sequences)?;
    let ground_truth = match gt {
        Some(p) => {
            let m = load_nifti_mask(&p)?;
            m.ensure_dims(volume.dims())?;
            Some(m)
        }
        None => None,
    };
    Ok(Bundle { volume, ground_truth })
}

pub fn prepare(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.inputs.is_empty() {
        return Err(CliError::usage("prepare: no input directories given"));
    }
    let mut loaded = Vec::new();
    for input in &cfg.inputs {
        if !input.is_dir() {
            return Err(CliError::usage(format!("{}: input directory not found", input.display())));
        }
        let bundle = if input.join(META_FILE).is_file() {
            load_bundle::<f32>(input)?
        } else {
            load_nifti_set(input)?
        };
        loaded.push((case_id(input), bundle));
    }
    let pre = cfg.preprocess();
    let mut prepared = Vec::new();
    for (id, bundle) in loaded {
        for (kind, v) in bundle.volume.iter() {
            let (lo, hi) = v.min_max();
            println!("{id} {kind}: min {lo} max {hi}");
        }
        let volume = pre.apply(&bundle.volume)?;
        let gt = bundle.ground_truth.as_ref().map(|m| pre.apply_mask(m)).transpose()?;
        prepared.push((id, volume, gt));
    }
    for (id, volume, gt) in &prepared {
        let dir = cfg.out.join(id);
        save_bundle(&dir, volume, gt.as_ref())?;
        info!("prepared {id}: {} -> {}", volume.dims(), dir.display());
        println!("wrote {}", dir.display());
    }
    write_effective_config(cfg)
}

pub fn slic(cfg: &RunConfig) -> Result<(), CliError> {
    let input = single_input(cfg, "slic")?;
    let bundle = require_bundle(&input)?;
    let seq = bundle.volume.require(cfg.seed_sequence)?;
    let lm = slic3d(seq, &cfg.slic_params())?;
    if !lm.is_six_connected() {
        return Err(CliError::Internal("superpixel map is not 6-connected".into()));
    }
    save_label_map(&lm, &cfg.out)?;
    info!("slic {}: K={} on {}", input.display(), lm.count(), cfg.seed_sequence);
    println!("K={} seed_sequence={}", lm.count(), cfg.seed_sequence);
    write_effective_config(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MontageSpec {
    pub axis: Axis,
    pub slices: Vec<usize>,
    pub sequence: Option<SequenceKind>,
}

impl MontageSpec {
    /// Parses `"axis=z slices=40,64,88 [sequence=T2w]"`.
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let mut axis = Axis::Z;
        let mut slices = None;
        let mut sequence = None;
        for token in s.split_whitespace() {
            let (k, v) = token
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("montage: expected key=value, got {token:?}")))?;
            match k {
                "axis" => axis = v.parse()?,
                "slices" => {
                    let list = v
                        .split(',')
                        .map(|x| x.trim().parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| CliError::usage(format!("montage: invalid slice list {v:?}")))?;
                    slices = Some(list);
                }
                "sequence" => sequence = Some(v.parse()?),
                other => return Err(CliError::usage(format!("montage: unknown key {other:?}"))),
            }
        }
        let slices = slices.ok_or_else(|| CliError::usage("montage: slices=... is required"))?;
        Ok(MontageSpec { axis, slices, sequence })
    }
}

fn labels_dir(cfg: &RunConfig, bundle_dir: &Path, explicit: Option<&Path>) -> Result<PathBuf, CliError> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    for dir in [cfg.out.as_path(), bundle_dir] {
        if dir.join(LABELS_FILE).is_file() {
            return Ok(dir.to_path_buf());
        }
    }
    Err(CliError::usage(format!(
        "no superpixel labels in {} or {}; run `relmap slic` first or pass --labels",
        cfg.out.display(),
        bundle_dir.display()
    )))
}

pub fn relmap(cfg: &RunConfig, labels: Option<&Path>, montage: Option<&str>) -> Result<(), CliError> {
    let input = single_input(cfg, "relmap")?;
    let montage = montage.map(MontageSpec::parse).transpose()?;
    let bundle = require_bundle(&input)?;
    let lm = load_label_map(&labels_dir(cfg, &input, labels)?)?;
    if lm.dims() != bundle.volume.dims() {
        return Err(relmap_core::Error::DimsMismatch {
            expected: bundle.volume.dims(),
            found: lm.dims(),
        }
        .into());
    }
    let oracle = CountingOracle::new(build_oracle(cfg, bundle.ground_truth.as_ref())?);
    let relmap = compute_relevance(&bundle.volume, &lm, &oracle, cfg.method, &cfg.budget)?;
    let png = match &montage {
        Some(spec) => {
            let seq = bundle.volume.require(spec.sequence.unwrap_or(cfg.seed_sequence))?;
            Some(render_montage(seq, Overlay::Relevance(&relmap), spec.axis, &spec.slices)?)
        }
        None => None,
    };
    check_relmap(&relmap)?;

    // Everything is computed; only now touch the output directory.
    save_relevance(&relmap, &cfg.out)?;
    if let Some(png) = png {
        let path = cfg.out.join("montage.png");
        std::fs::write(&path, png).map_err(|e| relmap_core::Error::Io { path, source: e })?;
    }
    let top1 = rank_superpixels(&relmap).0[0];
    let max_delta = relmap.raw_scores().iter().cloned().fold(0.0, f64::max);
    let summary = format!(
        "K={} p_original={:.6} top1={} max_delta={:.6} method={} oracle_calls={}",
        relmap.count(),
        relmap.p_original(),
        top1,
        max_delta,
        cfg.method,
        oracle.calls()
    );
    info!("relmap {}: {summary}", input.display());
    if relmap.is_uninformative() {
        log::warn!("all superpixels scored equally; the map carries no ranking");
    }
    println!("{summary}");
    write_effective_config(cfg)
}

fn check_relmap(relmap: &RelevanceMap) -> Result<(), CliError> {
    let labels = relmap.label_map().labels();
    let ok = relmap
        .voxel_map()
        .iter()
        .zip(labels)
        .all(|(&s, &l)| relmap.normalized_scores()[l as usize] == s);
    if !ok {
        return Err(CliError::Internal("voxel map differs from its superpixel scores".into()));
    }
    Ok(())
}

/// Ground truth from a bundle directory, a NIfTI mask, or a raw `u8` mask.
fn load_ground_truth(path: &Path, dims: Dims) -> Result<BinaryMask, CliError> {
    if path.is_dir() {
        let bundle = require_bundle(path)?;
        return bundle
            .ground_truth
            .ok_or_else(|| CliError::usage(format!("{}: bundle has no ground truth", path.display())));
    }
    if !path.exists() {
        return Err(CliError::usage(format!("ground truth {} not found", path.display())));
    }
    let name = path.to_string_lossy().to_ascii_lowercase();
    let mask = if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        load_nifti_mask(path)?
    } else {
        load_mask(path, dims)?
    };
    mask.ensure_dims(dims)?;
    Ok(mask)
}

pub fn eval(cfg: &RunConfig, gt: &[PathBuf], max_rank: usize, max_k: usize) -> Result<(), CliError> {
    if cfg.inputs.is_empty() {
        return Err(CliError::usage("eval: no relevance map directories given"));
    }
    if gt.len() != cfg.inputs.len() {
        return Err(CliError::usage(format!(
            "eval: {} relevance maps but {} ground-truth paths; pass one --gt per map",
            cfg.inputs.len(),
            gt.len()
        )));
    }
    let mut cases = Vec::new();
    for (dir, gt_path) in cfg.inputs.iter().zip(gt) {
        let relmap = load_relevance(dir)?;
        let mask = load_ground_truth(gt_path, relmap.label_map().dims())?;
        if mask.is_empty() {
            return Err(CliError::usage(format!("{}: ground truth is empty", gt_path.display())));
        }
        cases.push((case_id(dir), relmap, mask));
    }
    let dice = DiceReport::from_cases(cases.iter().map(|(id, r, m)| (id.as_str(), r, m)))?;
    let min_k = cases.iter().map(|(_, r, _)| r.count()).min().unwrap_or(0);
    let (max_rank, max_k) = (max_rank.min(min_k), max_k.min(min_k));
    let mut ranks = Vec::new();
    for method in [MethodFamily::Optimal, MethodFamily::Blank, MethodFamily::Min, MethodFamily::Max] {
        let group: Vec<_> = cases.iter().filter(|(_, r, _)| r.method() == method).collect();
        if !group.is_empty() {
            ranks.push(RankReport::from_cases(method, group.iter().map(|(_, r, m)| (r, m)), max_rank, max_k)?);
        }
    }
    let params = json!({ "cases": cases.len(), "max_rank": max_rank, "max_k": max_k });
    let doc = json!({
        "dice": dice.to_document(params.clone()),
        "rank": RankReport::to_document(&ranks, params),
    });
    let table = format!("{}\n{}", dice.render_table(), RankReport::render_tables(&ranks));
    std::fs::create_dir_all(&cfg.out).ok();
    write_json(&cfg.out.join("report.json"), &doc)?;
    write_text(&cfg.out.join("report.txt"), &table)?;
    print!("{table}");
    info!("eval: {} cases, mean DSC {:.4}", cases.len(), dice.mean_dsc);
    write_effective_config(cfg)
}

pub struct GridAxes {
    pub sequences: Vec<SequenceKind>,
    pub n_segments: Vec<usize>,
    pub methods: Vec<MethodFamily>,
}

pub fn gridsearch(cfg: &RunConfig, axes: GridAxes) -> Result<(), CliError> {
    if cfg.inputs.is_empty() {
        return Err(CliError::usage("gridsearch: no bundle directories given"));
    }
    let mut cases = Vec::new();
    for dir in &cfg.inputs {
        let bundle = require_bundle(dir)?;
        let ground_truth = bundle
            .ground_truth
            .ok_or_else(|| CliError::usage(format!("{}: bundle has no ground truth", dir.display())))?;
        cases.push(Case {
            id: case_id(dir),
            volume: bundle.volume,
            ground_truth,
        });
    }
    let spec = GridSpec {
        sequences: axes.sequences,
        n_segments: axes.n_segments,
        methods: axes.methods,
        compactness: cfg.compactness,
        max_iterations: cfg.max_iterations,
        budget: cfg.budget,
    };
    // Probe a remote endpoint once up front so an outage fails fast.
    if let OracleTarget::Remote(url) = cfg.oracle_target() {
        connect(&url)?;
    }
    let report = grid_search(&cases, &spec, |case| match cfg.oracle_target() {
        OracleTarget::Synthetic => Ok(OracleBinding::Synthetic(SyntheticOracle::new(
            cfg.synthetic.params(case.ground_truth.clone()),
        )?)),
        OracleTarget::Remote(url) => Ok(OracleBinding::Remote(RemoteOracle::new(RemoteConfig::new(url)))),
    })?;
    if report.cells.iter().all(|c| c.mean_dsc.is_none()) {
        return Err(CliError::Oracle {
            endpoint: cfg.oracle.clone().unwrap_or_default(),
            message: "every grid cell failed".into(),
        });
    }
    let table = report.render_table();
    std::fs::create_dir_all(&cfg.out).ok();
    write_json(&cfg.out.join("report.json"), &report.to_document())?;
    write_text(&cfg.out.join("report.txt"), &table)?;
    print!("{table}");
    if let Some(line) = report.best_line() {
        println!("{line}");
        info!("gridsearch best {line}");
    }
    write_effective_config(cfg)
}

pub struct MontageArgs {
    pub axis: Axis,
    pub slices: Vec<usize>,
    pub sequence: Option<SequenceKind>,
    pub mask: bool,
    pub relmap: Option<PathBuf>,
}

pub fn montage(cfg: &RunConfig, args: MontageArgs) -> Result<(), CliError> {
    let input = single_input(cfg, "montage")?;
    let bundle = require_bundle(&input)?;
    let seq: &ScalarVolume<f32> = bundle.volume.require(args.sequence.unwrap_or(cfg.seed_sequence))?;
    let relmap = args.relmap.as_deref().map(load_relevance).transpose()?;
    let overlay = match (&relmap, args.mask) {
        (Some(_), true) => return Err(CliError::usage("montage: choose either --mask or --relmap")),
        (Some(r), false) => Overlay::Relevance(r),
        (None, true) => Overlay::Mask(
            bundle
                .ground_truth
                .as_ref()
                .ok_or_else(|| CliError::usage(format!("{}: bundle has no ground truth", input.display())))?,
        ),
        (None, false) => Overlay::None,
    };
    let slices = if args.slices.is_empty() {
        let d = seq.dims();
        vec![match args.axis {
            Axis::Z => d.depth / 2,
            Axis::Y => d.height / 2,
            Axis::X => d.width / 2,
        }]
    } else {
        args.slices
    };
    let png = render_montage(seq, overlay, args.axis, &slices)?;
    std::fs::create_dir_all(&cfg.out).ok();
    let path = cfg.out.join("montage.png");
    std::fs::write(&path, png).map_err(|e| relmap_core::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    println!("wrote {}", path.display());
    write_effective_config(cfg)
}

pub fn phantom(cfg: &RunConfig, seeds: &[u64], size: usize) -> Result<(), CliError> {
    if size < 8 {
        return Err(CliError::usage("phantom: size must be at least 8"));
    }
    for &seed in seeds {
        let spec = PhantomSpec {
            dims: Dims::cube(size),
            ..PhantomSpec::with_seed(seed)
        };
        let p = spec.generate::<f32>()?;
        let dir = cfg.out.join(format!("phantom-{seed}"));
        save_bundle(&dir, &p.volume, Some(&p.lesion))?;
        let frac = p.lesion.count() as f64 / p.lesion.dims().len() as f64;
        println!("wrote {} (lesion {:.2}% of voxels)", dir.display(), 100.0 * frac);
    }
    write_effective_config(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nifti_names() {
        assert_eq!(classify_nifti("BraTS20_Training_001_t1.nii.gz"), Some(Role::Sequence(SequenceKind::T1w)));
        assert_eq!(classify_nifti("BraTS20_Training_001_t1ce.nii.gz"), Some(Role::Sequence(SequenceKind::T1wCE)));
        assert_eq!(classify_nifti("case-t2.nii"), Some(Role::Sequence(SequenceKind::T2w)));
        assert_eq!(classify_nifti("x_FLAIR.nii.gz"), Some(Role::Sequence(SequenceKind::FLAIR)));
        assert_eq!(classify_nifti("x_seg.nii.gz"), Some(Role::GroundTruth));
        assert_eq!(classify_nifti("notes.txt"), None);
    }

    #[test]
    fn montage_spec() {
        let s = MontageSpec::parse("axis=z slices=40,64,88").unwrap();
        assert_eq!(s.axis, Axis::Z);
        assert_eq!(s.slices, vec![40, 64, 88]);
        assert!(MontageSpec::parse("axis=q slices=1").is_err());
        assert!(MontageSpec::parse("axis=y").is_err());
    }
}
