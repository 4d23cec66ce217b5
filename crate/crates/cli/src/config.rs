//! Run configuration: defaults, then the config file, then command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use relmap_core::classifier::SyntheticSettings;
use relmap_core::perturbation::SearchBudget;
use relmap_core::superpixel::SlicParams;
use relmap_core::volume::{Dims, Preprocess, PreprocessOrder, SequenceKind};
use relmap_core::MethodFamily;

use crate::error::CliError;

pub const ORACLE_ENV: &str = "RELMAP_ORACLE_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub inputs: Vec<PathBuf>,
    pub seed_sequence: SequenceKind,
    pub n_segments: usize,
    pub compactness: f64,
    pub max_iterations: usize,
    pub method: MethodFamily,
    /// `"synthetic"` or the base URL of a scoring server.
    pub oracle: Option<String>,
    pub synthetic: SyntheticSettings,
    pub budget: SearchBudget,
    pub out: PathBuf,
    pub preprocess_order: PreprocessOrder,
    /// `None` skips cropping.
    pub crop: Option<Dims>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let slic = SlicParams::default();
        RunConfig {
            inputs: Vec::new(),
            seed_sequence: slic.seed_sequence,
            n_segments: slic.n_segments,
            compactness: slic.compactness,
            max_iterations: slic.max_iterations,
            method: MethodFamily::Blank,
            oracle: None,
            synthetic: SyntheticSettings::default(),
            budget: SearchBudget::default(),
            out: PathBuf::from("out"),
            preprocess_order: PreprocessOrder::default(),
            crop: Preprocess::default().crop,
        }
    }
}

/// Flags shared by every subcommand; each overrides the matching config key.
#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// JSON run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `synthetic` or a scoring server URL (default: $RELMAP_ORACLE_URL, else synthetic)
    #[arg(long, global = true)]
    pub oracle: Option<String>,
    #[arg(long, global = true)]
    pub seed_sequence: Option<SequenceKind>,
    #[arg(long, global = true)]
    pub n_segments: Option<usize>,
    #[arg(long, global = true)]
    pub compactness: Option<f64>,
    #[arg(long, global = true)]
    pub max_iterations: Option<usize>,
    /// blank, min, max or optimal
    #[arg(long, global = true)]
    pub method: Option<MethodFamily>,
    /// Coarse grid points per sequence for the optimal fill search
    #[arg(long, global = true)]
    pub budget_grid: Option<usize>,
    /// Golden-section rounds per sequence for the optimal fill search
    #[arg(long, global = true)]
    pub budget_refine: Option<usize>,
    /// crop-then-normalize or normalize-then-crop
    #[arg(long, global = true)]
    pub preprocess_order: Option<PreprocessOrder>,
    /// Crop target as DxHxW, or `none`
    #[arg(long, global = true)]
    pub crop: Option<String>,
}

fn parse_crop(s: &str) -> Result<Option<Dims>, CliError> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::usage(format!("invalid crop {s:?}; expected DxHxW or none")))?;
    match parts[..] {
        [d, h, w] if d > 0 && h > 0 && w > 0 => Ok(Some(Dims::new(d, h, w))),
        _ => Err(CliError::usage(format!("invalid crop {s:?}; expected DxHxW or none"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Defaults, overlaid by the config file, overlaid by flags and
    /// positional inputs, then validated.
    pub fn resolve(args: &GlobalArgs, inputs: &[PathBuf]) -> Result<Self, CliError> {
        let mut c = match &args.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if !inputs.is_empty() {
            c.inputs = inputs.to_vec();
        }
        if let Some(v) = &args.out {
            c.out = v.clone();
        }
        if let Some(v) = &args.oracle {
            c.oracle = Some(v.clone());
        }
        if c.oracle.is_none() {
            c.oracle = Some(std::env::var(ORACLE_ENV).ok().filter(|s| !s.is_empty()).unwrap_or_else(|| "synthetic".into()));
        }
        if let Some(v) = args.seed_sequence {
            c.seed_sequence = v;
        }
        if let Some(v) = args.n_segments {
            c.n_segments = v;
        }
        if let Some(v) = args.compactness {
            c.compactness = v;
        }
        if let Some(v) = args.max_iterations {
            c.max_iterations = v;
        }
        if let Some(v) = args.method {
            c.method = v;
        }
        if let Some(v) = args.budget_grid {
            c.budget.coarse_grid_size = v;
        }
        if let Some(v) = args.budget_refine {
            c.budget.refinement_iterations = v;
        }
        if let Some(v) = args.preprocess_order {
            c.preprocess_order = v;
        }
        if let Some(v) = &args.crop {
            c.crop = parse_crop(v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.slic_params().validate()?;
        self.budget.validate()?;
        let oracle = self.oracle_target();
        if let OracleTarget::Remote(url) = &oracle {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(CliError::usage(format!("oracle must be `synthetic` or an http(s) URL, got {url:?}")));
            }
        }
        Ok(())
    }

    pub fn slic_params(&self) -> SlicParams {
        SlicParams {
            n_segments: self.n_segments,
            compactness: self.compactness,
            max_iterations: self.max_iterations,
            enforce_connectivity: true,
            seed_sequence: self.seed_sequence,
        }
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            order: self.preprocess_order,
            crop: self.crop,
        }
    }

    pub fn oracle_target(&self) -> OracleTarget {
        match self.oracle.as_deref() {
            None | Some("synthetic") => OracleTarget::Synthetic,
            Some(url) => OracleTarget::Remote(url.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleTarget {
    Synthetic,
    Remote(String),
}
