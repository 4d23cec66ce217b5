//! `relmap`: batch front end for superpixel relevance maps.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 oracle or
//! transport failure, 4 internal invariant violation.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use relmap_core::render::Axis;
use relmap_core::volume::SequenceKind;
use relmap_core::MethodFamily;

use crate::commands::{GridAxes, MontageArgs};
use crate::config::{GlobalArgs, OracleTarget, RunConfig};
use crate::error::CliError;
use crate::run::{flush_run_log, init_logging, OutputLock};

#[derive(Debug, Parser)]
#[command(name = "relmap", version, about = "Perturbation relevance maps for 3D multi-sequence volumes")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize and crop NIfTI sets or bundles into bundles under --out
    Prepare { inputs: Vec<PathBuf> },
    /// Build the superpixel label map of a bundle into --out
    Slic { bundle: Option<PathBuf> },
    /// Score every superpixel of a bundle and write the relevance map into --out
    Relmap {
        bundle: Option<PathBuf>,
        /// Directory holding labels.u32 (default: --out, then the bundle)
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Also render a PNG, e.g. "axis=z slices=40,64,88"
        #[arg(long)]
        montage: Option<String>,
    },
    /// Optimal-threshold, ranked and cumulative DSC of relevance maps
    Eval {
        relmaps: Vec<PathBuf>,
        /// Ground truth per map, in the same order: a bundle, a NIfTI mask or a .u8 mask
        #[arg(long = "gt")]
        gt: Vec<PathBuf>,
        #[arg(long, default_value_t = 5)]
        max_rank: usize,
        #[arg(long, default_value_t = 5)]
        max_k: usize,
    },
    /// Grid of seed sequence x superpixel count x method over bundles with ground truth
    Gridsearch {
        bundles: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "T1w,T1wCE,T2w,FLAIR")]
        sequences: Vec<SequenceKind>,
        #[arg(long, value_delimiter = ',', default_value = "50,100,250")]
        segments: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "blank,min,max")]
        methods: Vec<MethodFamily>,
    },
    /// Render slices of a bundle, optionally with a mask or relevance overlay
    Montage {
        bundle: Option<PathBuf>,
        #[arg(long, default_value = "z")]
        axis: Axis,
        /// Comma-separated slice indices (default: the middle slice)
        #[arg(long, value_delimiter = ',')]
        slices: Vec<usize>,
        /// Sequence to show (default: --seed-sequence)
        #[arg(long)]
        sequence: Option<SequenceKind>,
        /// Overlay the bundle's ground truth
        #[arg(long)]
        mask: bool,
        /// Overlay the relevance map in this directory
        #[arg(long)]
        relmap: Option<PathBuf>,
    },
    /// Write synthetic phantom bundles with a known lesion
    Phantom {
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn inputs(command: &Command) -> Vec<PathBuf> {
    match command {
        Command::Prepare { inputs } => inputs.clone(),
        Command::Slic { bundle } | Command::Relmap { bundle, .. } | Command::Montage { bundle, .. } => {
            bundle.iter().cloned().collect()
        }
        Command::Eval { relmaps, .. } => relmaps.clone(),
        Command::Gridsearch { bundles, .. } => bundles.clone(),
        Command::Phantom { .. } => Vec::new(),
    }
}

fn execute(cfg: &RunConfig, command: Command) -> Result<(), CliError> {
    match command {
        Command::Prepare { .. } => commands::prepare(cfg),
        Command::Slic { .. } => commands::slic(cfg),
        Command::Relmap { labels, montage, .. } => commands::relmap(cfg, labels.as_deref(), montage.as_deref()),
        Command::Eval { gt, max_rank, max_k, .. } => commands::eval(cfg, &gt, max_rank, max_k),
        Command::Gridsearch {
            sequences,
            segments,
            methods,
            ..
        } => commands::gridsearch(
            cfg,
            GridAxes {
                sequences,
                n_segments: segments,
                methods,
            },
        ),
        Command::Montage {
            axis,
            slices,
            sequence,
            mask,
            relmap,
            ..
        } => commands::montage(
            cfg,
            MontageArgs {
                axis,
                slices,
                sequence,
                mask,
                relmap,
            },
        ),
        Command::Phantom { seeds, size } => commands::phantom(cfg, &seeds, size),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&cli.global, &inputs(&cli.command))?;
    // A remote oracle that is down must fail before the output directory is touched.
    if matches!(cli.command, Command::Relmap { .. } | Command::Gridsearch { .. }) {
        if let OracleTarget::Remote(url) = cfg.oracle_target() {
            commands::connect(&url)?;
        }
    }
    let lock = OutputLock::acquire(&cfg.out)?;
    log::info!("relmap {}", std::env::args().skip(1).collect::<Vec<_>>().join(" "));
    let result = execute(&cfg, cli.command);
    if let Err(e) = &result {
        log::error!("{e}");
    }
    drop(lock);
    flush_run_log(&cfg.out);
    result
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
