mod analysis;
mod ctx;
mod pipeline;
mod svg;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::analysis::AxisArg;
use crate::ctx::{init_threads, RunCtx};
use crate::tables::Split;

/// Canopy height mapping pipeline: synthetic scenes, feature enhancement,
/// height estimation and forestry analytics.
#[derive(Parser)]
#[command(name = "canopy", version)]
struct Cli {
    /// Run configuration (JSON). Defaults to `<out>/config.json`, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scene(s).
    Synth,
    /// Cut tiles and compute low-resolution features.
    Extract,
    /// Self-supervised training of the feature enhancer.
    TrainEnhancer,
    /// Upsample every tile's features.
    Enhance,
    /// Supervised training of the height head.
    TrainHead,
    /// Predict canopy height for a tile split and mosaic the result.
    Infer {
        #[arg(long, value_enum, default_value = "holdout")]
        split: Split,
    },
    /// Pixel-wise metrics, either for two rasters or for a tile split.
    Eval {
        #[arg(long, requires = "reference")]
        pred: Option<PathBuf>,
        #[arg(long = "ref", requires = "pred")]
        reference: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "holdout")]
        split: Split,
        /// Also report the coefficient of determination.
        #[arg(long)]
        determination: bool,
    },
    /// Mean-height profiles along X and/or Y.
    Profile {
        #[arg(long)]
        chm: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        axis: AxisArg,
    },
    /// Local-maxima tree detection.
    Detect {
        #[arg(long)]
        chm: Option<PathBuf>,
        /// Reference trees CSV; reports the detection success rate.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-parcel aboveground biomass.
    Agb {
        #[arg(long)]
        chm: Option<PathBuf>,
        #[arg(long)]
        parcels: Option<PathBuf>,
        /// Use these trees instead of detecting them on the CHM.
        #[arg(long)]
        trees: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Growth rate per species from parcel biomass tables.
    Growth {
        #[arg(long, num_args = 1..)]
        agb: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Figures and a JSON summary of a finished run.
    Report,
}

fn run(cli: Cli) -> canopy_core::Result<()> {
    let ctx = RunCtx::resolve(cli.config.as_deref(), cli.seed, &cli.out)?;
    ctx.cfg.validate()?;
    match cli.command {
        Command::Synth => pipeline::synth(&ctx),
        Command::Extract => pipeline::extract(&ctx),
        Command::TrainEnhancer => pipeline::train_enhancer_cmd(&ctx),
        Command::Enhance => pipeline::enhance(&ctx),
        Command::TrainHead => pipeline::train_head_cmd(&ctx),
        Command::Infer { split } => pipeline::infer(&ctx, split),
        Command::Eval {
            pred,
            reference,
            split,
            determination,
        } => pipeline::eval(&ctx, pred.as_deref(), reference.as_deref(), split, determination),
        Command::Profile { chm, reference, axis } => {
            analysis::profile_cmd(&ctx, chm.as_deref(), reference.as_deref(), axis)
        }
        Command::Detect { chm, truth, output } => {
            analysis::detect_cmd(&ctx, chm.as_deref(), truth.as_deref(), output.as_deref())
        }
        Command::Agb {
            chm,
            parcels,
            trees,
            output,
        } => analysis::agb_cmd(
            &ctx,
            chm.as_deref(),
            parcels.as_deref(),
            trees.as_deref(),
            output.as_deref(),
        ),
        Command::Growth { agb, output } => analysis::growth_cmd(&ctx, &agb, output.as_deref()),
        Command::Report => analysis::report_cmd(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    init_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}
