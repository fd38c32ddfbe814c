//! `epiwarp` command-line entry point.
//!
//! Exit status is 0 on success, 1 for invalid arguments or configuration
//! and 2 when a run fails. Diagnostics go to stderr.

mod commands;
mod config;
mod error;
mod export;

use std::io::Write;
use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use epiwarp::imgio::Split;
use epiwarp::metrics::Granularity;

use crate::commands::EvaluateArgs;
use crate::config::Config;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "epiwarp", version, about = "Simulate and correct EPI susceptibility distortion in 2D DWI slices")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML config file (sections: phantom, simulate, dataset, restore)
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set dataset.phantoms=4` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every stochastic output; replaces the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads [default: available cores]
    #[arg(long, global = true, env = "EPIWARP_JOBS")]
    jobs: Option<NonZeroUsize>,
    /// More log output on stderr (-v info, -vv debug, -vvv trace)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    /// Divide by the echo spacing in the shift formula instead of
    /// multiplying (reproduces the typeset variant; not physical)
    #[arg(long, global = true)]
    eq1_literal: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a pelvic phantom (b50, adc, t2w, mask)
    Phantom {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Distort a phantom with a B0 field along one PE direction
    Simulate {
        /// Phantom directory written by `phantom`
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        /// Field image stem (Hz); defaults to the dipoles in [simulate.dipoles]
        #[arg(long, value_name = "STEM")]
        field: Option<PathBuf>,
        /// PE direction; replaces simulate.direction
        #[arg(long, value_parser = ["lr", "rl", "ap", "pa"])]
        direction: Option<String>,
        /// Output sample directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a paired dataset and its manifest
    MakeDataset {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Correct one sample with a known or estimated field
    Correct {
        /// fugue-ideal, topup-ideal or topup-default
        #[arg(long)]
        method: String,
        /// Sample directory written by `simulate` or `make-dataset`
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        /// Sample with the opposite PE polarity; without it the reverse
        /// image is simulated from the sample's clean images
        #[arg(long, value_name = "DIR")]
        reverse: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Correct and score a dataset split
    Evaluate {
        /// Dataset manifest
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Comma-separated methods: baseline, fugue-ideal, topup-ideal,
        /// topup-default, neural
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        /// Output directory for restored images and the report
        #[arg(long)]
        out: PathBuf,
        /// Directory of neural predictions, `<dir>/<sample id>/{b50,b1400,adc}`
        #[arg(long, value_name = "DIR")]
        neural_dir: Option<PathBuf>,
        /// Only write corrected images and confidence masks
        #[arg(long)]
        no_reference: bool,
        /// Split to run on
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Summary aggregation level
        #[arg(long, value_enum, default_value_t = GranularityArg::Slice)]
        granularity: GranularityArg,
    },
    /// Write 8-bit PNG previews of images (lossy, for viewing only)
    ExportPng {
        /// Image stems or directories to search for images
        #[arg(long = "in", value_name = "PATH", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Fixed intensity window `LO,HI` [default: per image]
        #[arg(long, value_name = "LO,HI", value_parser = parse_window)]
        window: Option<(f32, f32)>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GranularityArg {
    Slice,
    Subject,
}

fn parse_window(s: &str) -> Result<(f32, f32), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f32 = lo.trim().parse().map_err(|e| format!("LO: {e}"))?;
    let hi: f32 = hi.trim().parse().map_err(|e| format!("HI: {e}"))?;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(format!("need finite LO < HI, got {lo},{hi}"));
    }
    Ok((lo, hi))
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    // built without reading RUST_LOG so the job count is the only
    // setting taken from the environment
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .format_timestamp(None)
        .try_init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let mut cfg = Config::load(g.config.as_deref(), &g.overrides)?;
    let seed = g.seed.unwrap_or(cfg.seed);
    cfg.set_seed(seed);
    if g.eq1_literal {
        cfg.use_literal_formula();
    }
    let jobs = g
        .jobs
        .or_else(|| std::thread::available_parallelism().ok())
        .map_or(1, NonZeroUsize::get);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    log::debug!("{jobs} worker threads");

    pool.install(|| match &cli.command {
        Command::Phantom { out } => commands::phantom(&cfg, out),
        Command::Simulate {
            input,
            field,
            direction,
            out,
        } => {
            if let Some(d) = direction {
                cfg.simulate.direction = d.parse().map_err(CliError::Usage)?;
            }
            commands::simulate(&cfg, input, field.as_deref(), out)
        }
        Command::MakeDataset { out } => commands::make_dataset_cmd(&cfg, out),
        Command::Correct {
            method,
            input,
            reverse,
            out,
        } => commands::correct(&cfg, method, input, reverse.as_deref(), out),
        Command::Evaluate {
            manifest,
            methods,
            out,
            neural_dir,
            no_reference,
            split,
            granularity,
        } => commands::evaluate(
            &cfg,
            &EvaluateArgs {
                manifest,
                methods,
                out,
                neural_dir: neural_dir.clone(),
                no_reference: *no_reference,
                split: match split {
                    SplitArg::Train => Some(Split::Train),
                    SplitArg::Validation => Some(Split::Validation),
                    SplitArg::Test => Some(Split::Test),
                    SplitArg::All => None,
                },
                granularity: match granularity {
                    GranularityArg::Slice => Granularity::Slice,
                    GranularityArg::Subject => Granularity::Subject,
                },
            },
        ),
        Command::ExportPng { inputs, window, out } => commands::export_png(inputs, out, *window),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let informational = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return ExitCode::from(if informational { 0 } else { 1 });
        }
    };
    init_logging(cli.global.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
