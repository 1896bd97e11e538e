//! `svfreg` command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "svfreg", version, about = "Diffeomorphic SVF registration with test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that run the predictor on a pair.
#[derive(Args, Debug, Clone)]
pub struct PairArgs {
    #[arg(long)]
    pub ckpt: String,
    #[arg(long)]
    pub fixed: String,
    #[arg(long)]
    pub moving: String,
    #[arg(long, default_value = "fwd")]
    pub direction: String,
    #[arg(long)]
    pub out: String,
    /// Squaring steps.
    #[arg(long, default_value_t = svfreg::diffeo::DEFAULT_STEPS)]
    pub squaring: u32,
    /// With both masks, also write the warped mask and metrics.json.
    #[arg(long)]
    pub fixed_mask: Option<String>,
    #[arg(long)]
    pub moving_mask: Option<String>,
    /// Defaults to the name of the directory holding `--fixed`.
    #[arg(long)]
    pub case_id: Option<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic lung phantom pairs.
    Phantom {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 48)]
        dims: usize,
        /// Radial scale; with --scale-max, the lower end of a uniform range.
        #[arg(long, default_value_t = 0.8)]
        scale: f64,
        #[arg(long)]
        scale_max: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: String,
        #[arg(long)]
        force: bool,
    },
    /// Pretrain a predictor on a phantom directory.
    Train {
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0.2)]
        lambda: f64,
        #[arg(long, default_value_t = 0.2)]
        dropout: f64,
        #[arg(long, default_value_t = svfreg::diffeo::DEFAULT_STEPS)]
        squaring: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: String,
        #[arg(long)]
        force: bool,
    },
    /// Deterministic inference with a checkpoint.
    Register {
        #[command(flatten)]
        pair: PairArgs,
    },
    /// Uncertainty-weighted test-time adaptation, then inference.
    Adapt {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long, default_value_t = 20)]
        mc_samples: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0.2)]
        lambda: f64,
        #[arg(long, default_value_t = 0.2)]
        dropout: f64,
        #[arg(long, default_value_t = svfreg::uncertainty::DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value = "displacement")]
        regularize: String,
        #[arg(long, default_value = "sum")]
        aggregation: String,
        #[arg(long)]
        refresh_uncertainty: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Overlap, surface distance and folding of a warped mask.
    Eval {
        #[arg(long)]
        fixed_mask: String,
        #[arg(long)]
        warped_mask: String,
        #[arg(long)]
        disp: String,
        #[arg(long, default_value = "fwd")]
        direction: String,
        #[arg(long, default_value = "case")]
        case_id: String,
        #[arg(long)]
        out: String,
        #[arg(long)]
        force: bool,
    },
    /// Collect metrics JSON files under a directory into one CSV.
    Report {
        #[arg(long = "in")]
        input: String,
        #[arg(long)]
        csv: String,
        #[arg(long)]
        force: bool,
    },
    /// Replay a run from its manifest into a new output location.
    Rerun {
        #[arg(long)]
        manifest: String,
        #[arg(long)]
        out: String,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

pub fn run(argv: Vec<String>) -> Result<(), commands::CliError> {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                Err(commands::CliError::Usage("invalid arguments".into()))
            } else {
                Ok(())
            };
        }
    };
    let rest = argv[1..].to_vec();
    match cli.command {
        Command::Phantom {
            count,
            dims,
            scale,
            scale_max,
            amplitude,
            seed,
            out,
            force,
        } => commands::phantom(&rest, count, dims, scale, scale_max, amplitude, seed, &out, force),
        Command::Train {
            data,
            epochs,
            lr,
            lambda,
            dropout,
            squaring,
            seed,
            out,
            force,
        } => commands::train(&rest, &data, epochs, lr, lambda, dropout, squaring, seed, &out, force),
        Command::Register { pair } => commands::register(&rest, &pair),
        Command::Adapt {
            pair,
            steps,
            mc_samples,
            lr,
            lambda,
            dropout,
            epsilon,
            regularize,
            aggregation,
            refresh_uncertainty,
            seed,
        } => {
            let cfg = commands::adapt_config(
                &pair,
                steps,
                mc_samples,
                lr,
                lambda,
                dropout,
                epsilon,
                &regularize,
                &aggregation,
                refresh_uncertainty,
                seed,
            )?;
            commands::adapt(&rest, &pair, cfg)
        }
        Command::Eval {
            fixed_mask,
            warped_mask,
            disp,
            direction,
            case_id,
            out,
            force,
        } => commands::eval(&rest, &fixed_mask, &warped_mask, &disp, &direction, &case_id, &out, force),
        Command::Report { input, csv, force } => commands::report(&rest, &input, &csv, force),
        Command::Rerun { manifest, out, force } => {
            let replay = commands::rerun_argv(&argv[0], &manifest, &out, force)?;
            run(replay)
        }
    }
}
