//! The `pointcat` command-line driver.
//!
//! Every command reads an optional JSON config whose sections are `model`,
//! `train`, `data` and `output`; any key can be overridden on the command line
//! with a dotted flag such as `--model.k 16`. Exit codes: 0 success, 1 config
//! or input error, 2 numeric failure, 3 failed check.

mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use config::{DataConfig, OutputConfig, RunConfig, Source};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_NUMERIC: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "pointcat", version, about = "Dual-branch cross-attention point cloud models")]
pub struct Cli {
    /// Worker threads for per-sample parallelism (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics.csv, final.ckpt and resolved_config.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured dataset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        /// Which part of the dataset to score: test, train or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory receiving eval.csv (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient on a tiny model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corrupt one analytic gradient before comparing.
        #[arg(long)]
        inject_bug: bool,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Finite-difference half-width.
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
    },
    /// Train and cost a family of variants; writes ablate_<sweep>.csv.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// grouping, fusion or attention.
        #[arg(long)]
        sweep: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the sampling and neighbour kernels; prints CSV `n,k,kernel,nanos`.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit code for an error: numeric failures map to 2, everything else to 1.
pub fn exit_code_of(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<crate::Error>(),
            Some(crate::Error::Numeric(_) | crate::Error::Determinism(_))
        )
    });
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_CONFIG
    }
}

/// Parses `args` (including the program name), runs the command and returns its exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> u8 {
    let (rest, overrides) = match config::extract_overrides(args.into_iter().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_CONFIG;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            // help and version requests print to stdout
            let _ = e.print();
            return code;
        }
    };
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("warning: --jobs ignored: {e}");
        }
    }
    match commands::dispatch(cli.command, &overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            exit_code_of(&e)
        }
    }
}

pub fn main() -> ExitCode {
    ExitCode::from(run(std::env::args()))
}
