//! `pdml` command-line driver.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pdml::PdmlError;

#[derive(Debug, Parser)]
#[command(
    name = "pdml",
    version,
    about = "Probabilistic deep metric learning for hyperspectral cubes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cube with known labels.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: u16,
        /// Raster size as HxW.
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 16)]
        bands: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Half-width of the mixing footprint in pixels.
        #[arg(long, default_value_t = 1.0)]
        mixing: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Tile grid as RxC; defaults to a square grid sized from the class count.
        #[arg(long, value_parser = parse_size)]
        grid: Option<(usize, usize)>,
    },
    /// Train a model and write checkpoint, history and split.
    Train {
        #[arg(long)]
        cube: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a training state written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on its validation or test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitPart::Test)]
        split: SplitPart,
        /// Split record to use instead of the one stored in the checkpoint.
        #[arg(long)]
        split_file: Option<PathBuf>,
        /// Write center-pixel embeddings of the evaluated pixels as CSV.
        #[arg(long)]
        dump_embeddings: Option<PathBuf>,
    },
    /// Classify every pixel and write a PPM map.
    PredictMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full objective on a fresh model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitPart {
    Val,
    Test,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<PdmlError> for CliError {
    fn from(e: PdmlError) -> Self {
        let msg = e.to_string();
        match e {
            PdmlError::Argument(_)
            | PdmlError::Config(_)
            | PdmlError::Split { .. }
            | PdmlError::Batch(_)
            | PdmlError::Json(_) => CliError::Usage(msg),
            PdmlError::Ingest { .. }
            | PdmlError::Io(_)
            | PdmlError::Checkpoint(_)
            | PdmlError::Render(_) => CliError::Io(msg),
            PdmlError::Numeric(_) | PdmlError::ZeroVariance { .. } => CliError::Numeric(msg),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth {
            out,
            classes,
            size,
            bands,
            seed,
            mixing,
            noise,
            grid,
        } => commands::synth(&out, classes, size, bands, seed, mixing, noise, grid),
        Command::Train {
            cube,
            labels,
            config,
            out,
            seed,
            resume,
        } => commands::train(cube, labels, config, out, seed, resume),
        Command::Eval {
            checkpoint,
            cube,
            labels,
            split,
            split_file,
            dump_embeddings,
        } => commands::eval(
            &checkpoint,
            &cube,
            &labels,
            split == SplitPart::Test,
            split_file.as_deref(),
            dump_embeddings.as_deref(),
        ),
        Command::PredictMap {
            checkpoint,
            cube,
            out,
        } => commands::predict_map(&checkpoint, &cube, &out),
        Command::Gradcheck {
            config,
            eps,
            coords,
            seed,
        } => commands::gradcheck(config.as_deref(), eps, coords, seed),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("pdml: {e}");
            ExitCode::from(e.code())
        }
    }
}
