mod commands;
mod error;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use combinet::arch::ArchConfig;
use combinet::data::{ShapeKind, SynthSpec};
use combinet::trainer::TrainConfig;

use crate::commands::{
    compare_runs, CountArgs, EvalArgs, InferArgs, InferInput, Invocation, SynthArgs, TrainArgs,
};
use crate::error::{usage, CliError, CliResult, EXIT_USAGE};
use crate::run::{absolute, write_atomic, RunDir, RunManifest, MANIFEST_FILE};

#[derive(Parser)]
#[command(name = "combinet", version, about = "Bayesian segmentation with Monte Carlo dropout")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Out {
    /// Output directory; defaults to run/<timestamp>-<command>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and MAC report for an architecture.
    Count {
        /// Preset name or TOML file.
        arch: String,
        /// Input size as HxWxC.
        #[arg(long, default_value = "224x224x3")]
        input: String,
        /// Monte Carlo passes.
        #[arg(long, default_value_t = 1)]
        samples: u64,
        /// text or csv.
        #[arg(long, default_value = "text")]
        format: String,
        #[command(flatten)]
        out: Out,
    },
    /// Train from a dataset manifest.
    Train {
        #[arg(long)]
        arch: Option<String>,
        /// Training configuration TOML; built-in defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest of training pairs.
        #[arg(long)]
        data: PathBuf,
        /// Manifest of validation pairs.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Train/val/test fractions applied to --data when --val is absent.
        #[arg(long, default_value = "0.6,0.2,0.2")]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint holding optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// mIoU and mean entropy of a checkpoint, repeated over seeds.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 30)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        no_dropout: bool,
        #[command(flatten)]
        out: Out,
    },
    /// Masks, entropy maps and metrics for images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A single PNG image.
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        image: Option<PathBuf>,
        /// Manifest of labelled pairs.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_dropout: bool,
        #[command(flatten)]
        out: Out,
    },
    /// Synthetic shape dataset with a manifest.
    Synth {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// discs or stripes.
        #[arg(long, default_value = "discs")]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: Out,
    },
    /// Re-run a recorded manifest and compare its artifacts byte for byte.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        no_verify: bool,
        #[command(flatten)]
        out: Out,
    },
}

fn parse_input(s: &str) -> CliResult<[usize; 3]> {
    let parts: Vec<&str> = s.split('x').collect();
    let dims: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok().filter(|&d| d > 0)).collect();
    match dims.as_deref() {
        Some(&[h, w, c]) => Ok([h, w, c]),
        _ => Err(usage(format!("--input `{s}` must look like 224x224x3"))),
    }
}

fn parse_split(s: &str) -> CliResult<[f64; 3]> {
    let v: Option<Vec<f64>> = s.split(',').map(|p| p.trim().parse().ok()).collect();
    match v.as_deref() {
        Some(&[a, b, c]) => Ok([a, b, c]),
        _ => Err(usage(format!("--split `{s}` must be three comma-separated fractions"))),
    }
}

fn resolve(command: Command) -> CliResult<(Invocation, Option<PathBuf>)> {
    Ok(match command {
        Command::Count { arch, input, samples, format, out } => {
            let csv = match format.parse()? {
                combinet::cost::ReportFormat::Csv => true,
                combinet::cost::ReportFormat::Text => false,
            };
            let a = CountArgs { arch: ArchConfig::load(&arch)?, input: parse_input(&input)?, samples, csv };
            (Invocation::Count(a), out.out)
        }
        Command::Train { arch, config, data, val, split, seed, epochs, resume, out } => {
            let mut train = match &config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                    TrainConfig::from_toml(&text, &p.display().to_string())?
                }
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                train.seed = s;
            }
            if let Some(e) = epochs {
                train.epochs = e;
            }
            train.validate()?;
            let resume = resume.as_deref().map(absolute).transpose()?;
            let arch = match (arch, &resume) {
                (Some(a), _) => ArchConfig::load(&a)?,
                (None, Some(r)) => combinet::arch::load_checkpoint(r)?
                    .config
                    .ok_or_else(|| usage(format!("{}: checkpoint carries no architecture", r.display())))?,
                (None, None) => return Err(usage("--arch is required unless --resume is given")),
            };
            let a = TrainArgs {
                arch,
                train,
                data: absolute(&data)?,
                val: val.as_deref().map(absolute).transpose()?,
                split: parse_split(&split)?,
                resume,
            };
            (Invocation::Train(a), out.out)
        }
        Command::Eval { checkpoint, data, samples, seed, repeats, no_dropout, out } => {
            let a = EvalArgs {
                checkpoint: absolute(&checkpoint)?,
                data: absolute(&data)?,
                samples,
                seed,
                repeats,
                dropout: !no_dropout,
            };
            (Invocation::Eval(a), out.out)
        }
        Command::Infer { checkpoint, image, data, samples, seed, no_dropout, out } => {
            let input = match (image, data) {
                (Some(i), None) => InferInput::Image(absolute(&i)?),
                (None, Some(d)) => InferInput::Manifest(absolute(&d)?),
                _ => return Err(usage("give exactly one of --image or --data")),
            };
            let a = InferArgs { checkpoint: absolute(&checkpoint)?, input, samples, seed, dropout: !no_dropout };
            (Invocation::Infer(a), out.out)
        }
        Command::Synth { n, size, sigma, classes, kind, seed, out } => {
            let kind: ShapeKind = kind.parse()?;
            let spec = SynthSpec { num_classes: classes, kind, ..SynthSpec::discs(n, size, sigma) };
            spec.validate()?;
            (Invocation::Synth(SynthArgs { spec, seed }), out.out)
        }
        Command::Replay { .. } => unreachable!("replay is dispatched separately"),
    })
}

/// Runs an invocation in a fresh directory and records its manifest.
fn execute(inv: &Invocation, out: Option<&Path>) -> (Option<RunDir>, CliResult<()>) {
    let started_at = chrono::Local::now().to_rfc3339();
    let clock = Instant::now();
    let mut dir = match RunDir::create(out, inv.name()) {
        Ok(d) => d,
        Err(e) => return (None, Err(e)),
    };
    let result = inv.execute(&mut dir);
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: inv.name().into(),
        invocation: inv.clone(),
        seeds: inv.seeds(),
        artifacts: dir.artifacts.clone(),
        volatile: dir.volatile.clone(),
        started_at,
        duration_seconds: clock.elapsed().as_secs_f64(),
        exit_code: result.as_ref().err().map_or(0, CliError::exit_code),
    };
    let written = serde_json::to_vec_pretty(&manifest)
        .map_err(CliError::from)
        .and_then(|bytes| write_atomic(&dir.root.join(MANIFEST_FILE), &bytes));
    (Some(dir), result.and(written))
}

fn replay(manifest: &Path, out: Option<&Path>, verify: bool) -> CliResult<()> {
    let recorded = RunManifest::load(manifest)?;
    let original = manifest.parent().unwrap_or(Path::new("."));
    let (dir, result) = execute(&recorded.invocation, out);
    let code = result.as_ref().err().map_or(0, CliError::exit_code);
    if !verify {
        return result;
    }
    let Some(dir) = dir else { return result };
    if code != recorded.exit_code {
        return Err(CliError::Mismatch(format!(
            "replay exited with {code}, recorded run exited with {}",
            recorded.exit_code
        )));
    }
    let differing = compare_runs(original, &recorded.artifacts, &dir.root);
    if !differing.is_empty() {
        return Err(CliError::Mismatch(format!("replay differs in: {}", differing.join(", "))));
    }
    println!("replayed {} artifacts identically into {}", recorded.artifacts.len(), dir.root.display());
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("COMBINET_THREADS") else { return Ok(()) };
    let n: usize = raw.trim().parse().map_err(|_| usage(format!("COMBINET_THREADS=`{raw}` is not a count")))?;
    #[cfg(feature = "parallel")]
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Replay { manifest, no_verify, out } => replay(&manifest, out.out.as_deref(), !no_verify),
        other => {
            let (inv, out) = resolve(other)?;
            execute(&inv, out.as_deref()).1
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(EXIT_USAGE as u8))
        }
    }
}
