use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::error;

use mimicforge::commands::{self, EditPaths, SynthSpec};
use mimicforge::config::RunConfig;
use mimicforge::experiment::{run_signal, SignalConfig};
use mimicforge::{exit_code, Invalid, EXIT_VALIDATION};

#[derive(Parser)]
#[command(name = "mimicforge", version, about = "Self-supervised imitative editing at desk scale")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural dataset (moving-shape clips and segmented stills).
    Synth(SynthArgs),
    /// Select, mix and mask training pairs.
    Prepare(PrepareArgs),
    /// Train the dual U-Net on a prepared pair directory.
    Train(TrainArgs),
    /// Fill the masked region of a source image from a reference.
    Edit(EditArgs),
    /// Score edited outputs against a benchmark manifest.
    Eval(EvalArgs),
    /// Run the learning-signal experiment and print its report.
    Signal(SignalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    videos: usize,
    #[arg(long, default_value_t = 20)]
    stills: usize,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args)]
struct PrepareArgs {
    /// Dataset root with `videos/` and/or `stills/`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for the manifest and pair files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint's weights, optimizer state and step.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Optional depth map; without it the depth condition is zeroed.
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Guidance scale (defaults to the config value, 5).
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    outputs: PathBuf,
    /// JSON-lines scores for the embedding metrics.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Directory for report.json and report.md.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SignalArgs {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    videos: Option<usize>,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn required(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| Invalid(format!("--{name} is required (or set paths.{name} in the config)")).into())
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MIMICFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Invalid(format!("MIMICFORGE_THREADS = {raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Synth(a) => {
            let spec = SynthSpec {
                videos: a.videos,
                stills: a.stills,
                frames: a.frames,
                size: a.size,
                seed: cfg.seed,
            };
            commands::synth(&spec, &a.out)?;
            println!("wrote {} clips and {} stills to {}", a.videos, a.stills, a.out.display());
        }
        Command::Prepare(a) => {
            cfg.validate()?;
            let dataset = required(a.dataset, &cfg.paths.dataset, "dataset")?;
            let out = required(a.out, &cfg.paths.pairs, "pairs")?;
            let s = commands::prepare(&cfg, &dataset, &out)?;
            println!(
                "wrote {} pairs ({} video, {} pseudo) to {}",
                s.video_pairs + s.pseudo_pairs,
                s.video_pairs,
                s.pseudo_pairs,
                out.display()
            );
        }
        Command::Train(a) => {
            if let Some(s) = a.steps {
                cfg.train.steps = s;
            }
            if let Some(lr) = a.lr {
                cfg.train.lr = lr;
            }
            if let Some(b) = a.batch {
                cfg.train.batch = b;
            }
            cfg.validate()?;
            let pairs = required(a.pairs, &cfg.paths.pairs, "pairs")?;
            let out = required(a.out, &cfg.paths.checkpoint, "checkpoint")?;
            let s = commands::train(&cfg, &pairs, &out, a.resume.as_deref())?;
            println!(
                "trained steps {}..{} (last loss {}); checkpoint {}",
                s.first_step,
                s.last_step,
                s.last_loss.map_or("n/a".into(), |l| format!("{l:.5}")),
                out.display()
            );
        }
        Command::Edit(a) => {
            if let Some(s) = a.scale {
                cfg.sample.guidance_scale = s;
            }
            if let Some(s) = a.steps {
                cfg.sample.steps = s;
            }
            cfg.validate()?;
            let paths = EditPaths {
                checkpoint: required(a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?,
                source: a.source,
                mask: a.mask,
                reference: a.reference,
                depth: a.depth,
                out: a.out,
            };
            let record = commands::edit(&cfg, &paths, &cfg.sample)?;
            println!(
                "wrote {} (scale {}, {} steps, seed {})",
                paths.out.display(),
                record.guidance_scale,
                record.steps,
                record.seed
            );
        }
        Command::Eval(a) => {
            cfg.validate()?;
            let (json, md) = commands::eval(&cfg, &a.manifest, &a.outputs, a.scores.as_deref(), &a.out)?;
            println!("wrote {} and {}", json.display(), md.display());
        }
        Command::Signal(a) => {
            let mut sc = SignalConfig {
                seed: cfg.seed,
                ..SignalConfig::default()
            };
            if let Some(s) = a.steps {
                sc.steps = s;
            }
            if let Some(v) = a.videos {
                sc.train_videos = v;
            }
            let report = run_signal(&sc, |step, loss| log::info!("step {step} loss {loss:.5}"))?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(p) = a.out {
                std::fs::write(&p, &json).with_context(|| format!("writing {}", p.display()))?;
            }
            println!("{json}");
            println!(
                "reference lowers masked MSE by {:.1}% (oracle: {:.1}%)",
                100.0 * report.reduction(),
                100.0 * report.oracle_reduction()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
