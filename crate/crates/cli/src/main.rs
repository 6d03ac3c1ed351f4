//! `chroma`: bake scenes, train a luma field, distill teacher colors into it,
//! render, and measure cross-view color consistency.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use chroma::field::load_checkpoint;
use chroma::metrics::{ConsistencyMode, Offsets};
use chroma::scenegen::SceneSpec;
use clap::{Args, Parser, Subcommand};

use crate::config::PipelineConfig;

#[derive(Parser)]
#[command(name = "chroma", version, about = "Colorize grayscale multi-view radiance fields")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Reuse stage checkpoints found in the output directory.
    #[arg(long, global = true)]
    resume: bool,
    /// Overrides the config's dataset directory.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Bake a synthetic scene into a dataset directory.
    GenScene {
        /// Scene file (TOML or JSON); the built-in desk scene when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Generate a random scene with this many primitives instead.
        #[arg(long, conflicts_with = "scene")]
        random: Option<usize>,
    },
    /// Stage 1: fit density and luma appearance to the grayscale views.
    TrainLuma,
    /// Stage 2: colorize the stage-1 grid from the teacher.
    Distill {
        /// Stage-1 checkpoint (defaults to `<out>/stage1.grid`).
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Render dataset views and a trajectory from a checkpoint.
    Render {
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Trajectory frame count (overrides the config).
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Consistency report for a directory of `<view id>.png` frames.
    Evaluate {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        mode: Option<ConsistencyMode>,
        #[arg(long)]
        short: Option<usize>,
        #[arg(long)]
        long: Option<usize>,
        /// Report file stem.
        #[arg(long, default_value = "consistency")]
        name: String,
    },
    /// Run every stage and write renders, checkpoints, logs and reports.
    Pipeline,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(d) = &common.dataset {
        cfg.paths.dataset = d.clone();
    }
    if let Some(o) = &common.out {
        cfg.paths.output = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    let cfg = load_config(&cli.common)?;
    let resume = cli.common.resume;
    match cli.command {
        Command::GenScene { scene, random } => {
            let spec = match (scene, random) {
                (Some(path), _) => SceneSpec::read(&path)?,
                (None, Some(n)) => SceneSpec::random(cli.common.seed.unwrap_or(0), n),
                (None, None) => match &cfg.paths.scene {
                    Some(s) => commands::load_scene(s)?,
                    None => SceneSpec::desk(),
                },
            };
            commands::gen_scene(&spec, &cfg.paths.dataset)?;
        }
        Command::TrainLuma => {
            cfg.write_effective(&cfg.paths.output)?;
            let views = commands::dataset(&cfg)?;
            commands::train_stage(&cfg, &views, resume)?;
        }
        Command::Distill { grid } => {
            cfg.write_effective(&cfg.paths.output)?;
            let views = commands::dataset(&cfg)?;
            let teacher = commands::teacher(&cfg, &views).context("loading teacher")?;
            let path = grid.unwrap_or_else(|| cfg.paths.output.join(commands::STAGE1_CHECKPOINT));
            let stage1 = load_checkpoint(&path)?;
            commands::distill_stage(&cfg, &views, &teacher, stage1, resume)?;
        }
        Command::Render { grid, frames } => {
            let views = commands::dataset(&cfg)?;
            let path = grid.unwrap_or_else(|| cfg.paths.output.join(commands::STAGE2_CHECKPOINT));
            let grid = load_checkpoint(&path)?;
            let opts = cfg.distill.render_options(&grid);
            commands::render_views(&grid, &views, &opts, &cfg.paths.output.join("views"))?;
            let n = frames.unwrap_or(cfg.render.frames);
            commands::render_trajectory(&grid, &views, &opts, n, &cfg.paths.output.join("trajectory"))?;
        }
        Command::Evaluate {
            frames,
            mode,
            short,
            long,
            name,
        } => {
            let views = commands::dataset(&cfg)?;
            let offsets = Offsets {
                short: short.unwrap_or(cfg.metrics.offsets.short),
                long: long.unwrap_or(cfg.metrics.offsets.long),
            };
            let images = commands::read_frames(&frames, &views)?;
            let geom = commands::geometry(&views, Some(&frames))?;
            let report = commands::evaluate(&images, &geom, offsets, mode.unwrap_or(cfg.metrics.mode))?;
            commands::write_report(&report, views.len(), &cfg.paths.output, &name)?;
            println!(
                "short {} long {}",
                fmt_opt(report.mean_short),
                fmt_opt(report.mean_long)
            );
        }
        Command::Pipeline => {
            let s = commands::pipeline(&cfg, resume)?;
            println!(
                "stage-1 PSNR {:.2} dB; long-range error renders {} vs teacher {}",
                s.stage1_psnr,
                fmt_opt(s.renders_long),
                fmt_opt(s.teacher_long)
            );
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CHROMA_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
