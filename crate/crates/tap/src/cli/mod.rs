//! The `tap` command-line surface.
//!
//! One executable with subcommands for dataset generation, training,
//! evaluation, bottleneck analysis, planning, recursive prediction, and
//! frame inspection. Every command honors `--seed`: runs with equal
//! arguments and seeds produce byte-identical datasets, checkpoints, and
//! CSV reports. `TAP_THREADS` caps the worker count.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric
//! failure.

mod commands;
mod config;
mod train;

pub use commands::{
    cmd_bottleneck, cmd_dump_frames, cmd_eval, cmd_gen, cmd_plan, cmd_recursive, cmd_train,
    PlanMethod,
};
pub use config::{CheckpointMeta, LossKind, Mode, RunConfig};
pub use train::{eval_episode, eval_split, train, EpochRow, ModelSet, RunPlan, TrainOutcome};

use crate::synthworlds::WorldId;
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::sync::Once;

#[derive(Parser, Debug)]
#[command(
    name = "tap",
    about = "Time-agnostic frame prediction on synthetic grid worlds",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset of seeded episodes.
    Gen {
        /// World: gridpick, gridpickplace, gridpush, gridpush3, maze.
        #[arg(long)]
        world: String,
        /// Number of episodes.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Object count override for pushing worlds (2 or 3).
        #[arg(long)]
        objects: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a predictor on a generated dataset.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "eval.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate the best of N prior samples (variational checkpoints).
        #[arg(long, default_value_t = 1)]
        best_of: usize,
    },
    /// Bottleneck discovery frequency of a warp-only checkpoint.
    Bottleneck {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "bottleneck_curve.csv")]
        out: PathBuf,
    },
    /// Hierarchical CEM planning with optional model subgoals.
    Plan {
        /// Subgoal provider: direct, genmin, or fix.
        #[arg(long)]
        method: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "plan_results.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recursive goal-side prediction with per-level frame dumps.
    Recursive {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value_t = 4)]
        max_depth: usize,
        #[arg(long, default_value = "recursive_out")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump an episode's frames as PPM/PGM images.
    DumpFrames {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value = "frames_out")]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    world: Option<String>,
    /// forward, bidirectional, or recursive.
    #[arg(long)]
    mode: Option<String>,
    /// fix, min, genmin, genmin_vae, genmin_no_gan.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    bell_sigma: Option<f64>,
    #[arg(long)]
    fix_fraction: Option<f64>,
    #[arg(long)]
    lambda_kl: Option<f64>,
    #[arg(long)]
    lambda_gan: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train the warp-only variant (no new-pixel synthesis).
    #[arg(long)]
    warp_only: bool,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    log_out: Option<PathBuf>,
}

impl TrainArgs {
    /// Resolve the run configuration: JSON file first, then flags win.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(w) = &self.world {
            cfg.world = WorldId::parse(w)?;
        }
        if let Some(m) = &self.mode {
            cfg.mode = match m.as_str() {
                "forward" => Mode::Forward,
                "bidirectional" => Mode::Bidirectional,
                "recursive" => Mode::Recursive,
                other => return Err(Error::Config(format!("unknown mode {other:?}"))),
            };
        }
        if let Some(l) = &self.loss {
            cfg.loss = LossKind::parse(l)?;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.bell_sigma {
            cfg.bell_sigma = Some(v);
        }
        if let Some(v) = self.fix_fraction {
            cfg.fix_fraction = v;
        }
        if let Some(v) = self.lambda_kl {
            cfg.lambda_kl = v;
        }
        if let Some(v) = self.lambda_gan {
            cfg.lambda_gan = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.warp_only {
            cfg.use_new_pixels = false;
        }
        if let Some(p) = &self.dataset {
            cfg.dataset = Some(p.clone());
        }
        if let Some(p) = &self.checkpoint_out {
            cfg.checkpoint_out = Some(p.clone());
        }
        if let Some(p) = &self.log_out {
            cfg.log_out = Some(p.clone());
        }
        Ok(cfg)
    }
}

static INIT_THREADS: Once = Once::new();

/// Configures the global worker pool from `TAP_THREADS` (once).
pub fn init_threads() {
    INIT_THREADS.call_once(|| {
        if let Ok(v) = std::env::var("TAP_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    init_threads();
    match cli.command {
        Command::Gen {
            world,
            n,
            seed,
            objects,
            out,
        } => {
            let mut world = WorldId::parse(&world)?;
            if let Some(k) = objects {
                if world.object_count() >= 2 {
                    world = match k {
                        2 => WorldId::GridPush2,
                        3 => WorldId::GridPush3,
                        other => {
                            return Err(Error::Config(format!(
                                "pushing worlds support 2 or 3 objects, got {other}"
                            )))
                        }
                    };
                } else if k != world.object_count() {
                    return Err(Error::Config(format!(
                        "--objects does not apply to {}",
                        world.name()
                    )));
                }
            }
            cmd_gen(world, n, seed, &out)
        }
        Command::Train(args) => cmd_train(&args.resolve()?),
        Command::Eval {
            checkpoint,
            dataset,
            out,
            seed,
            best_of,
        } => cmd_eval(&checkpoint, &dataset, &out, seed, best_of),
        Command::Bottleneck {
            checkpoint,
            dataset,
            out,
        } => cmd_bottleneck(&checkpoint, &dataset, &out),
        Command::Plan {
            method,
            checkpoint,
            dataset,
            out,
            episodes,
            seed,
        } => cmd_plan(
            PlanMethod::parse(&method)?,
            checkpoint.as_deref(),
            &dataset,
            &out,
            episodes,
            seed,
        ),
        Command::Recursive {
            checkpoint,
            dataset,
            episode,
            max_depth,
            out_dir,
            seed,
        } => cmd_recursive(&checkpoint, &dataset, episode, max_depth, &out_dir, seed),
        Command::DumpFrames {
            dataset,
            episode,
            out_dir,
        } => cmd_dump_frames(&dataset, episode, &out_dir),
    }
}

/// Binary entry point: parse, run, map errors to exit codes.
pub fn main_from_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; usage problems are config errors
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
