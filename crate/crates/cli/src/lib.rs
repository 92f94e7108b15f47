//! Command-line surface: configuration loading, the run directory layout and
//! the end-to-end pipeline.

pub mod commands;
pub mod manifest;

use std::path::PathBuf;

use advlab::config::Config;
use advlab::Error;
use clap::{Parser, Subcommand};

pub use commands::Context;

#[derive(Debug, Parser)]
#[command(name = "advlab", version, about = "Recursive adversarial image attacks on a simulated vision-guided vehicle")]
pub struct Cli {
    /// TOML configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root of all run directories.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and train the frozen detector.
    Pretrain,
    /// Train generator, state estimator and actor-critic against the detector.
    Train {
        /// Continue from the newest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Normal episodes, and attacked ones with --attack, on fresh seeds.
    Eval {
        #[arg(long)]
        scenario: Option<u8>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        attack: bool,
    },
    /// Per-frame latency of the generator against the iterative baseline.
    Bench {
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Training-curve figures from a metric log.
    Plot {
        /// Defaults to the run's own log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// pretrain, train, eval, bench and plot in one go.
    Pipeline,
    /// Re-render one episode to a frame directory.
    Replay {
        /// Environment seed of the episode.
        #[arg(long)]
        episode_seed: u64,
        #[arg(long)]
        attack: bool,
    },
}

/// Process exit status for a failed command.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 1,
        Error::Gate(_) => 2,
        Error::Divergence(_) | Error::Io { .. } | Error::Format(_) => 3,
    }
}

pub fn load_config(cli: &Cli) -> advlab::Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one parsed invocation and returns a short human-readable summary.
pub fn run(cli: &Cli) -> advlab::Result<String> {
    let cfg = load_config(cli)?;
    let ctx = Context::new(cfg, &cli.out, cli.force);
    let root = ctx.layout.root.display().to_string();
    Ok(match &cli.command {
        Command::Pretrain => {
            let r = commands::pretrain(&ctx)?;
            format!("detector written to {root}/checkpoints (holdout accuracy {:.3})", r.holdout_accuracy)
        }
        Command::Train { resume } => {
            let r = commands::train_attacker(&ctx, *resume)?;
            format!("trained {} episodes; last checkpoint {}", r.episodes, r.last_checkpoint.display())
        }
        Command::Eval { scenario, episodes, attack } => {
            let r = commands::eval(
                &ctx,
                scenario.unwrap_or(ctx.cfg.scenario),
                episodes.unwrap_or(ctx.cfg.eval.episodes),
                *attack,
            )?;
            match &r.comparison {
                Some(c) => format!(
                    "scenario {}: normal {:.3}±{:.3}, attack {:.3}±{:.3}, U = {}, p = {:.3e}",
                    r.scenario, c.normal.mean, c.normal.std, c.attack.mean, c.attack.std, c.test.u, c.test.p
                ),
                None => format!("scenario {}: normal {:.3}±{:.3}", r.scenario, r.normal_stats.mean, r.normal_stats.std),
            }
        }
        Command::Bench { frames, iters } => {
            let r = commands::bench(
                &ctx,
                frames.unwrap_or(ctx.cfg.bench.frames),
                iters.unwrap_or(ctx.cfg.bench.iters),
            )?;
            let s = &r.summary;
            format!(
                "recursive {:.2}±{:.2} ms, iterative {:.2}±{:.2} ms, median ratio {:.1}; loss {:.3} vs {:.3}",
                s.recursive_time.mean,
                s.recursive_time.std,
                s.iterative_time.mean,
                s.iterative_time.std,
                s.median_ratio,
                s.recursive_loss.mean,
                s.iterative_loss.mean
            )
        }
        Command::Plot { log } => {
            let r = commands::plot(&ctx, log.as_deref())?;
            format!("{} plot files in {root}/plots", r.files.len())
        }
        Command::Pipeline => {
            let r = commands::pipeline(&ctx)?;
            let c = r.eval.comparison.as_ref().expect("pipeline evaluates the attack");
            format!(
                "{root}: {} episodes, attack {:.3} vs normal {:.3} (p = {:.3e}), bench ratio {:.1}",
                r.train.episodes, c.attack.mean, c.normal.mean, c.test.p, r.bench.summary.median_ratio
            )
        }
        Command::Replay { episode_seed, attack } => {
            let r = commands::replay(&ctx, *episode_seed, *attack)?;
            format!("{} frames written to {}", r.frames, r.dir.display())
        }
    })
}
