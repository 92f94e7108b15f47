//! Recursive attack rollouts and multi-level stochastic optimization.

mod checkpoint;
mod episode;
mod train;

pub use checkpoint::{checkpoint_name, latest, load, load_models, save, CheckpointHeader, LATEST_FILE};
pub use episode::{
    episode_seed, run_attack_episode, run_clean_episode, stream_rng, AttackEpisode, AttackModels, Behavior, EpisodeOutcome,
    EpisodeSummary,
};
pub use train::{read_metrics, train, EpisodeMetrics, TrainReport, Trainer, UpdateCounts, METRICS_FILE, TIMING_FILE};

use crate::config::LearningRates;
use crate::{Error, Result};

/// Enforces `img < sys < actor < critic`, naming the first offending pair.
pub fn validate_rates(r: &LearningRates) -> Result<()> {
    let chain = [("img", r.img), ("sys", r.sys), ("actor", r.actor), ("critic", r.critic)];
    for (name, v) in chain {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Config(format!("learning rate {name} must be positive, got {v}")));
        }
    }
    for pair in chain.windows(2) {
        let ((lo, a), (hi, b)) = (pair[0], pair[1]);
        if a >= b {
            return Err(Error::Config(format!(
                "learning rates ({lo}, {hi}) violate {lo} < {hi}: {a} >= {b}"
            )));
        }
    }
    Ok(())
}
