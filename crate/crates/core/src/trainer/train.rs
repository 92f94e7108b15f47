//! Multi-level stochastic optimization: per-step critic/actor updates during
//! the rollout, then `T_stop` estimator and generator updates after it.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::episode::{episode_seed, Behavior, stream_rng, AttackEpisode, AttackModels, STREAM_ACT, STREAM_UPDATE};
use crate::actor_critic::{noise_scale, TransitionBuffer};
use crate::attacker::{img_update, AttackWeights};
use crate::config::{Config, WarmupActions};
use crate::detector::Detector;
use crate::dyn_autoencoder::{sys_update, TrajectoryBuffer};
use crate::sim_env::{Env, Image};
use crate::{Error, Result};

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub seed: u64,
    pub steps: usize,
    pub episode_return: f64,
    pub terminal_reward: f64,
    /// Scenario metric (return for scenario 3, terminal reward otherwise).
    pub metric: f64,
    pub sigma: f64,
    pub warmup: bool,
    pub aborted: bool,
    /// Mean `l_img` over this episode's generator updates.
    pub img_loss: Option<f64>,
    /// Mean detector-facing part `target + λ₀·vanish` of those updates.
    pub img_detector_loss: Option<f64>,
    pub sys_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_objective: Option<f64>,
    pub updates: UpdateCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounts {
    pub critic: usize,
    pub actor: usize,
    pub sys: usize,
    pub img: usize,
    pub skipped: usize,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Complete training state; everything needed to continue bit-identically.
pub struct Trainer {
    pub cfg: Config,
    pub env: Env,
    pub detector: Detector<f32>,
    pub models: AttackModels,
    pub trajectories: TrajectoryBuffer,
    pub transitions: TransitionBuffer,
    pub metrics: Vec<EpisodeMetrics>,
    pub next_episode: usize,
    pub skip_streak: usize,
}

impl Trainer {
    pub fn new(cfg: &Config, detector: Detector<f32>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            env: Env::new(cfg),
            models: AttackModels::new(cfg),
            trajectories: TrajectoryBuffer::new(cfg.dynamics.buffer_episodes),
            transitions: TransitionBuffer::new(cfg.policy.buffer_capacity, cfg.policy.window),
            metrics: Vec::new(),
            next_episode: 0,
            skip_streak: 0,
            cfg: cfg.clone(),
            detector,
        })
    }

    fn note(&mut self, ok: bool, counts: &mut UpdateCounts) -> Result<()> {
        if ok {
            self.skip_streak = 0;
            return Ok(());
        }
        counts.skipped += 1;
        self.skip_streak += 1;
        if self.skip_streak > self.cfg.train.max_skipped_steps {
            return Err(Error::Divergence(format!(
                "{} consecutive non-finite update steps in episode {}",
                self.skip_streak, self.next_episode
            )));
        }
        Ok(())
    }

    /// One outer iteration: rollout with interleaved actor/critic updates,
    /// then `T_stop` updates of θ_sys and θ_img.
    pub fn run_episode(&mut self) -> Result<EpisodeMetrics> {
        let cfg = self.cfg.clone();
        let ep = self.next_episode;
        let seed = episode_seed(cfg.seed, ep as u64);
        let mut act_rng = stream_rng(cfg.seed, ep as u64, STREAM_ACT);
        let mut upd_rng = stream_rng(cfg.seed, ep as u64, STREAM_UPDATE);
        let sigma = noise_scale(cfg.policy.sigma_start, cfg.policy.sigma_end, ep, cfg.train.episodes);
        let warmup = ep < cfg.train.warmup_episodes;
        let behavior = match cfg.train.warmup_actions {
            _ if !warmup => Behavior::Explore(sigma),
            WarmupActions::Uniform => Behavior::Uniform,
            WarmupActions::Held => Behavior::Fixed([act_rng.random(), act_rng.random(), act_rng.random()]),
            WarmupActions::Policy => Behavior::Explore(sigma),
        };
        let mut counts = UpdateCounts::default();
        let (mut critic_loss, mut actor_obj, mut sys_loss, mut img_loss, mut img_det) =
            (Mean::default(), Mean::default(), Mean::default(), Mean::default(), Mean::default());

        let hidden = cfg.dynamics.hidden;
        let mut episode = AttackEpisode::start(&self.env, cfg.scenario, seed, hidden, &mut act_rng)?;
        let mut aborted = false;
        while !episode.done() {
            let t = match episode.step(&self.env, &self.detector, &self.models, cfg.attack.alpha, behavior, &mut act_rng) {
                Ok(t) => t,
                Err(e) => {
                    log::warn!("episode {ep} aborted: {e}");
                    aborted = true;
                    break;
                }
            };
            self.transitions.push(t);
            if (warmup && !cfg.train.warmup_critic) || self.transitions.len() < cfg.policy.batch {
                continue;
            }
            let batch: Vec<_> = self.transitions.sample(&mut upd_rng, cfg.policy.batch).into_iter().cloned().collect();
            let refs: Vec<_> = batch.iter().collect();
            let c = self.models.agent.critic_update(&refs, cfg.policy.gamma);
            counts.critic += 1;
            if let Some(v) = c {
                critic_loss.add(v);
            }
            self.note(c.is_some(), &mut counts)?;
            if !warmup {
                let a = self.models.agent.actor_update(&refs);
                counts.actor += 1;
                if let Some(v) = a {
                    actor_obj.add(v);
                }
                self.note(a.is_some(), &mut counts)?;
            }
            self.models.agent.soft_update_targets(cfg.policy.tau);
        }

        let summary = episode.summary();
        if !aborted {
            let t_stop = summary.steps;
            self.trajectories.push(episode.trajectory);
            let wts = AttackWeights::from_config(&cfg);
            for _ in 0..t_stop {
                let windows = self.trajectories.sample_windows(&mut upd_rng, cfg.dynamics.batch, cfg.dynamics.window, hidden);
                if !windows.is_empty() {
                    let l = sys_update(&mut self.models.sys, &mut self.models.sys_opt, &windows)?;
                    counts.sys += 1;
                    if let Some(v) = l {
                        sys_loss.add(v);
                    }
                    self.note(l.is_some(), &mut counts)?;
                }
                let pairs = self.trajectories.sample_pairs(&mut upd_rng, cfg.attack.batch);
                let xs: Vec<&Image> = pairs.iter().map(|p| &p.0).collect();
                let acts: Vec<[f64; 3]> = pairs.iter().map(|p| p.1).collect();
                let l = img_update(&mut self.models.generator, &mut self.models.img_opt, &self.detector, &xs, &acts, &wts)?;
                counts.img += 1;
                if let Some(l) = &l {
                    img_loss.add(l.total);
                    img_det.add(l.detector_part(wts.lambda0));
                }
                self.note(l.is_some(), &mut counts)?;
            }
        }

        let m = EpisodeMetrics {
            episode: ep,
            seed,
            steps: summary.steps,
            episode_return: summary.episode_return,
            terminal_reward: summary.terminal_reward,
            metric: summary.metric(),
            sigma,
            warmup,
            aborted,
            img_loss: img_loss.get(),
            img_detector_loss: img_det.get(),
            sys_loss: sys_loss.get(),
            critic_loss: critic_loss.get(),
            actor_objective: actor_obj.get(),
            updates: counts,
        };
        self.metrics.push(m.clone());
        self.next_episode += 1;
        Ok(m)
    }

    /// Rolling mean of the scenario metric over the last `n` episodes.
    /// Mean episode return over the last `n` episodes.
    pub fn rolling_return(&self, n: usize) -> Option<f64> {
        if self.metrics.len() < n || n == 0 {
            return None;
        }
        let tail = &self.metrics[self.metrics.len() - n..];
        Some(tail.iter().map(|m| m.episode_return).sum::<f64>() / n as f64)
    }

    pub fn finished(&self) -> bool {
        if self.next_episode >= self.cfg.train.episodes {
            return true;
        }
        match (self.cfg.train.reward_threshold, self.rolling_return(10)) {
            (Some(th), Some(mean)) => mean >= th,
            _ => false,
        }
    }
}

/// What `train` leaves behind.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub episodes: usize,
    pub last_checkpoint: PathBuf,
    pub metrics: Vec<EpisodeMetrics>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";

fn write_metrics(path: &Path, metrics: &[EpisodeMetrics]) -> Result<()> {
    let mut text = String::new();
    for m in metrics {
        text.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpisodeMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Runs (or resumes) training under `run_dir`, writing `logs/metrics.jsonl`,
/// wall-clock timings to `logs/timing.jsonl`, and checkpoints.
pub fn train(cfg: &Config, detector: Detector<f32>, run_dir: &Path, resume: Option<&Path>) -> Result<TrainReport> {
    let ckpt_dir = run_dir.join("checkpoints");
    let log_dir = run_dir.join("logs");
    for d in [&ckpt_dir, &log_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut trainer = match resume {
        Some(p) => checkpoint::load(cfg, detector, p)?,
        None => Trainer::new(cfg, detector)?,
    };
    let metrics_path = log_dir.join(METRICS_FILE);
    write_metrics(&metrics_path, &trainer.metrics)?;
    let timing_path = log_dir.join(TIMING_FILE);
    let mut timing = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&timing_path)
        .map_err(|e| Error::io(&timing_path, e))?;
    let start = Instant::now();
    let mut last = checkpoint::save(&trainer, &ckpt_dir)?;
    while !trainer.finished() {
        let m = match trainer.run_episode() {
            Ok(m) => m,
            Err(e @ Error::Divergence(_)) => {
                let p = checkpoint::save(&trainer, &ckpt_dir)?;
                log::error!("training aborted, state saved to {}", p.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(f, "{}", serde_json::to_string(&m).expect("metrics serialize")).map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(
            timing,
            "{}",
            serde_json::json!({"episode": m.episode, "wall_clock_s": start.elapsed().as_secs_f64()})
        )
        .map_err(|e| Error::io(&timing_path, e))?;
        log::info!(
            "episode {} steps {} metric {:.3} return {:.3} img_loss {} sys_loss {}",
            m.episode,
            m.steps,
            m.metric,
            m.episode_return,
            m.img_loss.map_or("-".into(), |v| format!("{v:.4}")),
            m.sys_loss.map_or("-".into(), |v| format!("{v:.1}")),
        );
        let every = trainer.cfg.train.checkpoint_every;
        if every > 0 && trainer.next_episode % every == 0 {
            last = checkpoint::save(&trainer, &ckpt_dir)?;
        }
    }
    if !last.ends_with(checkpoint::checkpoint_name(trainer.next_episode)) {
        last = checkpoint::save(&trainer, &ckpt_dir)?;
    }
    Ok(TrainReport {
        episodes: trainer.next_episode,
        last_checkpoint: last,
        metrics: trainer.metrics,
    })
}
