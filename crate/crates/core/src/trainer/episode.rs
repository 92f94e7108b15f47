//! Recursive attack rollouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actor_critic::{Agent, Transition};
use crate::attacker::Generator;
use crate::config::Config;
use crate::detector::Detector;
use crate::dyn_autoencoder::{sample_hidden, DynAutoencoder, Trajectory};
use crate::nn::Adam;
use crate::sim_env::{Env, EnvState, EpisodeRecord, Image, ScenarioId};
use crate::Result;

/// Independent RNG for `(seed, episode, stream)`, so any episode can be
/// replayed without the history of the ones before it.
pub fn stream_rng(seed: u64, episode: u64, stream: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for v in [seed, episode, stream] {
        h.update(v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub const STREAM_ENV: u64 = 0;
pub const STREAM_ACT: u64 = 1;
pub const STREAM_UPDATE: u64 = 2;

/// Where an episode's commands come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Behavior {
    /// `μ(h)` with no noise.
    Greedy,
    /// `μ(h)` plus clipped Gaussian noise of this scale.
    Explore(f64),
    /// Uniform over `[0,1]³`, ignoring the actor.
    Uniform,
    /// This command at every step.
    Fixed([f64; 3]),
}

/// Environment seed of training episode `episode`.
pub fn episode_seed(seed: u64, episode: u64) -> u64 {
    stream_rng(seed, episode, STREAM_ENV).random()
}

/// Every trainable attacker component plus its optimizer.
#[derive(Clone, Debug)]
pub struct AttackModels {
    pub generator: Generator<f32>,
    pub sys: DynAutoencoder<f32>,
    pub agent: Agent,
    pub img_opt: Adam,
    pub sys_opt: Adam,
}

impl AttackModels {
    pub fn new(cfg: &Config) -> Self {
        let mut rng = stream_rng(cfg.seed, u64::MAX, 0);
        let generator = Generator::new(crate::attacker::GeneratorSpec::from_config(cfg), rng.random());
        let sys = DynAutoencoder::new(crate::dyn_autoencoder::SysSpec::from_config(cfg), rng.random());
        let r = &cfg.train.rates;
        let agent = Agent::new(cfg.dynamics.hidden, cfg.policy.hidden, r.actor, r.critic, rng.random());
        Self {
            img_opt: Adam::new(&generator.params, r.img),
            sys_opt: Adam::new(&sys.params, r.sys),
            generator,
            sys,
            agent,
        }
    }
}

/// How one episode ended up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub scenario: u8,
    pub seed: u64,
    pub steps: usize,
    pub episode_return: f64,
    pub terminal_reward: f64,
}

impl EpisodeSummary {
    /// Scenario metric: episode return for scenario 3, terminal reward otherwise.
    pub fn metric(&self) -> f64 {
        if self.scenario == ScenarioId::LoseTrack.number() {
            self.episode_return
        } else {
            self.terminal_reward
        }
    }
}

/// An attack episode in progress, advanced one frame at a time so the
/// trainer can interleave actor/critic updates.
pub struct AttackEpisode {
    pub state: EnvState,
    pub image: Image,
    pub h: Vec<f32>,
    pub trajectory: Trajectory,
    pub records: Vec<EpisodeRecord>,
    pub episode_return: f64,
    pub terminal_reward: Option<f64>,
}

impl AttackEpisode {
    pub fn start(env: &Env, scenario: u8, seed: u64, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let (state, image) = env.reset(scenario, seed)?;
        let size = image.width;
        Ok(Self {
            state,
            image,
            h: sample_hidden(hidden, rng),
            trajectory: Trajectory::new(scenario, seed, size),
            records: Vec::new(),
            episode_return: 0.0,
            terminal_reward: None,
        })
    }

    pub fn done(&self) -> bool {
        self.state.done
    }

    /// `a_t = μ(h_t)` (+ noise), `w_t = Attacker(Encoder₀(x_t), a_t)`, step the
    /// victim on the perturbed frame, then `h_{t+1} = GRU(h_t, Encoder₁(x_t), a_t)`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        env: &Env,
        victim: &Detector<f32>,
        models: &AttackModels,
        alpha: f64,
        behavior: Behavior,
        rng: &mut impl Rng,
    ) -> Result<Transition> {
        let a = match behavior {
            Behavior::Greedy => models.agent.actor.act(&self.h, false, 0.0, rng),
            Behavior::Explore(sigma) => models.agent.actor.act(&self.h, true, sigma, rng),
            Behavior::Uniform => [rng.random(), rng.random(), rng.random()],
            Behavior::Fixed(a) => a,
        };
        let w = models.generator.generate_perturbation(&self.image, a);
        let out = env.step(&self.state, victim, Some(&w), alpha)?;
        let h_next = models.sys.gru_step(&self.h, &self.image, a);
        let r = out.total_reward();
        self.trajectory.push(&self.image, a);
        self.records.push(EpisodeRecord {
            t: self.state.step_count,
            state: out.next_state.summary(),
            action: Some(a),
            reward: r,
            done: out.done,
        });
        self.episode_return += r;
        self.terminal_reward = out.terminal;
        let t = Transition {
            h: std::mem::replace(&mut self.h, h_next.clone()),
            a,
            r,
            h_next,
            done: out.done,
        };
        self.state = out.next_state;
        self.image = out.next_image;
        Ok(t)
    }

    pub fn summary(&self) -> EpisodeSummary {
        EpisodeSummary {
            scenario: self.state.scenario.number(),
            seed: self.state.seed,
            steps: self.records.len(),
            episode_return: self.episode_return,
            terminal_reward: self.terminal_reward.unwrap_or(0.0),
        }
    }
}

/// Result of a complete attack episode.
pub struct EpisodeOutcome {
    pub trajectory: Trajectory,
    pub transitions: Vec<Transition>,
    pub records: Vec<EpisodeRecord>,
    pub summary: EpisodeSummary,
}

/// Runs one attack episode to completion with no parameter updates.
#[allow(clippy::too_many_arguments)]
pub fn run_attack_episode(
    env: &Env,
    victim: &Detector<f32>,
    models: &AttackModels,
    scenario: u8,
    seed: u64,
    alpha: f64,
    behavior: Behavior,
    rng: &mut impl Rng,
) -> Result<EpisodeOutcome> {
    let mut ep = AttackEpisode::start(env, scenario, seed, models.sys.spec.hidden, rng)?;
    let mut transitions = Vec::new();
    while !ep.done() {
        transitions.push(ep.step(env, victim, models, alpha, behavior, rng)?);
    }
    Ok(EpisodeOutcome {
        summary: ep.summary(),
        trajectory: ep.trajectory,
        transitions,
        records: ep.records,
    })
}

/// The unattacked reference: the victim sees clean frames.
pub fn run_clean_episode(env: &Env, victim: &Detector<f32>, scenario: u8, seed: u64) -> Result<(EpisodeSummary, Vec<EpisodeRecord>)> {
    let (mut state, _) = env.reset(scenario, seed)?;
    let mut records = Vec::new();
    let (mut ret, mut terminal) = (0.0, 0.0);
    while !state.done {
        let out = env.step(&state, victim, None, 0.0)?;
        let r = out.total_reward();
        ret += r;
        terminal = out.terminal.unwrap_or(0.0);
        records.push(EpisodeRecord {
            t: state.step_count,
            state: out.next_state.summary(),
            action: None,
            reward: r,
            done: out.done,
        });
        state = out.next_state;
    }
    let summary = EpisodeSummary {
        scenario,
        seed,
        steps: records.len(),
        episode_return: ret,
        terminal_reward: terminal,
    };
    Ok((summary, records))
}
