//! Run configuration. Every section rejects unknown keys so a typo in a
//! config file is an error rather than a silently ignored setting.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sim_env::ScenarioId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdGains {
    pub kp_lateral: f64,
    pub kd_lateral: f64,
    pub kp_vertical: f64,
    pub kd_vertical: f64,
    pub kp_longitudinal: f64,
    pub kd_longitudinal: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self {
            kp_lateral: 3.0,
            kd_lateral: 0.1,
            kp_vertical: 1.0,
            kd_vertical: 0.0,
            kp_longitudinal: 3.0,
            kd_longitudinal: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KfNoise {
    /// White-acceleration spectral density of the constant-velocity model.
    pub process: f64,
    /// Measurement standard deviation of the box center, pixels.
    pub center_px: f64,
    /// Measurement standard deviation of the box area, square pixels.
    pub area_px2: f64,
}

impl Default for KfNoise {
    fn default() -> Self {
        Self {
            process: 50.0,
            center_px: 1.0,
            area_px2: 20.0,
        }
    }
}

/// Environment knobs beyond the top-level ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub focal_px: f64,
    pub velocity_lag_s: f64,
    pub detect_threshold: f64,
    pub miss_hold_frames: u32,
    /// Distance the victim tries to keep from its target, meters.
    pub desired_distance: f64,
    /// Relative area error treated as "inside the designated range".
    pub area_deadband: f64,
    pub stop_speed: f64,
    pub stop_patience: u32,
    pub min_steps: usize,
    /// Episode cap for scenarios 1 and 2.
    pub max_steps: usize,
    /// Episode cap for scenario 3 (timeout → terminal reward 0).
    pub follow_timeout_steps: usize,
    pub leader_speed: f64,
    pub follow_distance_scale: f64,
    pub collision_reward: f64,
    pub distance_reward_scale: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            focal_px: 32.0,
            velocity_lag_s: 0.2,
            detect_threshold: 0.3,
            miss_hold_frames: 5,
            desired_distance: 4.0,
            area_deadband: 0.05,
            stop_speed: 0.05,
            stop_patience: 3,
            min_steps: 5,
            max_steps: 100,
            follow_timeout_steps: 500,
            leader_speed: 1.0,
            follow_distance_scale: 1.0,
            collision_reward: 100.0,
            distance_reward_scale: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub anchors: usize,
    pub grid: usize,
    pub classes: usize,
    /// Anchor priors `(w, h)` in pixels, one per anchor slot.
    pub anchor_priors: Vec<[f64; 2]>,
    pub width: usize,
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub accuracy_gate: f64,
    pub seed: u64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            anchors: 3,
            grid: 8,
            classes: 3,
            anchor_priors: vec![[5.0, 5.0], [12.0, 10.0], [28.0, 22.0]],
            width: 16,
            train_samples: 3000,
            holdout_samples: 500,
            epochs: 12,
            batch: 16,
            lr: 2e-3,
            accuracy_gate: 0.9,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// Perturbation budget in 8-bit intensity units.
    pub alpha: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Weight of the mean squared pre-sigmoid perturbation logit; keeps the
    /// perturbation head out of saturation.
    pub logit_penalty: f64,
    pub latent_channels: usize,
    pub head_channels: usize,
    pub batch: usize,
    /// Per-iteration step of the iterative baseline, 8-bit units.
    pub baseline_step: f64,
    pub target_class: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            lambda0: 1.0,
            lambda1: 1.0,
            lambda2: 0.1,
            logit_penalty: 0.01,
            latent_channels: 16,
            head_channels: 32,
            batch: 8,
            baseline_step: 2.0,
            target_class: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    pub hidden: usize,
    pub feature: usize,
    pub window: usize,
    pub batch: usize,
    pub buffer_episodes: usize,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            hidden: 256,
            feature: 64,
            window: 16,
            batch: 8,
            buffer_episodes: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub hidden: usize,
    pub gamma: f64,
    pub tau: f64,
    pub batch: usize,
    pub buffer_capacity: usize,
    /// Sample only from the most recent `window` transitions when set.
    pub window: Option<usize>,
    pub sigma_start: f64,
    pub sigma_end: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            hidden: 64,
            gamma: 0.99,
            tau: 0.005,
            batch: 64,
            buffer_capacity: 100_000,
            window: None,
            sigma_start: 0.2,
            sigma_end: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub img: f64,
    pub sys: f64,
    pub actor: f64,
    pub critic: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            img: 1e-4,
            sys: 3e-4,
            actor: 1e-3,
            critic: 3e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmupActions {
    /// Uniform over `[0,1]³` at every step, independent of the actor.
    Uniform,
    /// One uniform command drawn per episode and held for all its steps.
    Held,
    /// The exploring actor, as after warm-up.
    Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub episodes: usize,
    pub rates: LearningRates,
    pub warmup_episodes: usize,
    /// How warm-up episodes pick commands.
    pub warmup_actions: WarmupActions,
    /// Update the critic (but not the actor) during warm-up.
    pub warmup_critic: bool,
    /// Stop once the rolling 10-episode mean return reaches this value.
    pub reward_threshold: Option<f64>,
    pub checkpoint_every: usize,
    /// Abort after this many consecutive non-finite update steps.
    pub max_skipped_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            episodes: 150,
            rates: LearningRates::default(),
            warmup_episodes: 5,
            warmup_actions: WarmupActions::Uniform,
            warmup_critic: false,
            reward_threshold: None,
            checkpoint_every: 25,
            max_skipped_steps: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
    /// Seeds for evaluation episodes start here; training seeds never reach it.
    pub seed_base: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 10,
            seed_base: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub frames: usize,
    pub iters: usize,
    pub warmup_frames: usize,
    pub repetitions: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            frames: 200,
            iters: 10,
            warmup_frames: 10,
            repetitions: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub scenario: u8,
    pub seed: u64,
    pub run_id: Option<String>,
    pub image_size: usize,
    pub dt: f64,
    pub v_max: f64,
    pub pd_gains: PdGains,
    pub kf_noise: KfNoise,
    pub collision_radius: f64,
    pub env: EnvSection,
    pub detector: DetectorSection,
    pub attack: AttackSection,
    pub dynamics: DynamicsSection,
    pub policy: PolicySection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            scenario: 1,
            seed: 0,
            run_id: None,
            image_size: 64,
            dt: 0.1,
            v_max: 1.5,
            pd_gains: PdGains::default(),
            kf_noise: KfNoise::default(),
            collision_radius: 1.5,
            env: EnvSection::default(),
            detector: DetectorSection::default(),
            attack: AttackSection::default(),
            dynamics: DynamicsSection::default(),
            policy: PolicySection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn scenario_id(&self) -> Result<ScenarioId> {
        ScenarioId::try_from(self.scenario)
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("s{}-{}", self.scenario, &self.digest()[..8]))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario_id()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_size == 0 || self.image_size % self.detector.grid != 0 {
            return bad("image_size must be a positive multiple of detector.grid");
        }
        if self.image_size / self.detector.grid != 8 {
            return bad("the detector backbone has stride 8: image_size must equal 8 × detector.grid");
        }
        if self.dt <= 0.0 || self.v_max <= 0.0 || self.collision_radius <= 0.0 {
            return bad("dt, v_max and collision_radius must be positive");
        }
        if self.detector.anchor_priors.len() != self.detector.anchors {
            return bad("detector.anchor_priors must list one prior per anchor");
        }
        if self.attack.alpha <= 0.0 {
            return bad("attack.alpha must be positive");
        }
        if [self.attack.lambda0, self.attack.lambda1, self.attack.lambda2, self.attack.logit_penalty]
            .iter()
            .any(|&l| l < 0.0)
        {
            return bad("attack lambdas must be nonnegative");
        }
        if !(self.policy.tau > 0.0 && self.policy.tau <= 1.0) {
            return bad("policy.tau must lie in (0, 1]");
        }
        if self.attack.target_class >= self.detector.classes {
            return bad("attack.target_class out of range");
        }
        if self.dynamics.window < 1 {
            return bad("dynamics.window must be at least 1");
        }
        crate::trainer::validate_rates(&self.train.rates)?;
        Ok(())
    }
}
