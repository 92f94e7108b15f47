//! Normal vs attacked episodes on fresh seeds.

use serde::{Deserialize, Serialize};

use super::{mann_whitney_u, MannWhitney, Stats};
use crate::detector::Detector;
use crate::sim_env::Env;
use crate::trainer::{run_attack_episode, run_clean_episode, stream_rng, Behavior, AttackModels, EpisodeSummary};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Normal,
    Attack,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::Attack => "attack",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub condition: Condition,
    pub scenario: u8,
    pub seed: u64,
    pub metric: f64,
    pub steps: usize,
    pub episode_return: f64,
    pub terminal_reward: f64,
}

impl MetricSample {
    fn from_summary(condition: Condition, s: &EpisodeSummary) -> Self {
        Self {
            condition,
            scenario: s.scenario,
            seed: s.seed,
            metric: s.metric(),
            steps: s.steps,
            episode_return: s.episode_return,
            terminal_reward: s.terminal_reward,
        }
    }
}

/// Runs `n` episodes on seeds `seed_base..seed_base+n`. With `attack` the
/// trained policy acts deterministically; without it the victim sees clean frames.
pub fn eval_scenarios(
    env: &Env,
    victim: &Detector<f32>,
    attack: Option<&AttackModels>,
    scenario: u8,
    n: usize,
    seed_base: u64,
    alpha: f64,
) -> Result<Vec<MetricSample>> {
    (0..n as u64)
        .map(|i| {
            let seed = seed_base + i;
            match attack {
                None => Ok(MetricSample::from_summary(Condition::Normal, &run_clean_episode(env, victim, scenario, seed)?.0)),
                Some(models) => {
                    let mut rng = stream_rng(seed, 0, 1);
                    let out = run_attack_episode(env, victim, models, scenario, seed, alpha, Behavior::Greedy, &mut rng)?;
                    Ok(MetricSample::from_summary(Condition::Attack, &out.summary))
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: u8,
    pub normal: Stats,
    pub attack: Stats,
    /// U of the attack sample against the normal one.
    pub test: MannWhitney,
}

pub fn compare(normal: &[MetricSample], attack: &[MetricSample]) -> Result<Comparison> {
    let a: Vec<f64> = attack.iter().map(|s| s.metric).collect();
    let b: Vec<f64> = normal.iter().map(|s| s.metric).collect();
    Ok(Comparison {
        scenario: attack.first().or(normal.first()).map_or(0, |s| s.scenario),
        normal: Stats::of(&b),
        attack: Stats::of(&a),
        test: mann_whitney_u(&a, &b)?,
    })
}
