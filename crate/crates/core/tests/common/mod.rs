#![allow(dead_code)]

use advlab::config::Config;
use advlab::detector::{Detector, DetectorSpec};

/// A configuration small enough for whole training loops inside a test.
pub fn tiny_config(scenario: u8) -> Config {
    let mut c = Config::default();
    c.scenario = scenario;
    c.seed = 11;
    c.image_size = 16;
    c.detector.grid = 2;
    c.detector.width = 4;
    c.attack.latent_channels = 4;
    c.attack.head_channels = 4;
    c.attack.batch = 2;
    c.dynamics.hidden = 6;
    c.dynamics.feature = 4;
    c.dynamics.window = 3;
    c.dynamics.batch = 2;
    c.policy.hidden = 8;
    c.policy.batch = 4;
    c.env.max_steps = 12;
    c.env.follow_timeout_steps = 12;
    c.train.episodes = 3;
    c.train.warmup_episodes = 1;
    c.train.checkpoint_every = 1;
    c
}

pub fn tiny_detector(cfg: &Config) -> Detector<f32> {
    Detector::new(DetectorSpec::from_config(cfg), 5)
}
