//! Desk-scale world: 2D vehicle kinematics, the renderer, the victim guidance
//! stack and the three attack scenarios.

mod guidance;
mod kalman;
mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacker::apply_perturbation;
use crate::config::Config;
use crate::{Error, Result};

pub use guidance::{saturate, select_target_box, PdController, PdOutput};
pub use kalman::{BoxFilter, KfState, Mat6, Vec6};
pub use render::{
    background, BoundingBox, Camera, Image, Projection, SceneObject, CLASS_CAR, CLASS_PERSON, CLASS_SIGN, CLASS_SIZE,
    NEAR_PLANE, NUM_CLASSES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    /// Push the UAV away from the car it approaches.
    Away = 1,
    /// Steer the UAV to the right.
    ToRight = 2,
    /// Make the follower lose (or ram) the leader it tracks through a Kalman filter.
    LoseTrack = 3,
}

impl ScenarioId {
    pub fn number(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for ScenarioId {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(ScenarioId::Away),
            2 => Ok(ScenarioId::ToRight),
            3 => Ok(ScenarioId::LoseTrack),
            _ => Err(Error::Config(format!("scenario must be 1, 2 or 3, got {v}"))),
        }
    }
}

/// Anything that turns a (possibly perturbed) camera frame into boxes sorted
/// by descending confidence.
pub trait Perception {
    fn detect_boxes(&self, x: &Image, conf_threshold: f64) -> Vec<BoundingBox>;
}

/// Victim-side memory carried between frames.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceMemory {
    pub prev_error: Option<[f64; 3]>,
    pub last_command: [f64; 3],
    pub miss_count: u32,
    pub kf: Option<KfState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub scenario: ScenarioId,
    pub seed: u64,
    pub vehicle_pos: [f64; 2],
    pub vehicle_vel: [f64; 2],
    pub origin: [f64; 2],
    pub objects: Vec<SceneObject>,
    /// Index into `objects` of the vehicle being followed (scenario 3 only).
    pub leader: Option<usize>,
    pub step_count: usize,
    pub slow_count: u32,
    pub collided: bool,
    pub done: bool,
    pub background_seed: u64,
    /// Leader's lateral weave: `[phase, amplitude, angular rate]`.
    pub weave: [f64; 3],
    pub guidance: GuidanceMemory,
}

impl EnvState {
    pub fn speed(&self) -> f64 {
        self.vehicle_vel[0].hypot(self.vehicle_vel[1])
    }

    pub fn leader_distance(&self) -> Option<f64> {
        let l = &self.objects[self.leader?];
        Some((l.pos[0] - self.vehicle_pos[0]).hypot(l.pos[1] - self.vehicle_pos[1]))
    }

    pub fn summary(&self) -> StateSummary {
        StateSummary {
            pos: self.vehicle_pos,
            vel: self.vehicle_vel,
            leader_distance: self.leader_distance(),
            tracking: self.guidance.miss_count == 0,
        }
    }
}

/// Compact per-step state record for episode logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub leader_distance: Option<f64>,
    pub tracking: bool,
}

/// One line of an episode log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub t: usize,
    pub state: StateSummary,
    pub action: Option<[f64; 3]>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_image: Image,
    pub next_state: EnvState,
    /// Running reward for this step.
    pub reward: f64,
    /// Terminal reward, present exactly when `done`.
    pub terminal: Option<f64>,
    pub done: bool,
    /// The detections the victim acted on this step.
    pub boxes: Vec<BoundingBox>,
}

impl StepResult {
    pub fn total_reward(&self) -> f64 {
        self.reward + self.terminal.unwrap_or(0.0)
    }
}

/// Scenario-independent world parameters, read from the config.
#[derive(Clone, Debug, PartialEq)]
pub struct Env {
    pub camera: Camera,
    pub pd: PdController,
    pub filter: BoxFilter,
    pub dt: f64,
    pub v_max: f64,
    pub velocity_lag_s: f64,
    pub detect_threshold: f64,
    pub miss_hold_frames: u32,
    pub stop_speed: f64,
    pub stop_patience: u32,
    pub min_steps: usize,
    pub max_steps: usize,
    pub follow_timeout_steps: usize,
    pub leader_speed: f64,
    pub follow_distance_scale: f64,
    pub collision_radius: f64,
    pub collision_reward: f64,
    pub distance_reward_scale: f64,
    pub target_class: usize,
}

impl Env {
    pub fn new(cfg: &Config) -> Self {
        let e = &cfg.env;
        let size = cfg.image_size as f64;
        let car = CLASS_SIZE[CLASS_CAR];
        let desired_area = (e.focal_px * car[0] / e.desired_distance) * (e.focal_px * car[1] / e.desired_distance);
        Self {
            camera: Camera {
                width: cfg.image_size,
                height: cfg.image_size,
                focal_px: e.focal_px,
            },
            pd: PdController {
                gains: cfg.pd_gains.clone(),
                width: size,
                height: size,
                desired_area,
                area_deadband: e.area_deadband,
                dt: cfg.dt,
                v_max: cfg.v_max,
            },
            filter: BoxFilter::new(cfg.kf_noise.clone()),
            dt: cfg.dt,
            v_max: cfg.v_max,
            velocity_lag_s: e.velocity_lag_s,
            detect_threshold: e.detect_threshold,
            miss_hold_frames: e.miss_hold_frames,
            stop_speed: e.stop_speed,
            stop_patience: e.stop_patience,
            min_steps: e.min_steps,
            max_steps: e.max_steps,
            follow_timeout_steps: e.follow_timeout_steps,
            leader_speed: e.leader_speed,
            follow_distance_scale: e.follow_distance_scale,
            collision_radius: cfg.collision_radius,
            collision_reward: e.collision_reward,
            distance_reward_scale: e.distance_reward_scale,
            target_class: CLASS_CAR,
        }
    }

    pub fn step_cap(&self, scenario: ScenarioId) -> usize {
        match scenario {
            ScenarioId::LoseTrack => self.follow_timeout_steps,
            _ => self.max_steps,
        }
    }

    pub fn reset(&self, scenario: u8, seed: u64) -> Result<(EnvState, Image)> {
        let scenario = ScenarioId::try_from(scenario)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000 ^ scenario.number() as u64);
        let mut objects = Vec::new();
        let mut leader = None;
        let mut weave = [0.0; 3];
        match scenario {
            ScenarioId::Away => {
                let mut car = SceneObject::new(CLASS_CAR, [rng.random_range(9.0..11.0), rng.random_range(-1.5..1.5)]);
                car.elevation = rng.random_range(0.2..0.6);
                car.tint = tint(&mut rng);
                objects.push(car);
                for _ in 0..rng.random_range(0..=2) {
                    objects.push(distractor(&mut rng, &[CLASS_SIGN, CLASS_PERSON]));
                }
            }
            ScenarioId::ToRight => {
                for k in 0..3 {
                    let lane = -3.0 + 3.0 * k as f64 + rng.random_range(-0.5..0.5);
                    let mut car = SceneObject::new(CLASS_CAR, [rng.random_range(10.0..14.0), lane]);
                    car.elevation = rng.random_range(0.2..0.6);
                    car.tint = tint(&mut rng);
                    objects.push(car);
                }
                for _ in 0..3 {
                    objects.push(distractor(&mut rng, &[CLASS_PERSON]));
                }
            }
            ScenarioId::LoseTrack => {
                let d = 6.0 * self.follow_distance_scale;
                let mut car = SceneObject::new(CLASS_CAR, [d + rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]);
                car.elevation = rng.random_range(0.1..0.3);
                car.tint = tint(&mut rng);
                car.vel = [self.leader_speed, 0.0];
                objects.push(car);
                leader = Some(0);
                weave = [
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.2..0.4),
                    rng.random_range(0.3..0.5),
                ];
            }
        }
        let state = EnvState {
            scenario,
            seed,
            vehicle_pos: [0.0, 0.0],
            vehicle_vel: [0.0, 0.0],
            origin: [0.0, 0.0],
            objects,
            leader,
            step_count: 0,
            slow_count: 0,
            collided: false,
            done: false,
            background_seed: rng.random(),
            weave,
            guidance: GuidanceMemory {
                prev_error: None,
                last_command: [0.0; 3],
                miss_count: 0,
                kf: None,
            },
        };
        let image = self.render(&state);
        Ok((state, image))
    }

    pub fn render(&self, state: &EnvState) -> Image {
        self.camera.render(state.vehicle_pos, &state.objects, state.background_seed)
    }

    /// Ground-truth boxes of the current view, confidence 1.
    pub fn labels(&self, state: &EnvState) -> Vec<BoundingBox> {
        state
            .objects
            .iter()
            .filter_map(|o| self.camera.label(state.vehicle_pos, o))
            .collect()
    }

    /// Renders the current view, perturbs it, runs the victim's detector and
    /// advances the world by one control period.
    pub fn step(
        &self,
        state: &EnvState,
        victim: &dyn Perception,
        w: Option<&Image>,
        alpha: f64,
    ) -> Result<StepResult> {
        if state.done {
            return Err(Error::usage("step called on a finished episode"));
        }
        let x = self.render(state);
        let seen = match w {
            Some(w) => apply_perturbation(&x, w, alpha),
            None => x,
        };
        let boxes = victim.detect_boxes(&seen, self.detect_threshold);
        self.advance(state, boxes)
    }

    /// Everything after detection: target selection, filtering, PD control,
    /// kinematics, rewards and termination.
    pub fn advance(&self, state: &EnvState, boxes: Vec<BoundingBox>) -> Result<StepResult> {
        if state.done {
            return Err(Error::usage("step called on a finished episode"));
        }
        let mut s = state.clone();
        let target = select_target_box(&boxes, self.target_class, self.detect_threshold);
        let command = match s.scenario {
            ScenarioId::LoseTrack => self.filtered_command(&mut s.guidance, target),
            _ => self.direct_command(&mut s.guidance, target),
        };

        let alpha = (self.dt / self.velocity_lag_s).min(1.0);
        let cmd = [command[0], command[1]];
        let mut v = [
            s.vehicle_vel[0] + alpha * (cmd[0] - s.vehicle_vel[0]),
            s.vehicle_vel[1] + alpha * (cmd[1] - s.vehicle_vel[1]),
        ];
        v = saturate(v, self.v_max);
        s.vehicle_vel = v;
        s.vehicle_pos = [s.vehicle_pos[0] + v[0] * self.dt, s.vehicle_pos[1] + v[1] * self.dt];

        if let Some(li) = s.leader {
            let t = s.step_count as f64 * self.dt;
            let [phase, amp, omega] = s.weave;
            let dy = amp * ((phase + omega * (t + self.dt)).sin() - (phase + omega * t).sin());
            let l = &mut s.objects[li];
            l.pos[0] += l.vel[0] * self.dt;
            l.pos[1] += dy;
            l.vel[1] = dy / self.dt;
        }
        s.step_count += 1;

        let reward = self.running_reward(&s);
        match s.scenario {
            ScenarioId::LoseTrack => {
                let d = s.leader_distance().expect("scenario 3 has a leader");
                if d < self.collision_radius {
                    s.collided = true;
                    s.done = true;
                } else if s.step_count >= self.follow_timeout_steps {
                    s.done = true;
                }
            }
            _ => {
                if s.speed() < self.stop_speed {
                    s.slow_count += 1;
                } else {
                    s.slow_count = 0;
                }
                if (s.step_count >= self.min_steps && s.slow_count >= self.stop_patience)
                    || s.step_count >= self.max_steps
                {
                    s.done = true;
                }
            }
        }
        let terminal = if s.done { Some(self.terminal_reward(&s)?) } else { None };
        Ok(StepResult {
            next_image: self.render(&s),
            next_state: s.clone(),
            reward,
            terminal,
            done: s.done,
            boxes,
        })
    }

    fn direct_command(&self, mem: &mut GuidanceMemory, target: Option<BoundingBox>) -> [f64; 3] {
        match target {
            Some(b) => {
                let out = self.pd.guidance_pd(&b, mem.prev_error);
                mem.prev_error = Some(out.error);
                mem.last_command = out.command;
                mem.miss_count = 0;
                out.command
            }
            None => {
                mem.miss_count += 1;
                mem.prev_error = None;
                if mem.miss_count <= self.miss_hold_frames {
                    mem.last_command
                } else {
                    [0.0; 3]
                }
            }
        }
    }

    fn filtered_command(&self, mem: &mut GuidanceMemory, target: Option<BoundingBox>) -> [f64; 3] {
        let kf = match (mem.kf.take(), target) {
            (None, None) => {
                mem.miss_count += 1;
                return [0.0; 3];
            }
            (None, Some(b)) => self.filter.init(&b),
            (Some(kf), Some(b)) => self.filter.update(&self.filter.predict(&kf, self.dt), &b),
            (Some(kf), None) => self.filter.predict(&kf, self.dt),
        };
        mem.miss_count = kf.frames_since_update;
        if kf.frames_since_update > self.miss_hold_frames {
            // Track lost: drop the filter and stop until the target is reacquired.
            mem.prev_error = None;
            mem.last_command = [0.0; 3];
            return [0.0; 3];
        }
        let area = kf.area().max(1e-6);
        let b = BoundingBox {
            cx: kf.cx(),
            cy: kf.cy(),
            w: area.sqrt(),
            h: area.sqrt(),
            confidence: 1.0,
            class_id: self.target_class,
            anchor: 0,
        };
        mem.kf = Some(kf);
        let out = self.pd.guidance_pd(&b, mem.prev_error);
        mem.prev_error = Some(out.error);
        mem.last_command = out.command;
        out.command
    }

    pub fn running_reward(&self, s: &EnvState) -> f64 {
        match s.scenario {
            ScenarioId::Away => {
                if s.speed() > 0.1 {
                    0.1
                } else {
                    -0.1
                }
            }
            ScenarioId::ToRight => {
                if s.vehicle_vel[1] > 0.01 {
                    0.1
                } else {
                    -0.1
                }
            }
            ScenarioId::LoseTrack => self.distance_reward_scale * s.leader_distance().unwrap_or(0.0),
        }
    }

    pub fn terminal_reward(&self, s: &EnvState) -> Result<f64> {
        if !s.done {
            return Err(Error::usage("terminal reward requested before the episode ended"));
        }
        Ok(match s.scenario {
            ScenarioId::Away => (s.vehicle_pos[0] - s.origin[0]).hypot(s.vehicle_pos[1] - s.origin[1]),
            ScenarioId::ToRight => s.vehicle_pos[1] - s.origin[1],
            ScenarioId::LoseTrack => {
                if s.collided {
                    self.collision_reward
                } else {
                    0.0
                }
            }
        })
    }
}

fn tint(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.random_range(-0.06..0.06),
        rng.random_range(-0.06..0.06),
        rng.random_range(-0.06..0.06),
    ]
}

fn distractor(rng: &mut ChaCha8Rng, classes: &[usize]) -> SceneObject {
    let class = classes[rng.random_range(0..classes.len())];
    let x = rng.random_range(6.0..16.0);
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut o = SceneObject::new(class, [x, side * rng.random_range(2.5..0.35 * x + 2.5)]);
    o.elevation = rng.random_range(-0.2..0.4);
    o.tint = tint(rng);
    o
}
