//! Deterministic-policy actor-critic over the estimator's hidden state.

mod buffer;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{Adam, Bound, Graph, Mlp, ParamSet, Real, Tensor, Var};

pub use buffer::{Transition, TransitionBuffer};

const ACTION_DIM: usize = 3;

/// Policy μ(h) ∈ [0,1]³.
#[derive(Clone, Debug)]
pub struct Actor<T = f32> {
    pub params: ParamSet<T>,
    net: Mlp,
    pub hidden: usize,
}

/// Action value Q(h, a).
#[derive(Clone, Debug)]
pub struct Critic<T = f32> {
    pub params: ParamSet<T>,
    net: Mlp,
    pub hidden: usize,
}

fn batch_tensor<T: Real>(rows: &[&[f32]]) -> Tensor<T> {
    let d = rows.first().map_or(0, |r| r.len());
    let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::lit(v as f64))).collect();
    Tensor::new(&[rows.len(), d], data)
}

fn action_tensor<T: Real>(a: &[[f64; 3]]) -> Tensor<T> {
    Tensor::new(&[a.len(), ACTION_DIM], a.iter().flatten().map(|&v| T::lit(v)).collect())
}

impl<T: Real> Actor<T> {
    pub fn new(hidden: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let net = Mlp::new(&mut ps, "actor", &[hidden, width, width, ACTION_DIM], &mut rng);
        Self { params: ps, net, hidden }
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Var {
        let z = self.net.forward(g, p, h);
        g.sigmoid(z)
    }

    pub fn act_batch(&self, hs: &[&[f32]]) -> Vec<[f64; 3]> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let h = g.constant(batch_tensor(hs));
        let a = self.forward(&mut g, &p, h);
        g.value(a)
            .data()
            .chunks(ACTION_DIM)
            .map(|c| [c[0].f64(), c[1].f64(), c[2].f64()])
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Actor<U> {
        Actor {
            params: self.params.cast(),
            net: self.net.clone(),
            hidden: self.hidden,
        }
    }
}

impl Actor<f32> {
    /// `μ(h)`, plus clipped Gaussian noise of scale `sigma` when exploring.
    pub fn act(&self, h: &[f32], explore: bool, sigma: f64, rng: &mut impl Rng) -> [f64; 3] {
        assert_eq!(h.len(), self.hidden, "hidden state dimension mismatch");
        let mut a = self.act_batch(&[h])[0];
        if explore && sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("positive noise scale");
            for v in &mut a {
                *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
            }
        }
        a
    }
}

impl<T: Real> Critic<T> {
    pub fn new(hidden: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let net = Mlp::new(&mut ps, "critic", &[hidden + ACTION_DIM, width, width, 1], &mut rng);
        Self { params: ps, net, hidden }
    }

    /// `[N,1]` values of `Q(h, a)`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, h: Var, a: Var) -> Var {
        let x = g.concat(&[h, a], 1);
        self.net.forward(g, p, x)
    }

    pub fn q_value(&self, h: &[f32], a: [f64; 3]) -> f64 {
        self.q_batch(&[h], &[a])[0]
    }

    pub fn q_batch(&self, hs: &[&[f32]], a: &[[f64; 3]]) -> Vec<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let h = g.constant(batch_tensor(hs));
        let av = g.constant(action_tensor(a));
        let q = self.forward(&mut g, &p, h, av);
        g.value(q).data().iter().map(|v| v.f64()).collect()
    }

    /// `∂Q/∂a` at a single point.
    pub fn action_gradient(&self, h: &[f32], a: [f64; 3]) -> [f64; 3] {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let hv = g.constant(batch_tensor(&[h]));
        let av = g.leaf(action_tensor(&[a]), true);
        let q = self.forward(&mut g, &p, hv, av);
        let mut grads = g.backward(q);
        let d = grads.take(av).expect("action gradient");
        [d[0].f64(), d[1].f64(), d[2].f64()]
    }

    pub fn cast<U: Real>(&self) -> Critic<U> {
        Critic {
            params: self.params.cast(),
            net: self.net.clone(),
            hidden: self.hidden,
        }
    }
}

/// Live networks, their target copies and one optimizer per live network.
#[derive(Clone, Debug)]
pub struct Agent {
    pub actor: Actor<f32>,
    pub critic: Critic<f32>,
    pub actor_target: ParamSet<f32>,
    pub critic_target: ParamSet<f32>,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl Agent {
    pub fn new(hidden: usize, width: usize, actor_lr: f64, critic_lr: f64, seed: u64) -> Self {
        let actor = Actor::new(hidden, width, seed);
        let critic = Critic::new(hidden, width, seed.wrapping_add(1));
        Self {
            actor_target: actor.params.clone(),
            critic_target: critic.params.clone(),
            actor_opt: Adam::new(&actor.params, actor_lr),
            critic_opt: Adam::new(&critic.params, critic_lr),
            actor,
            critic,
        }
    }

    fn target_actor(&self) -> Actor<f32> {
        Actor {
            params: self.actor_target.clone(),
            ..self.actor.clone()
        }
    }

    fn target_critic(&self) -> Critic<f32> {
        Critic {
            params: self.critic_target.clone(),
            ..self.critic.clone()
        }
    }

    /// `r + γ(1−done)·Q⁻(h′, μ⁻(h′))`, computed without any gradient.
    pub fn q_targets(&self, batch: &[&Transition], gamma: f64) -> Vec<f64> {
        let next: Vec<&[f32]> = batch.iter().map(|t| t.h_next.as_slice()).collect();
        let a_next = self.target_actor().act_batch(&next);
        let q_next = self.target_critic().q_batch(&next, &a_next);
        batch
            .iter()
            .zip(q_next)
            .map(|(t, q)| if t.done { t.r } else { t.r + gamma * q })
            .collect()
    }

    /// One step on the mean squared Bellman error; returns the pre-step loss,
    /// or `None` when the step was skipped as non-finite.
    pub fn critic_update(&mut self, batch: &[&Transition], gamma: f64) -> Option<f64> {
        let y = self.q_targets(batch, gamma);
        let (loss, grads) = critic_loss_grad(&self.critic, batch, &y);
        if !loss.is_finite() || !self.critic_opt.apply(&mut self.critic.params, &grads) {
            log::warn!("critic update skipped: non-finite loss or gradient");
            return None;
        }
        Some(loss)
    }

    /// One ascent step on `J = mean Q(h, μ(h))`; returns J before the step.
    pub fn actor_update(&mut self, batch: &[&Transition]) -> Option<f64> {
        let hs: Vec<&[f32]> = batch.iter().map(|t| t.h.as_slice()).collect();
        let (j, grads) = policy_objective_grad(&self.actor, &self.critic, &hs);
        if !j.is_finite() {
            log::warn!("actor update skipped: non-finite objective");
            return None;
        }
        // Adam descends, so hand it −∇J.
        let neg: Vec<Vec<f32>> = grads.into_iter().map(|g| g.into_iter().map(|v| -v).collect()).collect();
        if !self.actor_opt.apply(&mut self.actor.params, &neg) {
            log::warn!("actor update skipped: non-finite gradient");
            return None;
        }
        Some(j)
    }

    /// `θ⁻ ← τθ + (1−τ)θ⁻` for both target networks.
    pub fn soft_update_targets(&mut self, tau: f64) {
        assert!(tau > 0.0 && tau <= 1.0, "blending factor must lie in (0, 1]");
        self.actor_target.blend_from(&self.actor.params, tau);
        self.critic_target.blend_from(&self.critic.params, tau);
    }
}

/// `(1/M)Σ (Q(h_m, a_m) − y_m)²` and its gradient in θ_critic.
pub fn critic_loss_grad<T: Real>(critic: &Critic<T>, batch: &[&Transition], y: &[f64]) -> (f64, Vec<Vec<T>>) {
    let mut g = Graph::new();
    let p = critic.params.bind(&mut g, true);
    let hs: Vec<&[f32]> = batch.iter().map(|t| t.h.as_slice()).collect();
    let a: Vec<[f64; 3]> = batch.iter().map(|t| t.a).collect();
    let h = g.constant(batch_tensor(&hs));
    let av = g.constant(action_tensor(&a));
    let q = critic.forward(&mut g, &p, h, av);
    let target = g.constant(Tensor::new(&[y.len(), 1], y.iter().map(|&v| T::lit(v)).collect()));
    let loss = g.sq_diff_mean(q, target);
    let mut grads = g.backward(loss);
    (g.value(loss).item().f64(), critic.params.grads(&p, &mut grads))
}

/// `J = (1/M)Σ Q(h_m, μ(h_m))` and `∇J` in θ_actor, with the critic frozen.
pub fn policy_objective_grad<T: Real>(actor: &Actor<T>, critic: &Critic<T>, hs: &[&[f32]]) -> (f64, Vec<Vec<T>>) {
    let mut g = Graph::new();
    let pa = actor.params.bind(&mut g, true);
    let pc = critic.params.bind(&mut g, false);
    let h = g.constant(batch_tensor(hs));
    let a = actor.forward(&mut g, &pa, h);
    let q = critic.forward(&mut g, &pc, h, a);
    let j = g.mean(q);
    let mut grads = g.backward(j);
    (g.value(j).item().f64(), actor.params.grads(&pa, &mut grads))
}

/// Linear decay of the exploration scale from `start` to `end` over `span` episodes.
pub fn noise_scale(start: f64, end: f64, episode: usize, span: usize) -> f64 {
    if span <= 1 {
        return end;
    }
    let f = episode as f64 / (span - 1) as f64;
    if f >= 1.0 {
        end
    } else {
        start + (end - start) * f
    }
}

#[cfg(test)]
mod tests;
