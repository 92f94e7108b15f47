use super::*;
use crate::nn::{central_difference, relative_error, spot_check_gradient};

fn tr(h: Vec<f32>, a: [f64; 3], r: f64, h_next: Vec<f32>, done: bool) -> Transition {
    Transition { h, a, r, h_next, done }
}

fn hidden(seed: u64, d: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn act_is_deterministic_without_exploration_and_always_in_range() {
    let actor = Actor::<f32>::new(5, 8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = hidden(1, 5);
    let a = actor.act(&h, false, 0.5, &mut rng);
    assert_eq!(a, actor.act(&h, false, 0.5, &mut rng));
    assert_eq!(a, actor.act(&h, true, 0.0, &mut rng));
    for _ in 0..100 {
        let b = actor.act(&h, true, 10.0, &mut rng);
        assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn q_action_gradient_matches_finite_differences() {
    let critic = Critic::<f64>::new(4, 8, 2);
    let h = hidden(3, 4);
    let a = [0.2, 0.7, 0.4];
    let g = critic.action_gradient(&h, a);
    let num = central_difference(&a, 1e-6, |v| critic.q_value(&h, [v[0], v[1], v[2]]));
    for (x, y) in g.iter().zip(&num) {
        assert!(relative_error(*x, *y, 1e-8) < 1e-6, "{x} vs {y}");
    }
}

#[test]
fn terminal_and_undiscounted_targets() {
    let agent = Agent::new(3, 8, 1e-3, 3e-3, 4);
    let t = tr(hidden(1, 3), [0.5; 3], 1.0, hidden(2, 3), true);
    assert_eq!(agent.q_targets(&[&t], 0.99), vec![1.0]);
    let t2 = tr(hidden(1, 3), [0.5; 3], 0.25, hidden(2, 3), false);
    assert_eq!(agent.q_targets(&[&t2], 0.0), vec![0.25]);
}

#[test]
fn critic_and_policy_gradients_match_finite_differences() {
    let actor = Actor::<f64>::new(4, 6, 5);
    let critic = Critic::<f64>::new(4, 6, 6);
    let ts: Vec<Transition> = (0..3).map(|i| tr(hidden(i, 4), [0.1, 0.5, 0.9], i as f64, hidden(i + 9, 4), false)).collect();
    let batch: Vec<&Transition> = ts.iter().collect();
    let y = [0.5, -1.0, 2.0];
    let (_, gc) = critic_loss_grad(&critic, &batch, &y);
    let mut probe = critic.clone();
    let err = spot_check_gradient(&critic.params, &gc, 20, 1, |p| {
        probe.params = p.clone();
        critic_loss_grad(&probe, &batch, &y).0
    });
    assert!(err < 1e-3, "critic {err}");

    let hs: Vec<&[f32]> = ts.iter().map(|t| t.h.as_slice()).collect();
    let (_, ga) = policy_objective_grad(&actor, &critic, &hs[..1]);
    let mut probe = actor.clone();
    let err = spot_check_gradient(&actor.params, &ga, 20, 2, |p| {
        probe.params = p.clone();
        policy_objective_grad(&probe, &critic, &hs[..1]).0
    });
    assert!(err < 1e-3, "actor {err}");
}

#[test]
fn actor_gradient_vanishes_when_critic_ignores_action() {
    let actor = Actor::<f64>::new(4, 6, 5);
    let mut critic = Critic::<f64>::new(4, 6, 6);
    // Zero the first-layer weights attached to the action inputs.
    let w = critic.params.get_mut(crate::nn::ParamId(0));
    let width = w.shape()[1];
    for row in 4..7 {
        w.data_mut()[row * width..(row + 1) * width].fill(0.0);
    }
    let h = hidden(1, 4);
    let (_, g) = policy_objective_grad(&actor, &critic, &[&h]);
    assert!(g.iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn updates_touch_only_their_own_group() {
    let mut agent = Agent::new(3, 8, 1e-2, 3e-2, 7);
    let ts: Vec<Transition> = (0..4).map(|i| tr(hidden(i, 3), [0.3; 3], 1.0, hidden(i + 1, 3), false)).collect();
    let batch: Vec<&Transition> = ts.iter().collect();
    let (a0, c0, at0, ct0) = (
        agent.actor.params.clone(),
        agent.critic.params.clone(),
        agent.actor_target.clone(),
        agent.critic_target.clone(),
    );
    agent.critic_update(&batch, 0.9).unwrap();
    assert_eq!(agent.actor.params, a0);
    assert_ne!(agent.critic.params, c0);
    let c1 = agent.critic.params.clone();
    agent.actor_update(&batch).unwrap();
    assert_ne!(agent.actor.params, a0);
    assert_eq!(agent.critic.params, c1);
    assert_eq!((&agent.actor_target, &agent.critic_target), (&at0, &ct0));
}

#[test]
fn soft_update_halves_distance_every_69_steps() {
    let mut agent = Agent::new(3, 8, 1e-3, 3e-3, 8);
    agent.actor.params = Actor::<f32>::new(3, 8, 99).params;
    let d0 = agent.actor_target.distance(&agent.actor.params);
    for _ in 0..69 {
        agent.soft_update_targets(0.01);
    }
    let ratio = agent.actor_target.distance(&agent.actor.params) / d0;
    assert!((ratio - 0.99f64.powi(69)).abs() < 1e-3, "{ratio}");
    assert!((ratio - 0.5).abs() < 0.01);
    agent.soft_update_targets(1.0);
    assert_eq!(agent.actor_target, agent.actor.params);
}

#[test]
#[should_panic(expected = "blending factor")]
fn zero_tau_is_rejected() {
    Agent::new(3, 8, 1e-3, 3e-3, 8).soft_update_targets(0.0);
}

#[test]
fn sampling_is_uniform_and_window_restricts_to_recent() {
    let mut b = TransitionBuffer::new(100, None);
    for i in 0..100 {
        b.push(tr(vec![i as f32], [0.0; 3], 0.0, vec![0.0], false));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = [0usize; 100];
    for t in b.sample(&mut rng, 100_000) {
        counts[t.h[0] as usize] += 1;
    }
    assert!(counts.iter().all(|&c| (850..=1150).contains(&c)), "{counts:?}");
    b.window = Some(10);
    assert!(b.sample(&mut rng, 500).iter().all(|t| t.h[0] >= 90.0));
    b.push(tr(vec![100.0], [0.0; 3], 0.0, vec![0.0], false));
    assert_eq!(b.len(), 100);
}

#[test]
fn noise_schedule_runs_from_start_to_end() {
    assert_eq!(noise_scale(0.2, 0.05, 0, 11), 0.2);
    assert!((noise_scale(0.2, 0.05, 10, 11) - 0.05).abs() < 1e-15);
    assert_eq!(noise_scale(0.2, 0.05, 50, 11), 0.05);
}

#[test]
fn critic_learns_two_state_cycle_values() {
    // s0 → s1 pays 1, s1 → s0 pays 2, forever.
    let gamma = 0.5;
    let q0 = (1.0 + gamma * 2.0) / (1.0 - gamma * gamma);
    let q1 = (2.0 + gamma * 1.0) / (1.0 - gamma * gamma);
    let mut agent = Agent::new(2, 16, 1e-3, 3e-3, 21);
    let (s0, s1) = (vec![1.0f32, 0.0], vec![0.0f32, 1.0]);
    let a0 = agent.actor.act(&s0, false, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    let a1 = agent.actor.act(&s1, false, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    let ts = [tr(s0.clone(), a0, 1.0, s1.clone(), false), tr(s1.clone(), a1, 2.0, s0.clone(), false)];
    let batch: Vec<&Transition> = ts.iter().collect();
    for _ in 0..5000 {
        agent.critic_update(&batch, gamma).unwrap();
        agent.soft_update_targets(0.05);
    }
    let (got0, got1) = (agent.critic.q_value(&s0, a0), agent.critic.q_value(&s1, a1));
    assert!((got0 - q0).abs() < 1e-2, "{got0} vs {q0}");
    assert!((got1 - q1).abs() < 1e-2, "{got1} vs {q1}");
}
