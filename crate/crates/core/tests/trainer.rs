mod common;

use advlab::sim_env::Env;
use advlab::trainer::{
    checkpoint_name, latest, load, load_models, read_metrics, run_attack_episode, stream_rng, train, AttackModels,
    Behavior, Trainer, METRICS_FILE,
};
use common::{tiny_config, tiny_detector};

#[test]
fn untrained_episode_is_finite_and_repeatable() {
    let cfg = tiny_config(1);
    let det = tiny_detector(&cfg);
    let env = Env::new(&cfg);
    let models = AttackModels::new(&cfg);
    let run = || {
        let mut rng = stream_rng(1, 2, 3);
        run_attack_episode(&env, &det, &models, 1, 42, cfg.attack.alpha, Behavior::Greedy, &mut rng).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.summary.episode_return.is_finite());
    assert_eq!(a.summary, b.summary);
    assert_eq!(a.transitions, b.transitions);
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.trajectory.len(), a.summary.steps);
    let logged: f64 = a.records.iter().map(|r| r.reward).sum();
    assert_eq!(logged, a.summary.episode_return);
}

#[test]
fn update_cadence_matches_episode_length() {
    let cfg = tiny_config(1);
    let mut t = Trainer::new(&cfg, tiny_detector(&cfg)).unwrap();
    let warm = t.run_episode().unwrap();
    assert!(warm.warmup);
    assert_eq!((warm.updates.critic, warm.updates.actor), (0, 0));
    assert_eq!(warm.updates.img, warm.steps);
    let m = t.run_episode().unwrap();
    assert!(!m.warmup);
    assert_eq!(m.updates.img, m.steps);
    assert_eq!(m.updates.sys, m.steps);
    // Updates start once the buffer holds a full batch.
    let expected = m.steps - cfg.policy.batch.saturating_sub(warm.steps + 1).min(m.steps);
    assert_eq!(m.updates.critic, expected);
    assert_eq!(m.updates.actor, m.updates.critic);
}

#[test]
fn zero_episodes_leaves_initial_parameters() {
    let mut cfg = tiny_config(1);
    cfg.train.episodes = 0;
    let dir = tempfile::tempdir().unwrap();
    let report = train(&cfg, tiny_detector(&cfg), dir.path(), None).unwrap();
    assert_eq!(report.episodes, 0);
    let (models, header, metrics) = load_models(&cfg, &report.last_checkpoint).unwrap();
    let init = AttackModels::new(&cfg);
    assert_eq!(header.next_episode, 0);
    assert!(metrics.is_empty());
    assert_eq!(models.generator.params, init.generator.params);
    assert_eq!(models.sys.params, init.sys.params);
    assert_eq!(models.agent.actor.params, init.agent.actor.params);
    assert_eq!(models.agent.critic.params, init.agent.critic.params);
}

#[test]
fn training_is_reproducible_and_leaves_detector_untouched() {
    let cfg = tiny_config(1);
    let det = tiny_detector(&cfg);
    let digest = det.params.digest();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let r1 = train(&cfg, det.clone(), d1.path(), None).unwrap();
    let r2 = train(&cfg, det.clone(), d2.path(), None).unwrap();
    assert_eq!(det.params.digest(), digest);
    let log = |d: &std::path::Path| std::fs::read(d.join("logs").join(METRICS_FILE)).unwrap();
    assert_eq!(log(d1.path()), log(d2.path()));
    assert_eq!(std::fs::read(&r1.last_checkpoint).unwrap(), std::fs::read(&r2.last_checkpoint).unwrap());
    assert_eq!(read_metrics(&d1.path().join("logs").join(METRICS_FILE)).unwrap(), r1.metrics);
    // One checkpoint before training plus one per episode.
    let ckpts = std::fs::read_dir(d1.path().join("checkpoints"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("ckpt-"))
        .count();
    assert_eq!(ckpts, 4);
}

#[test]
fn resume_reproduces_the_next_episode() {
    let cfg = tiny_config(1);
    let det = tiny_detector(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let full = train(&cfg, det.clone(), dir.path(), None).unwrap();

    let dir2 = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&cfg, det.clone()).unwrap();
    t.run_episode().unwrap();
    t.run_episode().unwrap();
    let ck = advlab::trainer::save(&t, &dir2.path().join("checkpoints")).unwrap();
    assert!(ck.ends_with(checkpoint_name(2)));
    assert_eq!(latest(&dir2.path().join("checkpoints")).unwrap(), ck);
    let mut resumed = load(&cfg, det.clone(), &ck).unwrap();
    let m = resumed.run_episode().unwrap();
    assert_eq!(m, full.metrics[2]);

    let resumed_full = train(&cfg, det, dir2.path(), Some(&ck)).unwrap();
    assert_eq!(resumed_full.metrics, full.metrics);
    assert_eq!(
        std::fs::read(&resumed_full.last_checkpoint).unwrap(),
        std::fs::read(&full.last_checkpoint).unwrap()
    );
}

#[test]
fn resume_rejects_a_different_config() {
    let cfg = tiny_config(1);
    let det = tiny_detector(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let r = train(&cfg, det.clone(), dir.path(), None).unwrap();
    let mut other = cfg.clone();
    other.seed += 1;
    assert!(matches!(load(&other, det, &r.last_checkpoint), Err(advlab::Error::Config(_))));
}

#[test]
fn bad_rate_ordering_refuses_to_start() {
    let mut cfg = tiny_config(1);
    cfg.train.rates.actor = 1.0;
    assert!(matches!(Trainer::new(&cfg, tiny_detector(&cfg)), Err(advlab::Error::Config(_))));
}
