mod common;

use advlab::attacker::{AttackWeights, Generator, GeneratorSpec};
use advlab::bench_stats::{
    bench_runtime, decile_means, emit_plots, eval_scenarios, mann_whitney_u, read_table, write_table, BenchOptions,
    Method, PMethod, TableHeader, LOSS_PLOT, REWARD_PLOT,
};
use advlab::sim_env::Env;
use advlab::trainer::{EpisodeMetrics, UpdateCounts};
use common::{tiny_config, tiny_detector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// U by direct pair counting.
fn brute_u(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// Two-sided permutation p: every way of choosing which pooled values form
/// the first sample.
fn brute_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (n, total) = (a.len(), pooled.len());
    let centre = (a.len() * b.len()) as f64 / 2.0;
    let observed = (brute_u(a, b) - centre).abs();
    let (mut hit, mut all) = (0u64, 0u64);
    for mask in 0u32..(1 << total) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (i, v) in pooled.iter().enumerate() {
            if mask & (1 << i) != 0 {
                x.push(*v);
            } else {
                y.push(*v);
            }
        }
        all += 1;
        if (brute_u(&x, &y) - centre).abs() >= observed - 1e-9 {
            hit += 1;
        }
    }
    hit as f64 / all as f64
}

#[test]
fn mann_whitney_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut exact_checked = 0;
    for case in 0..500 {
        let n = rng.random_range(1..=12);
        let m = rng.random_range(1..=12);
        // Half the cases draw from a handful of integers to force ties.
        let draw = |rng: &mut ChaCha8Rng| {
            if case % 2 == 0 {
                rng.random_range(0..5) as f64
            } else {
                rng.random_range(-3.0..3.0)
            }
        };
        let a: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let b: Vec<f64> = (0..m).map(|_| draw(&mut rng)).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.u, brute_u(&a, &b), "{a:?} {b:?}");
        assert_eq!(r.u + mann_whitney_u(&b, &a).unwrap().u, (n * m) as f64);
        assert!((0.0..=1.0).contains(&r.p));
        if r.method == PMethod::Exact && n + m <= 20 {
            let p = brute_p(&a, &b);
            assert!((r.p - p).abs() < 1e-6, "{a:?} {b:?}: {} vs {p}", r.p);
            exact_checked += 1;
        }
    }
    assert!(exact_checked > 150, "only {exact_checked} exact cases");
}

#[test]
fn small_separated_samples() {
    let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
    assert_eq!(r.u, 0.0);
    // Two of the six splits are as extreme.
    assert!((r.p - 2.0 / 6.0).abs() < 1e-12);
}

fn metrics_log(n: usize) -> Vec<EpisodeMetrics> {
    (0..n)
        .map(|i| EpisodeMetrics {
            episode: i,
            seed: i as u64,
            steps: 10,
            episode_return: (i as f64).sqrt() + if i % 3 == 0 { 1.0 } else { 0.0 },
            terminal_reward: 0.0,
            metric: 0.0,
            sigma: 0.1,
            warmup: i < 5,
            aborted: false,
            img_loss: Some(5.0 / (1.0 + i as f64)),
            img_detector_loss: Some(4.0 / (1.0 + i as f64)),
            sys_loss: Some(1.0),
            critic_loss: None,
            actor_objective: None,
            updates: UpdateCounts {
                img: 10,
                sys: 10,
                ..UpdateCounts::default()
            },
        })
        .collect()
}

#[test]
fn plots_of_a_full_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = metrics_log(150);
    let report = emit_plots(&log, dir.path()).unwrap();
    assert_eq!(report.files.len(), 2);
    for name in [REWARD_PLOT, LOSS_PLOT] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(text.starts_with("<svg"), "{name}");
    }
    let tail: f64 = log[135..].iter().map(|m| m.episode_return).sum::<f64>() / 15.0;
    assert!((report.final_decile_reward.unwrap() - tail).abs() < 1e-12);
    assert_eq!(decile_means(&log.iter().map(|m| m.episode_return).collect::<Vec<_>>()).unwrap().1, tail);
    assert_eq!(report.loss.last().unwrap().0, 1500.0);
}

#[test]
fn empty_log_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let report = emit_plots(&[], &dir.path().join("plots")).unwrap();
    assert!(report.files.is_empty());
    assert!(!dir.path().join("plots").exists());
}

#[test]
fn tables_round_trip_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tsv");
    let header = TableHeader {
        manifest: "manifest.json".into(),
        config_sha256: "ab".into(),
        checkpoint_sha256: "cd".into(),
        platform: "linux-x86_64".into(),
    };
    let rows = vec![vec!["1".to_string(), "x y".to_string()], vec!["2".to_string(), "z".to_string()]];
    write_table(&path, &header, &["id", "name"], &rows).unwrap();
    let (h, cols, got) = read_table(&path).unwrap();
    assert_eq!(cols, vec!["id", "name"]);
    assert_eq!(got, rows);
    assert!(h.contains(&("config_sha256".to_string(), "ab".to_string())));
    assert!(h.contains(&("manifest".to_string(), "manifest.json".to_string())));
}

#[test]
fn single_frame_bench_has_two_records() {
    let cfg = tiny_config(1);
    let det = tiny_detector(&cfg);
    let gen = Generator::<f32>::new(GeneratorSpec::from_config(&cfg), 1);
    let env = Env::new(&cfg);
    let (_, frame) = env.reset(1, 3).unwrap();
    let opts = BenchOptions {
        iters: 2,
        step: 2.0,
        warmup_frames: 1,
        repetitions: 1,
    };
    let (records, summary) = bench_runtime(&[(frame, [0.5; 3])], &gen, &det, &AttackWeights::from_config(&cfg), &opts).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].method, Method::Recursive);
    assert_eq!(records[1].method, Method::Iterative);
    assert!(records.iter().all(|r| r.time_ms > 0.0));
    assert_eq!(summary.frames, 1);
    assert!(bench_runtime(&[], &gen, &det, &AttackWeights::from_config(&cfg), &opts).is_err());
}

#[test]
fn normal_evaluation_is_deterministic() {
    let cfg = tiny_config(1);
    let det = tiny_detector(&cfg);
    let env = Env::new(&cfg);
    let a = eval_scenarios(&env, &det, None, 1, 3, 100, cfg.attack.alpha).unwrap();
    let b = eval_scenarios(&env, &det, None, 1, 3, 100, cfg.attack.alpha).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![100, 101, 102]);
}
