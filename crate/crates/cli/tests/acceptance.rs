//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. The trained-attacker criteria take tens of
//! minutes on one core.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use advlab::actor_critic::{critic_loss_grad, policy_objective_grad, Actor, Agent, Critic, Transition};
use advlab::attacker::{apply_perturbation, attack_loss, attack_loss_grad, discretize, AnchorIndex, AttackWeights, Generator, GeneratorSpec};
use advlab::bench_stats::{mann_whitney_u, read_table, PMethod, TrendReport};
use advlab::config::{Config, KfNoise, LearningRates};
use advlab::detector::{Detector, DetectorSpec};
use advlab::dyn_autoencoder::{sample_hidden, DynAutoencoder, SysSpec, Window};
use advlab::nn::spot_check_gradient;
use advlab::sim_env::{BoundingBox, BoxFilter, Image};
use advlab::trainer::{read_metrics, validate_rates, METRICS_FILE};
use advlab_cli::commands::{self, file_sha256, Context};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config(name: &str) -> Config {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    Config::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn random_image(size: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_data(size, size, 3, (0..3 * size * size).map(|_| rng.random_range(0.05..0.95)).collect())
}

fn hidden(d: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

// ---- property and oracle criteria -------------------------------------

fn gradient_oracles() -> Outcome {
    const POINTS: usize = 20;
    const TOL: f64 = 1e-3;
    const MAX_PARAMS: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cfg = Config::default();
    cfg.image_size = 16;
    cfg.detector.grid = 2;
    cfg.detector.width = 4;
    cfg.attack.latent_channels = 4;
    cfg.attack.head_channels = 4;
    let mut report = Vec::new();
    let mut ok = true;
    let mut record = |name: &str, params: usize, err: f64| {
        ok &= params <= MAX_PARAMS && err < TOL;
        report.push(format!("{name} {err:.1e} ({params} params)"));
    };

    let gen = Generator::<f64>::new(GeneratorSpec::from_config(&cfg), 2);
    let det = Detector::<f64>::new(DetectorSpec::from_config(&cfg), 3);
    let xs = [random_image(16, &mut rng), random_image(16, &mut rng)];
    let refs: Vec<&Image> = xs.iter().collect();
    let a = [[0.1, 0.3, 0.8], [0.7, 0.9, 0.2]];
    let wts = AttackWeights::from_config(&cfg);
    let (_, grads) = attack_loss_grad(&gen, &det, &refs, &a, &wts);
    let mut probe = gen.clone();
    let err = spot_check_gradient(&gen.params, &grads, POINTS, 11, |p| {
        probe.params = p.clone();
        attack_loss(&probe, &det, &refs, &a, &wts).total
    });
    record("l_img", gen.params.num_scalars(), err);

    let sys = DynAutoencoder::<f64>::new(
        SysSpec {
            image_size: 16,
            feature: 4,
            hidden: 6,
        },
        4,
    );
    let windows: Vec<Window> = (0..2)
        .map(|_| Window {
            frames: (0..4).map(|_| random_image(16, &mut rng)).collect(),
            actions: (0..3).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
            h0: sample_hidden(6, &mut rng),
        })
        .collect();
    let (_, grads) = sys.sys_loss_grad(&windows);
    let mut probe = sys.clone();
    let err = spot_check_gradient(&sys.params, &grads, POINTS, 12, |p| {
        probe.params = p.clone();
        probe.sys_loss(&windows)
    });
    record("l_sys", sys.params.num_scalars(), err);

    let critic = Critic::<f64>::new(4, 6, 6);
    let ts: Vec<Transition> = (0..3)
        .map(|i| Transition {
            h: hidden(4, &mut rng),
            a: [rng.random(), rng.random(), rng.random()],
            r: i as f64,
            h_next: hidden(4, &mut rng),
            done: false,
        })
        .collect();
    let batch: Vec<&Transition> = ts.iter().collect();
    let y = [0.5, -1.0, 2.0];
    let (_, grads) = critic_loss_grad(&critic, &batch, &y);
    let mut probe = critic.clone();
    let err = spot_check_gradient(&critic.params, &grads, POINTS, 13, |p| {
        probe.params = p.clone();
        critic_loss_grad(&probe, &batch, &y).0
    });
    record("critic", critic.params.num_scalars(), err);

    let actor = Actor::<f64>::new(4, 6, 5);
    let hs: Vec<&[f32]> = ts.iter().map(|t| t.h.as_slice()).collect();
    let (_, grads) = policy_objective_grad(&actor, &critic, &hs);
    let mut probe = actor.clone();
    let err = spot_check_gradient(&actor.params, &grads, POINTS, 14, |p| {
        probe.params = p.clone();
        policy_objective_grad(&probe, &critic, &hs).0
    });
    record("J", actor.params.num_scalars(), err);
    verdict(ok, report.join(", "))
}

fn perturbation_invariants() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 10_000,
        ..PropConfig::default()
    });
    let strategy = (
        prop::collection::vec(0.0f32..=1.0, 12),
        prop::collection::vec(0.0f32..=1.0, 12),
        any::<bool>(),
    );
    let result = runner.run(&strategy, |(x, w, high)| {
        let alpha = if high { 20.0 } else { 10.0 };
        let x = Image::from_data(2, 2, 3, x);
        let y = apply_perturbation(&x, &Image::from_data(2, 2, 3, w), alpha);
        for (a, b) in x.data.iter().zip(&y.data) {
            prop_assert!((0.0..=1.0).contains(b));
            prop_assert!(((b - a).abs() as f64) <= alpha / 255.0 + 1e-9);
        }
        let zero = Image::from_data(2, 2, 3, vec![0.0; 12]);
        prop_assert_eq!(apply_perturbation(&x, &zero, alpha), x);
        Ok(())
    });
    match result {
        Ok(()) => Ok("10000 random triples".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn discretization() -> Outcome {
    for (b, gw, gh) in [(3, 8, 8), (1, 1, 1), (2, 3, 7), (5, 14, 14)] {
        let steps = 4 * b.max(gw).max(gh);
        let mut seen = std::collections::HashSet::new();
        for s0 in 0..=steps {
            for s1 in 0..=steps {
                for s2 in 0..=steps {
                    let v = |s: usize| s as f64 / steps as f64;
                    seen.insert(discretize([v(s0), v(s1), v(s2)], b, gw, gh));
                }
            }
        }
        let low = discretize([0.0; 3], b, gw, gh) == AnchorIndex { i: 1, j: 1, k: 1 };
        let high = discretize([1.0; 3], b, gw, gh) == AnchorIndex { i: b, j: gw, k: gh };
        let in_range = seen.iter().all(|a| (1..=b).contains(&a.i) && (1..=gw).contains(&a.j) && (1..=gh).contains(&a.k));
        if !(low && high && in_range && seen.len() == b * gw * gh) {
            return Err(format!("({b},{gw},{gh}): {} of {} anchors reached", seen.len(), b * gw * gh));
        }
    }
    Ok("boundaries and surjectivity on 4 grids".into())
}

fn rate_ordering() -> Outcome {
    let defaults = LearningRates::default();
    if let Err(e) = validate_rates(&defaults) {
        return Err(format!("defaults rejected: {e}"));
    }
    let swaps: [(&str, &str, fn(&mut LearningRates)); 3] = [
        ("img", "sys", |r| std::mem::swap(&mut r.img, &mut r.sys)),
        ("sys", "actor", |r| std::mem::swap(&mut r.sys, &mut r.actor)),
        ("actor", "critic", |r| std::mem::swap(&mut r.actor, &mut r.critic)),
    ];
    for (lo, hi, swap) in swaps {
        let mut r = defaults.clone();
        swap(&mut r);
        match validate_rates(&r) {
            Err(e) if e.to_string().contains(&format!("({lo}, {hi})")) => {}
            other => return Err(format!("({lo}, {hi}) swap gave {other:?}")),
        }
    }
    Ok("defaults accepted, 3 adjacent swaps rejected by name".into())
}

fn critic_two_state() -> Outcome {
    let gamma = 0.5;
    let q0 = (1.0 + gamma * 2.0) / (1.0 - gamma * gamma);
    let q1 = (2.0 + gamma * 1.0) / (1.0 - gamma * gamma);
    let mut agent = Agent::new(2, 16, 1e-3, 3e-3, 21);
    let (s0, s1) = (vec![1.0f32, 0.0], vec![0.0f32, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a0 = agent.actor.act(&s0, false, 0.0, &mut rng);
    let a1 = agent.actor.act(&s1, false, 0.0, &mut rng);
    let ts = [
        Transition {
            h: s0.clone(),
            a: a0,
            r: 1.0,
            h_next: s1.clone(),
            done: false,
        },
        Transition {
            h: s1.clone(),
            a: a1,
            r: 2.0,
            h_next: s0.clone(),
            done: false,
        },
    ];
    let batch: Vec<&Transition> = ts.iter().collect();
    for _ in 0..5000 {
        agent.critic_update(&batch, gamma);
        agent.soft_update_targets(0.05);
    }
    let (got0, got1) = (agent.critic.q_value(&s0, a0), agent.critic.q_value(&s1, a1));
    verdict(
        (got0 - q0).abs() < 1e-2 && (got1 - q1).abs() < 1e-2,
        format!("Q = ({got0:.4}, {got1:.4}), closed form ({q0:.4}, {q1:.4})"),
    )
}

fn bbox(cx: f64, cy: f64, area: f64) -> BoundingBox {
    BoundingBox {
        cx,
        cy,
        w: area.sqrt(),
        h: area.sqrt(),
        confidence: 1.0,
        class_id: 0,
        anchor: 0,
    }
}

fn kalman() -> Outcome {
    let f = BoxFilter::new(KfNoise::default());
    let dt = 0.1;
    let truth = |t: f64| (12.0 + 30.0 * t, 40.0 - 15.0 * t, 150.0 + 80.0 * t);
    let (x, y, a) = truth(0.0);
    let mut kf = f.init(&bbox(x, y, a));
    let mut error = f64::INFINITY;
    for n in 1..=50 {
        let (x, y, a) = truth(n as f64 * dt);
        kf = f.update(&f.predict(&kf, dt), &bbox(x, y, a));
        error = (kf.cx() - x).hypot(kf.cy() - y);
    }
    if error >= 0.1 {
        return Err(format!("position error {error} after 50 updates"));
    }
    let start = kf.mean;
    let mut trace = kf.covariance.trace();
    let mut drift = 0.0f64;
    for k in 1..=15 {
        kf = f.predict(&kf, dt);
        let s = k as f64 * dt;
        for i in 0..3 {
            drift = drift.max((kf.mean[i] - (start[i] + s * start[i + 3])).abs());
            drift = drift.max((kf.mean[i + 3] - start[i + 3]).abs());
        }
        let t = kf.covariance.trace();
        if t <= trace {
            return Err(format!("covariance trace fell during dropout at k={k}"));
        }
        trace = t;
    }
    verdict(
        drift < 1e-9,
        format!("error {error:.2e} px after 50 updates, dropout drift {drift:.1e}"),
    )
}

fn brute_u(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| (x, y)))
        .map(|(x, y)| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 })
        .sum()
}

fn brute_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let centre = (a.len() * b.len()) as f64 / 2.0;
    let observed = (brute_u(a, b) - centre).abs();
    let (mut hit, mut all) = (0u64, 0u64);
    for mask in 0u32..(1 << pooled.len()) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let (x, y): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
            pooled.iter().copied().enumerate().partition(|(i, _)| mask & (1 << i) != 0);
        let x: Vec<f64> = x.into_iter().map(|p| p.1).collect();
        let y: Vec<f64> = y.into_iter().map(|p| p.1).collect();
        all += 1;
        if (brute_u(&x, &y) - centre).abs() >= observed - 1e-9 {
            hit += 1;
        }
    }
    hit as f64 / all as f64
}

fn mann_whitney_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut exact = 0;
    for case in 0..500 {
        let n = rng.random_range(1..=12);
        let m = rng.random_range(1..=12);
        let draw = |rng: &mut ChaCha8Rng| {
            if case % 2 == 0 {
                rng.random_range(0..5) as f64
            } else {
                rng.random_range(-3.0..3.0)
            }
        };
        let a: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let b: Vec<f64> = (0..m).map(|_| draw(&mut rng)).collect();
        let r = mann_whitney_u(&a, &b).map_err(|e| e.to_string())?;
        if r.u != brute_u(&a, &b) {
            return Err(format!("U {} vs {} for {a:?} / {b:?}", r.u, brute_u(&a, &b)));
        }
        if r.method == PMethod::Exact && n + m <= 20 {
            let p = brute_p(&a, &b);
            if (r.p - p).abs() >= 1e-6 {
                return Err(format!("p {} vs {p} for {a:?} / {b:?}", r.p));
            }
            exact += 1;
        }
    }
    Ok(format!("500 pairs, U exact, {exact} exact-mode p values within 1e-6"))
}

// ---- trained-attacker criteria ----------------------------------------

const TRAIN_BUDGET: Duration = Duration::from_secs(2 * 3600);
const PIPELINE_BUDGET: Duration = Duration::from_secs(15 * 60);

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Attack vs normal over the configured evaluation episodes.
fn significance(ctx: &Context, scenario: u8, trained: Result<(usize, Duration), String>) -> Outcome {
    let (episodes, elapsed) = trained?;
    let n = ctx.cfg.eval.episodes;
    let report = commands::eval(ctx, scenario, n, true).map_err(|e| e.to_string())?;
    let c = report.comparison.ok_or("no comparison")?;
    let detail = format!(
        "attack {:.2}±{:.2} vs normal {:.2}±{:.2}, U {}, p {:.2e}; {} training episodes in {:.0} s",
        c.attack.mean, c.attack.std, c.normal.mean, c.normal.std, c.test.u, c.test.p, episodes, elapsed.as_secs_f64()
    );
    verdict(
        n >= 10 && c.attack.mean > c.normal.mean && c.test.p < 0.01 && episodes <= 150 && elapsed < TRAIN_BUDGET,
        detail,
    )
}

fn train(ctx: &Context) -> Result<(usize, Duration), String> {
    let start = Instant::now();
    let summary = commands::train_attacker(ctx, false).map_err(|e| e.to_string())?;
    Ok((summary.episodes, start.elapsed()))
}

fn trend(ctx: &Context) -> Outcome {
    let metrics = read_metrics(&ctx.layout.logs().join(METRICS_FILE)).map_err(|e| e.to_string())?;
    let t = TrendReport::from_metrics(&metrics).ok_or("log too short")?;
    verdict(
        t.holds(),
        format!(
            "return {:.2} -> {:.2}, l_img {:.3} -> {:.3} over {} episodes",
            t.first_return,
            t.last_return,
            t.first_loss,
            t.last_loss,
            metrics.len()
        ),
    )
}

fn runtime(ctx: &Context) -> Outcome {
    let frames = 200;
    let report = commands::bench(ctx, frames, 10).map_err(|e| e.to_string())?;
    let (_, cols, rows) = read_table(&report.table).map_err(|e| e.to_string())?;
    let col = |name: &str| cols.iter().position(|c| c == name).ok_or(format!("no {name} column"));
    let (method, time) = (col("method")?, col("time_ms")?);
    let times = |m: &str| -> Vec<f64> { rows.iter().filter(|r| r[method] == m).map(|r| r[time].parse().unwrap()).collect() };
    let (rec, it) = (median(times("recursive")), median(times("iterative")));
    let s = &report.summary;
    verdict(
        s.frames >= frames && rec * 10.0 <= it && s.loss_ratio <= 2.0,
        format!(
            "{} frames, median {rec:.3} ms vs {it:.3} ms ({:.1}x), loss {:.3} vs {:.3} (ratio {:.2})",
            s.frames,
            it / rec,
            s.recursive_loss.mean,
            s.iterative_loss.mean,
            s.loss_ratio
        ),
    )
}

fn checkpoint_hashes(dir: &Path) -> Result<Vec<(String, String)>, String> {
    let mut v = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let p = e.map_err(|e| e.to_string())?.path();
        if p.extension().is_some_and(|x| x == "bin") {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            v.push((name, file_sha256(&p).map_err(|e| e.to_string())?));
        }
    }
    v.sort();
    Ok(v)
}

fn reproducibility(work: &Path) -> Outcome {
    let cfg = config("smoke.toml");
    let mut runs = Vec::new();
    for name in ["smoke-a", "smoke-b"] {
        let ctx = Context::new(cfg.clone(), &work.join(name), true);
        let start = Instant::now();
        commands::pipeline(&ctx).map_err(|e| format!("{name}: {e}"))?;
        let elapsed = start.elapsed();
        let metrics = std::fs::read_to_string(ctx.layout.logs().join(METRICS_FILE)).map_err(|e| e.to_string())?;
        runs.push((elapsed, metrics, checkpoint_hashes(&ctx.layout.checkpoints())?));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let slowest = a.0.max(b.0);
    verdict(
        a.1 == b.1 && a.2 == b.2 && !a.1.is_empty() && a.2.len() >= 3 && slowest < PIPELINE_BUDGET,
        format!(
            "metric logs {}, {} checkpoint hashes {}, slowest run {:.0} s",
            if a.1 == b.1 { "identical" } else { "differ" },
            a.2.len(),
            if a.2 == b.2 { "identical" } else { "differ" },
            slowest.as_secs_f64()
        ),
    )
}

fn share_detector(from: &Context, to: &Context) -> Result<(), String> {
    to.layout.create().map_err(|e| e.to_string())?;
    for ext in ["bin", "json"] {
        let name = format!("detector.{ext}");
        std::fs::copy(from.layout.checkpoints().join(&name), to.layout.checkpoints().join(&name)).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() {
    let work = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if work.exists() {
        std::fs::remove_dir_all(&work).expect("clear previous acceptance run");
    }
    let mut results: Vec<(u8, &str, Outcome)> = vec![
        (5, "gradient oracles", gradient_oracles()),
        (6, "perturbation invariants", perturbation_invariants()),
        (7, "discretization", discretization()),
        (8, "learning-rate ordering", rate_ordering()),
        (9, "critic on a two-state MDP", critic_two_state()),
        (10, "Kalman filter", kalman()),
        (11, "Mann-Whitney oracle", mann_whitney_oracle()),
    ];

    eprintln!("pretraining the shared detector");
    let s1 = Context::new(config("scenario1.toml"), &work, true);
    let s3 = Context::new(config("scenario3.toml"), &work, true);
    let detector = commands::pretrain(&s1).map_err(|e| e.to_string()).and_then(|_| share_detector(&s1, &s3));

    eprintln!("training scenario 1");
    let trained1 = detector.clone().and_then(|_| train(&s1));
    results.push((2, "scenario 1 significance", significance(&s1, 1, trained1.clone())));
    results.push((4, "training trend", trained1.clone().and_then(|_| trend(&s1))));
    eprintln!("benchmarking");
    results.push((1, "runtime ratio", trained1.and_then(|_| runtime(&s1))));

    eprintln!("training scenario 3");
    let trained3 = detector.and_then(|_| train(&s3));
    results.push((3, "scenario 3 significance", significance(&s3, 3, trained3)));

    eprintln!("running the smoke pipeline twice");
    results.push((12, "pipeline reproducibility", reproducibility(&work)));

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {id:2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:2} FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
