use std::path::{Path, PathBuf};
use std::process::Command;

use advlab::config::Config;
use advlab_cli::commands::{self, file_sha256, Context};
use advlab_cli::manifest::RunManifest;

const TINY: &str = r#"
scenario = 1
seed = 11
image_size = 16

[env]
max_steps = 12
follow_timeout_steps = 12

[detector]
grid = 2
width = 4
train_samples = 40
holdout_samples = 20
epochs = 1
accuracy_gate = 0.0

[attack]
latent_channels = 4
head_channels = 4
batch = 2

[dynamics]
hidden = 6
feature = 4
window = 3
batch = 2
buffer_episodes = 4

[policy]
hidden = 8
batch = 4

[train]
episodes = 3
warmup_episodes = 1
checkpoint_every = 2

[eval]
episodes = 3

[bench]
frames = 4
iters = 2
warmup_frames = 1
repetitions = 1
"#;

fn tiny() -> Config {
    Config::from_toml_str(TINY).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn advlab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_advlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn files_in(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

#[test]
fn unknown_config_key_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}\nlearning_rate = 3\n"));
    let out = advlab(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_detector_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = advlab(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain"));
}

#[test]
fn accuracy_gate_failure_exits_with_two_and_saves_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("accuracy_gate = 0.0", "accuracy_gate = 0.999"));
    let out = advlab(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join(Config::load(&cfg).unwrap().run_id());
    assert!(!run.join("checkpoints/detector.bin").exists());
    assert!(run.join("logs/pretrain.json").exists());
}

#[test]
fn pretrain_refuses_to_overwrite_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context::new(tiny(), dir.path(), false);
    let first = commands::pretrain(&ctx).unwrap();
    assert!(ctx.layout.manifest().exists());
    let err = commands::pretrain(&ctx).unwrap_err();
    assert_eq!(advlab_cli::exit_code(&err), 1);
    let forced = Context { force: true, ..ctx.clone() };
    let second = commands::pretrain(&forced).unwrap();
    assert_eq!(first.weights_sha256, second.weights_sha256);
    assert!(first.weights_sha256.is_some());
}

#[test]
fn seed_flag_selects_a_separate_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("out");
    for seed in ["1", "2"] {
        let out = advlab(&["pretrain", "--config", cfg.to_str().unwrap(), "--seed", seed, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(std::fs::read_dir(&out_dir).unwrap().count(), 2);
}

fn checkpoint_hashes(layout_root: &Path) -> Vec<(String, String)> {
    files_in(&layout_root.join("checkpoints"), "bin")
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), file_sha256(&p).unwrap()))
        .collect()
}

#[test]
fn pipeline_layout_and_reproducibility() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |out: &Path| {
        let ctx = Context::new(tiny(), out, false);
        let report = commands::pipeline(&ctx).unwrap();
        (ctx, report)
    };
    let (ctx, report) = run(a.path());
    let root = &ctx.layout.root;
    assert!(ctx.layout.manifest().exists());
    assert_eq!(files_in(&root.join("plots"), "svg").len(), 2);
    assert_eq!(files_in(&root.join("tables"), "tsv").len(), 2);
    let ckpts = checkpoint_hashes(root);
    assert!(ckpts.len() >= 3, "{ckpts:?}");
    assert_eq!(report.train.episodes, 3);
    assert_eq!(report.eval.normal.len(), 3);
    assert_eq!(report.eval.attack.len(), 3);

    // Every result file is listed in the manifest and points back at it.
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(ctx.layout.manifest()).unwrap()).unwrap();
    for f in files_in(&root.join("tables"), "tsv").iter().chain(&files_in(&root.join("plots"), "svg")) {
        assert!(manifest.artifacts.contains(&ctx.layout.relative(f)), "{}", f.display());
        assert!(std::fs::read_to_string(f).unwrap().contains("manifest"));
    }
    for c in &ckpts {
        assert!(manifest.checkpoints.contains(&format!("checkpoints/{}", c.0)));
    }

    let (ctx_b, _) = run(b.path());
    let metrics = |c: &Context| std::fs::read_to_string(c.layout.logs().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics(&ctx), metrics(&ctx_b));
    assert_eq!(ckpts, checkpoint_hashes(&ctx_b.layout.root));
}

#[test]
fn interrupted_pipeline_resumes_from_completed_stages() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context::new(tiny(), dir.path(), false);
    commands::pretrain(&ctx).unwrap();
    let detector = file_sha256(&ctx.layout.checkpoints().join("detector.bin")).unwrap();
    let trained = commands::train_attacker(&ctx, false).unwrap();
    // Stopped before evaluation: rerunning the pipeline reuses both stages.
    let report = commands::pipeline(&ctx).unwrap();
    assert!(report.pretrain.is_none());
    assert_eq!(report.train.episodes, trained.episodes);
    assert_eq!(file_sha256(&ctx.layout.checkpoints().join("detector.bin")).unwrap(), detector);
    // Training again without --resume or --force is refused.
    assert_eq!(advlab_cli::exit_code(&commands::train_attacker(&ctx, false).unwrap_err()), 1);
}

#[test]
fn replay_writes_the_frames_the_victim_saw() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context::new(tiny(), dir.path(), false);
    commands::pretrain(&ctx).unwrap();
    commands::train_attacker(&ctx, false).unwrap();
    for attack in [false, true] {
        let r = commands::replay(&ctx, 77, attack).unwrap();
        assert!(r.frames > 0);
        assert_eq!(files_in(&r.dir, "png").len(), r.frames);
        let log = std::fs::read_to_string(r.dir.join("episode.jsonl")).unwrap();
        assert_eq!(log.lines().count(), r.frames);
    }
}
