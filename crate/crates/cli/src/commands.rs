use std::path::{Path, PathBuf};

use advlab::attacker::{apply_perturbation, AttackWeights};
use advlab::bench_stats::{
    bench_runtime, compare, emit_plots, eval_scenarios, write_table, BenchOptions, BenchSummary, Comparison, MetricSample,
    PlotReport, Stats, TableHeader, TrendReport,
};
use advlab::config::Config;
use advlab::detector::{anchor_accuracy, gen_synthetic_dataset, sha256_hex, train_detector, Detector, DetectorSpec};
use advlab::sim_env::{Camera, Env, EpisodeRecord, Image};
use advlab::trainer::{
    latest, load_models, read_metrics, run_attack_episode, stream_rng, train, AttackModels, Behavior, LATEST_FILE,
    METRICS_FILE, TIMING_FILE,
};
use advlab::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::manifest::{now_unix, CommandStamp, RunLayout, RunManifest, MANIFEST_FILE};

pub const DETECTOR_STEM: &str = "detector";

/// Everything a command needs: the resolved configuration and where its run lives.
#[derive(Clone, Debug)]
pub struct Context {
    pub cfg: Config,
    pub layout: RunLayout,
    pub force: bool,
}

impl Context {
    pub fn new(cfg: Config, out: &Path, force: bool) -> Self {
        let layout = RunLayout::new(out, &cfg);
        Self { cfg, layout, force }
    }

    /// Opens the run directory and manifest, runs `f`, and records the
    /// outcome in the manifest whether or not `f` succeeded.
    fn stage<T>(&self, name: &str, f: impl FnOnce(&mut RunManifest) -> Result<T>) -> Result<T> {
        self.layout.create()?;
        let mut manifest = RunManifest::open(&self.layout, &self.cfg)?;
        let snapshot = self.layout.config();
        std::fs::write(&snapshot, self.cfg.to_toml_string()).map_err(|e| Error::io(&snapshot, e))?;
        manifest.add_artifact("config.toml".into());
        let started = now_unix();
        let out = f(&mut manifest);
        manifest.history.push(CommandStamp {
            command: name.into(),
            started_unix: started,
            finished_unix: Some(now_unix()),
            status: match &out {
                Ok(_) => "ok".into(),
                Err(e) => format!("failed: {e}"),
            },
        });
        manifest.save(&self.layout)?;
        out
    }

    fn camera(&self) -> Camera {
        Camera {
            width: self.cfg.image_size,
            height: self.cfg.image_size,
            focal_px: self.cfg.env.focal_px,
        }
    }

    /// The run's frozen detector; its architecture must match the configuration.
    pub fn detector(&self) -> Result<Detector<f32>> {
        let dir = self.layout.checkpoints();
        if !dir.join(format!("{DETECTOR_STEM}.bin")).exists() {
            return Err(Error::usage(format!("no detector in {}; run pretrain first", dir.display())));
        }
        let (det, _) = Detector::load(&dir, DETECTOR_STEM)?;
        if det.spec != DetectorSpec::from_config(&self.cfg) {
            return Err(Error::Config(format!("{}: detector does not match the configuration", dir.display())));
        }
        Ok(det)
    }

    /// Newest attacker checkpoint and its file hash.
    pub fn attacker(&self) -> Result<(AttackModels, PathBuf, String)> {
        let dir = self.layout.checkpoints();
        if !dir.join(LATEST_FILE).exists() {
            return Err(Error::usage(format!("no attacker checkpoint in {}; run train first", dir.display())));
        }
        let path = latest(&dir)?;
        let (models, header, _) = load_models(&self.cfg, &path)?;
        if header.config_digest != self.cfg.digest() {
            return Err(Error::Config(format!("{} was written under a different configuration", path.display())));
        }
        let hash = file_sha256(&path)?;
        Ok((models, path, hash))
    }

    fn header(&self, checkpoint_sha256: String) -> TableHeader {
        TableHeader {
            manifest: format!("../{MANIFEST_FILE}"),
            config_sha256: self.cfg.digest(),
            checkpoint_sha256,
            platform: advlab::bench_stats::platform_string(),
        }
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
    pub holdout_accuracy: f64,
    pub gate: f64,
    pub weights_sha256: Option<String>,
}

/// Synthetic dataset, detector training, and the holdout accuracy gate. A
/// detector that fails the gate is not saved.
pub fn pretrain(ctx: &Context) -> Result<PretrainReport> {
    let bin = ctx.layout.checkpoints().join(format!("{DETECTOR_STEM}.bin"));
    if bin.exists() && !ctx.force {
        return Err(Error::usage(format!("{} exists; pass --force to overwrite", bin.display())));
    }
    ctx.stage("pretrain", |manifest| {
        let d = &ctx.cfg.detector;
        let camera = ctx.camera();
        let data = gen_synthetic_dataset(d.train_samples, d.seed, &camera);
        let holdout = gen_synthetic_dataset(d.holdout_samples, d.seed.wrapping_add(1), &camera);
        let mut det = Detector::<f32>::new(DetectorSpec::from_config(&ctx.cfg), d.seed.wrapping_add(2));
        let fit = train_detector(&mut det, &data, d.epochs, d.batch, d.lr, d.seed.wrapping_add(3))?;
        let accuracy = anchor_accuracy(&det, &holdout);
        let mut report = PretrainReport {
            epoch_loss: fit.epoch_loss,
            holdout_accuracy: accuracy,
            gate: d.accuracy_gate,
            weights_sha256: None,
        };
        let passed = accuracy >= d.accuracy_gate;
        if passed {
            let m = det.save(&ctx.layout.checkpoints(), DETECTOR_STEM, Some(accuracy))?;
            report.weights_sha256 = Some(m.weights_sha256);
            manifest.add_checkpoint(format!("checkpoints/{DETECTOR_STEM}.bin"));
        }
        let log = ctx.layout.logs().join("pretrain.json");
        write_json(&log, &report)?;
        manifest.add_artifact(ctx.layout.relative(&log));
        log::info!("detector holdout anchor accuracy {accuracy:.3} (gate {})", d.accuracy_gate);
        if !passed {
            return Err(Error::Gate(format!(
                "detector holdout anchor accuracy {accuracy:.3} is below the gate {}",
                d.accuracy_gate
            )));
        }
        Ok(report)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub episodes: usize,
    pub last_checkpoint: PathBuf,
    pub rolling_return: Option<f64>,
    pub trend: Option<TrendReport>,
}

fn clear_training(layout: &RunLayout) -> Result<()> {
    let dir = layout.checkpoints();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("ckpt-") || name.starts_with("replay-") || name == LATEST_FILE {
            std::fs::remove_file(entry.path()).map_err(|e| Error::io(&entry.path(), e))?;
        }
    }
    for f in [METRICS_FILE, TIMING_FILE] {
        let p = layout.logs().join(f);
        if p.exists() {
            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

/// Trains the attacker against the run's detector. Existing training state
/// is continued with `resume`, discarded with `--force`, and otherwise refused.
pub fn train_attacker(ctx: &Context, resume: bool) -> Result<TrainSummary> {
    let det = ctx.detector()?;
    let before = det.params.digest();
    ctx.stage("train", |manifest| {
        let ckpts = ctx.layout.checkpoints();
        let from = if ckpts.join(LATEST_FILE).exists() {
            if resume {
                Some(latest(&ckpts)?)
            } else if ctx.force {
                clear_training(&ctx.layout)?;
                None
            } else {
                return Err(Error::usage(format!(
                    "{} already holds training state; pass --resume or --force",
                    ckpts.display()
                )));
            }
        } else {
            None
        };
        if let Some(p) = &from {
            log::info!("resuming from {}", p.display());
        }
        let report = train(&ctx.cfg, det, &ctx.layout.root, from.as_deref())?;
        let mut names: Vec<String> = std::fs::read_dir(&ckpts)
            .map_err(|e| Error::io(&ckpts, e))?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .filter(|n| n.starts_with("ckpt-"))
            .collect();
        names.sort();
        for n in names {
            manifest.add_checkpoint(format!("checkpoints/{n}"));
        }
        for f in [METRICS_FILE, TIMING_FILE] {
            manifest.add_artifact(format!("logs/{f}"));
        }
        // The detector on disk must be exactly the one training started from.
        if ctx.detector()?.params.digest() != before {
            return Err(Error::Format("detector changed during training".into()));
        }
        let n = report.metrics.len().min(10);
        let rolling_return = (n > 0).then(|| {
            report.metrics[report.metrics.len() - n..].iter().map(|m| m.episode_return).sum::<f64>() / n as f64
        });
        Ok(TrainSummary {
            episodes: report.episodes,
            last_checkpoint: report.last_checkpoint,
            rolling_return,
            trend: TrendReport::from_metrics(&report.metrics),
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: u8,
    pub normal: Vec<MetricSample>,
    pub attack: Vec<MetricSample>,
    pub normal_stats: Stats,
    pub comparison: Option<Comparison>,
    pub table: PathBuf,
}

/// Normal episodes, and with `attack` the same seeds under the trained policy
/// plus the Mann-Whitney comparison.
pub fn eval(ctx: &Context, scenario: u8, episodes: usize, attack: bool) -> Result<EvalReport> {
    advlab::sim_env::ScenarioId::try_from(scenario)?;
    let det = ctx.detector()?;
    let trained = if attack { Some(ctx.attacker()?) } else { None };
    ctx.stage("eval", |manifest| {
        let env = Env::new(&ctx.cfg);
        let (base, alpha) = (ctx.cfg.eval.seed_base, ctx.cfg.attack.alpha);
        let normal = eval_scenarios(&env, &det, None, scenario, episodes, base, alpha)?;
        let (attack, comparison, ckpt_hash) = match &trained {
            Some((models, _, hash)) => {
                let a = eval_scenarios(&env, &det, Some(models), scenario, episodes, base, alpha)?;
                let c = compare(&normal, &a)?;
                (a, Some(c), hash.clone())
            }
            None => (Vec::new(), None, file_sha256(&ctx.layout.checkpoints().join(format!("{DETECTOR_STEM}.bin")))?),
        };
        let table = ctx.layout.tables().join(format!("eval-s{scenario}.tsv"));
        let rows: Vec<Vec<String>> = normal
            .iter()
            .chain(&attack)
            .map(|s| {
                vec![
                    s.condition.name().to_string(),
                    s.scenario.to_string(),
                    s.seed.to_string(),
                    s.metric.to_string(),
                    s.steps.to_string(),
                    s.episode_return.to_string(),
                    s.terminal_reward.to_string(),
                ]
            })
            .collect();
        write_table(
            &table,
            &ctx.header(ckpt_hash),
            &["condition", "scenario", "seed", "metric", "steps", "return", "terminal_reward"],
            &rows,
        )?;
        manifest.add_artifact(ctx.layout.relative(&table));
        let report = EvalReport {
            scenario,
            normal_stats: Stats::of(&normal.iter().map(|s| s.metric).collect::<Vec<_>>()),
            normal,
            attack,
            comparison,
            table,
        };
        let summary = ctx.layout.logs().join(format!("eval-s{scenario}.json"));
        write_json(&summary, &report)?;
        manifest.add_artifact(ctx.layout.relative(&summary));
        Ok(report)
    })
}

/// Clean frames and the greedy policy's commands from attack episodes on
/// seeds disjoint from the evaluation ones.
pub fn logged_frames(ctx: &Context, det: &Detector<f32>, models: &AttackModels, n: usize) -> Result<Vec<(Image, [f64; 3])>> {
    let env = Env::new(&ctx.cfg);
    let mut frames = Vec::with_capacity(n);
    let mut seed = ctx.cfg.eval.seed_base + 500_000;
    while frames.len() < n {
        let mut rng = stream_rng(seed, 0, 1);
        let out = run_attack_episode(&env, det, models, ctx.cfg.scenario, seed, ctx.cfg.attack.alpha, Behavior::Greedy, &mut rng)?;
        for t in 0..out.trajectory.len() {
            if frames.len() == n {
                break;
            }
            frames.push((out.trajectory.frame(t), out.trajectory.actions[t]));
        }
        seed += 1;
    }
    Ok(frames)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub summary: BenchSummary,
    pub table: PathBuf,
}

pub fn bench(ctx: &Context, frames: usize, iters: usize) -> Result<BenchReport> {
    if frames == 0 {
        return Err(Error::usage("bench needs at least one frame"));
    }
    let det = ctx.detector()?;
    let (models, _, hash) = ctx.attacker()?;
    ctx.stage("bench", |manifest| {
        let replayed = logged_frames(ctx, &det, &models, frames)?;
        let b = &ctx.cfg.bench;
        let opts = BenchOptions {
            iters,
            step: ctx.cfg.attack.baseline_step,
            warmup_frames: b.warmup_frames,
            repetitions: b.repetitions,
        };
        let (records, summary) = bench_runtime(&replayed, &models.generator, &det, &AttackWeights::from_config(&ctx.cfg), &opts)?;
        let table = ctx.layout.tables().join("bench.tsv");
        let rows: Vec<Vec<String>> = records
            .iter()
            .map(|r| {
                vec![
                    r.method.name().to_string(),
                    r.frame.to_string(),
                    r.repetition.to_string(),
                    r.time_ms.to_string(),
                    r.loss.to_string(),
                ]
            })
            .collect();
        write_table(&table, &ctx.header(hash), &["method", "frame", "repetition", "time_ms", "loss"], &rows)?;
        manifest.add_artifact(ctx.layout.relative(&table));
        let log = ctx.layout.logs().join("bench.json");
        write_json(&log, &summary)?;
        manifest.add_artifact(ctx.layout.relative(&log));
        log::info!(
            "recursive {:.2} ms, iterative {:.2} ms, median ratio {:.1}, loss ratio {:.2}",
            summary.recursive_time.mean,
            summary.iterative_time.mean,
            summary.median_ratio,
            summary.loss_ratio
        );
        Ok(BenchReport { summary, table })
    })
}

/// Figures from a metric log (the run's own by default). Each SVG carries a
/// comment pointing back at the manifest.
pub fn plot(ctx: &Context, log: Option<&Path>) -> Result<PlotReport> {
    let path = log.map_or_else(|| ctx.layout.logs().join(METRICS_FILE), Path::to_path_buf);
    let metrics = read_metrics(&path)?;
    ctx.stage("plot", |manifest| {
        let report = emit_plots(&metrics, &ctx.layout.plots())?;
        for f in &report.files {
            let svg = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
            let tag = format!("<!-- manifest: ../{MANIFEST_FILE} -->\n");
            let tagged = match svg.find('\n') {
                Some(i) if svg.starts_with("<?xml") => format!("{}{tag}{}", &svg[..=i], &svg[i + 1..]),
                _ => format!("{tag}{svg}"),
            };
            std::fs::write(f, tagged).map_err(|e| Error::io(f, e))?;
            manifest.add_artifact(ctx.layout.relative(f));
        }
        Ok(report)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub dir: PathBuf,
    pub frames: usize,
    pub episode_return: f64,
}

/// Re-runs the episode with seed `seed` (deterministically, greedy policy when
/// attacked) and writes the frames the victim saw plus the episode log.
pub fn replay(ctx: &Context, seed: u64, attack: bool) -> Result<ReplayReport> {
    let det = ctx.detector()?;
    let trained = if attack { Some(ctx.attacker()?) } else { None };
    ctx.stage("replay", |manifest| {
        let env = Env::new(&ctx.cfg);
        let scenario = ctx.cfg.scenario;
        let alpha = ctx.cfg.attack.alpha;
        let (frames, records): (Vec<Image>, Vec<EpisodeRecord>) = match &trained {
            Some((models, _, _)) => {
                let mut rng = stream_rng(seed, 0, 1);
                let out = run_attack_episode(&env, &det, models, scenario, seed, alpha, Behavior::Greedy, &mut rng)?;
                let seen = (0..out.trajectory.len())
                    .map(|t| {
                        let x = out.trajectory.frame(t);
                        let w = models.generator.generate_perturbation(&x, out.trajectory.actions[t]);
                        apply_perturbation(&x, &w, alpha)
                    })
                    .collect();
                (seen, out.records)
            }
            None => {
                let (mut state, mut image) = env.reset(scenario, seed)?;
                let (mut seen, mut records) = (Vec::new(), Vec::new());
                while !state.done {
                    let out = env.step(&state, &det, None, 0.0)?;
                    seen.push(image);
                    records.push(EpisodeRecord {
                        t: state.step_count,
                        state: out.next_state.summary(),
                        action: None,
                        reward: out.total_reward(),
                        done: out.done,
                    });
                    state = out.next_state;
                    image = out.next_image;
                }
                (seen, records)
            }
        };
        let name = format!("{}-{seed}", if attack { "attack" } else { "normal" });
        let dir = ctx.layout.replay().join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, f) in frames.iter().enumerate() {
            f.save_png(&dir.join(format!("frame-{t:04}.png")))?;
        }
        let log = dir.join("episode.jsonl");
        let text: String = records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect();
        std::fs::write(&log, text).map_err(|e| Error::io(&log, e))?;
        manifest.add_artifact(ctx.layout.relative(&dir));
        Ok(ReplayReport {
            dir,
            frames: frames.len(),
            episode_return: records.iter().map(|r| r.reward).sum(),
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub pretrain: Option<PretrainReport>,
    pub train: TrainSummary,
    pub eval: EvalReport,
    pub bench: BenchReport,
    pub plot_files: Vec<PathBuf>,
}

/// pretrain → train → eval (normal and attack) → bench → plot. Completed
/// stages are kept: a rerun reuses the detector and resumes training, while
/// `--force` starts from an empty run directory.
pub fn pipeline(ctx: &Context) -> Result<PipelineReport> {
    if ctx.force && ctx.layout.root.exists() {
        std::fs::remove_dir_all(&ctx.layout.root).map_err(|e| Error::io(&ctx.layout.root, e))?;
    }
    let staged = Context {
        force: false,
        ..ctx.clone()
    };
    let detector = staged.layout.checkpoints().join(format!("{DETECTOR_STEM}.bin"));
    let pretrain_report = if detector.exists() {
        staged.detector()?;
        log::info!("reusing detector {}", detector.display());
        None
    } else {
        Some(pretrain(&staged)?)
    };
    let train_summary = train_attacker(&staged, true)?;
    let eval_report = eval(&staged, staged.cfg.scenario, staged.cfg.eval.episodes, true)?;
    let bench_report = bench(&staged, staged.cfg.bench.frames, staged.cfg.bench.iters)?;
    let plots = plot(&staged, None)?;
    Ok(PipelineReport {
        pretrain: pretrain_report,
        train: train_summary,
        eval: eval_report,
        bench: bench_report,
        plot_files: plots.files,
    })
}
