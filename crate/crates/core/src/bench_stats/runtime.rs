//! Recursive generator vs iterative baseline on identical frames.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::Stats;
use crate::attacker::{apply_perturbation, attack_loss, iterative_attack_baseline, AttackWeights, Generator};
use crate::detector::Detector;
use crate::sim_env::Image;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Recursive,
    Iterative,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Recursive => "recursive",
            Method::Iterative => "iterative",
        }
    }
}

/// One timed attack on one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub method: Method,
    pub frame: usize,
    pub repetition: usize,
    pub time_ms: f64,
    /// Detector-facing loss `target + λ₀·vanish` of the attacked frame.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub frames: usize,
    pub iters: usize,
    pub recursive_time: Stats,
    pub iterative_time: Stats,
    pub recursive_loss: Stats,
    pub iterative_loss: Stats,
    /// Median over frames of `iterative / recursive` per-frame time.
    pub median_ratio: f64,
    /// `mean recursive loss / mean iterative loss`.
    pub loss_ratio: f64,
}

pub struct BenchOptions {
    pub iters: usize,
    pub step: f64,
    pub warmup_frames: usize,
    pub repetitions: usize,
}

/// Times both methods on `frames` (clean frame plus the logged command).
/// Only perturbation generation sits inside the timed region. Per-frame time
/// is the median over repetitions.
pub fn bench_runtime(
    frames: &[(Image, [f64; 3])],
    gen: &Generator<f32>,
    det: &Detector<f32>,
    wts: &AttackWeights,
    opts: &BenchOptions,
) -> Result<(Vec<BenchRecord>, BenchSummary)> {
    if frames.is_empty() || opts.repetitions == 0 {
        return Err(Error::usage("benchmark needs at least one frame and one repetition"));
    }
    for (x, a) in frames.iter().cycle().take(opts.warmup_frames) {
        let w = gen.generate_perturbation(x, *a);
        std::hint::black_box(apply_perturbation(x, &w, wts.alpha));
        std::hint::black_box(iterative_attack_baseline(det, x, *a, opts.iters, opts.step, wts));
    }
    let mut records = Vec::new();
    for rep in 0..opts.repetitions {
        for (i, (x, a)) in frames.iter().enumerate() {
            let t0 = Instant::now();
            let w = gen.generate_perturbation(x, *a);
            let xt = apply_perturbation(x, &w, wts.alpha);
            let rec_ms = t0.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(&xt);
            let t0 = Instant::now();
            let (xb, base_loss) = iterative_attack_baseline(det, x, *a, opts.iters, opts.step, wts);
            let it_ms = t0.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(&xb);
            let rec_loss = attack_loss(gen, det, &[x], &[*a], wts).detector_part(wts.lambda0);
            records.push(BenchRecord {
                method: Method::Recursive,
                frame: i,
                repetition: rep,
                time_ms: rec_ms,
                loss: rec_loss,
            });
            records.push(BenchRecord {
                method: Method::Iterative,
                frame: i,
                repetition: rep,
                time_ms: it_ms,
                loss: base_loss,
            });
        }
    }
    let summary = summarize(&records, frames.len(), opts.iters);
    Ok((records, summary))
}

fn per_frame_median(records: &[BenchRecord], method: Method, frames: usize) -> Vec<f64> {
    (0..frames)
        .map(|f| {
            let v: Vec<f64> = records
                .iter()
                .filter(|r| r.method == method && r.frame == f)
                .map(|r| r.time_ms)
                .collect();
            Stats::of(&v).median
        })
        .collect()
}

pub fn summarize(records: &[BenchRecord], frames: usize, iters: usize) -> BenchSummary {
    let rec_t = per_frame_median(records, Method::Recursive, frames);
    let it_t = per_frame_median(records, Method::Iterative, frames);
    let ratios: Vec<f64> = it_t.iter().zip(&rec_t).map(|(i, r)| i / r.max(1e-9)).collect();
    let loss = |m: Method| {
        let v: Vec<f64> = records.iter().filter(|r| r.method == m && r.repetition == 0).map(|r| r.loss).collect();
        Stats::of(&v)
    };
    let (recursive_loss, iterative_loss) = (loss(Method::Recursive), loss(Method::Iterative));
    BenchSummary {
        frames,
        iters,
        recursive_time: Stats::of(&rec_t),
        iterative_time: Stats::of(&it_t),
        median_ratio: Stats::of(&ratios).median,
        loss_ratio: recursive_loss.mean / iterative_loss.mean.max(1e-12),
        recursive_loss,
        iterative_loss,
    }
}
