//! Evaluation artifacts: runtime comparison, scenario statistics, plots.

mod eval;
mod mwu;
mod plots;
mod runtime;
mod tables;

use serde::{Deserialize, Serialize};

pub use eval::{compare, eval_scenarios, Comparison, Condition, MetricSample};
pub use mwu::{mann_whitney_u, MannWhitney, PMethod, NORMAL_APPROX_MIN};
pub use plots::{emit_plots, PlotReport, LOSS_PLOT, REWARD_PLOT};
pub use runtime::{bench_runtime, summarize, BenchOptions, BenchRecord, BenchSummary, Method};
pub use tables::{platform_string, read_table, write_table, TableHeader};

/// Mean, sample standard deviation and median.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Stats {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len();
        if n == 0 {
            return Self {
                n,
                mean: f64::NAN,
                std: f64::NAN,
                median: f64::NAN,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
        Self { n, mean, std, median }
    }
}

/// Means of the first and last tenth (at least one element each) of `v`.
pub fn decile_means(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let k = v.len().div_ceil(10);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&v[..k]), mean(&v[v.len() - k..])))
}

/// Training-curve trend: return rises and generator loss falls between the
/// first and last decile of the log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub first_return: f64,
    pub last_return: f64,
    pub first_loss: f64,
    pub last_loss: f64,
}

impl TrendReport {
    pub fn from_metrics(metrics: &[crate::trainer::EpisodeMetrics]) -> Option<Self> {
        let ret: Vec<f64> = metrics.iter().map(|m| m.episode_return).collect();
        let loss: Vec<f64> = metrics.iter().filter_map(|m| m.img_loss).collect();
        let (first_return, last_return) = decile_means(&ret)?;
        let (first_loss, last_loss) = decile_means(&loss)?;
        Some(Self {
            first_return,
            last_return,
            first_loss,
            last_loss,
        })
    }

    pub fn holds(&self) -> bool {
        self.last_return > self.first_return && self.last_loss < self.first_loss
    }
}
