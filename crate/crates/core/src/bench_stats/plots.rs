//! Training-curve figures: episode return and generator loss.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::decile_means;
use crate::trainer::EpisodeMetrics;
use crate::{Error, Result};

pub const REWARD_PLOT: &str = "reward.svg";
pub const LOSS_PLOT: &str = "attack_loss.svg";

/// Series drawn by [`emit_plots`], kept so callers can check them against the log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotReport {
    pub files: Vec<PathBuf>,
    pub reward: Vec<(f64, f64)>,
    pub loss: Vec<(f64, f64)>,
    pub final_decile_reward: Option<f64>,
}

fn rolling(points: &[(f64, f64)], n: usize) -> Vec<(f64, f64)> {
    (0..points.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(n);
            let w = &points[lo..=i];
            (points[i].0, w.iter().map(|p| p.1).sum::<f64>() / w.len() as f64)
        })
        .collect()
}

fn draw(path: &Path, title: &str, x_label: &str, y_label: &str, raw: &[(f64, f64)]) -> Result<()> {
    let err = |e: String| Error::Format(format!("{}: {e}", path.display()));
    let (x0, x1) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    chart
        .draw_series(LineSeries::new(raw.iter().copied(), RGBColor(160, 180, 220)))
        .map_err(|e| err(e.to_string()))?
        .label("per episode")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], RGBColor(160, 180, 220)));
    chart
        .draw_series(LineSeries::new(rolling(raw, 10), BLUE.stroke_width(2)))
        .map_err(|e| err(e.to_string()))?
        .label("10-episode mean")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLUE.stroke_width(2)));
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))?;
    Ok(())
}

/// Writes the return-vs-episode and loss-vs-update figures into `dir`.
/// An empty log writes nothing and logs a warning.
pub fn emit_plots(metrics: &[EpisodeMetrics], dir: &Path) -> Result<PlotReport> {
    if metrics.is_empty() {
        log::warn!("metric log is empty; no plots written");
        return Ok(PlotReport::default());
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let reward: Vec<(f64, f64)> = metrics.iter().map(|m| (m.episode as f64, m.episode_return)).collect();
    let mut updates = 0usize;
    let mut loss = Vec::new();
    for m in metrics {
        updates += m.updates.img;
        if let Some(l) = m.img_loss {
            loss.push((updates as f64, l));
        }
    }
    let mut report = PlotReport {
        final_decile_reward: decile_means(&reward.iter().map(|p| p.1).collect::<Vec<_>>()).map(|d| d.1),
        ..PlotReport::default()
    };
    let p = dir.join(REWARD_PLOT);
    draw(&p, "Attack policy return", "episode", "episode return", &reward)?;
    report.files.push(p);
    if loss.is_empty() {
        log::warn!("no generator updates in the log; loss plot skipped");
    } else {
        let p = dir.join(LOSS_PLOT);
        draw(&p, "Image attack loss", "generator update", "l_img", &loss)?;
        report.files.push(p);
    }
    report.reward = reward;
    report.loss = loss;
    Ok(report)
}
