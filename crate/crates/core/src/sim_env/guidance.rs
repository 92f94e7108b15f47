//! The victim's tracking controller and target selection.

use super::BoundingBox;
use crate::config::PdGains;

/// PD tracking controller working on pixel-space errors.
#[derive(Clone, Debug, PartialEq)]
pub struct PdController {
    pub gains: PdGains,
    pub width: f64,
    pub height: f64,
    /// Bounding-box area (px²) corresponding to the desired stand-off distance.
    pub desired_area: f64,
    pub area_deadband: f64,
    pub dt: f64,
    pub v_max: f64,
}

/// Controller output: `command` is `(longitudinal, lateral, vertical)` in m/s,
/// `error` is the normalized error the derivative term differentiates next time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdOutput {
    pub command: [f64; 3],
    pub error: [f64; 3],
}

impl PdController {
    /// Normalized errors `(lateral, vertical, longitudinal)`. Lateral and
    /// vertical are pixel offsets from the image center divided by the half
    /// extent; longitudinal is `1 − sqrt(area / desired_area)`, zeroed inside
    /// the deadband.
    pub fn error(&self, b: &BoundingBox) -> [f64; 3] {
        let lat = (b.cx - self.width / 2.0) / (self.width / 2.0);
        let vert = (b.cy - self.height / 2.0) / (self.height / 2.0);
        let mut lon = 1.0 - (b.area().max(0.0) / self.desired_area).sqrt();
        if lon.abs() < self.area_deadband {
            lon = 0.0;
        }
        [lat, vert, lon]
    }

    /// `prev_error` is `None` on the first frame of a track, which disables
    /// the derivative term.
    pub fn guidance_pd(&self, b: &BoundingBox, prev_error: Option<[f64; 3]>) -> PdOutput {
        let e = self.error(b);
        let d = match prev_error {
            Some(p) => [(e[0] - p[0]) / self.dt, (e[1] - p[1]) / self.dt, (e[2] - p[2]) / self.dt],
            None => [0.0; 3],
        };
        let g = &self.gains;
        let lat = g.kp_lateral * e[0] + g.kd_lateral * d[0];
        let vert = g.kp_vertical * e[1] + g.kd_vertical * d[1];
        let lon = g.kp_longitudinal * e[2] + g.kd_longitudinal * d[2];
        let planar = saturate([lon, lat], self.v_max);
        PdOutput {
            command: [planar[0], planar[1], vert.clamp(-self.v_max, self.v_max)],
            error: e,
        }
    }
}

/// Scales `v` down so its Euclidean norm is at most `limit`.
pub fn saturate(v: [f64; 2], limit: f64) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    if n > limit {
        [v[0] * limit / n, v[1] * limit / n]
    } else {
        v
    }
}

/// Highest-confidence box of `target_class` at or above `threshold`.
/// Ties go to the lower flat anchor index.
pub fn select_target_box(boxes: &[BoundingBox], target_class: usize, threshold: f64) -> Option<BoundingBox> {
    boxes
        .iter()
        .filter(|b| b.class_id == target_class && b.confidence >= threshold)
        .min_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.anchor.cmp(&b.anchor)))
        .copied()
}
