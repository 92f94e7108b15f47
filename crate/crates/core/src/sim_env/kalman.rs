//! Constant-velocity Kalman filter over a bounding box's `(cx, cy, area)`.

use nalgebra::{SMatrix, SVector};

use super::BoundingBox;
use crate::config::KfNoise;

pub type Vec6 = SVector<f64, 6>;
pub type Mat6 = SMatrix<f64, 6, 6>;
type Mat3x6 = SMatrix<f64, 3, 6>;
type Mat3 = SMatrix<f64, 3, 3>;

/// Filter state: `[cx, cy, area, vcx, vcy, varea]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KfState {
    pub mean: Vec6,
    pub covariance: Mat6,
    pub frames_since_update: u32,
}

impl KfState {
    pub fn cx(&self) -> f64 {
        self.mean[0]
    }

    pub fn cy(&self) -> f64 {
        self.mean[1]
    }

    pub fn area(&self) -> f64 {
        self.mean[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxFilter {
    pub noise: KfNoise,
}

fn measurement_matrix() -> Mat3x6 {
    let mut h = Mat3x6::zeros();
    for i in 0..3 {
        h[(i, i)] = 1.0;
    }
    h
}

fn measurement(b: &BoundingBox) -> SVector<f64, 3> {
    SVector::<f64, 3>::new(b.cx, b.cy, b.area())
}

impl BoxFilter {
    pub fn new(noise: KfNoise) -> Self {
        Self { noise }
    }

    fn measurement_noise(&self) -> Mat3 {
        let c = self.noise.center_px.powi(2);
        Mat3::from_diagonal(&SVector::<f64, 3>::new(c, c, self.noise.area_px2.powi(2)))
    }

    /// Filter initialized on a first detection: zero velocity, velocity variance
    /// large relative to the measurement noise.
    pub fn init(&self, b: &BoundingBox) -> KfState {
        let z = measurement(b);
        let mut mean = Vec6::zeros();
        mean.fixed_rows_mut::<3>(0).copy_from(&z);
        let r = self.measurement_noise();
        let mut cov = Mat6::zeros();
        for i in 0..3 {
            cov[(i, i)] = r[(i, i)];
            cov[(i + 3, i + 3)] = 100.0 * r[(i, i)];
        }
        KfState {
            mean,
            covariance: cov,
            frames_since_update: 0,
        }
    }

    pub fn transition(dt: f64) -> Mat6 {
        let mut f = Mat6::identity();
        for i in 0..3 {
            f[(i, i + 3)] = dt;
        }
        f
    }

    /// Discretized white-acceleration process noise.
    pub fn process_noise(&self, dt: f64) -> Mat6 {
        let q = self.noise.process;
        let mut m = Mat6::zeros();
        for i in 0..3 {
            m[(i, i)] = q * dt.powi(3) / 3.0;
            m[(i, i + 3)] = q * dt.powi(2) / 2.0;
            m[(i + 3, i)] = q * dt.powi(2) / 2.0;
            m[(i + 3, i + 3)] = q * dt;
        }
        m
    }

    pub fn predict(&self, kf: &KfState, dt: f64) -> KfState {
        assert!(dt > 0.0, "predict requires dt > 0");
        let f = Self::transition(dt);
        let cov = f * kf.covariance * f.transpose() + self.process_noise(dt);
        KfState {
            mean: f * kf.mean,
            covariance: (cov + cov.transpose()) * 0.5,
            frames_since_update: kf.frames_since_update + 1,
        }
    }

    pub fn update(&self, kf: &KfState, b: &BoundingBox) -> KfState {
        self.update_with_noise(kf, b, &self.measurement_noise())
    }

    fn update_with_noise(&self, kf: &KfState, b: &BoundingBox, r: &Mat3) -> KfState {
        let h = measurement_matrix();
        let innovation = measurement(b) - h * kf.mean;
        let s = h * kf.covariance * h.transpose() + r;
        let s_inv = s.try_inverse().expect("innovation covariance is positive definite");
        let gain = kf.covariance * h.transpose() * s_inv;
        let mean = kf.mean + gain * innovation;
        // Joseph form keeps the covariance symmetric positive definite.
        let i_kh = Mat6::identity() - gain * h;
        let cov = i_kh * kf.covariance * i_kh.transpose() + gain * r * gain.transpose();
        KfState {
            mean,
            covariance: (cov + cov.transpose()) * 0.5,
            frames_since_update: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

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

    fn filter() -> BoxFilter {
        BoxFilter::new(KfNoise::default())
    }

    #[test]
    fn predict_integrates_velocity() {
        let mut kf = filter().init(&bbox(10.0, 20.0, 100.0));
        kf.mean[3] = 5.0;
        let p = filter().predict(&kf, 0.1);
        assert!((p.cx() - 10.5).abs() < 1e-12);
        assert_eq!(p.frames_since_update, 1);
    }

    #[test]
    fn zero_velocity_mean_is_unchanged_and_trace_grows() {
        let kf = filter().init(&bbox(10.0, 20.0, 100.0));
        let p = filter().predict(&kf, 0.1);
        assert_eq!(p.mean, kf.mean);
        assert!(p.covariance.trace() > kf.covariance.trace());
    }

    #[test]
    fn update_at_predicted_mean_keeps_mean_and_shrinks_covariance() {
        let f = filter();
        let kf = f.predict(&f.init(&bbox(10.0, 20.0, 100.0)), 0.1);
        let u = f.update(&kf, &bbox(kf.cx(), kf.cy(), kf.area()));
        assert!((u.mean - kf.mean).norm() < 1e-9);
        assert!(u.covariance.trace() < kf.covariance.trace());
        assert_eq!(u.frames_since_update, 0);
    }

    #[test]
    fn huge_measurement_noise_makes_update_a_no_op() {
        let f = filter();
        let kf = f.predict(&f.init(&bbox(10.0, 20.0, 100.0)), 0.1);
        let r = Mat3::identity() * 1e18;
        let u = f.update_with_noise(&kf, &bbox(40.0, 5.0, 900.0), &r);
        assert!((u.mean - kf.mean).norm() < 1e-6, "{}", (u.mean - kf.mean).norm());
    }

    #[test]
    fn covariance_stays_symmetric_positive_definite() {
        let f = filter();
        let mut kf = f.init(&bbox(10.0, 20.0, 100.0));
        for t in 0..200 {
            kf = f.predict(&kf, 0.1);
            if t % 3 != 0 {
                kf = f.update(&kf, &bbox(10.0 + t as f64 * 0.2, 20.0, 100.0 + t as f64));
            }
            let c = &kf.covariance;
            assert!((c - c.transpose()).abs().max() < 1e-9);
            assert!(c.symmetric_eigenvalues().iter().all(|&e| e > 0.0));
        }
    }

    #[test]
    fn noiseless_constant_velocity_track_converges() {
        let f = filter();
        let dt = 0.1;
        let truth = |t: f64| (12.0 + 30.0 * t, 40.0 - 15.0 * t, 150.0 + 80.0 * t);
        let (x, y, a) = truth(0.0);
        let mut kf = f.init(&bbox(x, y, a));
        let mut worst_late = 0.0f64;
        for n in 1..=50 {
            let (x, y, a) = truth(n as f64 * dt);
            kf = f.update(&f.predict(&kf, dt), &bbox(x, y, a));
            if n >= 40 {
                worst_late = worst_late.max((kf.cx() - x).hypot(kf.cy() - y));
            }
        }
        assert!(worst_late < 0.1, "position error {worst_late}");
    }

    #[test]
    fn dropout_follows_constant_velocity_extrapolation() {
        let f = filter();
        let dt = 0.1;
        let mut kf = f.init(&bbox(20.0, 30.0, 100.0));
        for n in 1..=20 {
            let t = n as f64 * dt;
            kf = f.update(&f.predict(&kf, dt), &bbox(20.0 + 10.0 * t, 30.0 - 4.0 * t, 100.0 + 20.0 * t));
        }
        let start = kf.mean;
        for k in 1..=12u32 {
            kf = f.predict(&kf, dt);
            let s = k as f64 * dt;
            for i in 0..3 {
                let expected = start[i] + s * start[i + 3];
                assert!((kf.mean[i] - expected).abs() < 1e-9, "k={k} i={i}");
                assert!((kf.mean[i + 3] - start[i + 3]).abs() < 1e-9);
            }
            assert_eq!(kf.frames_since_update, k);
        }
    }
}
