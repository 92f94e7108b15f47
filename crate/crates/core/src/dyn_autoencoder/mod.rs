//! Image-stream state estimator: Encoder₁ → GRU → Decoder₁, trained to
//! predict the next frame with teacher forcing.

mod buffer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacker::images_to_tensor;
use crate::config::Config;
use crate::nn::{Adam, Bound, Conv2d, Graph, GruCell, Linear, ParamSet, Real, Tensor, Var};
use crate::sim_env::Image;
use crate::{Error, Result};

pub(crate) use buffer::{decode_trajectories, encode_trajectories};
pub use buffer::{load_archive, save_archive, Trajectory, TrajectoryBuffer, Window};

pub const ACTION_DIM: usize = 3;
const BLOCK: usize = 8;
const DEC_CHANNELS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SysSpec {
    pub image_size: usize,
    pub feature: usize,
    pub hidden: usize,
}

impl SysSpec {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            image_size: cfg.image_size,
            feature: cfg.dynamics.feature,
            hidden: cfg.dynamics.hidden,
        }
    }
}

/// θ_sys: Encoder₁, GRU and Decoder₁.
#[derive(Clone, Debug)]
pub struct DynAutoencoder<T = f32> {
    pub spec: SysSpec,
    pub params: ParamSet<T>,
    enc: Vec<Conv2d>,
    enc_fc: Linear,
    gru: GruCell,
    dec_fc: Linear,
    dec_out: Conv2d,
}

/// `h₀ ~ N(0, I)` of dimension `d_h`.
pub fn init_hidden(hidden: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_hidden(hidden, &mut rng)
}

pub fn sample_hidden(hidden: usize, rng: &mut impl rand::Rng) -> Vec<f32> {
    (0..hidden)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect()
}

impl<T: Real> DynAutoencoder<T> {
    pub fn new(spec: SysSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let s = spec.image_size;
        assert_eq!(s % BLOCK, 0, "image size must be a multiple of 8");
        let enc = vec![
            Conv2d::new(&mut ps, "enc1.0", 3, 16, 4, 4, 0, &mut rng),
            Conv2d::new(&mut ps, "enc1.1", 16, 32, 3, 2, 1, &mut rng),
        ];
        let flat = 32 * (s / 8) * (s / 8);
        let enc_fc = Linear::new(&mut ps, "enc1.fc", flat, spec.feature, &mut rng);
        let gru = GruCell::new(&mut ps, "gru", spec.feature + ACTION_DIM, spec.hidden, &mut rng);
        let g = s / BLOCK;
        let dec_fc = Linear::new(&mut ps, "dec1.fc", spec.hidden, DEC_CHANNELS * g * g, &mut rng);
        let dec_out = Conv2d::new(&mut ps, "dec1.out", DEC_CHANNELS, 3 * BLOCK * BLOCK, 1, 1, 0, &mut rng);
        Self {
            spec,
            params: ps,
            enc,
            enc_fc,
            gru,
            dec_fc,
            dec_out,
        }
    }

    /// Encoder₁: `[N,3,S,S]` → `[N, feature]`.
    pub fn encode(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for c in &self.enc {
            h = c.forward(g, p, h);
            h = g.leaky_relu(h, 0.1);
        }
        let n = g.shape(h)[0];
        let flat = g.reshape(h, &[n, self.enc_fc.inp]);
        let f = self.enc_fc.forward(g, p, flat);
        g.tanh(f)
    }

    /// One recurrent update from an encoded frame and the action taken on it.
    pub fn step(&self, g: &mut Graph<T>, p: &Bound, h: Var, feature: Var, a: Var) -> Var {
        let inp = g.concat(&[feature, a], 1);
        self.gru.forward(g, p, h, inp)
    }

    /// Decoder₁ logits `[N,3,S,S]` of the predicted next frame.
    pub fn decode_logits(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Var {
        let n = g.shape(h)[0];
        let gs = self.spec.image_size / BLOCK;
        let z = self.dec_fc.forward(g, p, h);
        let z = g.leaky_relu(z, 0.1);
        let z = g.reshape(z, &[n, DEC_CHANNELS, gs, gs]);
        let o = self.dec_out.forward(g, p, z);
        g.depth_to_space(o, BLOCK)
    }

    /// `h_{t+1} = GRU(h_t, Encoder₁(x_t), a_t)`.
    pub fn gru_step(&self, h: &[f32], x: &Image, a: [f64; 3]) -> Vec<f32> {
        assert_eq!(h.len(), self.spec.hidden, "hidden state dimension mismatch");
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(images_to_tensor(&[x]));
        let f = self.encode(&mut g, &p, xv);
        let hv = g.constant(Tensor::from_f32(&[1, h.len()], h));
        let av = g.constant(Tensor::new(&[1, 3], a.iter().map(|&v| T::lit(v)).collect()));
        let out = self.step(&mut g, &p, hv, f, av);
        g.value(out).to_f32_vec()
    }

    /// `Decoder₁(h)` squashed to `(0,1)`.
    pub fn predict_image(&self, h: &[f32]) -> Image {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let hv = g.constant(Tensor::from_f32(&[1, h.len()], h));
        let l = self.decode_logits(&mut g, &p, hv);
        let y = g.sigmoid(l);
        let s = self.spec.image_size;
        Image::from_data(s, s, 3, g.value(y).to_f32_vec())
    }

    /// Teacher-forced identification loss over windows: summed pixelwise BCE
    /// of every predicted frame, averaged over windows.
    pub fn sys_loss_graph(&self, g: &mut Graph<T>, p: &Bound, windows: &[Window]) -> Var {
        let m = windows.len();
        let steps = windows[0].actions.len();
        assert!(windows.iter().all(|w| w.actions.len() == steps && w.frames.len() == steps + 1));
        let s = self.spec.image_size;
        let frame = 3 * s * s;
        // Inputs x_0..x_{T-1} of every window, time-major so step t is a contiguous block.
        let mut xin = Vec::with_capacity(steps * m * frame);
        let mut target = Vec::with_capacity(steps * m * frame);
        for t in 0..steps {
            for w in windows {
                xin.extend(w.frames[t].data.iter().map(|&v| T::lit(v as f64)));
                target.extend(w.frames[t + 1].data.iter().map(|&v| T::lit(v as f64)));
            }
        }
        let x = g.constant(Tensor::new(&[steps * m, 3, s, s], xin));
        let feats = self.encode(g, p, x);
        let h0: Vec<T> = windows.iter().flat_map(|w| w.h0.iter().map(|&v| T::lit(v as f64))).collect();
        let mut h = g.constant(Tensor::new(&[m, self.spec.hidden], h0));
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            let f = g.narrow(feats, 0, t * m, m);
            let a: Vec<T> = windows.iter().flat_map(|w| w.actions[t].iter().map(|&v| T::lit(v))).collect();
            let av = g.constant(Tensor::new(&[m, 3], a));
            h = self.step(g, p, h, f, av);
            hs.push(h);
        }
        let all = g.concat(&hs, 0);
        let logits = self.decode_logits(g, p, all);
        g.bce_with_logits(logits, Tensor::new(&[steps * m, 3, s, s], target), 1.0 / m as f64)
    }

    pub fn sys_loss(&self, windows: &[Window]) -> f64 {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let l = self.sys_loss_graph(&mut g, &p, windows);
        g.value(l).item().f64()
    }

    pub fn sys_loss_grad(&self, windows: &[Window]) -> (f64, Vec<Vec<T>>) {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let l = self.sys_loss_graph(&mut g, &p, windows);
        let mut grads = g.backward(l);
        (g.value(l).item().f64(), self.params.grads(&p, &mut grads))
    }

    pub fn cast<U: Real>(&self) -> DynAutoencoder<U> {
        DynAutoencoder {
            spec: self.spec.clone(),
            params: self.params.cast(),
            enc: self.enc.clone(),
            enc_fc: self.enc_fc.clone(),
            gru: self.gru.clone(),
            dec_fc: self.dec_fc.clone(),
            dec_out: self.dec_out.clone(),
        }
    }
}

/// One Adam step on θ_sys; `Ok(None)` when the step was skipped as non-finite.
pub fn sys_update(model: &mut DynAutoencoder<f32>, opt: &mut Adam, windows: &[Window]) -> Result<Option<f64>> {
    if windows.is_empty() {
        return Err(Error::usage("sys_update needs at least one window"));
    }
    let (loss, grads) = model.sys_loss_grad(windows);
    if !loss.is_finite() || !opt.apply(&mut model.params, &grads) {
        log::warn!("sys_update skipped: non-finite loss or gradient");
        return Ok(None);
    }
    Ok(Some(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spot_check_gradient;
    use rand::Rng;

    fn small() -> SysSpec {
        SysSpec {
            image_size: 16,
            feature: 4,
            hidden: 6,
        }
    }

    fn windows(m: usize, t: usize, seed: u64) -> Vec<Window> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| Window {
                frames: (0..=t)
                    .map(|_| Image::from_data(16, 16, 3, (0..768).map(|_| rng.random::<f32>()).collect()))
                    .collect(),
                actions: (0..t).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
                h0: sample_hidden(6, &mut rng),
            })
            .collect()
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let model = DynAutoencoder::<f64>::new(small(), 3);
        let ws = windows(2, 3, 1);
        let (_, grads) = model.sys_loss_grad(&ws);
        let mut probe = model.clone();
        let err = spot_check_gradient(&model.params, &grads, 20, 9, |p| {
            probe.params = p.clone();
            probe.sys_loss(&ws)
        });
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn gru_step_matches_the_training_recurrence() {
        let model = DynAutoencoder::<f32>::new(small(), 4);
        let ws = windows(1, 1, 2);
        let h1 = model.gru_step(&ws[0].h0, &ws[0].frames[0], ws[0].actions[0]);
        let pred = model.predict_image(&h1);
        let target = &ws[0].frames[1];
        let manual: f64 = pred
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &y)| {
                let (p, y) = (p as f64, y as f64);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let loss = model.sys_loss(&ws);
        assert!((manual - loss).abs() / loss < 1e-4, "{manual} vs {loss}");
    }

    #[test]
    fn sys_update_reduces_loss_on_a_fixed_batch() {
        let mut model = DynAutoencoder::<f32>::new(small(), 5);
        let ws = windows(2, 4, 3);
        let mut opt = Adam::new(&model.params, 1e-2);
        let first = sys_update(&mut model, &mut opt, &ws).unwrap().unwrap();
        for _ in 0..30 {
            sys_update(&mut model, &mut opt, &ws).unwrap();
        }
        assert!(model.sys_loss(&ws) < first);
        assert!(sys_update(&mut model, &mut opt, &[]).is_err());
    }

    #[test]
    fn hidden_init_is_seeded() {
        assert_eq!(init_hidden(8, 1), init_hidden(8, 1));
        assert_ne!(init_hidden(8, 1), init_hidden(8, 2));
    }
}
