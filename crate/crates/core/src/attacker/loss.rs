use serde::{Deserialize, Serialize};

use super::generator::{images_to_tensor, Generator};
use super::{discretize, AnchorIndex};
use crate::config::Config;
use crate::detector::{softmax, Detector, DetectorSpec};
use crate::nn::{sigmoid, Adam, Bound, Graph, Real, Tensor, Var};
use crate::sim_env::Image;
use crate::{Error, Result};

/// Probabilities are kept inside `[ε, 1−ε]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackWeights {
    /// Perturbation budget in 8-bit units.
    pub alpha: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub logit_penalty: f64,
    pub target_class: usize,
}

impl AttackWeights {
    pub fn from_config(cfg: &Config) -> Self {
        let a = &cfg.attack;
        Self {
            alpha: a.alpha,
            lambda0: a.lambda0,
            lambda1: a.lambda1,
            lambda2: a.lambda2,
            logit_penalty: a.logit_penalty,
            target_class: a.target_class,
        }
    }
}

/// Batch means of the two detector-facing terms and the gradient of
/// `mean(target + λ₀·vanish)` with respect to the raw grids.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorTerms<T> {
    pub target: f64,
    pub vanish: f64,
    pub grad: Vec<T>,
}

/// `target = −log P_ijk` at the commanded anchor and `vanish` = mean of
/// `−log(1 − P)` over every other anchor, both on the target-class map.
pub fn detector_terms<T: Real>(
    spec: &DetectorSpec,
    y: &[T],
    anchors: &[AnchorIndex],
    class: usize,
    lambda0: f64,
) -> DetectorTerms<T> {
    let len = spec.grid_len();
    assert_eq!(y.len(), len * anchors.len(), "grid batch and anchor count disagree");
    let n = anchors.len() as f64;
    let others = (spec.num_anchors() - 1).max(1) as f64;
    let log_eps = PROB_EPS.ln();
    let mut grad = vec![T::zero(); y.len()];
    let (mut target, mut vanish) = (0.0, 0.0);
    for (s, anchor) in anchors.iter().enumerate() {
        let off = s * len;
        let commanded = anchor.flat(spec.grid, spec.grid);
        for b in 0..spec.anchors {
            for k in 0..spec.grid {
                for j in 0..spec.grid {
                    let at = |d: usize| off + spec.index(b, d, j, k);
                    let o = y[at(4)].f64();
                    let logits: Vec<f64> = (0..spec.classes).map(|c| y[at(5 + c)].f64()).collect();
                    let probs = softmax(&logits);
                    let so = sigmoid(o);
                    let log_p = -softplus(-o) + probs[class].max(f64::MIN_POSITIVE).ln();
                    // d log P / d o and d log P / d c_m.
                    let dlp_do = 1.0 - so;
                    let dlp_dc = |m: usize| if m == class { 1.0 - probs[m] } else { -probs[m] };
                    let (coef, value) = if spec.flat_anchor(b, j, k) == commanded {
                        if log_p < log_eps {
                            (0.0, -log_eps)
                        } else {
                            (-1.0 / n, -log_p)
                        }
                    } else {
                        let p = log_p.exp();
                        if p > 1.0 - PROB_EPS {
                            (0.0, -log_eps)
                        } else {
                            // d(−log(1−P)) = P/(1−P) · d log P.
                            (lambda0 * p / (1.0 - p) / (others * n), -(-p).ln_1p())
                        }
                    };
                    if spec.flat_anchor(b, j, k) == commanded {
                        target += value;
                    } else {
                        vanish += value / others;
                    }
                    if coef != 0.0 {
                        grad[at(4)] += T::lit(coef * dlp_do);
                        for m in 0..spec.classes {
                            grad[at(5 + m)] += T::lit(coef * dlp_dc(m));
                        }
                    }
                }
            }
        }
    }
    DetectorTerms {
        target: target / n,
        vanish: vanish / n,
        grad,
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Batch-mean values of the loss terms (unweighted) and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackLoss {
    pub total: f64,
    pub target: f64,
    pub vanish: f64,
    pub recon: f64,
    pub distance: f64,
    /// Mean squared perturbation logit.
    pub logit_sq: f64,
}

impl AttackLoss {
    /// The detector-facing part `target + λ₀·vanish`, the quantity both the
    /// generator and the iterative baseline are compared on.
    pub fn detector_part(&self, lambda0: f64) -> f64 {
        self.target + lambda0 * self.vanish
    }
}

/// Builds `l_img` for a batch on `g`; `gp`/`dp` are the bound generator and
/// detector parameters. Returns the scalar loss node and its term values.
#[allow(clippy::too_many_arguments)]
pub fn attack_loss_graph<T: Real>(
    g: &mut Graph<T>,
    gen: &Generator<T>,
    gp: &Bound,
    det: &Detector<T>,
    dp: &Bound,
    x: Var,
    a: &[[f64; 3]],
    wts: &AttackWeights,
) -> (Var, AttackLoss) {
    let spec = &det.spec;
    let z = gen.encode(g, gp, x);
    let hl = gen.perturbation_logits(g, gp, z, a);
    let w = g.sigmoid(hl);
    let xt = g.clamp_add(x, w, wts.alpha / 255.0);
    let y = det.forward(g, dp, xt);
    let anchors: Vec<AnchorIndex> = a.iter().map(|&c| discretize(c, spec.anchors, spec.grid, spec.grid)).collect();
    let terms = detector_terms(spec, g.value(y).data(), &anchors, wts.target_class, wts.lambda0);
    let det_part = terms.target + wts.lambda0 * terms.vanish;
    let det_loss = g.precomputed(y, T::lit(det_part), terms.grad, "attack_detector_terms");

    let logits = gen.decode_logits(g, gp, z);
    let numel = g.value(x).numel() as f64;
    let x_target = g.value(x).clone();
    // Mean over pixels of each image, then over the batch.
    let recon = g.bce_with_logits(logits, x_target, 1.0 / numel);
    let dist = g.sq_diff_mean(xt, x);
    let r = g.affine(recon, wts.lambda1, 0.0);
    let d = g.affine(dist, wts.lambda2, 0.0);
    let rd = g.add(r, d);
    let zero = g.constant(Tensor::zeros(g.value(hl).shape()));
    let logit_sq = g.sq_diff_mean(hl, zero);
    let s = g.affine(logit_sq, wts.logit_penalty, 0.0);
    let rds = g.add(rd, s);
    let total = g.add(det_loss, rds);
    let parts = AttackLoss {
        total: g.value(total).item().f64(),
        target: terms.target,
        vanish: terms.vanish,
        recon: g.value(recon).item().f64(),
        distance: g.value(dist).item().f64(),
        logit_sq: g.value(logit_sq).item().f64(),
    };
    (total, parts)
}

/// `l_img` of a batch without taking gradients.
pub fn attack_loss<T: Real>(
    gen: &Generator<T>,
    det: &Detector<T>,
    xs: &[&Image],
    a: &[[f64; 3]],
    wts: &AttackWeights,
) -> AttackLoss {
    let mut g = Graph::new();
    let gp = gen.params.bind(&mut g, false);
    let dp = det.params.bind(&mut g, false);
    let x = g.constant(images_to_tensor(xs));
    attack_loss_graph(&mut g, gen, &gp, det, &dp, x, a, wts).1
}

/// Gradient of the batch-mean `l_img` with respect to every θ_img tensor.
pub fn attack_loss_grad<T: Real>(
    gen: &Generator<T>,
    det: &Detector<T>,
    xs: &[&Image],
    a: &[[f64; 3]],
    wts: &AttackWeights,
) -> (AttackLoss, Vec<Vec<T>>) {
    let mut g = Graph::new();
    let gp = gen.params.bind(&mut g, true);
    let dp = det.params.bind(&mut g, false);
    let x = g.constant(images_to_tensor(xs));
    let (l, parts) = attack_loss_graph(&mut g, gen, &gp, det, &dp, x, a, wts);
    let mut grads = g.backward(l);
    (parts, gen.params.grads(&gp, &mut grads))
}

/// One Adam step on θ_img. A non-finite loss or gradient leaves the
/// parameters untouched and is reported as `Ok(None)`.
pub fn img_update(
    gen: &mut Generator<f32>,
    opt: &mut Adam,
    det: &Detector<f32>,
    xs: &[&Image],
    a: &[[f64; 3]],
    wts: &AttackWeights,
) -> Result<Option<AttackLoss>> {
    if xs.is_empty() || xs.len() != a.len() {
        return Err(Error::usage("img_update needs a nonempty batch with one command per image"));
    }
    let (parts, grads) = attack_loss_grad(gen, det, xs, a, wts);
    if !parts.total.is_finite() || !opt.apply(&mut gen.params, &grads) {
        log::warn!("img_update skipped: non-finite loss or gradient");
        return Ok(None);
    }
    Ok(Some(parts))
}
