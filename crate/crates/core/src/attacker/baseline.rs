use super::generator::images_to_tensor;
use super::loss::{detector_terms, AttackWeights};
use super::{apply_perturbation, discretize};
use crate::detector::Detector;
use crate::nn::{Graph, Tensor};
use crate::sim_env::Image;

/// Per-frame iterative attack: sign-gradient descent on the detector terms
/// of `l_img` directly over `w ∈ [0,1]`, starting from `w = 0`, with a step
/// of `step` 8-bit units on the attacked image per iteration. Returns the
/// attacked image and its detector-term loss.
pub fn iterative_attack_baseline(
    det: &Detector<f32>,
    x: &Image,
    a: [f64; 3],
    n_iters: usize,
    step: f64,
    wts: &AttackWeights,
) -> (Image, f64) {
    let spec = &det.spec;
    let anchor = [discretize(a, spec.anchors, spec.grid, spec.grid)];
    let scale = wts.alpha / 255.0;
    let w_step = (step / wts.alpha) as f32;
    let shape = [1, x.channels, x.height, x.width];
    let xt = images_to_tensor::<f32>(&[x]);
    let mut w = vec![0.0f32; x.len()];
    let evaluate = |w: &[f32], want_grad: bool| {
        let mut g = Graph::<f32>::new();
        let dp = det.params.bind(&mut g, false);
        let xv = g.constant(xt.clone());
        let wv = g.leaf(Tensor::new(&shape, w.to_vec()), want_grad);
        let adv = g.clamp_add(xv, wv, scale);
        let y = det.forward(&mut g, &dp, adv);
        let terms = detector_terms(spec, g.value(y).data(), &anchor, wts.target_class, wts.lambda0);
        let loss = terms.target + wts.lambda0 * terms.vanish;
        let grad = if want_grad {
            let l = g.precomputed(y, loss as f32, terms.grad, "attack_detector_terms");
            g.backward(l).get(wv).map(<[f32]>::to_vec)
        } else {
            None
        };
        (loss, grad)
    };
    for _ in 0..n_iters {
        let (_, grad) = evaluate(&w, true);
        let grad = grad.expect("perturbation requires a gradient");
        for (wi, gi) in w.iter_mut().zip(&grad) {
            if *gi != 0.0 {
                *wi = (*wi - w_step * gi.signum()).clamp(0.0, 1.0);
            }
        }
    }
    let (loss, _) = evaluate(&w, false);
    let w = Image::from_data(x.width, x.height, x.channels, w);
    (apply_perturbation(x, &w, wts.alpha), loss)
}
