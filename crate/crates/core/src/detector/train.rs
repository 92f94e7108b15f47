use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{softmax, DetectionGrid, Detector, DetectorSpec, LabeledImage};
use crate::nn::{sigmoid, Adam, Graph, Real, Tensor};
use crate::sim_env::BoundingBox;
use crate::{Error, Result};

const COORD_WEIGHT: f64 = 5.0;
const NOOBJ_WEIGHT: f64 = 0.5;

/// Responsible `(b, j, k)` for a ground-truth box: the cell containing its
/// center and the prior with the best shape overlap.
pub fn assign_anchor(spec: &DetectorSpec, gt: &BoundingBox) -> (usize, usize, usize) {
    let cell = spec.cell();
    let j = ((gt.cx / cell).floor().max(0.0) as usize).min(spec.grid - 1);
    let k = ((gt.cy / cell).floor().max(0.0) as usize).min(spec.grid - 1);
    let iou = |p: &[f64; 2]| {
        let inter = p[0].min(gt.w) * p[1].min(gt.h);
        inter / (p[0] * p[1] + gt.w * gt.h - inter)
    };
    let b = (0..spec.anchors)
        .max_by(|&x, &y| iou(&spec.anchor_priors[x]).total_cmp(&iou(&spec.anchor_priors[y])).then(y.cmp(&x)))
        .expect("at least one anchor");
    (b, j, k)
}

/// Summed supervised loss (localization + objectness + class) of a batch of
/// raw grids, divided by the batch size, with its gradient.
pub fn detection_loss<T: Real>(spec: &DetectorSpec, y: &[T], labels: &[&[BoundingBox]]) -> (f64, Vec<T>) {
    let len = spec.grid_len();
    assert_eq!(y.len(), len * labels.len());
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); y.len()];
    let cell = spec.cell();
    for (s, gts) in labels.iter().enumerate() {
        let off = s * len;
        let yv = |i: usize| y[off + i].f64();
        let mut responsible = vec![None; spec.num_anchors()];
        for gt in gts.iter() {
            let (b, j, k) = assign_anchor(spec, gt);
            responsible[spec.flat_anchor(b, j, k)] = Some(*gt);
        }
        for b in 0..spec.anchors {
            for k in 0..spec.grid {
                for j in 0..spec.grid {
                    let idx = |d: usize| spec.index(b, d, j, k);
                    let o = yv(idx(4));
                    let so = sigmoid(o);
                    match responsible[spec.flat_anchor(b, j, k)] {
                        None => {
                            loss += NOOBJ_WEIGHT * softplus(o);
                            grad[off + idx(4)] += T::lit(NOOBJ_WEIGHT * so);
                        }
                        Some(gt) => {
                            loss += softplus(o) - o;
                            grad[off + idx(4)] += T::lit(so - 1.0);
                            let prior = spec.anchor_priors[b];
                            let targets = [
                                gt.cx / cell - j as f64,
                                gt.cy / cell - k as f64,
                                (gt.w / prior[0]).ln(),
                                (gt.h / prior[1]).ln(),
                            ];
                            for (d, &t) in targets.iter().enumerate() {
                                let z = yv(idx(d));
                                let (p, dp) = if d < 2 {
                                    let s = sigmoid(z);
                                    (s, s * (1.0 - s))
                                } else {
                                    (z, 1.0)
                                };
                                loss += COORD_WEIGHT * (p - t).powi(2);
                                grad[off + idx(d)] += T::lit(COORD_WEIGHT * 2.0 * (p - t) * dp);
                            }
                            let logits: Vec<f64> = (0..spec.classes).map(|c| yv(idx(5 + c))).collect();
                            let probs = softmax(&logits);
                            loss -= probs[gt.class_id].max(1e-300).ln();
                            for (c, &p) in probs.iter().enumerate() {
                                let delta = if c == gt.class_id { 1.0 } else { 0.0 };
                                grad[off + idx(5 + c)] += T::lit(p - delta);
                            }
                        }
                    }
                }
            }
        }
    }
    let inv = T::lit(1.0 / n);
    for g in &mut grad {
        *g *= inv;
    }
    (loss / n, grad)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Fraction of ground-truth objects whose responsible anchor reports
/// objectness above 0.5 with the correct most-likely class.
pub fn anchor_accuracy(det: &Detector<f32>, data: &[LabeledImage]) -> f64 {
    let spec = &det.spec;
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in data.chunks(32) {
        let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let grids: Vec<DetectionGrid> = det.detect_batch(&imgs);
        for (s, y) in chunk.iter().zip(&grids) {
            for gt in &s.boxes {
                total += 1;
                let (b, j, k) = assign_anchor(spec, gt);
                let v = |d| y.values[spec.index(b, d, j, k)] as f64;
                let logits: Vec<f64> = (0..spec.classes).map(|c| v(5 + c)).collect();
                let best = (0..spec.classes).max_by(|&x, &z| logits[x].total_cmp(&logits[z])).expect("classes");
                if sigmoid(v(4)) > 0.5 && best == gt.class_id {
                    hit += 1;
                }
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean loss of every epoch, in order.
    pub epoch_loss: Vec<f64>,
    pub first_batch_loss: Option<f64>,
}

/// Plain minibatch Adam on the supervised detection loss.
pub fn train_detector(
    det: &mut Detector<f32>,
    data: &[LabeledImage],
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::usage("detector training needs a nonempty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(&det.params, lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let s = det.spec.image_size;
    let mut report = TrainReport {
        epoch_loss: Vec::new(),
        first_batch_loss: None,
    };
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(batch.max(1)) {
            let mut x = Vec::with_capacity(idx.len() * 3 * s * s);
            for &i in idx {
                x.extend_from_slice(&data[i].image.data);
            }
            let labels: Vec<&[BoundingBox]> = idx.iter().map(|&i| data[i].boxes.as_slice()).collect();
            let mut g = Graph::<f32>::new();
            let p = det.params.bind(&mut g, true);
            let xv = g.constant(Tensor::new(&[idx.len(), 3, s, s], x));
            let y = det.forward(&mut g, &p, xv);
            let (loss, grad) = detection_loss(&det.spec, g.value(y).data(), &labels);
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("detector loss became {loss} in epoch {epoch}")));
            }
            let l = g.precomputed(y, loss as f32, grad, "detection_loss");
            let mut grads = g.backward(l);
            let pg = det.params.grads(&p, &mut grads);
            if !opt.apply(&mut det.params, &pg) {
                return Err(Error::Divergence(format!("non-finite detector gradient in epoch {epoch}")));
            }
            report.first_batch_loss.get_or_insert(loss);
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::info!("detector epoch {epoch}: loss {mean:.4}");
        report.epoch_loss.push(mean);
    }
    Ok(report)
}
