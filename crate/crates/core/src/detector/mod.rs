//! Mini grid detector standing in for the victim's object detector, its
//! probability map `P`, box decoding, synthetic pretraining data and training.

mod dataset;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::nn::codec::{decode_params, encode_params, Reader, Writer};
use crate::nn::{sigmoid, Bound, Conv2d, Graph, ParamSet, Real, Tensor, Var};
use crate::sim_env::{BoundingBox, Image, Perception};
use crate::{Error, Result};

pub use dataset::{gen_synthetic_dataset, load_dataset, save_dataset, LabeledImage};
pub use train::{anchor_accuracy, assign_anchor, detection_loss, train_detector, TrainReport};

/// Raw per-anchor features: `tx, ty, tw, th, objectness`, then class logits.
pub const BOX_FEATURES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub anchors: usize,
    pub grid: usize,
    pub classes: usize,
    pub anchor_priors: Vec<[f64; 2]>,
    pub width: usize,
    pub image_size: usize,
}

impl DetectorSpec {
    pub fn from_config(cfg: &Config) -> Self {
        let d = &cfg.detector;
        Self {
            anchors: d.anchors,
            grid: d.grid,
            classes: d.classes,
            anchor_priors: d.anchor_priors.clone(),
            width: d.width,
            image_size: cfg.image_size,
        }
    }

    /// Features per anchor, `D = 5 + N_classes`.
    pub fn depth(&self) -> usize {
        BOX_FEATURES + self.classes
    }

    pub fn cell(&self) -> f64 {
        self.image_size as f64 / self.grid as f64
    }

    /// Number of anchors `B·Gw·Gh`.
    pub fn num_anchors(&self) -> usize {
        self.anchors * self.grid * self.grid
    }

    pub fn grid_len(&self) -> usize {
        self.num_anchors() * self.depth()
    }

    /// Offset of feature `d` of anchor `(b, j, k)` (0-based; `j` horizontal,
    /// `k` vertical) inside one sample's `[B·D, Gh, Gw]` output.
    pub fn index(&self, b: usize, d: usize, j: usize, k: usize) -> usize {
        ((b * self.depth() + d) * self.grid + k) * self.grid + j
    }

    /// Flat anchor index `(b·Gh + k)·Gw + j`, the ordering used for tie-breaks.
    pub fn flat_anchor(&self, b: usize, j: usize, k: usize) -> usize {
        (b * self.grid + k) * self.grid + j
    }

    pub fn unflatten(&self, a: usize) -> (usize, usize, usize) {
        let g = self.grid;
        (a / (g * g), a % g, (a / g) % g)
    }
}

/// Detector output for one image, stored as `[B·D, Gh, Gw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionGrid {
    pub values: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Detector<T = f32> {
    pub spec: DetectorSpec,
    pub params: ParamSet<T>,
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl<T: Real> Detector<T> {
    /// Five 3×3 convolutions (three of them stride 2) and a 1×1 head.
    pub fn new(spec: DetectorSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let w = spec.width;
        assert_eq!(spec.image_size, spec.grid * 8, "detector assumes a stride-8 grid");
        assert_eq!(spec.anchor_priors.len(), spec.anchors, "one prior per anchor slot");
        let plan = [(3, w, 2), (w, 2 * w, 2), (2 * w, 2 * w, 1), (2 * w, 4 * w, 2), (4 * w, 4 * w, 1)];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| Conv2d::new(&mut ps, &format!("det.conv{i}"), ci, co, 3, s, 1, &mut rng))
            .collect();
        let head = Conv2d::new(&mut ps, "det.head", 4 * w, spec.anchors * spec.depth(), 1, 1, 0, &mut rng);
        let mut det = Self {
            spec,
            params: ps,
            convs,
            head,
        };
        det.init_head_bias();
        det
    }

    /// Start with low objectness so the untrained detector is quiet.
    fn init_head_bias(&mut self) {
        let spec = self.spec.clone();
        let bias = self.params.get_mut(self.head.b).data_mut();
        for b in 0..spec.anchors {
            bias[b * spec.depth() + 4] = T::lit(-4.0);
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, p, h);
            h = g.leaky_relu(h, 0.1);
        }
        self.head.forward(g, p, h)
    }

    pub fn detect_batch(&self, xs: &[&Image]) -> Vec<DetectionGrid> {
        if xs.is_empty() {
            return Vec::new();
        }
        let s = self.spec.image_size;
        let mut data = Vec::with_capacity(xs.len() * 3 * s * s);
        for x in xs {
            assert_eq!(x.shape(), [3, s, s], "detector input shape mismatch");
            data.extend(x.data.iter().map(|&v| T::lit(v as f64)));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::new(&[xs.len(), 3, s, s], data));
        let y = self.forward(&mut g, &p, x);
        g.value(y)
            .to_f32_vec()
            .chunks(self.spec.grid_len())
            .map(|c| DetectionGrid { values: c.to_vec() })
            .collect()
    }

    pub fn detect(&self, x: &Image) -> DetectionGrid {
        self.detect_batch(&[x]).pop().expect("one grid")
    }

    pub fn cast<U: Real>(&self) -> Detector<U> {
        Detector {
            spec: self.spec.clone(),
            params: self.params.cast(),
            convs: self.convs.clone(),
            head: self.head.clone(),
        }
    }

    /// Replaces the weights, checking the layout matches this architecture.
    pub fn with_params(mut self, params: ParamSet<T>) -> Result<Self> {
        let same = params.names() == self.params.names()
            && params.tensors().iter().zip(self.params.tensors()).all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::Format("detector weights do not match the configured architecture".into()));
        }
        self.params = params;
        Ok(self)
    }
}

/// Per-anchor probability of the target class, `σ(obj)·softmax(cls)[c]`,
/// laid out `[B, Gh, Gw]`.
pub fn target_prob_map<T: Real>(spec: &DetectorSpec, y: &[T], class_id: usize) -> Result<Vec<T>> {
    if class_id >= spec.classes {
        return Err(Error::usage(format!("class {class_id} out of range for {} classes", spec.classes)));
    }
    let g = spec.grid;
    let mut out = vec![T::zero(); spec.num_anchors()];
    for b in 0..spec.anchors {
        for k in 0..g {
            for j in 0..g {
                let obj = sigmoid(y[spec.index(b, 4, j, k)]);
                let logits: Vec<T> = (0..spec.classes).map(|c| y[spec.index(b, 5 + c, j, k)]).collect();
                out[spec.flat_anchor(b, j, k)] = obj * softmax(&logits)[class_id];
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Decodes every anchor to a pixel-space box labelled with its most likely
/// class, keeps those with confidence ≥ `conf_threshold` and sorts them by
/// descending confidence, ties broken by lower flat anchor index.
pub fn postprocess(spec: &DetectorSpec, y: &DetectionGrid, conf_threshold: f64) -> Vec<BoundingBox> {
    let g = spec.grid;
    let cell = spec.cell();
    let v = |b, d, j, k| y.values[spec.index(b, d, j, k)] as f64;
    let mut boxes = Vec::new();
    for b in 0..spec.anchors {
        for k in 0..g {
            for j in 0..g {
                let obj = sigmoid(v(b, 4, j, k));
                let logits: Vec<f64> = (0..spec.classes).map(|c| v(b, 5 + c, j, k)).collect();
                let probs = softmax(&logits);
                let (class_id, p) = probs
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc });
                let confidence = obj * p;
                if !(confidence >= conf_threshold) {
                    continue;
                }
                let prior = spec.anchor_priors[b];
                boxes.push(BoundingBox {
                    cx: (j as f64 + sigmoid(v(b, 0, j, k))) * cell,
                    cy: (k as f64 + sigmoid(v(b, 1, j, k))) * cell,
                    w: prior[0] * v(b, 2, j, k).clamp(-8.0, 4.0).exp(),
                    h: prior[1] * v(b, 3, j, k).clamp(-8.0, 4.0).exp(),
                    confidence,
                    class_id,
                    anchor: spec.flat_anchor(b, j, k),
                });
            }
        }
    }
    boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.anchor.cmp(&b.anchor)));
    boxes
}

impl Perception for Detector<f32> {
    fn detect_boxes(&self, x: &Image, conf_threshold: f64) -> Vec<BoundingBox> {
        postprocess(&self.spec, &self.detect(x), conf_threshold)
    }
}

/// Contents of the JSON manifest written next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorManifest {
    pub spec: DetectorSpec,
    pub weights_sha256: String,
    pub params_digest: String,
    pub holdout_accuracy: Option<f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

impl Detector<f32> {
    /// Writes `<stem>.bin` (weights) and `<stem>.json` (manifest); returns the manifest.
    pub fn save(&self, dir: &Path, stem: &str, holdout_accuracy: Option<f64>) -> Result<DetectorManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = Writer::new();
        encode_params(&self.params, &mut w);
        let bin = dir.join(format!("{stem}.bin"));
        std::fs::write(&bin, &w.buf).map_err(|e| Error::io(&bin, e))?;
        let manifest = DetectorManifest {
            spec: self.spec.clone(),
            weights_sha256: sha256_hex(&w.buf),
            params_digest: self.params.digest(),
            holdout_accuracy,
        };
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<(Self, DetectorManifest)> {
        let json = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: DetectorManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
        let bin = dir.join(format!("{stem}.bin"));
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if sha256_hex(&bytes) != manifest.weights_sha256 {
            return Err(Error::Format(format!("{}: checksum mismatch", bin.display())));
        }
        let params =
            decode_params(&mut Reader::new(&bytes)).map_err(|e| Error::Format(format!("{}: {}", bin.display(), e.0)))?;
        let det = Detector::new(manifest.spec.clone(), 0).with_params(params)?;
        Ok((det, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DetectorSpec {
        DetectorSpec::from_config(&Config::default())
    }

    #[test]
    fn output_shape_and_determinism() {
        let det = Detector::<f32>::new(spec(), 1);
        let img = crate::sim_env::background(64, 64, 3);
        let a = det.detect(&img);
        assert_eq!(a.values.len(), 3 * 8 * 8 * 8);
        assert_eq!(a, det.detect(&img));
    }

    #[test]
    fn prob_map_closed_form_and_range() {
        let s = spec();
        let y = vec![0.0f64; s.grid_len()];
        let p = target_prob_map(&s, &y, 0).unwrap();
        assert!(p.iter().all(|v| (v - 0.5 / 3.0).abs() < 1e-12));
        let mut y = y;
        y[s.index(0, 4, 0, 0)] = -800.0;
        assert!(target_prob_map(&s, &y, 0).unwrap()[0] < 1e-300);
        assert!(target_prob_map(&s, &y, 3).is_err());
    }

    #[test]
    fn postprocess_sorts_and_keeps_centers_in_cell() {
        let s = spec();
        let mut v = vec![-20.0f32; s.grid_len()];
        assert!(postprocess(&s, &DetectionGrid { values: v.clone() }, 0.3).is_empty());
        v[s.index(1, 4, 5, 2)] = 6.0;
        v[s.index(1, 5, 5, 2)] = 5.0;
        v[s.index(0, 4, 1, 1)] = 2.0;
        v[s.index(0, 6, 1, 1)] = 5.0;
        let boxes = postprocess(&s, &DetectionGrid { values: v }, 0.3);
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0].anchor, s.flat_anchor(1, 5, 2));
        assert_eq!(boxes[0].class_id, 0);
        assert_eq!(boxes[1].class_id, 1);
        assert!(boxes[0].cx > 40.0 && boxes[0].cx < 48.0 && boxes[0].cy > 16.0 && boxes[0].cy < 24.0);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let det = Detector::<f32>::new(spec(), 4);
        let m = det.save(dir.path(), "detector", Some(0.95)).unwrap();
        let (back, m2) = Detector::load(dir.path(), "detector").unwrap();
        assert_eq!(m, m2);
        assert_eq!(back.params, det.params);
    }
}
