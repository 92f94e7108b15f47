use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sim_env::{BoundingBox, Camera, Image, SceneObject, CLASS_SIZE, NUM_CLASSES};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    file: String,
    boxes: Vec<BoundingBox>,
}

fn overlaps(a: &BoundingBox, b: &BoundingBox) -> bool {
    (a.cx - b.cx).abs() * 2.0 < a.w + b.w + 2.0 && (a.cy - b.cy).abs() * 2.0 < a.h + b.h + 2.0
}

/// Random scenes of up to three non-overlapping objects on random
/// backgrounds, labelled from the renderer's own geometry.
pub fn gen_synthetic_dataset(n: usize, seed: u64, camera: &Camera) -> Vec<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h, f) = (camera.width as f64, camera.height as f64, camera.focal_px);
    (0..n)
        .map(|_| {
            let count = if rng.random_bool(0.08) { 0 } else { rng.random_range(1..=3) };
            let mut objects: Vec<SceneObject> = Vec::new();
            let mut boxes: Vec<BoundingBox> = Vec::new();
            for _ in 0..count {
                let class = rng.random_range(0..NUM_CLASSES);
                let size = CLASS_SIZE[class];
                // Keep the smaller side at least 3 px.
                let far = (f * size[0].min(size[1]) / 3.0).min(16.0);
                for _attempt in 0..20 {
                    let dx = rng.random_range(2.8..far);
                    let px = rng.random_range(w / 16.0..w - w / 16.0);
                    let py = rng.random_range(h * 10.0 / 64.0..h - h * 10.0 / 64.0);
                    let mut o = SceneObject::new(class, [dx, (px - w / 2.0) * dx / f]);
                    o.elevation = (py - h / 2.0) * dx / f;
                    o.tint = [
                        rng.random_range(-0.08..0.08),
                        rng.random_range(-0.08..0.08),
                        rng.random_range(-0.08..0.08),
                    ];
                    let Some(label) = camera.label([0.0, 0.0], &o) else { continue };
                    if label.w < 2.0 || label.h < 2.0 || boxes.iter().any(|b| overlaps(b, &label)) {
                        continue;
                    }
                    boxes.push(label);
                    objects.push(o);
                    break;
                }
            }
            let image = camera.render([0.0, 0.0], &objects, rng.random());
            LabeledImage { image, boxes }
        })
        .collect()
}

/// Writes `images/NNNNNN.png` plus a line-delimited `labels.jsonl` index.
pub fn save_dataset(dir: &Path, data: &[LabeledImage]) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let index = dir.join("labels.jsonl");
    let file = std::fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    let mut out = BufWriter::new(file);
    for (i, s) in data.iter().enumerate() {
        let name = format!("{i:06}.png");
        s.image.save_png(&images.join(&name))?;
        let line = LabelLine {
            file: format!("images/{name}"),
            boxes: s.boxes.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&line).expect("labels serialize")).map_err(|e| Error::io(&index, e))?;
    }
    out.flush().map_err(|e| Error::io(&index, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    let index = dir.join("labels.jsonl");
    let file = std::fs::File::open(&index).map_err(|e| Error::io(&index, e))?;
    let mut data = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&index, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: LabelLine = serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}: {e}", index.display())))?;
        data.push(LabeledImage {
            image: Image::load_png(&dir.join(&l.file))?,
            boxes: l.boxes,
        });
    }
    Ok(data)
}
