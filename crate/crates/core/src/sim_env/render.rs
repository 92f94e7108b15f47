//! Pinhole camera and flat-shaded renderer.
//!
//! The camera sits at the vehicle position looking along +x; +y is to the
//! right. An object at forward distance `dx` and lateral offset `dy` projects
//! to horizontal pixel `W/2 + f·dy/dx`, with an apparent size of `f·size/dx`.

use serde::{Deserialize, Serialize};

/// Scene object classes. Only the ordering (class ids) is shared with the detector.
pub const CLASS_CAR: usize = 0;
pub const CLASS_PERSON: usize = 1;
pub const CLASS_SIGN: usize = 2;
pub const NUM_CLASSES: usize = 3;

/// Nominal physical size `(width, height)` in meters per class.
pub const CLASS_SIZE: [[f64; 2]; NUM_CLASSES] = [[2.0, 1.5], [0.6, 1.8], [1.0, 1.0]];

const CLASS_COLOR: [[f32; 3]; NUM_CLASSES] = [[0.80, 0.18, 0.12], [0.15, 0.30, 0.80], [0.15, 0.70, 0.20]];
const CLASS_ACCENT: [[f32; 3]; NUM_CLASSES] = [[0.22, 0.24, 0.32], [0.90, 0.75, 0.60], [0.92, 0.92, 0.88]];

/// Objects closer than this (meters) are behind the image plane and not drawn.
pub const NEAR_PLANE: f64 = 0.3;

/// `C×H×W` image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * channels, "image data size");
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// 8-bit encoding; exact for images produced by the renderer.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Self {
        Self::from_data(width, height, channels, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn save_png(&self, path: &std::path::Path) -> crate::Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        let bytes = self.to_u8();
        let plane = self.width * self.height;
        for (i, px) in buf.pixels_mut().enumerate() {
            *px = image::Rgb([bytes[i], bytes[plane + i], bytes[2 * plane + i]]);
        }
        buf.save(path)
            .map_err(|e| crate::Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &std::path::Path) -> crate::Result<Self> {
        let img = image::open(path)
            .map_err(|e| crate::Error::Format(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let mut bytes = vec![0u8; 3 * plane];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                bytes[c * plane + i] = px.0[c];
            }
        }
        Ok(Self::from_u8(w, h, 3, &bytes))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
    pub class_id: usize,
    /// Flat anchor index of the detector slot that produced the box
    /// (0 for ground-truth labels).
    pub anchor: usize,
}

impl BoundingBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub class_id: usize,
    /// Physical `(width, height)` in meters.
    pub size: [f64; 2],
    /// Vertical offset of the object's center below the optical axis, meters.
    pub elevation: f64,
    pub tint: [f32; 3],
}

impl SceneObject {
    pub fn new(class_id: usize, pos: [f64; 2]) -> Self {
        Self {
            pos,
            vel: [0.0, 0.0],
            class_id,
            size: CLASS_SIZE[class_id],
            elevation: 0.0,
            tint: [0.0; 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal_px: f64,
}

/// Unclipped pixel-space box of a projected object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub depth: f64,
}

impl Camera {
    pub fn project(&self, eye: [f64; 2], obj: &SceneObject) -> Option<Projection> {
        let dx = obj.pos[0] - eye[0];
        let dy = obj.pos[1] - eye[1];
        if dx < NEAR_PLANE {
            return None;
        }
        let f = self.focal_px;
        Some(Projection {
            cx: self.width as f64 / 2.0 + f * dy / dx,
            cy: self.height as f64 / 2.0 + f * obj.elevation / dx,
            w: f * obj.size[0] / dx,
            h: f * obj.size[1] / dx,
            depth: dx,
        })
    }

    /// Pixel-center coverage `[x0, x1) × [y0, y1)` of a projection, clipped to the frame.
    fn coverage(&self, p: &Projection) -> Option<[usize; 4]> {
        let span = |c: f64, e: f64, n: usize| -> Option<(usize, usize)> {
            // Pixel i is covered when its center i + 0.5 lies in [c − e/2, c + e/2).
            let lo = (c - e / 2.0 - 0.5).ceil().max(0.0);
            let hi = (c + e / 2.0 - 0.5).ceil().min(n as f64);
            (hi > lo).then_some((lo as usize, hi as usize))
        };
        let (x0, x1) = span(p.cx, p.w, self.width)?;
        let (y0, y1) = span(p.cy, p.h, self.height)?;
        Some([x0, x1, y0, y1])
    }

    /// Ground-truth label for an object, clipped to the image; `None` when
    /// the object is behind the camera or entirely out of frame.
    pub fn label(&self, eye: [f64; 2], obj: &SceneObject) -> Option<BoundingBox> {
        let p = self.project(eye, obj)?;
        let [x0, x1, y0, y1] = self.coverage(&p)?;
        let (x0, x1, y0, y1) = (x0 as f64, x1 as f64, y0 as f64, y1 as f64);
        Some(BoundingBox {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
            confidence: 1.0,
            class_id: obj.class_id,
            anchor: 0,
        })
    }

    pub fn render(&self, eye: [f64; 2], objects: &[SceneObject], background_seed: u64) -> Image {
        let mut img = background(self.width, self.height, background_seed);
        let mut order: Vec<(f64, &SceneObject)> = objects
            .iter()
            .filter_map(|o| self.project(eye, o).map(|p| (p.depth, o)))
            .collect();
        // Far to near so nearer objects occlude.
        order.sort_by(|a, b| b.0.total_cmp(&a.0));
        for (_, obj) in order {
            let p = self.project(eye, obj).expect("filtered above");
            if let Some(cov) = self.coverage(&p) {
                draw_object(&mut img, obj, &p, cov);
            }
        }
        quantize(&mut img);
        img
    }
}

fn draw_object(img: &mut Image, obj: &SceneObject, p: &Projection, [x0, x1, y0, y1]: [usize; 4]) {
    let base = CLASS_COLOR[obj.class_id];
    let accent = CLASS_ACCENT[obj.class_id];
    let top = p.cy - p.h / 2.0;
    for y in y0..y1 {
        // Fraction down the object's (unclipped) height.
        let v = ((y as f64 + 0.5) - top) / p.h;
        let band = match obj.class_id {
            CLASS_CAR => v < 0.35,
            CLASS_PERSON => v < 0.2,
            _ => (0.4..0.6).contains(&v),
        };
        let color = if band { accent } else { base };
        for x in x0..x1 {
            for c in 0..3 {
                img.set(c, y, x, (color[c] + obj.tint[c]).clamp(0.0, 1.0));
            }
        }
    }
}

fn quantize(img: &mut Image) {
    for v in &mut img.data {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

fn hash(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit(h: u64) -> f32 {
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// Sky above the horizon, ground below, both with smooth value noise plus grain.
pub fn background(width: usize, height: usize, seed: u64) -> Image {
    const SKY: [f32; 3] = [0.55, 0.62, 0.70];
    const GROUND: [f32; 3] = [0.42, 0.40, 0.36];
    const CELL: usize = 8;
    let gw = width / CELL + 2;
    let gh = height / CELL + 2;
    let lattice: Vec<f32> = (0..gw * gh).map(|i| unit(hash(seed, i as u64, 1)) - 0.5).collect();
    let mut img = Image::new(width, height, 3);
    for y in 0..height {
        let fy = y as f32 / CELL as f32;
        let (iy, ty) = (fy as usize, fy.fract());
        for x in 0..width {
            let fx = x as f32 / CELL as f32;
            let (ix, tx) = (fx as usize, fx.fract());
            let l = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let smooth = (l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx) * (1.0 - ty)
                + (l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx) * ty;
            let grain = unit(hash(seed, (y * width + x) as u64, 2)) - 0.5;
            let base = if y < height / 2 { SKY } else { GROUND };
            for (c, &b) in base.iter().enumerate() {
                img.set(c, y, x, (b + 0.12 * smooth + 0.04 * grain).clamp(0.0, 1.0));
            }
        }
    }
    img
}
