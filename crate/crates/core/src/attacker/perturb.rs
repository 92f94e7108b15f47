use serde::{Deserialize, Serialize};

use crate::sim_env::Image;

/// 1-based anchor coordinates: `i` anchor slot, `j` horizontal cell, `k` vertical cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnchorIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl AnchorIndex {
    /// Position in a `[B, Gh, Gw]` row-major probability map.
    pub fn flat(&self, gw: usize, gh: usize) -> usize {
        ((self.i - 1) * gh + (self.k - 1)) * gw + (self.j - 1)
    }
}

fn bin(v: f64, n: usize) -> usize {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    ((v * n as f64).floor() as usize + 1).min(n)
}

/// Maps a command in `[0,1]³` to an anchor by the floor rule with a clamp at
/// the top edge.
pub fn discretize(a: [f64; 3], b: usize, gw: usize, gh: usize) -> AnchorIndex {
    AnchorIndex {
        i: bin(a[0], b),
        j: bin(a[1], gw),
        k: bin(a[2], gh),
    }
}

/// `clamp(x + (α/255)·w, 0, 1)`, with `α` in 8-bit units.
pub fn apply_perturbation(x: &Image, w: &Image, alpha: f64) -> Image {
    assert_eq!(x.shape(), w.shape(), "perturbation shape must match the image");
    let scale = (alpha / 255.0) as f32;
    let data = x
        .data
        .iter()
        .zip(&w.data)
        .map(|(&p, &d)| if d == 0.0 { p } else { (p + scale * d).clamp(0.0, 1.0) })
        .collect();
    Image::from_data(x.width, x.height, x.channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discretize_boundaries_and_midpoint() {
        assert_eq!(discretize([0.0; 3], 5, 14, 14), AnchorIndex { i: 1, j: 1, k: 1 });
        assert_eq!(discretize([1.0; 3], 5, 14, 14), AnchorIndex { i: 5, j: 14, k: 14 });
        assert_eq!(discretize([0.5; 3], 5, 14, 14), AnchorIndex { i: 3, j: 8, k: 8 });
    }

    #[test]
    fn perturbation_examples() {
        let x = Image::from_data(1, 1, 1, vec![100.0 / 255.0]);
        let w = Image::from_data(1, 1, 1, vec![1.0]);
        let y = apply_perturbation(&x, &w, 20.0);
        assert!((y.data[0] - 120.0 / 255.0).abs() < 1e-6);
        let top = Image::from_data(1, 1, 1, vec![1.0]);
        assert_eq!(apply_perturbation(&top, &w, 10.0).data[0], 1.0);
        let zero = Image::from_data(1, 1, 1, vec![0.0]);
        assert_eq!(apply_perturbation(&x, &zero, 20.0), x);
    }
}
