use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Bound, Graph, ParamId, ParamSet, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self::with_gain(ps, name, inp, out, 1.0, rng)
    }

    pub fn with_gain<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        inp: usize,
        out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.add_uniform(format!("{name}.w"), &[inp, out], inp, gain, rng);
        let b = ps.add_zeros(format!("{name}.b"), &[out]);
        Self { w, b, inp, out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        let w = ps.add_uniform(format!("{name}.w"), &[out_c, in_c, k, k], fan_in, 1.0, rng);
        let b = ps.add_zeros(format!("{name}.b"), &[out_c]);
        Self {
            w,
            b,
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }

    /// Spatial output size for a square input of side `n`.
    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// Gated recurrent unit, `h' = (1−z)⊙n + z⊙h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_size: usize,
}

impl GruCell {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, inp: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            input: Linear::with_gain(ps, &format!("{name}.ih"), inp, 3 * hidden, 1.0 / 3.0, rng),
            hidden: Linear::with_gain(ps, &format!("{name}.hh"), hidden, 3 * hidden, 1.0 / 3.0, rng),
            hidden_size: hidden,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: Var, x: Var) -> Var {
        let hs = self.hidden_size;
        let gx = self.input.forward(g, p, x);
        let gh = self.hidden.forward(g, p, h);
        let (xr, xz, xn) = (g.narrow(gx, 1, 0, hs), g.narrow(gx, 1, hs, hs), g.narrow(gx, 1, 2 * hs, hs));
        let (hr, hz, hn) = (g.narrow(gh, 1, 0, hs), g.narrow(gh, 1, hs, hs), g.narrow(gh, 1, 2 * hs, hs));
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn);
        let n = g.add(xn, rh);
        let n = g.tanh(n);
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }
}

/// Fully connected stack with ReLU between layers and no activation on the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, sizes: &[usize], rng: &mut impl Rng) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { 0.1 } else { 1.0 };
                Linear::with_gain(ps, &format!("{name}.{i}"), sizes[i], sizes[i + 1], gain, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, mut x: Var) -> Var {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, p, x);
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        x
    }
}
