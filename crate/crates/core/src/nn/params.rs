use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Gradients, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors forming one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A parameter group bound into one [`Graph`] as leaf variables.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in `±sqrt(6·gain/fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 * gain / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
        self.add(name, Tensor::new(shape, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Bind every tensor as a leaf of `g`. With `trainable = false` the
    /// tensors act as constants: gradients still flow *through* them to
    /// other leaves, but none are accumulated for them.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect(),
        }
    }

    /// Gradient of every tensor in this set (zeros where no path exists).
    pub fn grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> Vec<Vec<T>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, v)| grads.take(*v).unwrap_or_else(|| vec![T::zero(); t.numel()]))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// `self ← τ·live + (1−τ)·self`.
    pub fn blend_from(&mut self, live: &ParamSet<T>, tau: f64) {
        assert_eq!(self.names, live.names, "blending mismatched parameter sets");
        let tau = T::lit(tau);
        let keep = T::one() - tau;
        for (dst, src) in self.tensors.iter_mut().zip(&live.tensors) {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = tau * s + keep * *d;
            }
        }
    }

    /// Euclidean distance between two parameter sets of identical layout.
    pub fn distance(&self, other: &ParamSet<T>) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(&a, &b)| (a - b).f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn flat(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Hex SHA-256 over names, shapes and little-endian `f64` values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Adaptive-moment optimizer state for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(params: &ParamSet<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One descent step along `-grads`. Returns `false` (and leaves everything
    /// untouched) when any gradient entry is non-finite.
    pub fn apply<T: Real>(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>]) -> bool {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return false;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, g) in grads.iter().enumerate() {
            let p = params.get_mut(ParamId(k)).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..g.len() {
                let gj = g[j].f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let upd = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                p[j] -= T::lit(upd);
            }
        }
        true
    }
}
