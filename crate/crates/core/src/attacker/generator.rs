use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::nn::{Bound, Conv2d, Graph, ParamSet, Real, Tensor, Var};
use super::discretize;
use crate::sim_env::Image;

/// Block size of the pixel-shuffle upsampling from the latent grid.
const BLOCK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub image_size: usize,
    pub enc_channels: [usize; 2],
    pub latent_channels: usize,
    pub head_channels: usize,
}

impl GeneratorSpec {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            image_size: cfg.image_size,
            enc_channels: [16, 32],
            latent_channels: cfg.attack.latent_channels,
            head_channels: cfg.attack.head_channels,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / BLOCK
    }
}

/// Encoder₀, Decoder₀ and the perturbation head, all in one parameter group θ_img.
#[derive(Clone, Debug)]
pub struct Generator<T = f32> {
    pub spec: GeneratorSpec,
    pub params: ParamSet<T>,
    encoder: Vec<Conv2d>,
    decoder: Vec<Conv2d>,
    head: Vec<Conv2d>,
}

/// Number of conditioning planes concatenated to the latent code.
pub const COMMAND_PLANES: usize = 6;

/// Conditioning planes for commands `a`, `[N, 6, size, size]`: the three
/// broadcast command components, the horizontal and vertical cell-center
/// coordinates, and a one-hot plane marking the commanded cell.
pub fn command_planes<T: Real>(a: &[[f64; 3]], size: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(a.len() * COMMAND_PLANES * size * size);
    let center = |i: usize| T::lit((i as f64 + 0.5) / size as f64);
    for cmd in a {
        for &v in cmd {
            data.extend(std::iter::repeat_n(T::lit(v), size * size));
        }
        for _ in 0..size {
            data.extend((0..size).map(center));
        }
        for y in 0..size {
            data.extend(std::iter::repeat_n(center(y), size));
        }
        let cell = discretize(*cmd, 1, size, size);
        for y in 0..size {
            data.extend((0..size).map(|x| if (x + 1, y + 1) == (cell.j, cell.k) { T::one() } else { T::zero() }));
        }
    }
    Tensor::new(&[a.len(), COMMAND_PLANES, size, size], data)
}

pub fn images_to_tensor<T: Real>(xs: &[&Image]) -> Tensor<T> {
    let [c, h, w] = xs[0].shape();
    let mut data = Vec::with_capacity(xs.len() * c * h * w);
    for x in xs {
        assert_eq!(x.shape(), [c, h, w], "images in a batch must share a shape");
        data.extend(x.data.iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(&[xs.len(), c, h, w], data)
}

impl<T: Real> Generator<T> {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let [c1, c2] = spec.enc_channels;
        let (l, hc) = (spec.latent_channels, spec.head_channels);
        let out = 3 * BLOCK * BLOCK;
        let encoder = vec![
            Conv2d::new(&mut ps, "enc0.0", 3, c1, 3, 2, 1, &mut rng),
            Conv2d::new(&mut ps, "enc0.1", c1, c2, 3, 2, 1, &mut rng),
            Conv2d::new(&mut ps, "enc0.2", c2, l, 3, 2, 1, &mut rng),
        ];
        let decoder = vec![
            Conv2d::new(&mut ps, "dec0.0", l, hc, 3, 1, 1, &mut rng),
            Conv2d::new(&mut ps, "dec0.1", hc, out, 1, 1, 0, &mut rng),
        ];
        let head = vec![
            Conv2d::new(&mut ps, "attack.0", l + COMMAND_PLANES, hc, 3, 1, 1, &mut rng),
            Conv2d::new(&mut ps, "attack.1", hc, hc, 3, 1, 1, &mut rng),
            Conv2d::new(&mut ps, "attack.2", hc, out, 1, 1, 0, &mut rng),
        ];
        Self {
            spec,
            params: ps,
            encoder,
            decoder,
            head,
        }
    }

    fn chain(g: &mut Graph<T>, p: &Bound, layers: &[Conv2d], mut h: Var, last_linear: bool) -> Var {
        for (i, c) in layers.iter().enumerate() {
            h = c.forward(g, p, h);
            if !(last_linear && i + 1 == layers.len()) {
                h = g.leaky_relu(h, 0.1);
            }
        }
        h
    }

    /// Encoder₀: image batch `[N,3,S,S]` → latent `[N,L,S/8,S/8]`.
    pub fn encode(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        Self::chain(g, p, &self.encoder, x, false)
    }

    /// Decoder₀ reconstruction logits `[N,3,S,S]`.
    pub fn decode_logits(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Var {
        let h = Self::chain(g, p, &self.decoder, z, true);
        g.depth_to_space(h, BLOCK)
    }

    /// Pre-sigmoid perturbation logits `[N,3,S,S]`.
    pub fn perturbation_logits(&self, g: &mut Graph<T>, p: &Bound, z: Var, a: &[[f64; 3]]) -> Var {
        let planes = g.constant(command_planes(a, self.spec.latent_size()));
        let h = g.concat(&[z, planes], 1);
        let h = Self::chain(g, p, &self.head, h, true);
        g.depth_to_space(h, BLOCK)
    }

    /// Perturbation `w ∈ (0,1)` for latent `z` and commands `a`.
    pub fn perturbation(&self, g: &mut Graph<T>, p: &Bound, z: Var, a: &[[f64; 3]]) -> Var {
        let h = self.perturbation_logits(g, p, z, a);
        g.sigmoid(h)
    }

    /// Inference-only `w = Attacker(Encoder₀(x), a)` for a batch.
    pub fn generate_batch(&self, xs: &[&Image], a: &[[f64; 3]]) -> Vec<Image> {
        assert_eq!(xs.len(), a.len());
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images_to_tensor(xs));
        let z = self.encode(&mut g, &p, x);
        let w = self.perturbation(&mut g, &p, z, a);
        let [c, h, wd] = xs[0].shape();
        g.value(w)
            .to_f32_vec()
            .chunks(c * h * wd)
            .map(|d| Image::from_data(wd, h, c, d.to_vec()))
            .collect()
    }

    pub fn generate_perturbation(&self, x: &Image, a: [f64; 3]) -> Image {
        self.generate_batch(&[x], &[a]).pop().expect("one perturbation")
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            spec: self.spec.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }
}
