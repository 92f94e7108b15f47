//! Minimal tensor autodiff used by every network in the crate.

pub mod codec;
mod graph;
mod layers;
mod params;
mod real;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Precomputed, Var};
pub(crate) use graph::sigmoid;
pub use layers::{Conv2d, GruCell, Linear, Mlp};
pub use params::{Adam, Bound, ParamId, ParamSet};
pub use real::{gemm, Real};
pub use tensor::Tensor;

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a−b| / max(|a|, |b|, floor)`: relative error with an absolute floor for
/// entries whose true value is near zero.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `analytic` (one gradient vector per parameter tensor) against
/// central differences of `loss` at `points` randomly drawn scalars and
/// returns the largest relative error.
pub fn spot_check_gradient(
    params: &ParamSet<f64>,
    analytic: &[Vec<f64>],
    points: usize,
    seed: u64,
    mut loss: impl FnMut(&ParamSet<f64>) -> f64,
) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let flat_grad: Vec<f64> = analytic.iter().flatten().copied().collect();
    let base = params.flat();
    assert_eq!(base.len(), flat_grad.len(), "one gradient entry per parameter");
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for _ in 0..points {
        let i = rng.random_range(0..base.len());
        let mut x = base.clone();
        let h = 1e-6 * base[i].abs().max(1.0);
        x[i] = base[i] + h;
        probe.set_flat(&x);
        let up = loss(&probe);
        x[i] = base[i] - h;
        probe.set_flat(&x);
        let down = loss(&probe);
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(flat_grad[i], numeric, 1e-6));
    }
    worst
}
