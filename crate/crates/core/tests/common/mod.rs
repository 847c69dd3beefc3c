#![allow(dead_code)]

use moe_restore::{Graph, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let d = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(shape, |_| d.sample(&mut r))
}

pub fn randn32(shape: &[usize], seed: u64) -> Tensor<f32> {
    randn(shape, seed).cast()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let d = Uniform::new(lo, hi).unwrap();
    Tensor::from_fn(shape, |_| d.sample(&mut r))
}

/// `sum(r * y)` with fixed random weights `r`, so every output entry matters.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = randn(g.shape(y), seed ^ 0x5eed);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

/// Gradient-check step used for f64 checks.
pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-3;
pub const SEEDS: [u64; 3] = [1, 2, 3];

/// Overwrites every parameter with `N(0, std^2)` draws so gradient checks
/// see well-conditioned, non-degenerate weights.
pub fn scramble(ps: &mut moe_restore::ParamStore<f64>, seed: u64, std: f64) {
    let mut r = rng(seed);
    let d = Normal::new(0.0, std).unwrap();
    for p in ps.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = d.sample(&mut r));
    }
}

/// Sets every element of the named parameter to `v`.
pub fn fill_param(ps: &mut moe_restore::ParamStore<f64>, name: &str, v: f64) {
    let id = ps.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    ps.tensor_mut(id).data_mut().fill(v);
}
