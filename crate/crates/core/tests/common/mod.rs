//! Reference implementations used as independent oracles: direct textbook
//! formulas with no log-space tricks, shared by several test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sign(1 - tau) * (sum_i (a_i / sum a)^(1 - tau))^(1 / tau)`.
pub fn unified(a: &[f64], tau: f64) -> f64 {
    let s: f64 = a.iter().sum();
    let p: f64 = a.iter().map(|x| (x / s).powf(1.0 - tau)).sum();
    (1.0 - tau).signum() * p.powf(1.0 / tau)
}

pub fn jain(a: &[f64]) -> f64 {
    let s: f64 = a.iter().sum();
    let q: f64 = a.iter().map(|x| x * x).sum();
    s * s / (a.len() as f64 * q)
}

pub fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

pub fn log_sigmoid(x: f64) -> f64 {
    -(1.0 + (-x).exp()).ln()
}

/// Central difference of `f` along coordinate `i`.
pub fn partial(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut up = x.to_vec();
    let mut down = x.to_vec();
    up[i] += h;
    down[i] -= h;
    (f(&up) - f(&down)) / (2.0 * h)
}

pub fn random_positive(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.05..5.0)).collect()
}

pub fn random_gaps(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
