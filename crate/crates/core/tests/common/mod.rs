#![allow(dead_code)]

pub mod criteria;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use runet::{Shape, Volume};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_volume(shape: Shape, rng: &mut impl Rng) -> Volume {
    Volume::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn random_unit(shape: Shape, rng: &mut impl Rng) -> Volume {
    Volume::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(0.02f32..0.98)).collect()).unwrap()
}

pub fn random_binary(shape: Shape, p: f64, rng: &mut impl Rng) -> Volume {
    Volume::from_vec(shape, (0..shape.len()).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Central difference of `f` along `direction` at `x`, evaluated in f64.
pub fn directional_fd(x: &Volume, direction: &[f32], step: f32, f: &dyn Fn(&Volume) -> f64) -> f64 {
    let mut plus = x.clone();
    let mut minus = x.clone();
    for ((p, m), &d) in plus.data_mut().iter_mut().zip(minus.data_mut()).zip(direction) {
        *p += step * d;
        *m -= step * d;
    }
    (f(&plus) - f(&minus)) / (2.0 * step as f64)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Indices of the `k` largest-magnitude entries.
pub fn top_k(values: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
