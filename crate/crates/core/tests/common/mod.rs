#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskblock::autodiff::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central finite differences of a scalar function of several tensors.
pub fn finite_diff(f: impl Fn(&[Tensor<f64>]) -> f64, at: &[Tensor<f64>], step: f64) -> Vec<Tensor<f64>> {
    let mut point: Vec<Tensor<f64>> = at.to_vec();
    let mut out = Vec::new();
    for i in 0..at.len() {
        let mut g = Tensor::zeros(at[i].shape());
        for j in 0..at[i].len() {
            let orig = point[i].data()[j];
            point[i].data_mut()[j] = orig + step;
            let up = f(&point);
            point[i].data_mut()[j] = orig - step;
            let down = f(&point);
            point[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// `||a - b|| / max(||a||, ||b||, floor)` over all tensors jointly.
pub fn rel_err(a: &[Tensor<f64>], b: &[Tensor<f64>], floor: f64) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        for (&u, &v) in x.data().iter().zip(y.data()) {
            diff += (u - v) * (u - v);
            na += u * u;
            nb += v * v;
        }
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(floor)
}
