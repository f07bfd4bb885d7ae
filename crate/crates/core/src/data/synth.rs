//! Synthetic dual-task generator.
//!
//! The input is split into three blocks: a desired block (first `input_dim/8`
//! coordinates) holding a class prototype per desired label, a harmful block
//! (next `3*input_dim/4` coordinates) holding `leak_strength` times a
//! harmful-class direction, and a trailing block of pure noise. Every
//! coordinate gets unit Gaussian noise.
//!
//! With `censored` set, the harmful block also receives high-variance
//! nuisance along directions that each overlap the harmful directions by 45
//! degrees. The class signal is then still linearly recoverable, but only
//! after the nuisance subspace has been estimated from many examples, which
//! makes raw few-shot learning hard while a learned representation can
//! expose the label directly.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Example, Split, TaskDataset};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub input_dim: usize,
    pub num_desired_classes: usize,
    pub num_harmful_classes: usize,
    pub leak_strength: f64,
    pub censored: bool,
    /// Probability that the harmful label is copied from the desired label.
    pub label_correlation: f64,
    pub size: usize,
    pub seed: u64,
    #[serde(default = "default_desired_strength")]
    pub desired_strength: f64,
    /// Number of nuisance directions; defaults to a third of the harmful block.
    #[serde(default)]
    pub nuisance_rank: Option<usize>,
    #[serde(default = "default_nuisance_scale")]
    pub nuisance_scale: f64,
}

fn default_desired_strength() -> f64 {
    3.0
}

fn default_nuisance_scale() -> f64 {
    5.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            input_dim: 64,
            num_desired_classes: 4,
            num_harmful_classes: 2,
            leak_strength: 5.0,
            censored: true,
            label_correlation: 0.0,
            size: 10_000,
            seed: 0,
            desired_strength: default_desired_strength(),
            nuisance_rank: None,
            nuisance_scale: default_nuisance_scale(),
        }
    }
}

impl SynthConfig {
    pub fn desired_block(&self) -> usize {
        (self.input_dim / 8).max(1)
    }

    pub fn harmful_block(&self) -> usize {
        3 * self.input_dim / 4
    }

    fn nuisance_rank(&self) -> usize {
        self.nuisance_rank.unwrap_or(self.harmful_block() / 3)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim < 8 {
            return bad(format!("input_dim must be at least 8, got {}", self.input_dim));
        }
        if self.num_desired_classes < 2 || self.num_harmful_classes < 2 {
            return bad("both tasks need at least 2 classes".into());
        }
        if self.num_harmful_classes > self.harmful_block() {
            return bad(format!("{} harmful classes do not fit a {}-dim block", self.num_harmful_classes, self.harmful_block()));
        }
        if self.censored && self.num_harmful_classes + self.nuisance_rank() > self.harmful_block() {
            return bad(format!("nuisance rank {} does not fit the harmful block", self.nuisance_rank()));
        }
        if !(0.0..=1.0).contains(&self.label_correlation) {
            return bad(format!("label_correlation must lie in [0, 1], got {}", self.label_correlation));
        }
        if !(self.leak_strength >= 0.0 && self.leak_strength.is_finite()) {
            return bad(format!("leak_strength must be non-negative, got {}", self.leak_strength));
        }
        if !(self.desired_strength.is_finite() && self.nuisance_scale.is_finite() && self.nuisance_scale >= 0.0) {
            return bad("signal scales must be finite and non-negative".into());
        }
        if self.size < self.num_desired_classes.max(self.num_harmful_classes) {
            return bad(format!("size {} is smaller than the class count", self.size));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut seed::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Gram-Schmidt `v` against an orthonormal `basis`, then normalize.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
    }
    normalize(v);
}

struct Structure {
    desired: Vec<Vec<f64>>,
    harmful: Vec<Vec<f64>>,
    nuisance: Vec<Vec<f64>>,
}

fn structure(cfg: &SynthConfig) -> Structure {
    let mut rng = seed::derived_rng(cfg.seed, &[0]);
    let (dd, dh) = (cfg.desired_block(), cfg.harmful_block());
    let desired = (0..cfg.num_desired_classes)
        .map(|_| {
            let mut p = gaussian(&mut rng, dd);
            normalize(&mut p);
            p.iter_mut().for_each(|x| *x *= cfg.desired_strength);
            p
        })
        .collect();

    // Harmful class directions: orthonormal, then centered so two classes are exactly ±u.
    let ch = cfg.num_harmful_classes;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for _ in 0..ch {
        let mut v = gaussian(&mut rng, dh);
        orthogonalize(&mut v, &basis);
        basis.push(v);
    }
    let mean: Vec<f64> = (0..dh).map(|j| basis.iter().map(|b| b[j]).sum::<f64>() / ch as f64).collect();
    let harmful: Vec<Vec<f64>> = basis
        .iter()
        .map(|b| {
            let mut c: Vec<f64> = b.iter().zip(&mean).map(|(x, m)| x - m).collect();
            normalize(&mut c);
            c
        })
        .collect();

    let mut nuisance = Vec::new();
    if cfg.censored {
        let mut ortho = basis.clone();
        for j in 0..cfg.nuisance_rank() {
            let mut w = gaussian(&mut rng, dh);
            orthogonalize(&mut w, &ortho);
            ortho.push(w.clone());
            let anchor = &harmful[j % ch];
            nuisance.push(anchor.iter().zip(&w).map(|(a, b)| (a + b) / 2f64.sqrt()).collect());
        }
    }
    Structure { desired, harmful, nuisance }
}

/// Draws `cfg.size` examples; a pure function of `cfg`.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<TaskDataset> {
    cfg.validate()?;
    let st = structure(cfg);
    let (dd, dh) = (cfg.desired_block(), cfg.harmful_block());
    let mut rng = seed::derived_rng(cfg.seed, &[1]);
    let mut examples = Vec::with_capacity(cfg.size);
    for _ in 0..cfg.size {
        let y_desired = rng.random_range(0..cfg.num_desired_classes);
        let y_harmful = if rng.random::<f64>() < cfg.label_correlation {
            y_desired % cfg.num_harmful_classes
        } else {
            rng.random_range(0..cfg.num_harmful_classes)
        };
        let mut x = gaussian(&mut rng, cfg.input_dim);
        for (xi, p) in x[..dd].iter_mut().zip(&st.desired[y_desired]) {
            *xi += p;
        }
        let block = &mut x[dd..dd + dh];
        for (xi, u) in block.iter_mut().zip(&st.harmful[y_harmful]) {
            *xi += cfg.leak_strength * u;
        }
        for v in &st.nuisance {
            let a: f64 = cfg.nuisance_scale * rng.sample::<f64, _>(StandardNormal);
            for (xi, vi) in block.iter_mut().zip(v) {
                *xi += a * vi;
            }
        }
        examples.push(Example { x, y_desired, y_harmful });
    }
    TaskDataset::new(examples, cfg.num_desired_classes, cfg.num_harmful_classes, Split::Full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let cfg = SynthConfig { size: 50, ..Default::default() };
        assert_eq!(gen_synthetic(&cfg).unwrap(), gen_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(gen_synthetic(&cfg).unwrap(), gen_synthetic(&other).unwrap());
    }

    #[test]
    fn rejects_invalid_configs() {
        for cfg in [
            SynthConfig { size: 1, ..Default::default() },
            SynthConfig { label_correlation: 1.5, ..Default::default() },
            SynthConfig { leak_strength: -1.0, ..Default::default() },
            SynthConfig { input_dim: 4, ..Default::default() },
        ] {
            assert!(matches!(gen_synthetic(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn binary_harmful_directions_are_antipodal() {
        let st = structure(&SynthConfig::default());
        let c = dot(&st.harmful[0], &st.harmful[1]);
        assert!((c + 1.0).abs() < 1e-12);
        for v in &st.nuisance {
            assert!((dot(v, v) - 1.0).abs() < 1e-12);
            assert!((dot(v, &st.harmful[0]).abs() - 0.5f64.sqrt()).abs() < 1e-12);
        }
    }
}
