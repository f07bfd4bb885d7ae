mod common;

use proptest::prelude::*;
use rand::Rng;
use taskblock::autodiff::{Tape, Tensor};
use taskblock::calibration::{calibrated_nll, solve_calibration, CalibrationConfig};
use taskblock::models::nll;

/// Mean NLL of softmax(Z Wᵀ), computed directly.
fn nll_at(z: &[[f64; 2]], y: &[usize], w: [[f64; 2]; 2]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in z.iter().zip(y) {
        let s = [w[0][0] * row[0] + w[0][1] * row[1], w[1][0] * row[0] + w[1][1] * row[1]];
        let m = s[0].max(s[1]);
        let lse = m + ((s[0] - m).exp() + (s[1] - m).exp()).ln();
        total += lse - s[label];
    }
    total / z.len() as f64
}

/// Best NLL over W entries in {-1, -0.9, ..., 1}.
fn grid_oracle(z: &[[f64; 2]], y: &[usize]) -> f64 {
    let grid: Vec<f64> = (0..=20).map(|i| -1.0 + 0.1 * i as f64).collect();
    let mut best = f64::INFINITY;
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                for &d in &grid {
                    best = best.min(nll_at(z, y, [[a, b], [c, d]]));
                }
            }
        }
    }
    best
}

fn instance(seed: u64) -> (Vec<[f64; 2]>, Vec<usize>) {
    let mut rng = common::rng(seed);
    let scale = rng.random_range(0.5..3.0);
    let flip = rng.random_bool(0.5);
    let mut z = Vec::new();
    let mut y = Vec::new();
    for _ in 0..16 {
        let label = rng.random_range(0..2usize);
        let sign = if (label == 1) ^ flip { 1.0 } else { -1.0 };
        let margin = sign * rng.random_range(0.0..1.5);
        z.push([scale * (-margin + rng.random_range(-1.0..1.0)), scale * (margin + rng.random_range(-1.0..1.0))]);
        y.push(label);
    }
    (z, y)
}

fn solve(z: &[[f64; 2]], y: &[usize]) -> (f64, Tensor<f64>) {
    let tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::from_rows(z).unwrap());
    let sol = solve_calibration(logits, y, &CalibrationConfig::default()).unwrap();
    (sol.achieved_nll, sol.w.value())
}

#[test]
fn matches_grid_search_on_random_binary_instances() {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let (z, y) = instance(seed);
        let (got, w) = solve(&z, &y);
        assert!(w.data().iter().all(|v| (-1.0..=1.0).contains(v)), "infeasible W {w:?}");
        let oracle = grid_oracle(&z, &y);
        worst = worst.max((got - oracle).abs());
        assert!((got - oracle).abs() <= 1e-2, "seed {seed}: solver {got} vs grid {oracle}");
        assert!(got <= nll_at(&z, &y, [[1.0, 0.0], [0.0, 1.0]]) + 1e-9);
    }
    eprintln!("worst |solver - grid| = {worst:.2e}");
}

#[test]
fn flipped_instance_drops_below_ln2() {
    let z = [[2.0, -1.0], [-1.0, 2.0], [1.5, -0.5], [-0.7, 1.8], [2.2, 0.1], [0.0, 1.9]];
    let y = [1, 0, 1, 0, 1, 0];
    let (got, _) = solve(&z, &y);
    let raw = nll_at(&z, &y, [[1.0, 0.0], [0.0, 1.0]]);
    assert!(raw > std::f64::consts::LN_2 && got < std::f64::consts::LN_2, "raw {raw}, calibrated {got}");
    assert!((got - grid_oracle(&z, &y)).abs() < 1e-2);
}

#[test]
fn gradient_through_solver_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = common::rng(100 + seed);
        let z0 = common::uniform(&mut rng, &[8, 3], -2.0, 2.0);
        let y: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
        let cfg = CalibrationConfig::default();
        let f = |zs: &[Tensor<f64>]| {
            let tape = Tape::new();
            calibrated_nll(tape.constant(zs[0].clone()), &y, Some(&cfg)).unwrap().item()
        };
        let tape = Tape::new();
        let z = tape.leaf(z0.clone());
        let loss = calibrated_nll(z, &y, Some(&cfg)).unwrap();
        let g = tape.backward(loss, &[z], false).unwrap()[0].value();
        let fd = common::finite_diff(f, &[z0], 1e-6);
        let err = common::rel_err(&[g], &fd, 1e-8);
        assert!(err <= 1e-3, "seed {seed}: rel err {err}");
    }
}

#[test]
fn noise_labels_with_zero_logits_stay_at_ln_c() {
    let tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[10, 4]));
    let y = [0, 3, 1, 2, 2, 0, 1, 3, 0, 1];
    let l = calibrated_nll(z, &y, Some(&CalibrationConfig::default())).unwrap().item();
    assert!((l - 4f64.ln()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solver_is_feasible_and_never_worse_than_identity(
        rows in prop::collection::vec(prop::collection::vec(-6.0f64..6.0, 3), 1..12),
        labels in prop::collection::vec(0usize..3, 12),
    ) {
        let y = &labels[..rows.len()];
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_rows(&rows).unwrap());
        let sol = solve_calibration(z, y, &CalibrationConfig::default()).unwrap();
        prop_assert!(sol.w.value().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let identity = nll(z, y).unwrap().item();
        prop_assert!(sol.achieved_nll <= identity + 1e-9);
    }
}
