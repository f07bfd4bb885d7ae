//! Every primitive's backward rule against central finite differences, for
//! first derivatives and for derivatives of recorded gradients.

mod common;

use common::{finite_diff, rel_err, rng, uniform};
use taskblock::autodiff::{Prim, Tape, Tensor, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

struct Case {
    prim: Prim<f64>,
    inputs: Vec<Tensor<f64>>,
}

fn cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let mut u = |shape: &[usize], lo: f64, hi: f64| uniform(&mut r, shape, lo, hi);
    let clamp_input = {
        // keep entries at least 0.05 away from the kinks at +-0.5
        let mut t = u(&[3, 4], -1.0, 1.0);
        for v in t.data_mut() {
            if (v.abs() - 0.5).abs() < 0.05 {
                *v += 0.2 * v.signum();
            }
        }
        t
    };
    let relu_input = {
        let mut t = u(&[3, 4], -1.0, 1.0);
        for v in t.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        t
    };
    vec![
        Case { prim: Prim::MatMul, inputs: vec![u(&[3, 4], -1.0, 1.0), u(&[4, 2], -1.0, 1.0)] },
        Case { prim: Prim::Transpose, inputs: vec![u(&[3, 2], -1.0, 1.0)] },
        Case { prim: Prim::Add, inputs: vec![u(&[3, 4], -1.0, 1.0), u(&[3, 4], -1.0, 1.0)] },
        Case { prim: Prim::Add, inputs: vec![u(&[3, 4], -1.0, 1.0), u(&[4], -1.0, 1.0)] },
        Case { prim: Prim::Sub, inputs: vec![u(&[3, 4], -1.0, 1.0), u(&[4], -1.0, 1.0)] },
        Case { prim: Prim::Mul, inputs: vec![u(&[3, 4], -1.0, 1.0), u(&[3, 4], -1.0, 1.0)] },
        Case { prim: Prim::Div, inputs: vec![u(&[3, 4], -1.0, 1.0), u(&[3, 4], 0.5, 2.0)] },
        Case { prim: Prim::MulScalar, inputs: vec![u(&[3, 4], -1.0, 1.0), u(&[], -1.0, 1.0)] },
        Case { prim: Prim::Scale(-1.7), inputs: vec![u(&[5], -1.0, 1.0)] },
        Case { prim: Prim::AddConst(0.3), inputs: vec![u(&[5], -1.0, 1.0)] },
        Case { prim: Prim::Tanh, inputs: vec![u(&[3, 4], -2.0, 2.0)] },
        Case { prim: Prim::Relu, inputs: vec![relu_input] },
        Case { prim: Prim::Exp, inputs: vec![u(&[3, 4], -1.0, 1.0)] },
        Case { prim: Prim::Log, inputs: vec![u(&[3, 4], 0.5, 2.0)] },
        Case { prim: Prim::Sqrt, inputs: vec![u(&[3, 4], 0.5, 2.0)] },
        Case { prim: Prim::LogSoftmax, inputs: vec![u(&[3, 4], -2.0, 2.0)] },
        Case { prim: Prim::Gather(vec![2, 0, 3].into()), inputs: vec![u(&[3, 4], -1.0, 1.0)] },
        Case { prim: Prim::Scatter { indices: vec![1, 0, 1].into(), classes: 2 }, inputs: vec![u(&[3], -1.0, 1.0)] },
        Case { prim: Prim::Sum(0), inputs: vec![u(&[3, 4], -1.0, 1.0)] },
        Case { prim: Prim::Sum(1), inputs: vec![u(&[3, 4], -1.0, 1.0)] },
        Case { prim: Prim::Mean(0), inputs: vec![u(&[3, 4], -1.0, 1.0)] },
        Case { prim: Prim::Mean(1), inputs: vec![u(&[2, 3, 4], -1.0, 1.0)] },
        Case { prim: Prim::Expand { axis: 0, size: 3 }, inputs: vec![u(&[4], -1.0, 1.0)] },
        Case { prim: Prim::Expand { axis: 1, size: 2 }, inputs: vec![u(&[3], -1.0, 1.0)] },
        Case { prim: Prim::SumAll, inputs: vec![u(&[3, 4], -1.0, 1.0)] },
        Case { prim: Prim::Fill(vec![2, 3]), inputs: vec![u(&[], -1.0, 1.0)] },
        Case { prim: Prim::Clamp { lo: -0.5, hi: 0.5 }, inputs: vec![clamp_input] },
    ]
}

/// sum(prim(inputs) * weights), recorded on `tape`.
fn weighted<'t>(tape: &'t Tape<f64>, prim: &Prim<f64>, xs: &[Var<'t, f64>], weights: &Tensor<f64>) -> Var<'t, f64> {
    let y = tape.record(prim.clone(), xs).unwrap();
    let w = tape.constant(weights.clone());
    y.mul(w).unwrap().sum_all().unwrap()
}

fn output_weights(case: &Case, seed: u64) -> Tensor<f64> {
    let tape = Tape::new();
    let xs: Vec<_> = case.inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let shape = tape.record(case.prim.clone(), &xs).unwrap().shape();
    uniform(&mut rng(seed), &shape, -1.0, 1.0)
}

#[test]
fn first_order_matches_finite_differences() {
    for seed in 0..5 {
        for case in cases(seed) {
            let w = output_weights(&case, 100 + seed);
            let f = |at: &[Tensor<f64>]| {
                let tape = Tape::new();
                let xs: Vec<_> = at.iter().map(|t| tape.constant(t.clone())).collect();
                weighted(&tape, &case.prim, &xs, &w).item()
            };
            let tape = Tape::new();
            let xs: Vec<_> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = weighted(&tape, &case.prim, &xs, &w);
            let grads: Vec<_> = tape.backward(loss, &xs, false).unwrap().iter().map(|g| g.value()).collect();
            let fd = finite_diff(f, &case.inputs, STEP);
            let err = rel_err(&grads, &fd, 1e-8);
            assert!(err <= TOL, "{} (seed {seed}): relative error {err:e}", case.prim.name());
        }
    }
}

#[test]
fn second_order_matches_finite_differences() {
    for seed in 0..3 {
        for case in cases(seed) {
            let w = output_weights(&case, 200 + seed);
            let probes: Vec<_> =
                case.inputs.iter().enumerate().map(|(i, t)| uniform(&mut rng(300 + i as u64), t.shape(), -1.0, 1.0)).collect();
            // h(x) = sum_i <grad_i f(x), probe_i>; its gradient is a Hessian-vector product.
            let h = |tape: &Tape<f64>, at: &[Tensor<f64>], create: bool| -> (f64, Vec<Tensor<f64>>) {
                let xs: Vec<_> = at.iter().map(|t| tape.leaf(t.clone())).collect();
                let loss = weighted(tape, &case.prim, &xs, &w);
                let gs = tape.backward(loss, &xs, true).unwrap();
                let mut acc = tape.scalar_constant(0.0);
                for (g, p) in gs.iter().zip(&probes) {
                    let p = tape.constant(p.clone());
                    acc = acc.add(g.mul(p).unwrap().sum_all().unwrap()).unwrap();
                }
                let hv = if create {
                    tape.backward(acc, &xs, false).unwrap().iter().map(|g| g.value()).collect()
                } else {
                    Vec::new()
                };
                (acc.item(), hv)
            };
            let (_, hv) = h(&Tape::new(), &case.inputs, true);
            let fd = finite_diff(|at| h(&Tape::new(), at, false).0, &case.inputs, STEP);
            let err = rel_err(&hv, &fd, 1e-6);
            assert!(err <= 1e-4, "{} (seed {seed}): second-order relative error {err:e}", case.prim.name());
        }
    }
}

#[test]
fn one_step_lookahead_gradient_matches_finite_differences() {
    // l(p) = 0.5 p^T A p + b^T p ; L(p) = sum((p - c)^2) ; objective L(theta - alpha * grad l(theta))
    let a = Tensor::from_rows(&[[2.0, 0.3], [0.3, 1.0]]).unwrap();
    let b = Tensor::new(vec![1, 2], vec![-0.4, 0.7]).unwrap();
    let c = Tensor::new(vec![1, 2], vec![0.25, -0.5]).unwrap();
    fn objective<'t>(tape: &'t Tape<f64>, theta: Var<'t, f64>, a: &Tensor<f64>, b: &Tensor<f64>, c: &Tensor<f64>) -> Var<'t, f64> {
        let alpha = 0.1;
        let av = tape.constant(a.clone());
        let inner = theta.matmul(av).unwrap().mul(theta).unwrap().sum_all().unwrap().scale(0.5).unwrap();
        let inner = inner.add(theta.mul(tape.constant(b.clone())).unwrap().sum_all().unwrap()).unwrap();
        let g = tape.backward(inner, &[theta], true).unwrap()[0];
        let adapted = theta.sub(g.scale(alpha).unwrap()).unwrap();
        adapted.sub(tape.constant(c.clone())).unwrap().square().unwrap().sum_all().unwrap()
    }
    let theta0 = Tensor::new(vec![1, 2], vec![0.8, -1.3]).unwrap();
    let tape = Tape::new();
    let theta = tape.leaf(theta0.clone());
    let out = objective(&tape, theta, &a, &b, &c);
    let grad = tape.backward(out, &[theta], false).unwrap()[0].value();
    let fd = finite_diff(
        |at| {
            let tape = Tape::new();
            let t = tape.leaf(at[0].clone());
            objective(&tape, t, &a, &b, &c).item()
        },
        &[theta0],
        1e-5,
    );
    let err = rel_err(&[grad], &fd, 1e-12);
    assert!(err <= 1e-6, "relative error {err:e}");
}
