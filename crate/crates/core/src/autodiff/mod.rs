//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node to a [`Tape`]. [`Tape::backward`] walks the
//! tape in reverse and records the gradient computation as new nodes, so a
//! gradient can itself be differentiated. That is what makes it possible to
//! differentiate through unrolled optimizer steps.
//!
//! ```
//! use taskblock::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap().mul(x).unwrap();
//! let dy = tape.backward(y, &[x], true).unwrap()[0];
//! let d2y = tape.backward(dy, &[x], false).unwrap()[0];
//! assert_eq!(dy.item(), 27.0);
//! assert_eq!(d2y.item(), 18.0);
//! ```

mod backward;
mod tape;
mod tensor;

pub use tape::{Prim, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}: {detail}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>>, detail: String },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{op}: index {index} out of range for axis of length {bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("backward needs a rank-0 loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignTape,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shape() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 4]));
        assert_eq!(a.matmul(b).unwrap().shape(), vec![2, 4]);
    }

    #[test]
    fn matmul_mismatch_names_op_and_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 4]));
        let err = a.matmul(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn log_softmax_of_zeros() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = x.log_softmax().unwrap().value();
        for v in y.data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn clamp_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![-2.0, 0.5, 2.0]));
        assert_eq!(x.clamp(-1.0, 1.0).unwrap().value().data(), &[-1.0, 0.5, 1.0]);
    }

    #[test]
    fn clamp_gradient_zero_on_boundary() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.5, 1.0, 3.0]));
        let y = x.clamp(-1.0, 1.0).unwrap().sum_all().unwrap();
        let g = tape.backward(y, &[x], false).unwrap()[0].value();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn square_derivative() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.square().unwrap();
        assert_eq!(tape.backward(y, &[x], false).unwrap()[0].item(), 6.0);
    }

    #[test]
    fn cube_second_derivative() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.square().unwrap().mul(x).unwrap();
        let dy = tape.backward(y, &[x], true).unwrap()[0];
        assert!(dy.requires_grad());
        let d2 = tape.backward(dy, &[x], false).unwrap()[0];
        assert_eq!(d2.item(), 18.0);
        assert!(!d2.requires_grad());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = x.tanh().unwrap();
        assert_eq!(tape.backward(y, &[x], false).unwrap_err(), AutodiffError::NotScalar(vec![2]));
    }

    #[test]
    fn backward_rejects_foreign_variable() {
        let tape = Tape::<f64>::new();
        let other = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let z = other.leaf(Tensor::scalar(1.0));
        let y = x.square().unwrap();
        assert_eq!(tape.backward(y, &[z], false).unwrap_err(), AutodiffError::ForeignTape);
        assert_eq!(x.add(z).unwrap_err(), AutodiffError::ForeignTape);
    }

    #[test]
    fn unrelated_wrt_gets_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let w = tape.leaf(Tensor::zeros(&[2, 2]));
        let y = x.exp().unwrap();
        let g = tape.backward(y, &[w], false).unwrap();
        assert_eq!(g[0].value(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn bias_broadcast_gradient_sums_batch() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap());
        let b = tape.leaf(Tensor::vector(vec![0.5, -0.5]));
        let y = x.add(b).unwrap().sum_all().unwrap();
        assert_eq!(tape.backward(y, &[b], false).unwrap()[0].value().data(), &[3.0, 3.0]);
    }

    #[test]
    fn gather_rejects_out_of_range_index() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(x.gather(&[0, 3]), Err(AutodiffError::IndexOutOfRange { index: 3, .. })));
    }

    #[test]
    fn tensor_rejects_inconsistent_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let run = || {
            let tape = Tape::<f64>::new();
            let a = tape.leaf(Tensor::from_rows(&[[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]]).unwrap());
            let w = tape.leaf(Tensor::from_rows(&[[0.5, 0.2], [-0.3, 0.9], [1.1, -0.6]]).unwrap());
            let l = a.matmul(w).unwrap().tanh().unwrap().log_softmax().unwrap().gather(&[1, 0]).unwrap();
            let l = l.mean(0).unwrap();
            let g = tape.backward(l, &[a, w], false).unwrap();
            (l.value(), g[0].value(), g[1].value())
        };
        let (l1, a1, w1) = run();
        let (l2, a2, w2) = run();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&l1), bits(&l2));
        assert_eq!(bits(&a1), bits(&a2));
        assert_eq!(bits(&w1), bits(&w2));
    }

    #[test]
    fn works_in_single_precision() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::scalar(3.0f32));
        let y = x.square().unwrap();
        assert_eq!(tape.backward(y, &[x], false).unwrap()[0].item(), 6.0f32);
    }
}
