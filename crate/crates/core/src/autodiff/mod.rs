//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is built fresh for each forward pass. Leaves created with
//! [`Tape::leaf`] receive gradients on [`Tape::backward`]; leaves created with
//! [`Tape::constant`] (and everything computed only from constants) are skipped.
//!
//! ```
//! use dfl::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::row(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.sum(sq);
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Plain gradient descent step: `params - lr * grads`.
pub fn sgd_step<S: Scalar>(params: &[S], grads: &[S], lr: S) -> Result<Vec<S>> {
    if params.len() != grads.len() {
        return Err(Error::Length {
            what: "sgd_step gradient",
            expected: params.len(),
            got: grads.len(),
        });
    }
    if lr < S::zero() {
        return invalid("learning rate must be non-negative");
    }
    Ok(params.iter().zip(grads).map(|(&p, &g)| p - lr * g).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, d: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn softplus_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::scalar(0.0));
        let y = tape.softplus(x);
        assert!((tape.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn concat_along_features() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::row(vec![3.0]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(tape.shape(c), &[1, 3]);
    }

    #[test]
    fn concat_rejects_mismatched_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(t(2, 1, &[1.0, 2.0]));
        let b = tape.constant(t(1, 1, &[3.0]));
        let err = tape.concat(&[a, b]).unwrap_err();
        assert!(err.to_string().contains("[2, 1]"), "{err}");
        assert!(err.to_string().contains("[1, 1]"), "{err}");
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(2, 3, &[0.0; 6]));
        let b = tape.constant(t(2, 3, &[0.0; 6]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let l = tape.constant(t(2, 4, &[0.3; 8]));
        let ce = tape.cross_entropy(l, &[0, 3]).unwrap();
        assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct() {
        let mut tape = Tape::new();
        let l = tape.constant(t(1, 3, &[0.0, 1e6, 0.0]));
        let ce = tape.cross_entropy(l, &[1]).unwrap();
        assert!(tape.value(ce).item().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_scalar_reference() {
        // Frozen 3x5 logits; reference computed elementwise with explicit softmax.
        let logits = [
            0.12, -1.3, 2.2, 0.0, 0.7, //
            -0.4, 0.9, -2.1, 1.5, 0.05, //
            3.0, -0.2, 0.6, -1.1, 2.4,
        ];
        let labels = [2usize, 3, 4];
        let mut reference = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits[i * 5..(i + 1) * 5];
            let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
            reference += -(row[y].exp() / z).ln();
        }
        reference /= 3.0;
        let mut tape = Tape::new();
        let l = tape.constant(t(3, 5, &logits));
        let ce = tape.cross_entropy(l, &labels).unwrap();
        assert!((tape.value(ce).item() - reference).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let l = tape.constant(t(1, 3, &[0.0; 3]));
        assert!(matches!(
            tape.cross_entropy(l, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum(sq);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
        // second call accumulates
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn independent_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::row(vec![5.0, 6.0]));
        let y = tape.sum(x);
        tape.backward(y).unwrap();
        assert!(tape.grad(unused).is_none());
        assert_eq!(tape.grad_or_zeros(unused), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn sgd_step_examples() {
        assert_eq!(sgd_step(&[1.0, 1.0], &[0.0, 0.0], 0.1).unwrap(), vec![1.0, 1.0]);
        assert_eq!(sgd_step(&[1.0, 2.0], &[1.0, -1.0], 0.5).unwrap(), vec![0.5, 2.5]);
        assert_eq!(sgd_step(&[3.0, -2.0], &[7.0, 9.0], 0.0).unwrap(), vec![3.0, -2.0]);
        assert!(sgd_step(&[1.0], &[1.0, 2.0], 0.1).is_err());
    }
}
