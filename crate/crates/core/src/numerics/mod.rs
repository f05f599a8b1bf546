//! Dense `f64` arrays, a reverse-mode tape, and AdamW.

pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use optim::{AdamW, OptimizerState, Parameter};
pub use tape::{grad_records, Elementwise, Gradients, Tape, Var};
pub use tensor::{checksum_of, Tensor};

use crate::error::Result;

/// Matrix product without recording.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb)?;
    Ok(tape.value(c).clone())
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut tape = Tape::inference();
    let v = tape.constant(x.clone());
    let s = tape.softmax_rows(v);
    tape.value(s).clone()
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::inference();
    let v = tape.constant(logits.clone());
    let l = tape.cross_entropy(v, labels)?;
    Ok(tape.value(l).data()[0])
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{central_difference, relative_error, DEFAULT_STEP, RELATIVE_FLOOR};
    use super::*;
    use crate::error::MiraError;
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let a = m(2, 2, &[1., 2., 3., 4.]);
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let c = matmul(&m(1, 2, &[1., 2.]), &m(2, 1, &[3., 4.])).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let err = matmul(&m(2, 3, &[0.; 6]), &m(2, 2, &[0.; 4]));
        assert!(matches!(err, Err(MiraError::Shape(_))));
    }

    #[test]
    fn matmul_gradient_of_sum() {
        let b = m(2, 2, &[2., 0., 0., 3.]);
        let mut tape = Tape::new();
        let va = tape.leaf(m(2, 2, &[1., 1., 1., 1.]));
        let vb = tape.constant(b.clone());
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        let ga = g.wrt(va).unwrap();
        assert_eq!(ga.data(), &[2., 3., 2., 3.]);

        let fd = central_difference(
            |a| matmul(a, &b).unwrap().sum(),
            &m(2, 2, &[1., 1., 1., 1.]),
            DEFAULT_STEP,
        );
        assert!(relative_error(ga, &fd, RELATIVE_FLOOR) < 1e-8);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::vector(vec![-1.0, 2.0]));
        let r = tape.elementwise(Elementwise::Relu, x, None).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let z = tape.constant(Tensor::vector(vec![0.0]));
        let t = tape.elementwise(Elementwise::Tanh, z, None).unwrap();
        assert_eq!(tape.value(t).data(), &[0.0]);
        let y = tape.constant(Tensor::vector(vec![1.0]));
        assert!(tape.elementwise(Elementwise::Add, x, Some(y)).is_err());
        assert!(tape.elementwise(Elementwise::Relu, x, Some(y)).is_err());
    }

    #[test]
    fn tanh_derivative_at_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.5));
        let t = tape.tanh(x);
        let g = tape.backward(t).unwrap();
        let analytic = g.wrt(x).unwrap().data()[0];
        let fd = central_difference(|x| x.data()[0].tanh(), &Tensor::scalar(0.5), DEFAULT_STEP);
        assert!((analytic - 0.786448).abs() < 1e-6);
        assert!((analytic - fd.data()[0]).abs() < 1e-9);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&Tensor::vector(vec![0.0, 0.0])).data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::vector(vec![2f64.ln(), 0.0]));
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]));
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy(&Tensor::zeros(&[1, 4]), &[0]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        // −log σ(20) = log(1 + e^−20)
        let l = cross_entropy(&m(1, 2, &[10.0, -10.0]), &[0]).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((l - expected).abs() < 1e-12 * expected);
        assert!((l - 2.06e-9).abs() < 1e-11);
        let err = cross_entropy(&m(1, 2, &[0.0, 0.0]), &[2]);
        assert!(matches!(err, Err(MiraError::Input(_))));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = m(2, 3, &[0.3, -1.0, 2.0, 0.0, 0.5, -0.5]);
        let labels = [2, 0];
        let mut tape = Tape::new();
        let v = tape.leaf(logits.clone());
        let l = tape.cross_entropy(v, &labels).unwrap();
        let g = tape.backward(l).unwrap();
        let p = softmax(&logits);
        for b in 0..2 {
            for c in 0..3 {
                let onehot = if labels[b] == c { 1.0 } else { 0.0 };
                let expected = (p.at(b, c) - onehot) / 2.0;
                assert!((g.wrt(v).unwrap().at(b, c) - expected).abs() < 1e-15);
            }
        }
        let fd = central_difference(
            |x| cross_entropy(x, &labels).unwrap(),
            &logits,
            DEFAULT_STEP,
        );
        assert!(relative_error(g.wrt(v).unwrap(), &fd, RELATIVE_FLOOR) < 1e-8);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.5, -2.0]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[4.0, -3.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let before = grad_records();
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.tanh(x);
        let _ = tape.sum(y);
        assert_eq!(tape.record_count(), 0);
        assert_eq!(grad_records(), before);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]));
        let c = tape.constant(Tensor::vector(vec![2.0]));
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn sum_normalize_degenerate_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(2, 2, &[1.0, -1.0, 1.0, 3.0]));
        let (y, mask) = tape.sum_normalize_rows(x, 1e-8);
        assert_eq!(mask, vec![true, false]);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.25, 0.75]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(&g.wrt(x).unwrap().data()[..2], &[0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-1e3f64..1e3, 1..32)) {
            let s = softmax(&Tensor::vector(v));
            prop_assert!((s.sum() - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
