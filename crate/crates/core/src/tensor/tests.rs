use std::sync::Arc;

use super::*;

fn m(rows: usize, cols: usize, v: &[f32]) -> Tensor {
    Tensor::matrix(rows, cols, v.to_vec()).unwrap()
}

#[test]
fn matmul_identity() {
    let a = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let out = forward_op(&Op::MatMul, &[&a, &Tensor::eye(2)]).unwrap();
    assert_eq!(out, a);
}

#[test]
fn matmul_shape_mismatch() {
    let a = m(2, 3, &[0.0; 6]);
    let err = forward_op(&Op::MatMul, &[&a, &a]).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
}

#[test]
fn batch_matmul_broadcasts_rank_two() {
    let a = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = m(2, 1, &[1.0, 1.0]);
    let out = forward_op(&Op::BatchMatMul, &[&a, &b]).unwrap();
    assert_eq!(out.shape(), &[2, 1, 1]);
    assert_eq!(out.data(), &[3.0, 7.0]);
}

#[test]
fn softmax_uniform_row() {
    let x = Tensor::vector(vec![0.0, 0.0, 0.0]);
    let y = forward_op(&Op::Softmax, &[&x]).unwrap();
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
}

#[test]
fn cosine_scale_invariant() {
    let v = Tensor::vector(vec![0.3, -1.2, 2.0]);
    let w = v.map(|x| 2.0 * x);
    let c = forward_op(&Op::Cosine, &[&v, &w]).unwrap();
    assert!((c.item() - 1.0).abs() < 1e-6);
}

#[test]
fn add_broadcasts_row_vector_only() {
    let a = m(2, 3, &[1.0; 6]);
    let row = Tensor::vector(vec![1.0, 2.0, 3.0]);
    let out = forward_op(&Op::Add, &[&a, &row]).unwrap();
    assert_eq!(out.data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
    let col = Tensor::vector(vec![1.0, 2.0]);
    assert!(forward_op(&Op::Add, &[&a, &col]).is_err());
}

#[test]
fn gather_zero_fills_missing_rows() {
    let x = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let idx = Arc::new(vec![Some(1), None, Some(0)]);
    let out = forward_op(&Op::Gather(idx), &[&x]).unwrap();
    assert_eq!(out.data(), &[3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
}

#[test]
fn strict_tape_rejects_non_finite() {
    let tape = Tape::strict();
    let x = tape.leaf(Tensor::vector(vec![f32::MAX, f32::MAX]));
    let err = x.scale(10.0).unwrap_err();
    assert!(matches!(err, Error::NonFinite("scale")));
    let lax = Tape::new();
    let y = lax.leaf(Tensor::vector(vec![f32::MAX]));
    assert!(y.scale(10.0).is_ok());
}

#[test]
fn sum_gradient_is_ones() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 5.0]));
    let loss = x.sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).data(), &[1.0, 1.0, 1.0]);
    assert_eq!(g.get(loss).data(), &[1.0]);
}

#[test]
fn mse_chain_rule_by_hand() {
    // loss = (w x - y)^2, dloss/dw = 2 (w x - y) x = 8
    let tape = Tape::new();
    let w = tape.leaf(Tensor::scalar(1.0));
    let x = tape.constant(Tensor::scalar(2.0));
    let y = tape.constant(Tensor::scalar(0.0));
    let loss = w.mul(x).unwrap().mse(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).item(), 8.0);
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::NotScalarLoss(_))));
}

#[test]
fn disconnected_node_gets_zeros() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let unused = tape.leaf(Tensor::vector(vec![3.0, 4.0, 5.0]));
    let loss = x.sum_squares().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(unused), Tensor::zeros(vec![3]));
}

#[test]
fn backward_is_repeatable() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.1, -0.4, 0.9]));
    let loss = x.softmax().unwrap().mul(x).unwrap().sum().unwrap();
    let a = tape.backward(loss).unwrap().get(x);
    let b = tape.backward(loss).unwrap().get(x);
    assert_eq!(a.data(), b.data());
}

#[test]
fn reshape_transpose_gradients_are_exact() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.75]).unwrap());
    let w = tape.constant(Tensor::matrix(2, 3, vec![1.5, 2.0, -3.0, 0.5, 0.125, 4.0]).unwrap());
    let direct = x.mul(w).unwrap().sum().unwrap();
    let gd = tape.backward(direct).unwrap().get(x);
    let routed = x
        .reshape(vec![3, 2])
        .unwrap()
        .reshape(vec![2, 3])
        .unwrap()
        .transpose()
        .unwrap()
        .transpose()
        .unwrap()
        .mul(w)
        .unwrap()
        .sum()
        .unwrap();
    let gr = tape.backward(routed).unwrap().get(x);
    assert_eq!(gd.data(), gr.data());
}

struct SoftmaxSum;

impl ScalarFn for SoftmaxSum {
    fn eval<'t, E: Element>(&self, _tape: &'t Tape<E>, x: Var<'t, E>) -> crate::Result<Var<'t, E>> {
        let w = x.constant(TensorOf::new(vec![4], vec![E::of(0.3), E::of(-1.0), E::of(2.0), E::of(0.5)])?);
        x.softmax()?.mul(w)?.sum()
    }
}

struct Constant;

impl ScalarFn for Constant {
    fn eval<'t, E: Element>(&self, _tape: &'t Tape<E>, x: Var<'t, E>) -> crate::Result<Var<'t, E>> {
        x.scale(0.0)?.sum()
    }
}

struct SumSquares;

impl ScalarFn for SumSquares {
    fn eval<'t, E: Element>(&self, _tape: &'t Tape<E>, x: Var<'t, E>) -> crate::Result<Var<'t, E>> {
        x.sum_squares()
    }
}

#[test]
fn grad_check_examples() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(vec![4], 1.0, &mut rng);
    let r = grad_check(&SoftmaxSum, &x, &GradCheck::with_tol(1e-4));
    assert!(r.passed, "{r:?}");

    let x = Tensor::randn(vec![4, 4], 1.0, &mut rng);
    let r = grad_check(&SumSquares, &x, &GradCheck::with_tol(1e-4));
    assert!(r.passed, "{r:?}");

    let r = grad_check(&Constant, &x, &GradCheck::with_tol(1e-4));
    assert!(r.passed && r.max_rel_err == 0.0, "{r:?}");
}
