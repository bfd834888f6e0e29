//! Tape adjoints against central finite differences, plus algebraic laws.

use dtnet_core::gradcheck::{numeric_grad, relative_error, STEP};
use dtnet_core::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks every input's adjoint of `sum(build(inputs) * probe)` against
/// finite differences.
fn check<F>(inputs: &[Tensor<f64>], tol: f64, build: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        build(&tape, &vars).shape()
    };
    let probe = random(&probe_shape, &mut rng);
    let loss_of = |xs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&tape, &vars);
        out.mul(tape.constant(probe.clone())).unwrap().sum().unwrap().value().item()
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = build(&tape, &vars);
    let loss = out.mul(tape.constant(probe.clone())).unwrap().sum().unwrap();
    tape.backward(loss).unwrap();

    for (i, v) in vars.iter().enumerate() {
        let analytic = v.grad().unwrap();
        let numeric = numeric_grad(loss_of, inputs, i, STEP);
        let err = relative_error(&analytic, &numeric);
        assert!(err < tol, "input {i}: relative error {err:e} >= {tol:e}");
    }
}

#[test]
fn matmul_grad_of_sum_is_ones_times_bt() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let tape = Tape::new();
    let (av, bv) = (tape.var(a.clone()), tape.constant(b.clone()));
    tape.backward(av.matmul(bv).unwrap().sum().unwrap()).unwrap();
    let numeric = numeric_grad(
        |x| {
            let t = Tape::new();
            t.constant(x[0].clone()).matmul(t.constant(x[1].clone())).unwrap().sum().unwrap().value().item()
        },
        &[a, b.clone()],
        0,
        STEP,
    );
    assert!(relative_error(&av.grad().unwrap(), &numeric) < 1e-4);
    // ones(3x2) * B^T: every row equals the row sums of B.
    for r in 0..3 {
        for c in 0..4 {
            let want: f64 = b.row(c).iter().sum();
            assert!((av.grad().unwrap().get(&[r, c]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_batched_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check(&[random(&[2, 3, 4], &mut rng), random(&[2, 4, 5], &mut rng)], 1e-4, |_, v| v[0].matmul(v[1]).unwrap());
    check(&[random(&[2, 3, 4], &mut rng), random(&[4, 5], &mut rng)], 1e-4, |_, v| v[0].matmul(v[1]).unwrap());
    check(&[random(&[3, 4], &mut rng), random(&[2, 4, 5], &mut rng)], 1e-4, |_, v| v[0].matmul(v[1]).unwrap());
}

#[test]
fn linear_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [random(&[2, 3, 4], &mut rng), random(&[4, 5], &mut rng), random(&[5], &mut rng)];
    check(&inputs, 1e-4, |_, v| v[0].linear(v[1], Some(v[2])).unwrap());
    check(&inputs[..2], 1e-4, |_, v| v[0].linear(v[1], None).unwrap());
}

#[test]
fn softmax_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check(&[random(&[3, 5], &mut rng)], 1e-4, |_, v| v[0].softmax_lastdim().unwrap());
}

#[test]
fn batch_norm_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random(&[6, 3], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)];
    check(&inputs, 1e-3, |_, v| v[0].batch_norm_train(v[1], v[2], 1e-5).unwrap().0);
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    check(&inputs, 1e-4, |_, v| v[0].batch_norm_eval(v[1], v[2], &mean, &var, 1e-5).unwrap());
}

#[test]
fn elementwise_and_structural_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 3, 4], &mut rng);
    let c = random(&[2, 3, 2], &mut rng);
    check(&[a.clone(), b.clone()], 1e-4, |_, v| v[0].add(v[1]).unwrap());
    check(&[a.clone(), b.clone()], 1e-4, |_, v| v[0].sub(v[1]).unwrap());
    check(&[a.clone(), b.clone()], 1e-4, |_, v| v[0].mul(v[1]).unwrap());
    check(&[a.clone()], 1e-4, |_, v| v[0].scale(-2.5).unwrap());
    // keep away from the kink at zero
    let shifted = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
    check(&[shifted], 1e-4, |_, v| v[0].relu().unwrap());
    check(&[a.clone()], 1e-4, |_, v| v[0].transpose_last2().unwrap());
    check(&[a.clone(), c], 1e-4, |t, v| t.concat_lastdim(&[v[0], v[1], v[0]]).unwrap());
    check(&[a.clone()], 1e-4, |_, v| v[0].slice_lastdim(1, 2).unwrap());
    check(&[a.clone()], 1e-4, |_, v| v[0].reshape(&[6, 4]).unwrap());
    check(&[a.clone()], 1e-4, |_, v| v[0].sum().unwrap());
    check(&[a.clone()], 1e-4, |_, v| v[0].mean().unwrap());
    check(&[a.clone()], 1e-4, |_, v| v[0].gather_rows(&[5, 0, 0, 3]).unwrap());
    check(&[a.clone()], 1e-4, |_, v| v[0].max_over_rows().unwrap());
    check(&[a.clone()], 1e-4, |_, v| v[0].weighted_gather(&[0, 4, 5, 2, 2, 1], &[0.2, 0.3, 0.5, 0.9, 0.05, 0.05], 3).unwrap());
    check(&[random(&[4, 3], &mut rng)], 1e-4, |_, v| v[0].cross_entropy(&[0, 2, 1, 2]).unwrap());
}

#[test]
fn dropout_grad_uses_the_same_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[4, 6], &mut rng);
    check(&[x], 1e-4, |_, v| v[0].dropout_rows(0.4, &mut ChaCha8Rng::seed_from_u64(11)).unwrap());
}

#[test]
fn dropout_zero_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[4, 6], &mut rng);
    let tape = Tape::new();
    let y = tape.constant(x.clone()).dropout_rows(0.0, &mut rng).unwrap();
    assert_eq!(*y.value(), x);
}

#[test]
fn fused_graph_matches_manual_chain() {
    // relu(x W): the tape's adjoint versus the hand-applied chain rule.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[5, 4], &mut rng);
    let w = random(&[4, 3], &mut rng);
    let tape = Tape::new();
    let (xv, wv) = (tape.var(x.clone()), tape.var(w.clone()));
    let h = xv.matmul(wv).unwrap();
    let y = h.relu().unwrap();
    tape.backward(y.sum().unwrap()).unwrap();

    let hv = h.value();
    let gh: Vec<f64> = hv.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    let mut gw = vec![0.0; 12];
    let mut gx = vec![0.0; 20];
    for i in 0..5 {
        for j in 0..3 {
            for p in 0..4 {
                gw[p * 3 + j] += x.get(&[i, p]) * gh[i * 3 + j];
                gx[i * 4 + p] += gh[i * 3 + j] * w.get(&[p, j]);
            }
        }
    }
    let dw = wv.grad().unwrap();
    let dx = xv.grad().unwrap();
    for (a, b) in dw.data().iter().zip(&gw) {
        assert!((a - b).abs() <= 1e-12);
    }
    for (a, b) in dx.data().iter().zip(&gx) {
        assert!((a - b).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_rows_normalize_and_ignore_shift(
        row in proptest::collection::vec(-20.0f64..20.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let n = row.len();
        let tape = Tape::new();
        let s = tape.constant(Tensor::new([1, n], row.clone()).unwrap()).softmax_lastdim().unwrap();
        let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
        let s2 = tape.constant(Tensor::new([1, n], shifted).unwrap()).softmax_lastdim().unwrap();
        let total: f64 = s.value().data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(s.value().data().iter().all(|&p| p >= 0.0));
        prop_assert!(s.value().max_abs_diff(&s2.value()) < 1e-6);
    }

    #[test]
    fn concat_then_split_is_exact(
        rows in 1usize..5,
        wa in 1usize..4,
        wb in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[rows, wa], &mut rng);
        let b = random(&[rows, wb], &mut rng);
        let tape = Tape::new();
        let joined = tape.constant(a.clone()).concat_lastdim(tape.constant(b.clone())).unwrap();
        let parts = joined.split_lastdim(&[wa, wb]).unwrap();
        prop_assert_eq!(&*parts[0].value(), &a);
        prop_assert_eq!(&*parts[1].value(), &b);
    }
}
