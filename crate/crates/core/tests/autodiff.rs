mod common;

use common::{assert_gradients, randn, rng};
use lider_core::{sgd_step, MlpBackbone, Tape, Tensor};
use proptest::prelude::*;

const H: f64 = 1e-4;

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut r = rng(11);
    let a = randn(&mut r, 4, 3);
    let b = randn(&mut r, 3, 2);
    let w = randn(&mut r, 4, 2);
    // Weighted sum so every output element gets a distinct upstream gradient.
    assert_gradients(
        &[a, b, w],
        |_, v| v[0].matmul(v[1]).unwrap().sub(v[2]).unwrap().mse(v[2].scale(0.0)).unwrap(),
        H,
        1e-5,
        1e-9,
    );
}

#[test]
fn l2_normalize_gradient_matches_central_differences() {
    let mut r = rng(12);
    let a = randn(&mut r, 4, 3);
    let w = randn(&mut r, 3, 4);
    assert_gradients(
        &[a, w],
        |_, v| v[0].l2_normalize_rows().unwrap().matmul(v[1]).unwrap().relu().sum(),
        H,
        1e-4,
        1e-8,
    );
}

#[test]
fn cross_entropy_gradient_matches_central_differences() {
    let mut r = rng(13);
    let logits = randn(&mut r, 5, 4);
    assert_gradients(&[logits.clone()], |_, v| v[0].softmax_cross_entropy(&[0, 3, 1, 2, 3], None).unwrap(), H, 1e-4, 1e-9);
    assert_gradients(&[logits], |_, v| v[0].softmax_cross_entropy(&[2, 3, 3, 2, 2], Some(&[2, 3])).unwrap(), H, 1e-4, 1e-9);
}

#[test]
fn masked_classes_get_exactly_zero_gradient() {
    let tape = Tape::new();
    let logits = tape.param(randn(&mut rng(14), 3, 5));
    let loss = logits.softmax_cross_entropy(&[1, 4, 1], Some(&[1, 4])).unwrap();
    let g = tape.backward(loss).unwrap().wrt(logits);
    for r in 0..3 {
        for c in [0, 2, 3] {
            assert_eq!(g.get(r, c), 0.0);
        }
    }
}

#[test]
fn mse_gradient_is_two_diff_over_n() {
    let mut r = rng(15);
    let a = randn(&mut r, 3, 4);
    let b = randn(&mut r, 3, 4);
    let tape = Tape::new();
    let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
    let g = tape.backward(va.mse(vb).unwrap()).unwrap().wrt(va);
    for i in 0..12 {
        let expect = 2.0 * (a.data()[i] - b.data()[i]) / 12.0;
        assert!((g.data()[i] - expect).abs() < 1e-15);
    }
    assert_gradients(&[a, b], |_, v| v[0].mse(v[1]).unwrap(), H, 1e-4, 1e-9);
}

#[test]
fn abs_mean_gradient_away_from_zero() {
    // Entries bounded away from the kink.
    let a = Tensor::matrix(2, 3, vec![-1.3, 0.4, 2.2, -0.7, 0.9, -2.5]).unwrap();
    assert_gradients(&[a], |_, v| v[0].abs_mean().unwrap(), H, 1e-4, 1e-10);
}

#[test]
fn composite_mlp_loss_on_every_weight() {
    let model = MlpBackbone::new(&[5, 7, 6, 4], 3).unwrap();
    let x = randn(&mut rng(16), 6, 5);
    let labels = [0, 1, 2, 3, 1, 0];
    let stored = randn(&mut rng(17), 6, 4);
    assert_gradients(
        model.weights(),
        |tape, w| {
            let xv = tape.constant(x.clone());
            let mut h = xv;
            for (k, wk) in w.iter().enumerate() {
                h = h.matmul(*wk).unwrap();
                if k + 1 < w.len() {
                    h = h.relu();
                }
            }
            let ce = h.softmax_cross_entropy(&labels, None).unwrap();
            let reg = h.mse(tape.constant(stored.clone())).unwrap().scale(0.3);
            ce.add(reg).unwrap()
        },
        H,
        1e-3,
        1e-8,
    );
}

#[test]
fn second_backward_is_rejected() {
    let tape = Tape::new();
    let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let s = w.sum();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(lider_core::Error::TapeConsumed)));
}

#[test]
fn sgd_steps_compose() {
    let mut p = [Tensor::vector(vec![1.0, -2.0])];
    let g = [Tensor::vector(vec![2.0, 0.5])];
    sgd_step(&mut p, &g, 0.1).unwrap();
    sgd_step(&mut p, &g, 0.1).unwrap();
    let mut q = [Tensor::vector(vec![1.0, -2.0])];
    sgd_step(&mut q, &[Tensor::vector(vec![4.0, 1.0])], 0.1).unwrap();
    for (a, b) in p[0].data().iter().zip(q[0].data()) {
        assert!((a - b).abs() < 1e-15);
    }
    let bad = [Tensor::vector(vec![f64::NAN, 0.0])];
    assert!(sgd_step(&mut p, &bad, 0.1).is_err());
    assert!(sgd_step(&mut p, &g, 0.0).is_err());
}

fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_matmul_relu_chains(a in small_matrix(3, 4), b in small_matrix(4, 3)) {
        // Relu kinks make central differences unreliable within h of zero.
        let pre = a.matmul(&b).unwrap();
        prop_assume!(pre.data().iter().all(|v| v.abs() > 1e-3));
        assert_gradients(&[a, b], |_, v| v[0].matmul(v[1]).unwrap().relu().sum(), H, 1e-3, 1e-7);
    }

    #[test]
    fn random_normalize_and_cross_entropy(a in small_matrix(4, 3), w in small_matrix(3, 3)) {
        prop_assume!((0..4).all(|r| a.row(r).iter().map(|x| x * x).sum::<f64>() > 1e-2));
        assert_gradients(
            &[a, w],
            |_, v| v[0].l2_normalize_rows().unwrap().matmul(v[1]).unwrap().softmax_cross_entropy(&[0, 1, 2, 1], None).unwrap(),
            H,
            1e-3,
            1e-8,
        );
    }

    #[test]
    fn random_transposed_products(a in small_matrix(3, 2), b in small_matrix(3, 4)) {
        prop_assume!(a.matmul_tn(&b).unwrap().data().iter().all(|v| v.abs() > 1e-3));
        assert_gradients(&[a, b], |_, v| v[0].t().unwrap().matmul(v[1]).unwrap().abs_mean().unwrap().scale(2.0), H, 1e-3, 1e-6);
    }

    #[test]
    fn masked_softmax_sums_to_one(logits in small_matrix(3, 6)) {
        let tape = Tape::new();
        let mask = [1usize, 3, 4];
        // The loss for label c is −ln p_c; Σ exp(−loss_c) over the mask is Σ p_c.
        for r in 0..3 {
            let row = tape.constant(Tensor::matrix(1, 6, logits.row(r).to_vec()).unwrap());
            let total: f64 = mask
                .iter()
                .map(|&c| (-row.softmax_cross_entropy(&[c], Some(&mask)).unwrap().item().unwrap()).exp())
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
