mod common;

use common::{randn, rng};
use lider_core::analysis::{
    buffer_guessing_auc, decision_surface, decision_value, fgsm_direction, robustness_score, roc_auc_rank, roc_curve,
    weight_perturbation_robustness, ProbeConfig,
};
use lider_core::benchmark::{make_synthetic_stream, run_experiment, SyntheticSpec};
use lider_core::rehearsal::methods::TrainConfig;
use lider_core::rehearsal::{MethodConfig, MethodKind};
use lider_core::{MlpBackbone, Tensor};
use proptest::prelude::*;

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[test]
fn fgsm_matches_closed_form_in_a_linear_region() {
    // Positive first layer and positive input: every ReLU is active, so the
    // network is the linear map W = W1·W2 around x.
    let mut r = rng(40);
    let w1 = randn(&mut r, 4, 6).map(f64::abs);
    let w2 = randn(&mut r, 6, 3);
    let model = MlpBackbone::from_weights(&[4, 6, 3], vec![w1.clone(), w2.clone()]).unwrap();
    let x = vec![0.3, 1.2, 0.7, 0.1];
    let w = w1.matmul(&w2).unwrap();
    let xt = Tensor::matrix(1, 4, x.clone()).unwrap();
    let z = xt.matmul(&w).unwrap();
    for class in 0..3 {
        let mut delta = softmax(z.data());
        delta[class] -= 1.0;
        // ∂CE/∂x = (p − e_y)·Wᵀ
        let grad: Vec<f64> = (0..4).map(|i| (0..3).map(|k| delta[k] * w.get(i, k)).sum()).collect();
        let signs: Vec<f64> = grad.iter().map(|g| g.signum()).collect();
        let norm = (signs.len() as f64).sqrt();
        let got = fgsm_direction(&model, &x, class, 0).unwrap();
        assert!(!got.fallback);
        for (a, b) in got.direction.iter().zip(&signs) {
            assert!((a - b / norm).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_gradient_falls_back_to_a_random_unit_direction() {
    let model = MlpBackbone::from_weights(&[2, 2, 2], vec![Tensor::zeros(&[2, 2]), Tensor::identity(2)]).unwrap();
    let d = fgsm_direction(&model, &[1.0, 1.0], 0, 9).unwrap();
    assert!(d.fallback);
    let n: f64 = d.direction.iter().map(|v| v * v).sum();
    assert!((n - 1.0).abs() < 1e-12);
    assert_eq!(d, fgsm_direction(&model, &[1.0, 1.0], 0, 9).unwrap());
}

#[test]
fn full_mask_equals_no_mask() {
    let model = MlpBackbone::new(&[5, 8, 4], 1).unwrap();
    let mut r = rng(2);
    for _ in 0..50 {
        let x = randn(&mut r, 1, 5);
        for t in 0..4 {
            let a = decision_value(&model, x.data(), t, None).unwrap();
            let b = decision_value(&model, x.data(), t, Some(&[0, 1, 2, 3])).unwrap();
            assert_eq!(a, b);
        }
    }
    assert!(decision_value(&model, &[0.0; 5], 3, Some(&[0, 1])).is_err());
}

#[test]
fn surface_center_is_the_point_margin() {
    let model = MlpBackbone::new(&[3, 8, 4], 5).unwrap();
    let x = [0.4, -0.2, 1.0];
    let g = decision_surface(&model, &x, 2, 0.5, 11, 3, None).unwrap();
    assert_eq!(g.size(), 11);
    assert_eq!(g.coords[5], 0.0);
    assert_eq!((g.coords[0], g.coords[10]), (-0.5, 0.5));
    assert_eq!(g.center_value(), decision_value(&model, &x, 2, None).unwrap());
    let csv = g.to_csv();
    assert_eq!(csv.lines().count(), 1 + 11 * 11);
}

#[test]
fn masked_surface_ignores_other_task_logits() {
    let model = MlpBackbone::new(&[4, 10, 6], 12).unwrap();
    let x = [0.3, -0.7, 1.1, 0.2];
    let mask = [2, 3];
    let base = decision_surface(&model, &x, 3, 0.8, 7, 5, Some(&mask)).unwrap();
    let mut other = model.clone();
    let mut r = rng(13);
    let last = other.weights_mut().last_mut().unwrap();
    for row in 0..last.rows() {
        for col in [0, 1, 4, 5] {
            let noise = randn(&mut r, 1, 1).data()[0];
            last.data_mut()[row * 6 + col] += noise;
        }
    }
    let moved = decision_surface(&other, &x, 3, 0.8, 7, 5, Some(&mask)).unwrap();
    assert_eq!(base, moved);
    assert_ne!(
        decision_surface(&model, &x, 3, 0.8, 7, 5, None).unwrap().values,
        decision_surface(&other, &x, 3, 0.8, 7, 5, None).unwrap().values
    );
}

fn trapezoid(points: &[lider_core::analysis::RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

fn labelled() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    // Small score alphabet so ties are common.
    prop::collection::vec((0u8..12, any::<bool>()), 2..80)
        .prop_filter("both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1))
        .prop_map(|v| v.into_iter().map(|(s, b)| (s as f64 * 0.25, b)).unzip())
}

proptest! {
    #[test]
    fn rank_auc_equals_trapezoid_auc((scores, pos) in labelled()) {
        let rank = roc_auc_rank(&scores, &pos).unwrap();
        let curve = roc_curve(&scores, &pos).unwrap();
        let last = curve.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        prop_assert!((rank - trapezoid(&curve)).abs() < 1e-9);
    }

    #[test]
    fn auc_ignores_monotone_transforms((scores, pos) in labelled(), a in 0.1..10.0f64, b in -5.0..5.0f64) {
        let base = roc_auc_rank(&scores, &pos).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let expo: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        prop_assert!((roc_auc_rank(&affine, &pos).unwrap() - base).abs() < 1e-12);
        prop_assert!((roc_auc_rank(&expo, &pos).unwrap() - base).abs() < 1e-12);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_auc_rank(&flipped, &pos).unwrap() - (1.0 - base)).abs() < 1e-12);
    }
}

#[test]
fn analysis_never_touches_the_weights() {
    let spec = SyntheticSpec {
        n_tasks: 2,
        train_per_class: 40,
        test_per_class: 20,
        ..SyntheticSpec::default()
    };
    let stream = make_synthetic_stream(&spec, 1).unwrap();
    let run = run_experiment(&stream, &MethodConfig::new(MethodKind::Er).with_capacity(20), None, &TrainConfig::default(), 0)
        .unwrap();
    let model = run.model.clone();
    let bytes = model.to_json().unwrap();
    let t0 = &stream.tasks[0];
    let x = t0.test.features.row(0).to_vec();
    let y = t0.test.labels[0];

    fgsm_direction(&model, &x, y, 0).unwrap();
    decision_surface(&model, &x, y, 1.0, 5, 0, None).unwrap();
    robustness_score(&model, &x, y, &t0.classes, 8, 0.1, 0).unwrap();
    let probe = ProbeConfig {
        n_perturb: 4,
        ..ProbeConfig::default()
    };
    let guess = buffer_guessing_auc(&model, &run.buffer, &t0.train, &t0.classes, &probe).unwrap();
    assert!((0.0..=1.0).contains(&guess.auc));
    assert_eq!(guess.in_buffer.iter().filter(|b| **b).count(), run.buffer.iter().filter(|e| e.task_id == 0).count());
    weight_perturbation_robustness(&model, &stream.test_union(1).unwrap(), &[0.0, 0.5], 3, 0).unwrap();

    assert_eq!(model, run.model);
    assert_eq!(model.to_json().unwrap(), bytes);
}

#[test]
fn accuracy_falls_as_weight_noise_grows() {
    let spec = SyntheticSpec {
        n_tasks: 2,
        train_per_class: 100,
        test_per_class: 50,
        ..SyntheticSpec::default()
    };
    let stream = make_synthetic_stream(&spec, 3).unwrap();
    let train = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let run = run_experiment(&stream, &MethodConfig::new(MethodKind::Joint), None, &train, 0).unwrap();
    let test = stream.test_union(1).unwrap();
    let sigmas = [0.0, 0.25, 0.5, 1.0, 2.0];
    let pts = weight_perturbation_robustness(&run.model, &test, &sigmas, 20, 4).unwrap();
    assert_eq!(pts[0].std_acc, 0.0);
    let clean = lider_core::benchmark::class_il_accuracy(&run.model, &test).unwrap();
    assert_eq!(pts[0].mean_acc, clean);
    for w in pts.windows(2) {
        assert!(w[1].mean_acc <= w[0].mean_acc, "{:?}", pts);
    }
    assert!(pts[4].mean_acc < pts[0].mean_acc - 0.2);
    assert!(weight_perturbation_robustness(&run.model, &test, &[-0.1], 1, 0).is_err());
}
