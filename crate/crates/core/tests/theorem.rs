mod common;

use common::{rng, small16_config};
use proptest::prelude::*;
use protopart::data::Split;
use protopart::synth::blobs_dataset;
use protopart::theorem::{synthetic_instance, verify_latent, LatentInstance, Verdict};
use protopart::training::{stage1_sgd, TrainConfig};
use protopart::{
    project_prototypes, theorem_constants, verify_projection_theorem, ProtoPNet, Tensor,
};

#[test]
fn constants_by_direct_evaluation() {
    let (theta, dmax) = theorem_constants(0.5, 10).unwrap();
    assert!((dmax - 10.0 * 2.25f64.ln()).abs() < 1e-12);
    assert!((dmax - 8.1093).abs() < 1e-4);
    assert!((theta - (1.0 - 1.0 / 1.5f64.sqrt())).abs() < 1e-15);
    assert!((theta - 0.1835).abs() < 1e-4);
    // The other branch of the minimum is the larger one here.
    assert!(1.5f64.sqrt() - 1.0 > theta);

    let (_, dmax) = theorem_constants(0.5, 1).unwrap();
    assert!((dmax - 0.8109).abs() < 1e-4);

    let (theta, dmax) = theorem_constants(1e-12, 4).unwrap();
    assert!(theta < 1e-11);
    assert!((dmax - 4.0 * 2f64.ln()).abs() < 1e-9);
}

fn trained_pair() -> (ProtoPNet, ProtoPNet, protopart::Dataset) {
    let data = blobs_dataset(16, 8, 0, Split::Train);
    let mut model = ProtoPNet::build(small16_config(2, 2), 1).unwrap();
    let cfg = TrainConfig {
        stage1_epochs: 4,
        batch_size: 8,
        ..TrainConfig::default()
    };
    stage1_sgd(&mut model, &data, &cfg).unwrap();
    let before = model.clone();
    project_prototypes(&mut model, &data).unwrap();
    (before, model, data)
}

#[test]
fn identical_models_change_nothing() {
    let (before, _, data) = trained_pair();
    let r =
        verify_projection_theorem(&before, &before, &data.images[0], data.labels[0], 0.5).unwrap();
    assert!(r.logit_change.iter().all(|&c| c == 0.0));
    assert!(r.bound_satisfied);
    assert_ne!(r.verdict, Verdict::BoundViolated);
}

#[test]
fn real_projection_never_breaks_the_bound_when_hypotheses_hold() {
    let (before, after, data) = trained_pair();
    for delta in [0.1, 0.5, 0.9] {
        for (x, &y) in data.images.iter().zip(&data.labels) {
            let r = verify_projection_theorem(&before, &after, x, y, delta).unwrap();
            assert_ne!(r.verdict, Verdict::BoundViolated, "{}", r.to_text());
        }
    }
}

#[test]
fn mismatched_backbones_are_rejected() {
    let (before, _, data) = trained_pair();
    let other = ProtoPNet::build(small16_config(2, 2), 99).unwrap();
    assert!(verify_projection_theorem(&before, &other, &data.images[0], 0, 0.5).is_err());
}

#[test]
fn constructed_instance_respects_the_bound() {
    let mut r = rng(7);
    let inst = synthetic_instance(&mut r, 0.5, 3, 2, (3, 3), 4, 1e-4).unwrap();
    let report = verify_latent(&inst, 0.5).unwrap();
    assert!(report.assumptions_hold());
    assert_eq!(report.verdict, Verdict::BoundHolds);
}

#[test]
fn large_move_of_an_incorrect_class_prototype_voids_the_hypotheses() {
    let mut r = rng(8);
    let mut inst = synthetic_instance(&mut r, 0.5, 2, 2, (3, 3), 4, 1e-4).unwrap();
    let j = inst
        .allocation
        .iter()
        .position(|&k| k != inst.label)
        .unwrap();
    inst.after[j] = Tensor::full(&[1, 1, 4], 50.0);
    let report = verify_latent(&inst, 0.5).unwrap();
    assert!(!report.a2a);
    assert_eq!(report.verdict, Verdict::AssumptionsUnmet);
}

#[test]
fn uneven_prototype_counts_fail_a3() {
    let z = Tensor::new(vec![1, 2, 1], vec![0.0, 1.0]).unwrap();
    let p = |v: f64| Tensor::new(vec![1, 1, 1], vec![v]).unwrap();
    let inst = LatentInstance {
        latent: z,
        before: vec![p(0.0), p(0.1), p(3.0)],
        after: vec![p(0.0), p(0.1), p(3.0)],
        allocation: vec![0, 0, 1],
        num_classes: 2,
        epsilon: 1e-4,
        label: 0,
        native_last_layer: None,
    };
    let report = verify_latent(&inst, 0.5).unwrap();
    assert!(!report.a3);
    assert_eq!(report.verdict, Verdict::AssumptionsUnmet);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn constructed_instances_never_violate(
        seed in any::<u64>(),
        delta in prop::sample::select(vec![0.1, 0.3, 0.5, 0.7, 0.9]),
        k in 2usize..5,
        per_class in 1usize..4,
    ) {
        let mut r = rng(seed);
        let inst = synthetic_instance(&mut r, delta, k, per_class, (3, 3), 4, 1e-4).unwrap();
        let report = verify_latent(&inst, delta).unwrap();
        prop_assert!(report.assumptions_hold());
        prop_assert!(report.bound_satisfied);
        prop_assert!(!report.prediction_violation());
    }
}
