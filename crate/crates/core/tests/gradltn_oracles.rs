mod common;

use common::{random_examples, rng, small_federation};
use fedselect_core::data::LabeledExample;
use fedselect_core::gradltn::{
    epoch_seed, reassemble, run_gradltn, run_gradltn_observed, train_masked, GradLtnConfig, ReturnPoint, StepObserver,
    StopCondition, TrainSettings,
};
use fedselect_core::mask::MaskVector;
use fedselect_core::model::{dataset_loss, grad, init_params, sgd_step_masked, Batch, ModelSpec, ParamVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn cfg(iterations: usize, keep: f64) -> GradLtnConfig {
    GradLtnConfig {
        iterations,
        keep_fraction: keep,
        epochs: 2,
        lr: 0.05,
        batch_size: 5,
        return_point: ReturnPoint::RoundStart,
        stop: StopCondition::default(),
    }
}

/// Independent integer recurrence: `P -> round(p * P)`, applied `L - 1` times.
fn recurrence(total: usize, keep: f64, iterations: usize) -> usize {
    let mut n = total as i64;
    for _ in 1..iterations {
        n = (keep * n as f64).round() as i64;
    }
    n as usize
}

/// Plain SGD, written out without masks.
fn plain_sgd(theta: &ParamVector, data: &[LabeledExample], s: TrainSettings, seed: u64) -> Vec<ParamVector> {
    let mut trace = vec![theta.clone()];
    let mut p = theta.values().to_vec();
    for epoch in 0..s.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
        for chunk in order.chunks(s.batch_size) {
            let pv = ParamVector::new(theta.spec().clone(), p.clone()).unwrap();
            let g = grad(&pv, &Batch::from_examples(chunk.iter().map(|&i| &data[i])).unwrap()).unwrap();
            for (x, gi) in p.iter_mut().zip(g.values()) {
                *x -= s.lr * gi;
            }
            trace.push(ParamVector::new(theta.spec().clone(), p.clone()).unwrap());
        }
    }
    trace
}

struct Recorder(Vec<ParamVector>);

impl StepObserver for Recorder {
    fn on_step(&mut self, _: &ParamVector, after: &ParamVector, _: &MaskVector) {
        self.0.push(after.clone());
    }
}

#[test]
fn all_ones_training_is_plain_sgd_step_for_step() {
    let (_, theta, clients) = small_federation(2, 4);
    let s = TrainSettings {
        epochs: 3,
        lr: 0.05,
        batch_size: 7,
    };
    let oracle = plain_sgd(&theta, &clients[0].train, s, 99);
    let mut rec = Recorder(vec![theta.clone()]);
    let out = fedselect_core::gradltn::train_masked_observed(
        &theta,
        &MaskVector::ones(theta.len()),
        &clients[0].train,
        s,
        99,
        &mut rec,
    )
    .unwrap();
    assert_eq!(rec.0.len(), oracle.len());
    for (a, b) in rec.0.iter().zip(&oracle) {
        assert_eq!(a, b);
    }
    assert_eq!(&out, oracle.last().unwrap());
}

#[test]
fn all_zero_mask_returns_input() {
    let (_, theta, clients) = small_federation(1, 4);
    let s = TrainSettings {
        epochs: 2,
        lr: 0.1,
        batch_size: 4,
    };
    let out = train_masked(&theta, &MaskVector::zeros(theta.len()), &clients[0].train, s, 1).unwrap();
    assert_eq!(out, theta);
}

#[test]
fn masked_training_descends_on_separable_toy() {
    let spec = ModelSpec::new(2, vec![4], 2).unwrap();
    let data: Vec<LabeledExample> = (0..20)
        .map(|i| {
            let label = i % 2;
            let sign = if label == 0 { -1.0 } else { 1.0 };
            LabeledExample {
                features: vec![sign * (1.0 + 0.05 * i as f64), sign * 0.5],
                label,
            }
        })
        .collect();
    let theta = init_params(&spec, 3).unwrap();
    let mask = MaskVector::from_indices(theta.len(), (0..theta.len()).step_by(2)).unwrap();
    let s = TrainSettings {
        epochs: 5,
        lr: 0.01,
        batch_size: 4,
    };
    let out = train_masked(&theta, &mask, &data, s, 8).unwrap();
    assert!(dataset_loss(&out, &data).unwrap() <= dataset_loss(&theta, &data).unwrap());
    for i in mask.not().ones_indices() {
        assert_eq!(out.values()[i].to_bits(), theta.values()[i].to_bits());
    }
}

#[test]
fn single_iteration_personalizes_everything() {
    let (_, theta, clients) = small_federation(1, 2);
    let r = run_gradltn(&theta, &clients[0].train, &cfg(1, 0.5), 1).unwrap();
    assert_eq!(r.mask, MaskVector::ones(theta.len()));
    assert_eq!(r.personal_v(), theta.values());
    assert!(r.shared_u().is_empty());
    assert_eq!(r.personal_fraction(), 1.0);
}

#[test]
fn zero_keep_fraction_shares_everything() {
    let (_, theta, clients) = small_federation(1, 2);
    let r = run_gradltn(&theta, &clients[0].train, &cfg(2, 0.0), 1).unwrap();
    assert_eq!(r.mask.count_ones(), 0);
    assert_eq!(r.shared_u(), theta.values());
}

#[test]
fn popcounts_follow_integer_recurrence() {
    let (_, theta, clients) = small_federation(1, 6);
    for &(keep, l) in &[(0.5, 5), (0.25, 3), (0.75, 4), (0.33, 6)] {
        let r = run_gradltn(&theta, &clients[0].train, &cfg(l, keep), 3).unwrap();
        assert_eq!(
            r.mask.count_ones(),
            recurrence(theta.len(), keep, l),
            "keep {keep} L {l}"
        );
        for (i, &c) in r.popcounts.iter().enumerate() {
            assert_eq!(c, recurrence(theta.len(), keep, i + 1));
        }
    }
}

#[test]
fn masks_nest_across_iterations() {
    // Iteration seeds do not depend on L, so the run with L iterations is a
    // prefix of the run with L + 1.
    let (_, theta, clients) = small_federation(1, 9);
    let mut prev = MaskVector::ones(theta.len());
    for l in 1..=5 {
        let r = run_gradltn(&theta, &clients[0].train, &cfg(l, 0.6), 21).unwrap();
        assert!(r.mask.is_subset_of(&prev), "iteration {l}");
        prev = r.mask;
    }
}

#[test]
fn round_start_reassembles_theta_0_bit_exactly() {
    let (spec, theta, clients) = small_federation(1, 12);
    let r = run_gradltn(&theta, &clients[0].train, &cfg(3, 0.5), 5).unwrap();
    let back = reassemble(&spec, &r.shared_u(), &r.personal_v(), &r.mask).unwrap();
    for (a, b) in back.values().iter().zip(theta.values()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn final_trained_returns_retrained_parameters() {
    let (_, theta, clients) = small_federation(1, 12);
    let mut c = cfg(3, 0.5);
    c.return_point = ReturnPoint::FinalTrained;
    let r = run_gradltn(&theta, &clients[0].train, &c, 5).unwrap();
    // Outside the final mask the parameters were frozen since the last rewind.
    for i in r.mask.not().ones_indices() {
        assert_eq!(r.params.values()[i], theta.values()[i]);
    }
    assert_ne!(r.params, theta);
}

#[test]
fn search_is_deterministic() {
    let (_, theta, clients) = small_federation(1, 30);
    let a = run_gradltn(&theta, &clients[0].train, &cfg(3, 0.5), 17).unwrap();
    let b = run_gradltn(&theta, &clients[0].train, &cfg(3, 0.5), 17).unwrap();
    assert_eq!(a, b);
}

#[test]
fn frozen_positions_never_move_during_search() {
    struct Check(usize);
    impl StepObserver for Check {
        fn on_step(&mut self, before: &ParamVector, after: &ParamVector, mask: &MaskVector) {
            for i in mask.not().ones_indices() {
                assert_eq!(before.values()[i].to_bits(), after.values()[i].to_bits());
            }
            self.0 += 1;
        }
    }
    let (_, theta, clients) = small_federation(1, 1);
    let mut check = Check(0);
    run_gradltn_observed(&theta, &clients[0].train, &cfg(4, 0.5), 2, &mut check).unwrap();
    assert_eq!(check.0, 4 * 2 * 4); // iterations * epochs * ceil(20 / 5)
}

#[test]
fn stop_on_target_fraction() {
    let (_, theta, clients) = small_federation(1, 1);
    let mut c = cfg(6, 0.5);
    c.stop.target_personal_fraction = Some(0.3);
    let r = run_gradltn(&theta, &clients[0].train, &c, 2).unwrap();
    // 1 -> 0.5 -> 0.25 stops pruning.
    assert_eq!(r.popcounts.len(), 3);
    assert!(r.personal_fraction() <= 0.3);
}

#[test]
fn stop_on_accuracy_floor_keeps_previous_mask() {
    let (_, theta, clients) = small_federation(1, 1);
    let mut c = cfg(4, 0.0);
    c.stop.min_train_accuracy = Some(1.01);
    let r = run_gradltn(&theta, &clients[0].train, &c, 2).unwrap();
    assert_eq!(r.mask, MaskVector::ones(theta.len()));
    assert_eq!(r.popcounts, vec![theta.len()]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn recurrence_holds_for_random_shapes(
        hidden in 1usize..20,
        keep in 0.0f64..1.0,
        l in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let spec = ModelSpec::new(3, vec![hidden], 3).unwrap();
        let theta = init_params(&spec, seed).unwrap();
        let data = random_examples(&mut r, 6, 3, 3);
        let mut c = cfg(l, keep);
        c.epochs = 1;
        let res = run_gradltn(&theta, &data, &c, seed).unwrap();
        prop_assert_eq!(res.mask.count_ones(), recurrence(theta.len(), keep, l));
    }

    #[test]
    fn sgd_step_is_consistent_with_train_masked(seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = ModelSpec::new(2, vec![3], 2).unwrap();
        let theta = init_params(&spec, seed).unwrap();
        let data = random_examples(&mut r, 3, 2, 2);
        let mask = MaskVector::ones(theta.len());
        let s = TrainSettings { epochs: 1, lr: 0.1, batch_size: 3 };
        let out = train_masked(&theta, &mask, &data, s, seed).unwrap();
        // One full batch: order does not matter for the mean gradient up to rounding.
        let g = grad(&theta, &Batch::from_examples(&data).unwrap()).unwrap();
        let manual = sgd_step_masked(&theta, &g, &mask, 0.1).unwrap();
        for (a, b) in out.values().iter().zip(manual.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
