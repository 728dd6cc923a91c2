mod common;

use std::collections::BTreeMap;

use common::{random_params, rng, small_federation};
use fedselect_core::data::LabeledExample;
use fedselect_core::gradltn::{train_masked, ReturnPoint, StepObserver, StopCondition, TrainSettings};
use fedselect_core::localalt::{personal_pass_seed, run_localalt, run_localalt_observed, LocalAltConfig, PassOrder};
use fedselect_core::mask::MaskVector;
use fedselect_core::model::{ModelSpec, ParamVector};
use fedselect_core::server::{
    aggregate_shared, client_seed, init_clients, run_fedavg, run_round, run_round_observed, AggregationConfig,
    ClientWeights, FedAvgConfig, FedAvgWeighting, FedSelectConfig, GlobalState, Sequential, SharedUpdate,
};
use proptest::prelude::*;
use rand::Rng;

fn la(epochs: usize) -> LocalAltConfig {
    LocalAltConfig {
        epochs,
        lr_u: 0.05,
        lr_v: 0.05,
        batch_size: 5,
        order: PassOrder::VFirst,
    }
}

fn fedselect(p: f64, seed: u64) -> FedSelectConfig {
    FedSelectConfig {
        participation: 1.0,
        personalization_rate: p,
        gradltn_iterations: 3,
        gradltn_epochs: 2,
        localalt: la(2),
        lr: 0.05,
        batch_size: 5,
        return_point: ReturnPoint::RoundStart,
        stop: StopCondition::default(),
        aggregation: AggregationConfig::default(),
        seed,
    }
}

#[test]
fn localalt_all_ones_leaves_shared_untouched() {
    let (_, theta, clients) = small_federation(1, 3);
    let out = run_localalt(&theta, &MaskVector::ones(theta.len()), &clients[0].train, &la(2), 4).unwrap();
    assert!(out.u_plus().is_empty());
    assert_ne!(out.params, theta);
}

#[test]
fn localalt_all_zeros_is_plain_sgd() {
    let (_, theta, clients) = small_federation(1, 3);
    let zeros = MaskVector::zeros(theta.len());
    let out = run_localalt(&theta, &zeros, &clients[0].train, &la(3), 4).unwrap();
    assert!(out.v_plus().is_empty());
    let plain = train_masked(
        &theta,
        &MaskVector::ones(theta.len()),
        &clients[0].train,
        TrainSettings {
            epochs: 3,
            lr: 0.05,
            batch_size: 5,
        },
        4,
    )
    .unwrap();
    assert_eq!(out.params, plain);
}

#[test]
fn localalt_one_epoch_is_composition_of_masked_passes() {
    // 1 input, 2 classes, no hidden layer: 4 parameters.
    let spec = ModelSpec::new(1, vec![], 2).unwrap();
    let theta = ParamVector::new(spec, vec![0.3, -0.2, 0.1, 0.0]).unwrap();
    let data: Vec<LabeledExample> = (0..6)
        .map(|i| LabeledExample {
            features: vec![i as f64 - 2.5],
            label: (i >= 3) as usize,
        })
        .collect();
    let mask = MaskVector::from_bits(vec![true, false, true, false]);
    let out = run_localalt(&theta, &mask, &data, &la(1), 10).unwrap();
    let s = TrainSettings {
        epochs: 1,
        lr: 0.05,
        batch_size: 5,
    };
    let v = train_masked(&theta, &mask, &data, s, personal_pass_seed(10)).unwrap();
    let uv = train_masked(&v, &mask.not(), &data, s, 10).unwrap();
    assert_eq!(out.params, uv);

    let mut cfg = la(1);
    cfg.order = PassOrder::UFirst;
    let out = run_localalt(&theta, &mask, &data, &cfg, 10).unwrap();
    let u = train_masked(&theta, &mask.not(), &data, s, 10).unwrap();
    let vu = train_masked(&u, &mask, &data, s, personal_pass_seed(10)).unwrap();
    assert_eq!(out.params, vu);
}

struct PartitionCheck {
    steps: usize,
}

impl StepObserver for PartitionCheck {
    fn on_step(&mut self, before: &ParamVector, after: &ParamVector, mask: &MaskVector) {
        for i in mask.not().ones_indices() {
            assert_eq!(before.values()[i].to_bits(), after.values()[i].to_bits());
        }
        self.steps += 1;
    }
}

#[test]
fn localalt_passes_respect_partitions() {
    let (_, theta, clients) = small_federation(1, 8);
    let mask = MaskVector::from_indices(theta.len(), (0..theta.len()).filter(|i| i % 3 == 0)).unwrap();
    let mut check = PartitionCheck { steps: 0 };
    run_localalt_observed(&theta, &mask, &clients[0].train, &la(2), 1, &mut check).unwrap();
    assert_eq!(check.steps, 2 * 2 * 4);
}

#[test]
fn localalt_is_deterministic() {
    let (_, theta, clients) = small_federation(1, 8);
    let mask = MaskVector::from_indices(theta.len(), 0..10).unwrap();
    let a = run_localalt(&theta, &mask, &clients[0].train, &la(2), 1).unwrap();
    let b = run_localalt(&theta, &mask, &clients[0].train, &la(2), 1).unwrap();
    assert_eq!(a, b);
    assert!(run_localalt(&theta, &mask, &[], &la(2), 1).is_err());
}

fn brute_force_aggregate(values: &[Vec<f64>], masks: &[Vec<bool>], prev: &[f64]) -> Vec<f64> {
    (0..prev.len())
        .map(|j| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for k in 0..values.len() {
                if !masks[k][j] {
                    sum += values[k][j];
                    count += 1;
                }
            }
            if count == 0 {
                prev[j]
            } else {
                sum / count as f64
            }
        })
        .collect()
}

#[test]
#[allow(clippy::needless_range_loop)]
fn aggregation_matches_bruteforce_on_random_instances() {
    let mut r = rng(100);
    for _ in 0..100 {
        let classes = r.random_range(2..9);
        let spec = ModelSpec::new(r.random_range(1..7), vec![], classes).unwrap();
        if spec.param_count() > 64 {
            continue;
        }
        let n = spec.param_count();
        let clients = r.random_range(1..9);
        let prev = random_params(&mut r, &spec, 5.0);
        let params: Vec<ParamVector> = (0..clients).map(|_| random_params(&mut r, &spec, 5.0)).collect();
        let masks: Vec<MaskVector> = (0..clients)
            .map(|_| MaskVector::from_bits((0..n).map(|_| r.random_bool(0.5)).collect()))
            .collect();
        let updates: Vec<SharedUpdate> = (0..clients)
            .map(|k| SharedUpdate {
                client_id: k,
                params: &params[k],
                mask: &masks[k],
            })
            .collect();
        let out = aggregate_shared(&updates, &prev, &ClientWeights::Uniform).unwrap();
        let oracle = brute_force_aggregate(
            &params.iter().map(|p| p.values().to_vec()).collect::<Vec<_>>(),
            &masks.iter().map(|m| m.as_bits().to_vec()).collect::<Vec<_>>(),
            prev.values(),
        );
        for j in 0..n {
            let all_personal = masks.iter().all(|m| m.get(j));
            if all_personal {
                assert_eq!(out.values()[j].to_bits(), prev.values()[j].to_bits());
            } else {
                assert!((out.values()[j] - oracle[j]).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_ignores_personal_values_and_order(seed in any::<u64>(), flip in 0usize..8, k in 1usize..6) {
        let mut r = rng(seed);
        let spec = ModelSpec::new(3, vec![], 2).unwrap(); // 8 params
        let prev = random_params(&mut r, &spec, 1.0);
        let mut params: Vec<ParamVector> = (0..k).map(|_| random_params(&mut r, &spec, 1.0)).collect();
        let masks: Vec<MaskVector> = (0..k)
            .map(|_| MaskVector::from_bits((0..8).map(|_| r.random_bool(0.4)).collect()))
            .collect();
        let build = |params: &[ParamVector], order: &[usize]| {
            let updates: Vec<SharedUpdate> = order
                .iter()
                .map(|&i| SharedUpdate { client_id: i, params: &params[i], mask: &masks[i] })
                .collect();
            aggregate_shared(&updates, &prev, &ClientWeights::Uniform).unwrap()
        };
        let forward: Vec<usize> = (0..k).collect();
        let reversed: Vec<usize> = (0..k).rev().collect();
        let base = build(&params, &forward);
        prop_assert_eq!(&base, &build(&params, &reversed));

        if masks[0].get(flip) {
            let mut v = params[0].values().to_vec();
            v[flip] += 123.0;
            params[0] = ParamVector::new(spec.clone(), v).unwrap();
            prop_assert_eq!(&base, &build(&params, &forward));
        }
    }
}

#[test]
fn single_client_round_takes_its_shared_values() {
    let (_, theta, datasets) = small_federation(1, 5);
    let mut clients = init_clients(datasets, &theta);
    let mut global = GlobalState::new(theta.clone());
    let cfg = fedselect(0.5, 7);
    let report = run_round(&mut global, &mut clients, &cfg, &Sequential).unwrap();
    assert_eq!(report.round, 1);
    assert_eq!(report.sampled, vec![0]);
    let mask = clients[0].mask.clone().unwrap();
    // Shared positions equal the global average of one client, personal
    // positions keep the initial global values there.
    for j in 0..theta.len() {
        if mask.get(j) {
            assert_eq!(global.theta.values()[j], theta.values()[j]);
        } else {
            assert_eq!(global.theta.values()[j], clients[0].theta.values()[j]);
        }
    }
    assert_eq!(global.mask, mask);
}

#[test]
fn zero_keep_round_reduces_to_fedavg() {
    let (_, theta, datasets) = small_federation(3, 13);
    let mut fs_clients = init_clients(datasets.clone(), &theta);
    let mut fa_clients = init_clients(datasets, &theta);
    let mut global = GlobalState::new(theta.clone());
    let cfg = fedselect(0.0, 42);
    run_round(&mut global, &mut fs_clients, &cfg, &Sequential).unwrap();

    let fa = FedAvgConfig {
        participation: 1.0,
        local_epochs: cfg.localalt.epochs,
        lr: cfg.localalt.lr_u,
        batch_size: cfg.localalt.batch_size,
        weighting: FedAvgWeighting::DatasetSize,
        seed: 42,
    };
    let (fa_theta, _) = run_fedavg(&mut fa_clients, &theta, 1, &fa, &Sequential).unwrap();
    for (a, b) in global.theta.values().iter().zip(fa_theta.values()) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn fedavg_with_identical_clients_equals_single_run() {
    let (_, theta, datasets) = small_federation(1, 2);
    let mut twins = datasets[0].clone();
    twins.client_id = 1;
    let both = vec![datasets[0].clone(), twins];
    let cfg = FedAvgConfig {
        participation: 1.0,
        local_epochs: 2,
        lr: 0.05,
        batch_size: 5,
        weighting: FedAvgWeighting::Uniform,
        seed: 0,
    };
    let mut pair = init_clients(both, &theta);
    let (avg, _) = run_fedavg(&mut pair, &theta, 1, &cfg, &Sequential).unwrap();
    let s = TrainSettings {
        epochs: 2,
        lr: 0.05,
        batch_size: 5,
    };
    let a = train_masked(
        &theta,
        &MaskVector::ones(theta.len()),
        &datasets[0].train,
        s,
        client_seed(0, 1, 0),
    )
    .unwrap();
    let b = train_masked(
        &theta,
        &MaskVector::ones(theta.len()),
        &datasets[0].train,
        s,
        client_seed(0, 1, 1),
    )
    .unwrap();
    for ((x, y), z) in avg.values().iter().zip(a.values()).zip(b.values()) {
        assert!((x - (y + z) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn fedavg_single_client_is_local_sgd() {
    let (_, theta, datasets) = small_federation(1, 2);
    let train = datasets[0].train.clone();
    let mut clients = init_clients(datasets, &theta);
    let cfg = FedAvgConfig {
        participation: 1.0,
        local_epochs: 3,
        lr: 0.05,
        batch_size: 5,
        weighting: FedAvgWeighting::DatasetSize,
        seed: 9,
    };
    let (out, reports) = run_fedavg(&mut clients, &theta, 1, &cfg, &Sequential).unwrap();
    let s = TrainSettings {
        epochs: 3,
        lr: 0.05,
        batch_size: 5,
    };
    let local = train_masked(&theta, &MaskVector::ones(theta.len()), &train, s, client_seed(9, 1, 0)).unwrap();
    assert_eq!(out, local);
    assert_eq!(reports.len(), 1);
    assert_eq!(clients[0].theta, out);
}

#[test]
fn round_bookkeeping_and_communication_identity() {
    let (_, theta, datasets) = small_federation(4, 21);
    let total = theta.len();
    let mut clients = init_clients(datasets, &theta);
    let mut global = GlobalState::new(theta);
    let cfg = fedselect(0.5, 3);
    let mut prev_mask = global.mask.clone();
    for round in 1..=3 {
        let report = run_round(&mut global, &mut clients, &cfg, &Sequential).unwrap();
        assert_eq!(report.round, round);
        assert_eq!(report.sampled.len(), 4);
        assert_eq!(report.clients.len(), 4);
        let mean = report.clients.iter().map(|c| c.accuracy).sum::<f64>() / 4.0;
        assert_eq!(report.mean_accuracy, mean);
        let expected: usize = clients
            .iter()
            .map(|c| 2 * 8 * c.mask.as_ref().unwrap().count_zeros() + total.div_ceil(8))
            .sum();
        assert_eq!(report.bytes_up() + report.bytes_down(), expected);
        assert!(prev_mask.is_subset_of(&global.mask));
        prev_mask = global.mask.clone();
    }
}

#[test]
fn partial_participation_updates_unsampled_clients() {
    let (_, theta, datasets) = small_federation(4, 21);
    let mut clients = init_clients(datasets, &theta);
    let mut global = GlobalState::new(theta);
    let mut cfg = fedselect(0.5, 3);
    cfg.participation = 0.5;
    let report = run_round(&mut global, &mut clients, &cfg, &Sequential).unwrap();
    assert_eq!(report.sampled.len(), 2);
    for c in &clients {
        let sampled = report.sampled.contains(&c.id);
        assert_eq!(c.mask.is_some(), sampled);
        if !sampled {
            for j in global.mask.not().ones_indices() {
                assert_eq!(c.theta.values()[j], global.theta.values()[j]);
            }
            assert_eq!(report.clients[c.id].bytes_up, 0);
        }
    }
}

#[test]
fn observed_round_matches_unobserved() {
    let (_, theta, datasets) = small_federation(3, 6);
    let cfg = fedselect(0.5, 11);
    let mut c1 = init_clients(datasets.clone(), &theta);
    let mut c2 = init_clients(datasets, &theta);
    let mut g1 = GlobalState::new(theta.clone());
    let mut g2 = GlobalState::new(theta);
    let r1 = run_round(&mut g1, &mut c1, &cfg, &Sequential).unwrap();
    let mut check = PartitionCheck { steps: 0 };
    let r2 = run_round_observed(&mut g2, &mut c2, &cfg, &mut check).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(g1, g2);
    assert!(check.steps > 0);
}

#[test]
fn weighted_aggregation_config_is_honoured() {
    let (_, theta, datasets) = small_federation(2, 6);
    let mut cfg = fedselect(0.0, 1);
    cfg.aggregation.client_weights = ClientWeights::PerClient(vec![3.0, 1.0]);
    let mut clients = init_clients(datasets.clone(), &theta);
    let mut global = GlobalState::new(theta.clone());
    run_round(&mut global, &mut clients, &cfg, &Sequential).unwrap();
    let locals: BTreeMap<usize, ParamVector> = datasets
        .iter()
        .map(|d| {
            let s = TrainSettings {
                epochs: 2,
                lr: 0.05,
                batch_size: 5,
            };
            let p = train_masked(
                &theta,
                &MaskVector::ones(theta.len()),
                &d.train,
                s,
                client_seed(1, 1, d.client_id),
            )
            .unwrap();
            (d.client_id, p)
        })
        .collect();
    for j in 0..theta.len() {
        let expected = (3.0 * locals[&0].values()[j] + locals[&1].values()[j]) / 4.0;
        assert!((global.theta.values()[j] - expected).abs() < 1e-12);
    }
}

#[test]
fn init_is_shared_by_all_clients() {
    let (_, theta, datasets) = small_federation(3, 1);
    let clients = init_clients(datasets, &theta);
    assert!(clients.iter().all(|c| c.theta == theta && c.mask.is_none()));
}
