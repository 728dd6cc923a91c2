#![allow(dead_code)]

use fedselect_core::data::{generate_pool, partition_noniid, ClientDataset, LabeledExample, PartitionSpec};
use fedselect_core::model::{init_params, ModelSpec, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_examples(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Vec<LabeledExample> {
    (0..n)
        .map(|_| LabeledExample {
            features: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            label: rng.random_range(0..classes),
        })
        .collect()
}

pub fn random_params(rng: &mut ChaCha8Rng, spec: &ModelSpec, scale: f64) -> ParamVector {
    let values = (0..spec.param_count())
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    ParamVector::new(spec.clone(), values).unwrap()
}

/// Small non-IID federation: `n` clients, 2 of 4 classes each, 8 features.
pub fn small_federation(n: usize, seed: u64) -> (ModelSpec, ParamVector, Vec<ClientDataset>) {
    let spec = ModelSpec::new(8, vec![12], 4).unwrap();
    let pool = generate_pool(4, 8, 60, 1.5, seed).unwrap();
    let clients = partition_noniid(
        &pool,
        4,
        &PartitionSpec {
            num_clients: n,
            classes_per_client: 2,
            n_train_per_class: 10,
            n_test_per_class: 10,
            seed,
        },
    )
    .unwrap();
    let theta = init_params(&spec, seed).unwrap();
    (spec, theta, clients)
}
