//! Synthetic class pools and non-IID client partitions.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Distance of every class mean from the origin in [`generate_pool`].
pub const CLASS_MEAN_RADIUS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub classes_per_client: usize,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub seed: u64,
}

/// One client's local data. `train_indices`/`test_indices` point into the
/// pool the partition was carved from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub classes: Vec<usize>,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Set when the class supply ran out and examples were reused across clients.
    pub reused_examples: bool,
}

/// Audit record of a client's share of the pool, without the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionAudit {
    pub client_id: usize,
    pub classes: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub reused_examples: bool,
}

impl ClientDataset {
    pub fn audit(&self) -> PartitionAudit {
        PartitionAudit {
            client_id: self.client_id,
            classes: self.classes.clone(),
            train_indices: self.train_indices.clone(),
            test_indices: self.test_indices.clone(),
            reused_examples: self.reused_examples,
        }
    }
}

/// Gaussian blobs: one mean per class on the sphere of radius
/// [`CLASS_MEAN_RADIUS`], isotropic noise with standard deviation `spread`.
/// Examples come out class-major.
pub fn generate_pool(
    num_classes: usize,
    input_dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if num_classes == 0 || input_dim == 0 {
        return Err(Error::invalid("pool shape", "classes and input_dim must be positive"));
    }
    if per_class == 0 {
        return Err(Error::invalid("per_class", "must be at least 1"));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread", "must be positive and finite"));
    }
    let mut rng = seed::rng(seed::derive(seed, &[seed::tag::POOL]));
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm * CLASS_MEAN_RADIUS).collect()
        })
        .collect();

    let mut pool = Vec::with_capacity(num_classes * per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let features = mean
                .iter()
                .map(|&m| m + spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            pool.push(LabeledExample { features, label });
        }
    }
    Ok(pool)
}

/// Class sets per client: a seeded class permutation walked round-robin, so
/// consecutive clients take consecutive runs of `s` classes.
pub fn class_schedule(num_classes: usize, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    if spec.num_clients == 0 {
        return Err(Error::invalid("num_clients", "must be at least 1"));
    }
    if spec.classes_per_client == 0 || spec.classes_per_client > num_classes {
        return Err(Error::invalid(
            "classes_per_client",
            alloc::format!("must lie in 1..={num_classes}"),
        ));
    }
    let mut rng = seed::rng(seed::derive(spec.seed, &[seed::tag::PARTITION]));
    let mut perm: Vec<usize> = (0..num_classes).collect();
    perm.shuffle(&mut rng);
    let s = spec.classes_per_client;
    Ok((0..spec.num_clients)
        .map(|k| {
            let mut classes: Vec<usize> = (0..s).map(|i| perm[(k * s + i) % num_classes]).collect();
            classes.sort_unstable();
            classes
        })
        .collect())
}

/// Carves `pool` into per-client train/test sets holding exactly
/// `classes_per_client` labels each.
///
/// Within a class, clients draw from one shuffled queue without replacement.
/// When the queue runs dry, the remaining clients draw a fresh random subset
/// of that class instead and are flagged with `reused_examples`. A class with
/// fewer than `n_train + n_test` examples cannot give any client disjoint
/// train/test sets and is an error.
pub fn partition_noniid(
    pool: &[LabeledExample],
    num_classes: usize,
    spec: &PartitionSpec,
) -> Result<Vec<ClientDataset>> {
    let schedule = class_schedule(num_classes, spec)?;
    let per_client = spec.n_train_per_class + spec.n_test_per_class;
    if spec.n_train_per_class == 0 || spec.n_test_per_class == 0 {
        return Err(Error::invalid(
            "samples per class",
            "train and test counts must both be positive",
        ));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, ex) in pool.iter().enumerate() {
        if ex.label >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: ex.label,
                num_classes,
            });
        }
        by_class[ex.label].push(i);
    }
    let used: BTreeSet<usize> = schedule.iter().flatten().copied().collect();
    for &class in &used {
        if by_class[class].len() < per_client {
            return Err(Error::InsufficientClass {
                class,
                available: by_class[class].len(),
                required: per_client,
            });
        }
    }

    let mut rngs: Vec<_> = (0..num_classes)
        .map(|c| seed::rng(seed::derive(spec.seed, &[seed::tag::PARTITION, c as u64])))
        .collect();
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rngs[c]);
    }
    let mut cursor = vec![0usize; num_classes];

    let mut clients = Vec::with_capacity(spec.num_clients);
    for (client_id, classes) in schedule.into_iter().enumerate() {
        let mut train_indices = Vec::new();
        let mut test_indices = Vec::new();
        let mut reused = false;
        for &c in &classes {
            let queue = &by_class[c];
            let picked: Vec<usize> = if cursor[c] + per_client <= queue.len() {
                let slice = queue[cursor[c]..cursor[c] + per_client].to_vec();
                cursor[c] += per_client;
                slice
            } else {
                reused = true;
                queue.choose_multiple(&mut rngs[c], per_client).copied().collect()
            };
            train_indices.extend_from_slice(&picked[..spec.n_train_per_class]);
            test_indices.extend_from_slice(&picked[spec.n_train_per_class..]);
        }
        clients.push(ClientDataset {
            client_id,
            train: train_indices.iter().map(|&i| pool[i].clone()).collect(),
            test: test_indices.iter().map(|&i| pool[i].clone()).collect(),
            classes,
            train_indices,
            test_indices,
            reused_examples: reused,
        });
    }
    Ok(clients)
}
