//! Gradient-based lottery-ticket search for the personalized subnetwork.
//!
//! Starting from an all-ones mask, each iteration trains the active
//! parameters, keeps the `keep_fraction` of them that moved the most, rewinds
//! every parameter to the starting point and retrains inside the smaller
//! mask. Masks therefore shrink geometrically: after `L` iterations roughly
//! `keep_fraction^(L-1)` of the parameters remain personal.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{check_len, Error, Result};
use crate::mask::MaskVector;
use crate::model::{self, Batch, ParamVector};
use crate::seed;

/// Which parameters the search hands back alongside the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnPoint {
    /// The parameters the search started from (rewound).
    #[default]
    RoundStart,
    /// The parameters after the last masked retraining.
    FinalTrained,
}

/// Optional early exits from the fixed iteration count.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StopCondition {
    /// Stop pruning once the personal fraction is at or below this value.
    pub target_personal_fraction: Option<f64>,
    /// Undo the last pruning step and stop if retraining inside the new mask
    /// leaves training accuracy below this value.
    pub min_train_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradLtnConfig {
    pub iterations: usize,
    /// Fraction of the currently active parameters kept per pruning step.
    /// Equal to `1 - r` for a pruning rate `r`.
    pub keep_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub return_point: ReturnPoint,
    #[serde(default)]
    pub stop: StopCondition,
}

impl GradLtnConfig {
    pub fn prune_rate(&self) -> f64 {
        1.0 - self.keep_fraction
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.keep_fraction) {
            return Err(Error::invalid("keep_fraction", "must lie in [0, 1]"));
        }
        TrainSettings {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
        }
        .validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Sees every SGD step taken by the training loops.
pub trait StepObserver {
    fn on_step(&mut self, before: &ParamVector, after: &ParamVector, mask: &MaskVector);

    /// When false, the training loops skip the per-step snapshot.
    fn is_active(&self) -> bool {
        true
    }
}

pub struct NoObserver;

impl StepObserver for NoObserver {
    fn on_step(&mut self, _: &ParamVector, _: &ParamVector, _: &MaskVector) {}

    fn is_active(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradLtnResult {
    /// Full-length parameters; split them with [`GradLtnResult::shared_u`] and
    /// [`GradLtnResult::personal_v`].
    pub params: ParamVector,
    pub mask: MaskVector,
    /// Mask popcount after each iteration, starting with the all-ones mask.
    pub popcounts: Vec<usize>,
}

impl GradLtnResult {
    pub fn shared_u(&self) -> Vec<f64> {
        self.params
            .unmasked_values(&self.mask)
            .expect("mask aligned by construction")
    }

    pub fn personal_v(&self) -> Vec<f64> {
        self.params
            .masked_values(&self.mask)
            .expect("mask aligned by construction")
    }

    pub fn personal_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.mask.count_ones() as f64 / self.mask.len() as f64
        }
    }
}

/// Inverse of the shared/personal split.
pub fn reassemble(spec: &model::ModelSpec, shared: &[f64], personal: &[f64], mask: &MaskVector) -> Result<ParamVector> {
    check_len("mask", spec.param_count(), mask.len())?;
    check_len("shared partition", mask.count_zeros(), shared.len())?;
    check_len("personal partition", mask.count_ones(), personal.len())?;
    let mut shared = shared.iter();
    let mut personal = personal.iter();
    let values = mask
        .as_bits()
        .iter()
        .map(|&b| *if b { personal.next() } else { shared.next() }.expect("counted"))
        .collect();
    ParamVector::new(spec.clone(), values)
}

/// `|trained - reference|` on the active positions of `prev_mask`, 0 elsewhere.
pub fn delta_magnitude(
    theta_trained: &ParamVector,
    theta_ref: &ParamVector,
    prev_mask: &MaskVector,
) -> Result<Vec<f64>> {
    check_len("reference parameters", theta_trained.len(), theta_ref.len())?;
    check_len("mask", theta_trained.len(), prev_mask.len())?;
    Ok(theta_trained
        .values()
        .iter()
        .zip(theta_ref.values())
        .zip(prev_mask.as_bits())
        .map(|((a, b), &m)| if m { libm::fabs(a - b) } else { 0.0 })
        .collect())
}

/// Keeps the `round(keep_fraction * popcount(prev_mask))` active positions
/// with the largest `gamma`; ties go to the lower index.
pub fn select_topk_mask(gamma: &[f64], prev_mask: &MaskVector, keep_fraction: f64) -> MaskVector {
    let active = prev_mask.count_ones();
    let k = kept_count(active, keep_fraction);
    let mut candidates: Vec<usize> = prev_mask.ones_indices().collect();
    candidates.sort_by(|&a, &b| gamma[b].total_cmp(&gamma[a]).then(a.cmp(&b)));
    let mut mask = MaskVector::zeros(prev_mask.len());
    for &i in &candidates[..k] {
        mask.set(i, true);
    }
    mask
}

/// Number of positions kept when pruning `active` entries.
pub fn kept_count(active: usize, keep_fraction: f64) -> usize {
    let k = libm::round(keep_fraction.clamp(0.0, 1.0) * active as f64);
    (k as usize).min(active)
}

/// Mini-batch SGD over `epochs` seeded shuffles of `data`, updating only the
/// positions set in `mask`.
pub fn train_masked(
    theta: &ParamVector,
    mask: &MaskVector,
    data: &[LabeledExample],
    settings: TrainSettings,
    seed: u64,
) -> Result<ParamVector> {
    train_masked_observed(theta, mask, data, settings, seed, &mut NoObserver)
}

pub fn train_masked_observed(
    theta: &ParamVector,
    mask: &MaskVector,
    data: &[LabeledExample],
    settings: TrainSettings,
    seed: u64,
    observer: &mut dyn StepObserver,
) -> Result<ParamVector> {
    settings.validate()?;
    let mut params = theta.clone();
    for epoch in 0..settings.epochs {
        run_epoch(
            &mut params,
            mask,
            data,
            settings.lr,
            settings.batch_size,
            epoch_seed(seed, epoch),
            observer,
        )?;
    }
    Ok(params)
}

/// Shuffle seed of epoch `epoch` in a training run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed::derive(seed, &[seed::tag::EPOCH, epoch as u64])
}

/// One pass over `data` in the order given by `shuffle_seed`.
pub(crate) fn run_epoch(
    params: &mut ParamVector,
    mask: &MaskVector,
    data: &[LabeledExample],
    lr: f64,
    batch_size: usize,
    shuffle_seed: u64,
    observer: &mut dyn StepObserver,
) -> Result<()> {
    use rand::seq::SliceRandom;

    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    check_len("mask", params.len(), mask.len())?;
    if mask.count_ones() == 0 {
        return Ok(());
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::rng(shuffle_seed));
    for chunk in order.chunks(batch_size) {
        let batch = Batch::from_examples(chunk.iter().map(|&i| &data[i]))?;
        let gradient = model::grad(params, &batch)?;
        if observer.is_active() {
            let before = params.clone();
            model::apply_masked_step(params, &gradient, mask, lr)?;
            observer.on_step(&before, params, mask);
        } else {
            model::apply_masked_step(params, &gradient, mask, lr)?;
        }
    }
    Ok(())
}

/// Runs the iterative search from `theta_0` on one client's training data.
pub fn run_gradltn(
    theta_0: &ParamVector,
    data: &[LabeledExample],
    cfg: &GradLtnConfig,
    seed: u64,
) -> Result<GradLtnResult> {
    run_gradltn_observed(theta_0, data, cfg, seed, &mut NoObserver)
}

pub fn run_gradltn_observed(
    theta_0: &ParamVector,
    data: &[LabeledExample],
    cfg: &GradLtnConfig,
    seed: u64,
    observer: &mut dyn StepObserver,
) -> Result<GradLtnResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let settings = TrainSettings {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
    };
    let total = theta_0.len();
    let iteration_seed = |i: usize| seed::derive(seed, &[seed::tag::GRADLTN, i as u64]);

    let mut mask = MaskVector::ones(total);
    let mut popcounts = alloc::vec![total];
    let mut trained = train_masked_observed(theta_0, &mask, data, settings, iteration_seed(0), observer)?;

    for i in 1..cfg.iterations {
        if let Some(target) = cfg.stop.target_personal_fraction {
            if total == 0 || (mask.count_ones() as f64 / total as f64) <= target {
                break;
            }
        }
        // The reference is this iteration's pre-training state, which is
        // theta_0 for every iteration because of the rewind below.
        let gamma = delta_magnitude(&trained, theta_0, &mask)?;
        let next_mask = select_topk_mask(&gamma, &mask, cfg.keep_fraction);
        let next_trained = train_masked_observed(theta_0, &next_mask, data, settings, iteration_seed(i), observer)?;
        if let Some(min_acc) = cfg.stop.min_train_accuracy {
            if model::accuracy(&next_trained, data)? < min_acc {
                break;
            }
        }
        mask = next_mask;
        trained = next_trained;
        popcounts.push(mask.count_ones());
    }

    let params = match cfg.return_point {
        ReturnPoint::RoundStart => theta_0.clone(),
        ReturnPoint::FinalTrained => trained,
    };
    Ok(GradLtnResult {
        params,
        mask,
        popcounts,
    })
}
