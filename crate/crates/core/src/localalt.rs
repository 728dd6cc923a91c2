//! Alternating local updates of the personal (`v`, mask = 1) and shared
//! (`u`, mask = 0) partitions.
//!
//! Every epoch makes one full mini-batch pass per partition. The shared pass
//! of epoch `e` shuffles exactly like epoch `e` of
//! [`train_masked`](crate::gradltn::train_masked) with the same seed; the
//! personal pass draws from an independent stream keyed by
//! [`personal_pass_seed`]. With an all-zero mask LocalAlt is therefore plain
//! local SGD.

use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{check_len, Error, Result};
use crate::gradltn::{epoch_seed, run_epoch, NoObserver, StepObserver, TrainSettings};
use crate::mask::MaskVector;
use crate::model::ParamVector;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassOrder {
    #[default]
    VFirst,
    UFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalAltConfig {
    pub epochs: usize,
    pub lr_u: f64,
    pub lr_v: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub order: PassOrder,
}

impl LocalAltConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, lr) in [("lr_u", self.lr_u), ("lr_v", self.lr_v)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid(field, "must be positive and finite"));
            }
        }
        TrainSettings {
            epochs: self.epochs,
            lr: self.lr_u,
            batch_size: self.batch_size,
        }
        .validate()
    }
}

/// Updated parameters with the mask that splits them.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalAltOutput {
    pub params: ParamVector,
    pub mask: MaskVector,
}

impl LocalAltOutput {
    /// Shared partition after training (positions where the mask is 0).
    pub fn u_plus(&self) -> alloc::vec::Vec<f64> {
        self.params.unmasked_values(&self.mask).expect("aligned")
    }

    /// Personal partition after training (positions where the mask is 1).
    pub fn v_plus(&self) -> alloc::vec::Vec<f64> {
        self.params.masked_values(&self.mask).expect("aligned")
    }
}

/// Seed of the personal-pass shuffle stream derived from a LocalAlt seed.
pub fn personal_pass_seed(seed: u64) -> u64 {
    seed::derive(seed, &[seed::tag::PERSONAL_PASS])
}

pub fn run_localalt(
    theta: &ParamVector,
    mask: &MaskVector,
    data: &[LabeledExample],
    cfg: &LocalAltConfig,
    seed: u64,
) -> Result<LocalAltOutput> {
    run_localalt_observed(theta, mask, data, cfg, seed, &mut NoObserver)
}

pub fn run_localalt_observed(
    theta: &ParamVector,
    mask: &MaskVector,
    data: &[LabeledExample],
    cfg: &LocalAltConfig,
    seed: u64,
    observer: &mut dyn StepObserver,
) -> Result<LocalAltOutput> {
    cfg.validate()?;
    check_len("mask", theta.len(), mask.len())?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let shared_mask = mask.not();
    let v_seed = personal_pass_seed(seed);
    let mut params = theta.clone();
    for epoch in 0..cfg.epochs {
        let v_pass = |p: &mut ParamVector, obs: &mut dyn StepObserver| {
            run_epoch(p, mask, data, cfg.lr_v, cfg.batch_size, epoch_seed(v_seed, epoch), obs)
        };
        let u_pass = |p: &mut ParamVector, obs: &mut dyn StepObserver| {
            run_epoch(
                p,
                &shared_mask,
                data,
                cfg.lr_u,
                cfg.batch_size,
                epoch_seed(seed, epoch),
                obs,
            )
        };
        match cfg.order {
            PassOrder::VFirst => {
                v_pass(&mut params, observer)?;
                u_pass(&mut params, observer)?;
            }
            PassOrder::UFirst => {
                u_pass(&mut params, observer)?;
                v_pass(&mut params, observer)?;
            }
        }
    }
    Ok(LocalAltOutput {
        params,
        mask: mask.clone(),
    })
}
