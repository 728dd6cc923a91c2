//! Evaluation and mask analysis.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskVector;
use crate::model;
use crate::server::{ClientState, RoundReport};

/// Unweighted mean of each client's accuracy on its own test set.
pub fn mean_client_accuracy(clients: &[ClientState]) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::Empty("client list"));
    }
    let mut total = 0.0;
    for c in clients {
        total += model::accuracy(&c.theta, &c.dataset.test)?;
    }
    Ok(total / clients.len() as f64)
}

/// `|A ∩ B| / |A ∪ B|` over `range`; 1.0 when both restrictions are empty.
pub fn mask_iou(a: &MaskVector, b: &MaskVector, range: Range<usize>) -> Result<f64> {
    let len = a.len();
    if b.len() != len || range.start > range.end || range.end > len {
        return Err(Error::InvalidRange {
            start: range.start,
            end: range.end,
            len: len.min(b.len()),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.as_bits()[range.clone()].iter().zip(&b.as_bits()[range]) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouMatrix {
    pub client_ids: Vec<usize>,
    /// Row-major `n x n`.
    pub values: Vec<f64>,
    pub range: Range<usize>,
    /// Pairs whose masks were both empty over `range` (IoU defined as 1).
    pub empty_pairs: usize,
}

impl IouMatrix {
    pub fn size(&self) -> usize {
        self.client_ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size() + j]
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.size();
        (0..n).all(|i| (0..n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Mean over `i != j`; `None` for a single client.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let n = self.size();
        if n < 2 {
            return None;
        }
        let sum: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .sum();
        Some(sum / (n * (n - 1)) as f64)
    }
}

/// Pairwise IoU of the clients' masks over `range`.
pub fn iou_matrix(clients: &[ClientState], range: Range<usize>) -> Result<IouMatrix> {
    let masks = clients
        .iter()
        .map(|c| c.mask.as_ref().ok_or(Error::MissingMask(c.id)))
        .collect::<Result<Vec<_>>>()?;
    let n = masks.len();
    let mut values = alloc::vec![0.0; n * n];
    let mut empty_pairs = 0;
    for i in 0..n {
        for j in i..n {
            let v = mask_iou(masks[i], masks[j], range.clone())?;
            if masks[i].count_ones_in(range.clone()) == 0 && masks[j].count_ones_in(range.clone()) == 0 {
                empty_pairs += 1;
            }
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(IouMatrix {
        client_ids: clients.iter().map(|c| c.id).collect(),
        values,
        range,
        empty_pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySeries {
    pub label: String,
    /// `(round, mean accuracy)`.
    pub points: Vec<(usize, f64)>,
}

pub fn accuracy_curve(reports: &[RoundReport], label: impl Into<String>) -> AccuracySeries {
    AccuracySeries {
        label: label.into(),
        points: reports.iter().map(|r| (r.round, r.mean_accuracy)).collect(),
    }
}
