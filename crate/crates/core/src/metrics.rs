//! Group-wise evaluation and model selection.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, N_GROUPS};
use crate::error::{Error, Result};
use crate::model::{argmax, Batch, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Accuracy per annotation group; 0 for empty groups (see `empty_groups`).
    pub per_group_accuracy: Vec<f64>,
    pub per_group_loss: Vec<f64>,
    pub per_group_count: Vec<usize>,
    /// Correct predictions over all samples.
    pub average_accuracy: f64,
    /// Minimum accuracy over non-empty groups.
    pub worst_group_accuracy: f64,
    /// Groups with no samples, excluded from the minimum.
    pub empty_groups: Vec<usize>,
}

impl GroupMetrics {
    pub fn worst_group_loss(&self) -> f64 {
        let present: Vec<f64> = (0..self.per_group_loss.len())
            .filter(|&g| self.per_group_count[g] > 0)
            .map(|g| self.per_group_loss[g])
            .collect();
        worst_group_objective(&present)
    }
}

/// Per-group accuracy and loss on the annotation groups of `dataset`.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<GroupMetrics> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("cannot evaluate on an empty dataset".into()));
    }
    let pass = model.forward_pass(dataset.features())?;
    let losses = pass.losses(dataset.labels());
    let mut correct = [0usize; N_GROUPS];
    let mut loss_sum = [0.0; N_GROUPS];
    let mut count = [0usize; N_GROUPS];
    for (i, (&g, &loss)) in dataset.group_ids().iter().zip(&losses).enumerate() {
        count[g] += 1;
        loss_sum[g] += loss;
        if argmax(pass.logits.row(i)) == dataset.labels()[i] {
            correct[g] += 1;
        }
    }
    let present: Vec<usize> = (0..N_GROUPS).filter(|&g| count[g] > 0).collect();
    if present.is_empty() {
        return Err(Error::InvalidConfig("every group is empty".into()));
    }
    let ratio = |num: f64, g: usize| if count[g] > 0 { num / count[g] as f64 } else { 0.0 };
    let per_group_accuracy: Vec<f64> = (0..N_GROUPS).map(|g| ratio(correct[g] as f64, g)).collect();
    let worst_group_accuracy = present
        .iter()
        .map(|&g| per_group_accuracy[g])
        .fold(f64::INFINITY, f64::min);
    Ok(GroupMetrics {
        per_group_loss: (0..N_GROUPS).map(|g| ratio(loss_sum[g], g)).collect(),
        per_group_count: count.to_vec(),
        average_accuracy: correct.iter().sum::<usize>() as f64 / dataset.len() as f64,
        worst_group_accuracy,
        empty_groups: (0..N_GROUPS).filter(|&g| count[g] == 0).collect(),
        per_group_accuracy,
    })
}

/// The largest per-group mean loss.
pub fn worst_group_objective(per_group_losses: &[f64]) -> f64 {
    per_group_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Mean loss per group of `batch.group_ids`; `None` where a group is absent.
pub fn per_group_mean_loss(model: &Model, batch: &Batch, n_groups: usize) -> Result<Vec<Option<f64>>> {
    let losses = model.loss_per_sample(batch)?;
    let mut sums = vec![0.0; n_groups];
    let mut counts = vec![0usize; n_groups];
    for (&l, &g) in losses.iter().zip(&batch.group_ids) {
        sums[g] += l;
        counts[g] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect())
}

/// Index of the candidate with the best validation worst-group accuracy;
/// ties go to higher average accuracy, then to the earlier candidate.
pub fn select_best<H>(candidates: &[(H, GroupMetrics)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (_, m)) in candidates.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &candidates[b].1;
                m.worst_group_accuracy > cur.worst_group_accuracy
                    || (m.worst_group_accuracy == cur.worst_group_accuracy && m.average_accuracy > cur.average_accuracy)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}
