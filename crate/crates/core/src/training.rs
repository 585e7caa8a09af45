//! Optimization schedule shared by all training loops.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epoch count, batch size and SGD settings for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; decays to zero with a cosine schedule.
    pub lr: f64,
    pub momentum: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Reference into one of several datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub dataset: usize,
    pub index: usize,
}

/// Shuffled batches of one epoch over several datasets.
///
/// Each dataset is shuffled and split into batches on its own; batches are
/// then taken from the datasets in round-robin order, skipping datasets that
/// have run out. Every batch therefore comes from a single dataset.
pub fn epoch_batches<R: Rng + ?Sized>(
    sizes: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<SampleRef>> {
    let per_dataset: Vec<Vec<Vec<SampleRef>>> = sizes
        .iter()
        .enumerate()
        .map(|(dataset, &n)| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.chunks(batch_size.max(1))
                .map(|c| c.iter().map(|&index| SampleRef { dataset, index }).collect())
                .collect()
        })
        .collect();
    let rounds = per_dataset.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for r in 0..rounds {
        for batches in &per_dataset {
            if let Some(b) = batches.get(r) {
                out.push(b.clone());
            }
        }
    }
    out
}

/// Per-dataset count of batches in one epoch.
pub fn batches_per_epoch(sizes: &[usize], batch_size: usize) -> usize {
    sizes.iter().map(|&n| n.div_ceil(batch_size.max(1))).sum()
}
