//! Training configuration and batching shared by pair networks and banks.

use crate::descriptor::{AlgorithmSpec, OutputNorm};
use crate::error::{Error, Result};
use crate::mlp::{AdamConfig, Head};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_EPOCHS: usize = 5;
pub const DEFAULT_LR: f64 = 1e-3;
pub const MAX_BATCH: usize = 1024;
/// Hidden layers per encoder, decoder or pair network.
pub const HIDDEN_LAYERS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// `None` resolves to [`default_batch`] of the dataset size.
    #[serde(default)]
    pub batch: Option<usize>,
    pub lr: f64,
    /// Overrides the per-family hidden width.
    #[serde(default)]
    pub hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: DEFAULT_EPOCHS,
            batch: None,
            lr: DEFAULT_LR,
            hidden: None,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig {
            seed,
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Batch size for a dataset of `n` patches. The dataset must hold at
    /// least two full batches.
    pub fn resolve_batch(&self, n: usize) -> Result<usize> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.hidden == Some(0) {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        let batch = self.batch.unwrap_or_else(|| default_batch(n));
        if batch < 2 {
            return Err(Error::Config(format!("batch must be >= 2, got {batch}")));
        }
        if 2 * batch > n {
            return Err(Error::Config(format!(
                "batch {batch} too large for {n} patches (need >= 2 batches)"
            )));
        }
        Ok(batch)
    }

    pub fn hidden_for(&self, family: &AlgorithmSpec) -> Vec<usize> {
        vec![self.hidden.unwrap_or_else(|| family.default_hidden_width()); HIDDEN_LAYERS]
    }
}

/// Optimizer steps per epoch the default batch size aims for.
pub const MIN_STEPS_PER_EPOCH: usize = 40;

/// `min(1024, n / 40)`: the full batch on large datasets, smaller batches on
/// desk-scale ones so that five epochs still take a few hundred steps.
pub fn default_batch(n: usize) -> usize {
    MAX_BATCH.min(n / MIN_STEPS_PER_EPOCH)
}

/// Output head matching a family's finalized descriptor contract.
pub fn head_for(spec: &AlgorithmSpec) -> Head {
    if spec.is_binary() {
        return Head::Sigmoid;
    }
    match spec.output_norm() {
        OutputNorm::None => Head::None,
        OutputNorm::UnitL2 => Head::UnitL2,
        OutputNorm::NonnegUnitL2 => Head::ReluThenUnitL2,
    }
}

/// One epoch of shuffled batches. A trailing partial batch is kept when it
/// has at least two rows (batch norm needs two).
pub fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn batch_resolution() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.resolve_batch(100_000).unwrap(), 1024);
        assert_eq!(cfg.resolve_batch(5000).unwrap(), 125);
        assert!(cfg.resolve_batch(70).is_err());
        let big = TrainConfig {
            batch: Some(300),
            ..TrainConfig::default()
        };
        assert!(matches!(big.resolve_batch(500), Err(Error::Config(_))));
    }

    #[test]
    fn batches_cover_every_row_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = epoch_batches(103, 10, &mut rng);
        assert_eq!(b.len(), 11);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        // A single leftover row is dropped.
        assert_eq!(epoch_batches(21, 10, &mut rng).concat().len(), 20);
    }

    #[test]
    fn heads() {
        assert_eq!(head_for(&AlgorithmSpec::brief()), Head::Sigmoid);
        assert_eq!(head_for(&AlgorithmSpec::sift()), Head::ReluThenUnitL2);
        assert_eq!(head_for(&AlgorithmSpec::hardnet()), Head::UnitL2);
    }
}
