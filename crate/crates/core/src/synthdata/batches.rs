use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DatasetBundle;
use crate::error::{ensure, Result};

/// Indices into the labeled and unlabeled splits for one training step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPair {
    pub epoch: usize,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Endless stream of labeled/unlabeled batch pairs.
///
/// Unlabeled indices are drawn without replacement within an epoch (a
/// trailing partial batch is dropped). Labeled indices cycle through
/// successive shuffles of the labeled split.
#[derive(Clone, Debug)]
pub struct BatchStream {
    labeled_len: usize,
    unlabeled_len: usize,
    labeled_batch: usize,
    unlabeled_batch: usize,
    rng: ChaCha8Rng,
    labeled_queue: Vec<usize>,
    unlabeled_order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

pub fn make_batches(bundle: &DatasetBundle, labeled_batch: usize, ratio: usize, seed: u64) -> Result<BatchStream> {
    BatchStream::new(bundle.labeled.len(), bundle.unlabeled.len(), labeled_batch, ratio, seed)
}

impl BatchStream {
    pub fn new(labeled_len: usize, unlabeled_len: usize, labeled_batch: usize, ratio: usize, seed: u64) -> Result<Self> {
        ensure!(labeled_batch >= 1, Config, "labeled batch size must be at least 1");
        ensure!(ratio >= 1, Config, "unlabeled ratio must be at least 1");
        ensure!(labeled_len >= 1, Config, "labeled split is empty");
        let unlabeled_batch = labeled_batch * ratio;
        ensure!(
            unlabeled_batch <= unlabeled_len,
            Config,
            "unlabeled batch {unlabeled_batch} exceeds the {unlabeled_len} unlabeled samples"
        );
        let mut s = Self {
            labeled_len,
            unlabeled_len,
            labeled_batch,
            unlabeled_batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
            labeled_queue: Vec::new(),
            unlabeled_order: (0..unlabeled_len).collect(),
            cursor: 0,
            epoch: 0,
        };
        s.unlabeled_order.shuffle(&mut s.rng);
        Ok(s)
    }

    /// Steps per epoch (full unlabeled batches per pass).
    pub fn steps_per_epoch(&self) -> usize {
        self.unlabeled_len / self.unlabeled_batch
    }

    pub fn unlabeled_batch(&self) -> usize {
        self.unlabeled_batch
    }

    fn next_labeled(&mut self) -> usize {
        if self.labeled_queue.is_empty() {
            let mut order: Vec<usize> = (0..self.labeled_len).collect();
            order.shuffle(&mut self.rng);
            order.reverse();
            self.labeled_queue = order;
        }
        self.labeled_queue.pop().expect("refilled above")
    }
}

impl Iterator for BatchStream {
    type Item = BatchPair;

    fn next(&mut self) -> Option<BatchPair> {
        if self.cursor + self.unlabeled_batch > self.unlabeled_len {
            self.epoch += 1;
            self.cursor = 0;
            self.unlabeled_order.shuffle(&mut self.rng);
        }
        let unlabeled = self.unlabeled_order[self.cursor..self.cursor + self.unlabeled_batch].to_vec();
        self.cursor += self.unlabeled_batch;
        let labeled = (0..self.labeled_batch).map(|_| self.next_labeled()).collect();
        Some(BatchPair {
            epoch: self.epoch,
            labeled,
            unlabeled,
        })
    }
}
