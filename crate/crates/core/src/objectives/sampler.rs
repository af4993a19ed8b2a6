use rand::seq::SliceRandom;

use crate::rng::StreamRng;

/// Epoch-based mini-batch sampler: without replacement within an epoch,
/// reshuffled when fewer than `batch_size` unseen indices remain.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: StreamRng,
}

impl BatchSampler {
    /// A batch size of zero or at least `n` yields full batches.
    pub fn new(n: usize, batch_size: usize, rng: StreamRng) -> Self {
        let batch_size = if batch_size == 0 {
            n
        } else {
            batch_size.min(n)
        };
        let mut s = Self {
            order: (0..n).collect(),
            cursor: n,
            batch_size,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch_size > self.order.len() {
            self.reshuffle();
        }
        let start = self.cursor;
        self.cursor += self.batch_size;
        &self.order[start..self.cursor]
    }
}
