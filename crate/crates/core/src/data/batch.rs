//! Fixed-context batches of non-overlapping windows. Each window of `L`
//! inputs carries its `L` next-token targets, so a shard of `N` tokens holds
//! `⌊(N−1)/L⌋` windows. An epoch visits every window once in a seeded order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::shard::TokenShard;
use crate::autograd::SeqLayout;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub batch_size_tokens: usize,
    pub context_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 {
            return Err(Error::Config("batch context_len must be positive".into()));
        }
        if self.batch_size_tokens == 0 || self.batch_size_tokens % self.context_len != 0 {
            return Err(Error::Config(format!(
                "batch_size_tokens {} must be a positive multiple of context_len {}",
                self.batch_size_tokens, self.context_len
            )));
        }
        Ok(())
    }

    pub fn windows_per_batch(&self) -> usize {
        self.batch_size_tokens / self.context_len
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub layout: SeqLayout,
    /// Position in the overall stream, counting from 0 across epochs.
    pub id: u64,
}

impl Batch {
    pub fn tokens(&self) -> usize {
        self.inputs.len()
    }
}

/// Where the stream stands; saved with checkpoints so resumed runs continue
/// with the same batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPosition {
    pub epoch: u64,
    pub batch: u64,
}

/// Window start offsets `(shard, start)` for every full window.
pub fn windows(shards: &[TokenShard], context_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (s, shard) in shards.iter().enumerate() {
        let n = shard.len().saturating_sub(1) / context_len;
        out.extend((0..n).map(|w| (s, w * context_len)));
    }
    out
}

fn collect(shards: &[TokenShard], wins: &[(usize, usize)], l: usize, id: u64) -> Batch {
    let mut inputs = Vec::with_capacity(wins.len() * l);
    let mut targets = Vec::with_capacity(wins.len() * l);
    for &(s, start) in wins {
        let ids = &shards[s].ids[start..start + l + 1];
        inputs.extend(ids[..l].iter().map(|&t| t as usize));
        targets.extend(ids[1..].iter().map(|&t| t as usize));
    }
    Batch {
        inputs,
        targets,
        layout: SeqLayout {
            batch: wins.len(),
            seq_len: l,
        },
        id,
    }
}

/// Endless shuffled stream over epochs. With `drop_last` the trailing
/// partial batch of each epoch is skipped so every batch has the full shape.
pub struct BatchIterator<'a> {
    shards: &'a [TokenShard],
    spec: BatchSpec,
    windows: Vec<(usize, usize)>,
    order: Vec<usize>,
    drop_last: bool,
    pos: DataPosition,
}

impl<'a> BatchIterator<'a> {
    pub fn new(shards: &'a [TokenShard], spec: BatchSpec, drop_last: bool) -> Result<Self> {
        spec.validate()?;
        let windows = windows(shards, spec.context_len);
        if windows.is_empty() {
            let total: usize = shards.iter().map(TokenShard::len).sum();
            return Err(Error::Data(format!(
                "{total} tokens cannot fill one window of {} inputs plus a target",
                spec.context_len
            )));
        }
        if drop_last && windows.len() < spec.windows_per_batch() {
            return Err(Error::Data(format!(
                "only {} windows available; a batch needs {}",
                windows.len(),
                spec.windows_per_batch()
            )));
        }
        let mut it = Self {
            shards,
            spec,
            windows,
            order: Vec::new(),
            drop_last,
            pos: DataPosition::default(),
        };
        it.shuffle();
        Ok(it)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(self.pos.epoch);
        self.order = (0..self.windows.len()).collect();
        self.order.shuffle(&mut rng);
    }

    pub fn window_count(&self) -> usize {
        self.windows.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        let b = self.spec.windows_per_batch();
        if self.drop_last {
            self.windows.len() / b
        } else {
            self.windows.len().div_ceil(b)
        }
    }

    pub fn position(&self) -> DataPosition {
        self.pos
    }

    pub fn seek(&mut self, pos: DataPosition) {
        let reshuffle = pos.epoch != self.pos.epoch;
        self.pos = pos;
        if reshuffle {
            self.shuffle();
        }
    }

    /// Window order for the current epoch.
    pub fn epoch_order(&self) -> Vec<(usize, usize)> {
        self.order.iter().map(|&i| self.windows[i]).collect()
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.pos.batch as usize >= self.batches_per_epoch() {
            self.seek(DataPosition {
                epoch: self.pos.epoch + 1,
                batch: 0,
            });
        }
        let b = self.spec.windows_per_batch();
        let start = self.pos.batch as usize * b;
        let end = (start + b).min(self.windows.len());
        let wins: Vec<_> = self.order[start..end]
            .iter()
            .map(|&i| self.windows[i])
            .collect();
        let id = self.pos.epoch * self.batches_per_epoch() as u64 + self.pos.batch;
        self.pos.batch += 1;
        collect(self.shards, &wins, self.spec.context_len, id)
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// Every window in storage order, `windows_per_batch` at a time, keeping the
/// trailing partial batch. Used for evaluation.
pub fn sequential_batches(
    shards: &[TokenShard],
    context_len: usize,
    windows_per_batch: usize,
) -> Result<Vec<Batch>> {
    if context_len == 0 || windows_per_batch == 0 {
        return Err(Error::Config(
            "context_len and batch size must be positive".into(),
        ));
    }
    let wins = windows(shards, context_len);
    if wins.is_empty() {
        return Err(Error::Data(format!(
            "not enough tokens for one window of {context_len} inputs plus a target"
        )));
    }
    Ok(wins
        .chunks(windows_per_batch)
        .enumerate()
        .map(|(i, c)| collect(shards, c, context_len, i as u64))
        .collect())
}
