use indexmap::IndexMap;
use rand::seq::SliceRandom;

use super::encode::Example;
use crate::error::{Error, Result};
use crate::model::BatchInput;
use crate::seed::{stream_rng, Stream};

pub const DEFAULT_BATCH_SIZE: usize = 8;

/// Example indices for one epoch, in batches of `batch_size` (the last batch
/// may be short). The order is a Fisher–Yates shuffle seeded by
/// `(run_seed, epoch)`. Examples sharing a `group_id` are shuffled as one unit
/// and stay contiguous, in their original relative order.
pub fn batch_iter(examples: &[Example], batch_size: usize, run_seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut units: IndexMap<(bool, usize), Vec<usize>> = IndexMap::new();
    for (i, e) in examples.iter().enumerate() {
        let key = match e.group_id {
            Some(g) => (true, g),
            None => (false, i),
        };
        units.entry(key).or_default().push(i);
    }
    let mut order: Vec<Vec<usize>> = units.into_values().collect();
    let mut rng = stream_rng(run_seed, Stream::Shuffle, epoch as u64);
    order.shuffle(&mut rng);
    let flat: Vec<usize> = order.into_iter().flatten().collect();
    Ok(flat.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks equal-length examples into a model input.
pub fn collate(examples: &[&Example]) -> Result<BatchInput> {
    let first = examples.first().ok_or(Error::Empty("batch"))?;
    let seq_len = first.tokens.len();
    if let Some(e) = examples.iter().find(|e| e.tokens.len() != seq_len) {
        return Err(Error::InvalidArgument(format!(
            "cannot batch sequences of length {seq_len} and {}",
            e.tokens.len()
        )));
    }
    let mut input = BatchInput {
        batch: examples.len(),
        seq_len,
        token_ids: Vec::with_capacity(examples.len() * seq_len),
        segment_ids: Vec::with_capacity(examples.len() * seq_len),
        mask: Vec::with_capacity(examples.len() * seq_len),
    };
    for e in examples {
        input.token_ids.extend_from_slice(&e.tokens);
        input.segment_ids.extend_from_slice(&e.segment_ids);
        input.mask.extend_from_slice(&e.mask);
    }
    Ok(input)
}
