//! Desk-scale stand-in tasks with closed-form labels.

use rand::seq::SliceRandom;
use rand::Rng;

use super::encode::{encode_ids, Example};
use super::vocab::Vocab;
use super::Dataset;
use crate::error::{Error, Result};
use crate::seed::{stream_rng, Stream};

/// Sequences over {A, B}; label 1 iff A is the majority. Classes are balanced
/// (exactly when `n_examples` is even).
pub fn gen_majority(seed: u64, n_examples: usize, seq_len: usize) -> Result<Dataset> {
    if seq_len % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "majority needs an odd sequence length to avoid ties, got {seq_len}"
        )));
    }
    let vocab = Vocab::new(["A", "B"]);
    let (a, b) = (vocab.id("A"), vocab.id("B"));
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let mut labels: Vec<usize> = (0..n_examples).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);

    let half = seq_len / 2 + 1;
    let mut examples = Vec::with_capacity(n_examples);
    for label in labels {
        let count_a = if label == 1 {
            rng.random_range(half..=seq_len)
        } else {
            rng.random_range(0..half)
        };
        let mut ids: Vec<usize> = (0..seq_len).map(|i| if i < count_a { a } else { b }).collect();
        ids.shuffle(&mut rng);
        examples.push(encode_ids(&ids, None, seq_len + 2)?.into_example(label));
    }
    Ok(Dataset { vocab, examples })
}

/// A pointer token `p` (1-based) followed by `seq_len - 1` symbols; the label
/// is the symbol at offset `p`.
pub fn gen_gated_copy(seed: u64, n_examples: usize, seq_len: usize, n_symbols: usize) -> Result<Dataset> {
    if seq_len < 3 {
        return Err(Error::InvalidArgument(format!("gated copy needs seq_len >= 3, got {seq_len}")));
    }
    if n_symbols < 2 {
        return Err(Error::InvalidArgument(format!("gated copy needs >= 2 symbols, got {n_symbols}")));
    }
    let span = seq_len - 1;
    let pointers: Vec<String> = (1..=span).map(|p| format!("p{p}")).collect();
    let symbols: Vec<String> = (0..n_symbols).map(|s| format!("s{s}")).collect();
    let vocab = Vocab::new(pointers.iter().chain(&symbols));
    let symbol_ids: Vec<usize> = symbols.iter().map(|s| vocab.id(s)).collect();

    let mut rng = stream_rng(seed, Stream::Data, 1);
    let mut examples = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let p = rng.random_range(1..=span);
        let body: Vec<usize> = (0..span).map(|_| rng.random_range(0..n_symbols)).collect();
        let label = body[p - 1];
        let mut ids = vec![vocab.id(&pointers[p - 1])];
        ids.extend(body.iter().map(|&s| symbol_ids[s]));
        examples.push(encode_ids(&ids, None, seq_len + 2)?.into_example(label));
    }
    Ok(Dataset { vocab, examples })
}

/// Sets `group_id` / `choice_id` so that every `choices` consecutive examples
/// form one question. Helper for multiple-choice style tasks.
pub fn group_consecutive(examples: &mut [Example], choices: usize) {
    for (i, e) in examples.iter_mut().enumerate() {
        e.group_id = Some(i / choices);
        e.choice_id = Some(i % choices);
    }
}
