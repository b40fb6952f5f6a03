use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, CLS, PAD, SEP};
use crate::error::{Error, Result};

/// One classification instance, padded to the task's sequence length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// `true` for real tokens.
    pub mask: Vec<bool>,
    pub label: usize,
    /// Question id shared by answer options (grouped exact match, multiple choice).
    pub group_id: Option<usize>,
    /// Option index within a multiple-choice group.
    pub choice_id: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub tokens: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Encoded {
    pub fn into_example(self, label: usize) -> Example {
        Example {
            tokens: self.tokens,
            segment_ids: self.segment_ids,
            mask: self.mask,
            label,
            group_id: None,
            choice_id: None,
        }
    }
}

/// Assembles `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, truncating content
/// from the start (first from `a`, then from `b`) and right-padding with
/// `[PAD]` to exactly `max_len`.
pub fn encode_ids(a: &[usize], b: Option<&[usize]>, max_len: usize) -> Result<Encoded> {
    if max_len < 3 {
        return Err(Error::InvalidArgument(format!("max_len must be at least 3, got {max_len}")));
    }
    let specials = if b.is_some() { 3 } else { 2 };
    let budget = max_len - specials;
    let b = b.unwrap_or(&[]);
    let overflow = (a.len() + b.len()).saturating_sub(budget);
    let drop_a = overflow.min(a.len());
    let drop_b = overflow - drop_a;
    let a = &a[drop_a..];
    let b_kept = &b[drop_b..];

    let mut tokens = Vec::with_capacity(max_len);
    let mut segment_ids = Vec::with_capacity(max_len);
    tokens.push(CLS);
    tokens.extend_from_slice(a);
    tokens.push(SEP);
    segment_ids.resize(tokens.len(), 0);
    if specials == 3 {
        tokens.extend_from_slice(b_kept);
        tokens.push(SEP);
        segment_ids.resize(tokens.len(), 1);
    }
    let real = tokens.len();
    tokens.resize(max_len, PAD);
    segment_ids.resize(max_len, 0);
    let mask = (0..max_len).map(|i| i < real).collect();
    Ok(Encoded { tokens, segment_ids, mask })
}

/// Whitespace-tokenizes and encodes one or two text segments.
pub fn encode(a: &str, b: Option<&str>, vocab: &Vocab, max_len: usize) -> Result<Encoded> {
    let a = vocab.tokenize(a);
    let b = b.map(|t| vocab.tokenize(t));
    encode_ids(&a, b.as_deref(), max_len)
}
