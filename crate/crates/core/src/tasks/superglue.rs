//! Ingestion of the BoolQ, CB and RTE JSONL files using their official field
//! names. Other SuperGLUE tasks need span/answer preprocessing and are not
//! supported.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde_json::Value;

use super::encode::{encode, Example};
use super::vocab::Vocab;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schema {
    BoolQ,
    Cb,
    Rte,
}

impl Schema {
    pub fn as_str(self) -> &'static str {
        match self {
            Schema::BoolQ => "boolq",
            Schema::Cb => "cb",
            Schema::Rte => "rte",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Schema::Cb => 3,
            _ => 2,
        }
    }

    /// Field names of the first and second segment.
    fn fields(self) -> (&'static str, &'static str) {
        match self {
            Schema::BoolQ => ("passage", "question"),
            Schema::Cb | Schema::Rte => ("premise", "hypothesis"),
        }
    }

    fn label(self, v: &Value) -> std::result::Result<usize, String> {
        match self {
            Schema::BoolQ => match v {
                Value::Bool(b) => Ok(usize::from(*b)),
                other => Err(format!("expected boolean label, got {other}")),
            },
            Schema::Cb => match v.as_str() {
                Some("entailment") => Ok(0),
                Some("contradiction") => Ok(1),
                Some("neutral") => Ok(2),
                _ => Err(format!("unknown CB label {v}")),
            },
            Schema::Rte => match v.as_str() {
                Some("entailment") => Ok(0),
                Some("not_entailment") => Ok(1),
                _ => Err(format!("unknown RTE label {v}")),
            },
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "boolq" => Ok(Schema::BoolQ),
            "cb" => Ok(Schema::Cb),
            "rte" => Ok(Schema::Rte),
            other => Err(Error::Config(format!(
                "unsupported SuperGLUE schema `{other}` (supported: boolq, cb, rte)"
            ))),
        }
    }
}

/// One parsed record before tokenization.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPair {
    pub first: String,
    pub second: String,
    pub label: usize,
}

pub fn parse_superglue_jsonl(text: &str, schema: Schema, path: &Path) -> Result<Vec<TextPair>> {
    let (fa, fb) = schema.fields();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| Error::parse(path, ln, e.to_string()))?;
        let field = |name: &str| -> Result<String> {
            v.get(name)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| Error::parse(path, ln, format!("missing string field `{name}`")))
        };
        let label = v
            .get("label")
            .ok_or_else(|| Error::parse(path, ln, "missing field `label`"))?;
        let label = schema.label(label).map_err(|m| Error::parse(path, ln, m))?;
        out.push(TextPair { first: field(fa)?, second: field(fb)?, label });
    }
    Ok(out)
}

pub fn read_superglue_jsonl(path: &Path, schema: Schema) -> Result<Vec<TextPair>> {
    let text = fs::read_to_string(path)?;
    parse_superglue_jsonl(&text, schema, path)
}

pub fn encode_pairs(pairs: &[TextPair], vocab: &Vocab, max_len: usize) -> Result<Vec<Example>> {
    pairs
        .iter()
        .map(|p| Ok(encode(&p.first, Some(&p.second), vocab, max_len)?.into_example(p.label)))
        .collect()
}

/// Reads and encodes a JSONL file against an existing vocabulary.
pub fn load_superglue_jsonl(path: &Path, schema: Schema, vocab: &Vocab, max_len: usize) -> Result<Vec<Example>> {
    encode_pairs(&read_superglue_jsonl(path, schema)?, vocab, max_len)
}
