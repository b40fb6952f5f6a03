//! Task definitions, toy tokenization, data generation and loading, batching.

mod batch;
mod encode;
pub mod superglue;
pub mod synthetic;
mod vocab;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use batch::{batch_iter, collate, DEFAULT_BATCH_SIZE};
pub use encode::{encode, encode_ids, Encoded, Example};
pub use superglue::{load_superglue_jsonl, Schema};
pub use synthetic::{gen_gated_copy, gen_majority};
pub use vocab::{Vocab, CLS, PAD, SEP, UNK};

use crate::error::{Error, Result};
use crate::metrics::MetricKind;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub examples: Vec<Example>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// Sigmoid + binary cross-entropy on a single output unit.
    Bce,
    /// Softmax + categorical cross-entropy.
    Cce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub num_classes: usize,
    pub output_units: usize,
    pub metrics: Vec<MetricKind>,
    /// Options of a question are scored separately; the most probable wins.
    pub multiple_choice: bool,
}

impl TaskSpec {
    pub fn binary(name: &str, metrics: Vec<MetricKind>) -> Self {
        Self {
            name: name.into(),
            num_classes: 2,
            output_units: 1,
            metrics,
            multiple_choice: false,
        }
    }

    pub fn multiclass(name: &str, num_classes: usize, metrics: Vec<MetricKind>) -> Self {
        Self {
            name: name.into(),
            num_classes,
            output_units: num_classes,
            metrics,
            multiple_choice: false,
        }
    }

    pub fn loss(&self) -> LossKind {
        if self.output_units == 1 {
            LossKind::Bce
        } else {
            LossKind::Cce
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() {
            return Err(Error::Config(format!("task {} has no metrics", self.name)));
        }
        if self.output_units == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "task {} needs >= 2 classes and >= 1 output unit",
                self.name
            )));
        }
        if self.output_units == 1 && self.num_classes != 2 {
            return Err(Error::Config(format!(
                "task {}: one output unit implies binary scoring, got {} classes",
                self.name, self.num_classes
            )));
        }
        if self.output_units > 1 && self.output_units != self.num_classes {
            return Err(Error::Config(format!(
                "task {}: {} output units for {} classes",
                self.name, self.output_units, self.num_classes
            )));
        }
        if self.multiple_choice && self.output_units != 1 {
            return Err(Error::Config(format!(
                "task {}: multiple-choice scoring needs one output unit per option",
                self.name
            )));
        }
        if self.metrics.contains(&MetricKind::F1) && self.num_classes != 2 {
            return Err(Error::Config(format!("task {}: binary F1 on a multiclass task", self.name)));
        }
        Ok(())
    }
}

/// Per-dataset fine-tuning constants of the full-scale recipe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecipeRow {
    pub dataset: &'static str,
    pub epochs: usize,
    /// Epochs in the insertion-position comparison.
    pub sweep_epochs: usize,
    pub total_steps: usize,
    pub loss: LossKind,
    pub output_units: usize,
    pub multiple_choice: bool,
    pub metrics: &'static [MetricKind],
}

pub const SUPERGLUE_RECIPE: [RecipeRow; 8] = {
    use LossKind::*;
    use MetricKind::*;
    [
        RecipeRow { dataset: "BoolQ", epochs: 10, sweep_epochs: 3, total_steps: 11_790, loss: Bce, output_units: 1, multiple_choice: false, metrics: &[Acc] },
        RecipeRow { dataset: "CB", epochs: 10, sweep_epochs: 3, total_steps: 320, loss: Cce, output_units: 3, multiple_choice: false, metrics: &[F1Macro, Acc] },
        RecipeRow { dataset: "COPA", epochs: 10, sweep_epochs: 3, total_steps: 1_000, loss: Bce, output_units: 1, multiple_choice: true, metrics: &[Acc] },
        RecipeRow { dataset: "MultiRC", epochs: 5, sweep_epochs: 3, total_steps: 17_030, loss: Bce, output_units: 1, multiple_choice: false, metrics: &[F1A, EMq] },
        RecipeRow { dataset: "ReCoRD", epochs: 1, sweep_epochs: 1, total_steps: 147_425, loss: Bce, output_units: 1, multiple_choice: false, metrics: &[F1Token, EM] },
        RecipeRow { dataset: "RTE", epochs: 10, sweep_epochs: 3, total_steps: 3_120, loss: Bce, output_units: 1, multiple_choice: false, metrics: &[Acc] },
        RecipeRow { dataset: "WiC", epochs: 10, sweep_epochs: 3, total_steps: 6_790, loss: Bce, output_units: 1, multiple_choice: false, metrics: &[Acc] },
        RecipeRow { dataset: "WSC", epochs: 10, sweep_epochs: 3, total_steps: 700, loss: Bce, output_units: 1, multiple_choice: false, metrics: &[Acc] },
    ]
};

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    tokens: Vec<usize>,
    label: usize,
    group: Option<usize>,
    choice: Option<usize>,
    #[serde(default, skip_serializing_if = "all_zero")]
    segments: Vec<usize>,
}

fn all_zero(v: &[usize]) -> bool {
    v.iter().all(|&s| s == 0)
}

/// One JSON object per example: `tokens`, `label`, `group`, `choice`
/// (plus `segments` when any segment id is non-zero).
pub fn examples_to_jsonl(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        let rec = ExampleRecord {
            tokens: e.tokens.clone(),
            label: e.label,
            group: e.group_id,
            choice: e.choice_id,
            segments: e.segment_ids.clone(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_examples_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(examples_to_jsonl(examples)?.as_bytes())?;
    Ok(())
}

pub fn read_examples_jsonl(path: &Path) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        let segment_ids = if rec.segments.is_empty() {
            vec![0; rec.tokens.len()]
        } else if rec.segments.len() == rec.tokens.len() {
            rec.segments
        } else {
            return Err(Error::parse(path, i + 1, "segments and tokens differ in length"));
        };
        out.push(Example {
            mask: rec.tokens.iter().map(|&t| t != PAD).collect(),
            tokens: rec.tokens,
            segment_ids,
            label: rec.label,
            group_id: rec.group,
            choice_id: rec.choice,
        });
    }
    Ok(out)
}
