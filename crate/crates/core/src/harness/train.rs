//! Data preparation, the fine-tuning loop and per-epoch evaluation.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use super::config::{ExperimentConfig, TaskKind};
use crate::autodiff::{DropoutMode, Graph};
use crate::error::{Error, Result};
use crate::gating::GatingConfig;
use crate::metrics::{self, EpochRecord, MetricKind, RunRecord};
use crate::model::{self, init_params, model_forward, ForwardOptions, ModelConfig};
use crate::optim::{adamw_step, OptimState};
use crate::params::ParamStore;
use crate::seed::{derive_seed, Stream};
use crate::tasks::{self, batch_iter, collate, superglue, Example, LossKind, TaskSpec, Vocab};
use crate::tensor::{self, Tensor};

/// Examples per evaluation forward pass.
const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub task: TaskSpec,
    pub vocab: Vocab,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

/// Generates or loads the task data. Synthetic sets draw train and validation
/// from one generator call, so they never share a seed-identical prefix.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let task = cfg.task_spec()?;
    let (vocab, train, val) = match cfg.task {
        TaskKind::Majority | TaskKind::GatedCopy => {
            let n = cfg.n_train + cfg.n_val;
            let mut d = match cfg.task {
                TaskKind::Majority => tasks::gen_majority(cfg.data_seed, n, cfg.seq_len)?,
                _ => tasks::gen_gated_copy(cfg.data_seed, n, cfg.seq_len, cfg.n_symbols)?,
            };
            let val = d.examples.split_off(cfg.n_train);
            (d.vocab, d.examples, val)
        }
        TaskKind::SuperGlue(schema) => {
            let missing = || Error::Config(format!("task {} needs train_file and val_file", schema));
            let train_pairs = superglue::read_superglue_jsonl(cfg.train_file.as_ref().ok_or_else(missing)?, schema)?;
            let val_pairs = superglue::read_superglue_jsonl(cfg.val_file.as_ref().ok_or_else(missing)?, schema)?;
            let vocab = Vocab::build(train_pairs.iter().flat_map(|p| [p.first.as_str(), p.second.as_str()]));
            let train = superglue::encode_pairs(&train_pairs, &vocab, cfg.max_len)?;
            let val = superglue::encode_pairs(&val_pairs, &vocab, cfg.max_len)?;
            (vocab, train, val)
        }
    };
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training or validation set"));
    }
    if let Some(e) = train.iter().chain(&val).find(|e| e.label >= task.num_classes) {
        return Err(Error::Config(format!("label {} out of range for {} classes", e.label, task.num_classes)));
    }
    Ok(PreparedData { task, vocab, train, val })
}

/// Model and gating configuration for prepared data.
pub fn resolve_model(cfg: &ExperimentConfig, data: &PreparedData) -> Result<(ModelConfig, GatingConfig)> {
    let model = cfg.model_config(data.vocab.len(), data.task.output_units)?;
    let gating = cfg.gating_config();
    gating.validate(model.num_layers)?;
    Ok((model, gating))
}

/// Fresh parameters for `seed`; host weights are replaced from `host` when
/// given, gating blocks are always freshly initialized.
pub fn initial_params(
    model: &ModelConfig,
    gating: &GatingConfig,
    seed: u64,
    host: Option<&ParamStore>,
) -> Result<ParamStore> {
    let mut params = init_params(model, gating, seed)?;
    if let Some(host) = host {
        for spec in model::host_param_specs(model) {
            let loaded = host.get(&spec.name)?;
            if loaded.shape() != spec.shape.as_slice() {
                return Err(Error::shape("host_params", &spec.shape, loaded.shape()));
            }
            *params.get_mut(&spec.name)? = loaded.clone();
        }
    }
    Ok(params)
}

#[derive(Clone, Debug, Serialize)]
pub struct GateRecord<'a> {
    pub seed: u64,
    pub epoch: usize,
    pub batch: usize,
    pub position: usize,
    pub shape: &'a [usize],
    pub values: &'a [f64],
}

/// Gate tensors go to `sink` as JSON lines.
pub struct GateDump<'a> {
    pub sink: &'a mut dyn Write,
    pub seed: u64,
    pub epoch: usize,
}

/// Validation metrics (fractions) keyed by metric name.
pub fn evaluate(
    params: &ParamStore,
    model: &ModelConfig,
    gating: &GatingConfig,
    task: &TaskSpec,
    examples: &[Example],
    mut gates: Option<GateDump<'_>>,
) -> Result<BTreeMap<String, f64>> {
    let mut logits: Vec<f64> = Vec::with_capacity(examples.len() * task.output_units);
    for (b, chunk) in examples.chunks(EVAL_BATCH).enumerate() {
        let refs: Vec<&Example> = chunk.iter().collect();
        let input = collate(&refs)?;
        let mut g = Graph::new(DropoutMode::Disabled);
        let out = model_forward(&mut g, params, model, gating, &input, ForwardOptions::eval())?;
        logits.extend_from_slice(g.value(out.logits).data());
        if let Some(dump) = gates.as_mut() {
            for &(position, node) in &out.gates {
                let t = g.value(node);
                let rec = GateRecord { seed: dump.seed, epoch: dump.epoch, batch: b, position, shape: t.shape(), values: t.data() };
                serde_json::to_writer(&mut *dump.sink, &rec)?;
                dump.sink.write_all(b"\n")?;
            }
        }
    }
    score(task, examples, &logits)
}

fn score(task: &TaskSpec, examples: &[Example], logits: &[f64]) -> Result<BTreeMap<String, f64>> {
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let preds: Vec<usize> = if task.output_units == 1 {
        logits.iter().map(|&z| usize::from(z > 0.0)).collect()
    } else {
        let t = Tensor::new(vec![examples.len(), task.output_units], logits.to_vec())?;
        tensor::argmax_last(&t)
    };
    let groups: Vec<usize> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| e.group_id.unwrap_or(usize::MAX - i))
        .collect();

    let mut out = BTreeMap::new();
    for &m in &task.metrics {
        let v = match m {
            MetricKind::Acc if task.multiple_choice => choice_accuracy(examples, logits)?,
            MetricKind::Acc | MetricKind::EM => metrics::accuracy(&preds, &labels)?,
            MetricKind::F1 | MetricKind::F1A => metrics::f1_binary(&preds, &labels)?,
            MetricKind::F1Macro => metrics::f1_macro(&preds, &labels, task.num_classes)?,
            MetricKind::EMq => metrics::em_grouped(&preds, &labels, &groups)?,
            MetricKind::F1Token => {
                return Err(Error::Config(format!("task {}: token F1 needs span answers", task.name)))
            }
        };
        out.insert(m.as_str().to_string(), v);
    }
    Ok(out)
}

/// Per question, the option with the highest probability is the answer; it is
/// correct when that option's label is 1.
fn choice_accuracy(examples: &[Example], logits: &[f64]) -> Result<f64> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        let g = e.group_id.ok_or_else(|| Error::InvalidArgument("multiple-choice example without group".into()))?;
        groups.entry(g).or_default().push(i);
    }
    let mut correct = 0;
    for members in groups.values() {
        let probs: Vec<f64> = members.iter().map(|&i| tensor::sigmoid_scalar(logits[i])).collect();
        let pick = members[metrics::max_choice_select(&probs)?];
        correct += usize::from(examples[pick].label == 1);
    }
    Ok(correct as f64 / groups.len() as f64)
}

/// Outcome of one seed.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub record: RunRecord,
    pub params: ParamStore,
}

/// Fine-tunes one seed: shuffled batches, dropout, AdamW under the cosine
/// schedule, and a validation pass after every epoch.
pub fn train_run(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
    host: Option<&ParamStore>,
    mut gate_sink: Option<&mut dyn Write>,
) -> Result<TrainedRun> {
    cfg.validate()?;
    let (model, gating) = resolve_model(cfg, data)?;
    let optim = cfg.optim_config(data.train.len());
    let loss_kind = data.task.loss();
    let mut params = initial_params(&model, &gating, seed, host)?;
    let mut state = OptimState::default();
    let mut record = RunRecord::new(seed);

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        let batches = batch_iter(&data.train, cfg.batch_size, seed, epoch)?;
        for idx in &batches {
            let refs: Vec<&Example> = idx.iter().map(|&i| &data.train[i]).collect();
            let input = collate(&refs)?;
            let mut g = Graph::new(DropoutMode::Live(derive_seed(seed, Stream::Dropout, state.step as u64)));
            let out = model_forward(&mut g, &params, &model, &gating, &input, ForwardOptions::train())?;
            let loss = match loss_kind {
                LossKind::Bce => {
                    let targets: Vec<f64> = refs.iter().map(|e| e.label as f64).collect();
                    g.bce_with_logits(out.logits, &targets)?
                }
                LossKind::Cce => {
                    let labels: Vec<usize> = refs.iter().map(|e| e.label).collect();
                    g.cross_entropy(out.logits, &labels)?
                }
            };
            loss_sum += g.value(loss).item();
            let grads = g.backward(loss)?;
            lr = adamw_step(&mut params, &grads, &mut state, &optim)?;
        }
        let dump = match (gate_sink.as_deref_mut(), epoch + 1 == cfg.epochs) {
            (Some(sink), true) => Some(GateDump { sink, seed, epoch }),
            _ => None,
        };
        let metrics = evaluate(&params, &model, &gating, &data.task, &data.val, dump)?;
        record.epochs.push(EpochRecord {
            seed,
            epoch,
            metrics,
            lr,
            loss: loss_sum / batches.len() as f64,
        });
    }
    Ok(TrainedRun { record, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::parse(
            "n_train = 64\nn_val = 32\nseq_len = 5\nepochs = 2\nhidden = 8\nheads = 2\nintermediate = 16\nlayers = 2\n",
            Path::new("t.cfg"),
        )
        .unwrap();
        c.seeds = vec![1];
        c
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let mut cfg = small();
        cfg.epochs = 0;
        let data = prepare_data(&cfg).unwrap();
        let run = train_run(&cfg, &data, 1, None, None).unwrap();
        assert!(run.record.epochs.is_empty());
        let (m, g) = resolve_model(&cfg, &data).unwrap();
        assert_eq!(run.params, init_params(&m, &g, 1).unwrap());
    }

    #[test]
    fn records_are_deterministic_per_seed() {
        let cfg = small();
        let data = prepare_data(&cfg).unwrap();
        let a = train_run(&cfg, &data, 3, None, None).unwrap();
        let b = train_run(&cfg, &data, 3, None, None).unwrap();
        assert_eq!(a.record.to_jsonl().unwrap(), b.record.to_jsonl().unwrap());
        assert_eq!(a.params, b.params);
        let c = train_run(&cfg, &data, 4, None, None).unwrap();
        assert_ne!(a.record.to_jsonl().unwrap(), c.record.to_jsonl().unwrap());
        assert_eq!(a.record.epochs.len(), 2);
        assert!(a.record.epochs[1].lr < a.record.epochs[0].lr);
    }

    #[test]
    fn host_weights_load_but_gates_stay_fresh() {
        let cfg = small();
        let data = prepare_data(&cfg).unwrap();
        let (m, g) = resolve_model(&cfg, &data).unwrap();
        let host = train_run(&cfg, &data, 5, None, None).unwrap().params;
        let p = initial_params(&m, &g, 9, Some(&host)).unwrap();
        let fresh = init_params(&m, &g, 9).unwrap();
        for (name, t) in p.iter() {
            let expected = if name.starts_with("gate.") { fresh.get(name) } else { host.get(name) };
            assert_eq!(t, expected.unwrap(), "{name}");
        }
    }

    #[test]
    fn gates_are_dumped_for_the_final_epoch() {
        let cfg = small();
        let data = prepare_data(&cfg).unwrap();
        let mut buf: Vec<u8> = Vec::new();
        train_run(&cfg, &data, 1, None, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["epoch"], 1);
        assert_eq!(first["position"], 1);
        assert_eq!(first["shape"], serde_json::json!([32, 7, 8]));
        assert!(first["values"].as_array().unwrap().iter().all(|v| {
            let v = v.as_f64().unwrap();
            v > 0.0 && v < 1.0
        }));
    }

    #[test]
    fn multiple_choice_scoring_picks_the_most_probable_option() {
        let mut ex: Vec<Example> = (0..4)
            .map(|i| tasks::encode_ids(&[4], None, 3).unwrap().into_example(usize::from(i % 2 == 1)))
            .collect();
        tasks::synthetic::group_consecutive(&mut ex, 2);
        // group 0 picks option 1 (label 1), group 1 ties and picks option 0 (label 0)
        assert_eq!(choice_accuracy(&ex, &[-1.0, 2.0, 0.5, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn cb_style_scoring() {
        let task = TaskSpec::multiclass("cb", 3, vec![MetricKind::F1Macro, MetricKind::Acc]);
        let ex: Vec<Example> = [0, 1, 2]
            .iter()
            .map(|&l| tasks::encode_ids(&[4], None, 3).unwrap().into_example(l))
            .collect();
        let logits = [3.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 3.0, 0.0];
        let m = score(&task, &ex, &logits).unwrap();
        assert!((m["acc"] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m["f1_macro"] - (1.0 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
    }
}
