//! Flat `key = value` experiment configuration.
//!
//! `#` starts a comment. Keys may appear in any order; `profile` is applied
//! first so that the remaining keys override its defaults. Unknown or
//! repeated keys are errors.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gating::{sweep_positions, GatingConfig, GatingVariant};
use crate::metrics::MetricKind;
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::tasks::{LossKind, Schema, TaskSpec};

/// Every accepted key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("profile", "toy | bert-large-cased; sets the defaults below"),
    ("task", "majority | gated-copy | boolq | cb | rte"),
    ("seq_len", "synthetic tasks: tokens per example (majority needs it odd)"),
    ("n_train", "synthetic tasks: training examples"),
    ("n_val", "synthetic tasks: validation examples"),
    ("n_symbols", "gated-copy: symbol alphabet size (= classes)"),
    ("train_file", "SuperGLUE tasks: training JSONL"),
    ("val_file", "SuperGLUE tasks: validation JSONL"),
    ("max_len", "SuperGLUE tasks: encoded length incl. [CLS]/[SEP]"),
    ("data_seed", "seed of the synthetic data generator"),
    ("variant", "no-gating-block | neuromodulated-gating | non-neuromodulated-gating"),
    ("positions", "comma-separated 1-based layers the gating blocks follow"),
    ("gb_depth", "encoder layers per gating block"),
    ("passthrough_sigmoid", "keep the sigmoid in the non-neuromodulated variant"),
    ("hidden", "hidden size H"),
    ("layers", "encoder layers L"),
    ("heads", "attention heads A"),
    ("intermediate", "feed-forward size I"),
    ("max_positions", "position-embedding table size"),
    ("dropout", "dropout rate"),
    ("init_std", "std of the normal weight init"),
    ("ln_eps", "layer-norm epsilon"),
    ("output_units", "head outputs; default 1 for binary tasks, else #classes"),
    ("loss", "bce | cce; must agree with output_units"),
    ("epochs", "training epochs"),
    ("batch_size", "examples per step"),
    ("lr0", "initial learning rate"),
    ("beta1", "AdamW beta1"),
    ("beta2", "AdamW beta2"),
    ("weight_decay", "decoupled weight decay"),
    ("adam_eps", "AdamW epsilon"),
    ("total_steps", "cosine horizon; default ceil(n_train / batch_size) * epochs"),
    ("seeds", "comma-separated run seeds"),
    ("host_params", "parameter file to load host weights from"),
    ("out", "output directory"),
    ("dump_gates", "write gate tensors of the final validation pass"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Toy,
    BertLargeCased,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Toy => "toy",
            Profile::BertLargeCased => "bert-large-cased",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "bert-large-cased" => Ok(Profile::BertLargeCased),
            _ => Err(Error::Config(format!("unknown profile `{s}` (toy, bert-large-cased)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Majority,
    GatedCopy,
    SuperGlue(Schema),
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Majority => "majority",
            TaskKind::GatedCopy => "gated-copy",
            TaskKind::SuperGlue(s) => s.as_str(),
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(TaskKind::Majority),
            "gated-copy" => Ok(TaskKind::GatedCopy),
            other => other.parse().map(TaskKind::SuperGlue),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub task: TaskKind,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_symbols: usize,
    pub train_file: Option<PathBuf>,
    pub val_file: Option<PathBuf>,
    pub max_len: usize,
    pub data_seed: u64,

    pub variant: GatingVariant,
    /// `None` places one block at the profile's end position.
    pub positions: Option<Vec<usize>>,
    pub gb_depth: usize,
    pub passthrough_sigmoid: bool,

    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    /// Fixed vocabulary size; `None` sizes the embedding to the task vocabulary.
    pub vocab_size: Option<usize>,
    pub dropout: f64,
    pub init_std: f64,
    pub ln_eps: f64,
    pub output_units: Option<usize>,
    pub loss: Option<LossKind>,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub total_steps: Option<usize>,

    pub seeds: Vec<u64>,
    pub host_params: Option<PathBuf>,
    pub out: PathBuf,
    pub dump_gates: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Toy)
    }
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let toy = profile == Profile::Toy;
        let geometry = match profile {
            Profile::Toy => ModelConfig::toy(1, 32, 1),
            Profile::BertLargeCased => ModelConfig::bert_large_cased(1),
        };
        let fine = OptimConfig::fine_tuning(1);
        Self {
            profile,
            task: TaskKind::Majority,
            seq_len: 15,
            n_train: 2000,
            n_val: 500,
            n_symbols: 4,
            train_file: None,
            val_file: None,
            max_len: if toy { 32 } else { 512 },
            data_seed: 0,
            variant: GatingVariant::NeuromodulatedGating,
            positions: None,
            gb_depth: if toy { 1 } else { GatingConfig::DEFAULT_DEPTH },
            passthrough_sigmoid: false,
            hidden: geometry.hidden,
            layers: geometry.num_layers,
            heads: geometry.heads,
            intermediate: geometry.intermediate,
            max_positions: geometry.max_positions,
            vocab_size: (!toy).then_some(geometry.vocab_size),
            dropout: geometry.dropout,
            init_std: geometry.init_std,
            ln_eps: geometry.ln_eps,
            output_units: None,
            loss: None,
            epochs: if toy { 20 } else { 10 },
            batch_size: crate::tasks::DEFAULT_BATCH_SIZE,
            lr0: if toy { 3e-4 } else { fine.lr0 },
            beta1: fine.beta1,
            beta2: fine.beta2,
            weight_decay: fine.weight_decay,
            adam_eps: fine.eps,
            total_steps: None,
            seeds: vec![1, 2, 3],
            host_params: None,
            out: PathBuf::from("runs"),
            dump_gates: false,
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut pairs: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if !CONFIG_KEYS.iter().any(|(name, _)| *name == k) {
                return Err(Error::parse(path, i + 1, format!("unknown key `{k}`")));
            }
            if pairs.iter().any(|(_, seen, _)| *seen == k) {
                return Err(Error::parse(path, i + 1, format!("key `{k}` given twice")));
            }
            pairs.push((i + 1, k, v));
        }
        let mut cfg = match pairs.iter().find(|(_, k, _)| k == "profile") {
            Some((line, _, v)) => Self::for_profile(v.parse().map_err(|e: Error| Error::parse(path, *line, e.to_string()))?),
            None => Self::default(),
        };
        for (line, k, v) in &pairs {
            if k != "profile" {
                cfg.set(k, v).map_err(|e| Error::parse(path, *line, e.to_string()))?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    /// Applies one key. `profile` resets every other key to its defaults.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',').map(|p| num(key, p.trim())).collect()
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
            }
        }
        fn opt_path(v: &str) -> Option<PathBuf> {
            (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
        }
        let auto = value == "auto" || value == "none";
        match key {
            "profile" => *self = Self::for_profile(value.parse()?),
            "task" => self.task = value.parse()?,
            "seq_len" => self.seq_len = num(key, value)?,
            "n_train" => self.n_train = num(key, value)?,
            "n_val" => self.n_val = num(key, value)?,
            "n_symbols" => self.n_symbols = num(key, value)?,
            "train_file" => self.train_file = opt_path(value),
            "val_file" => self.val_file = opt_path(value),
            "max_len" => self.max_len = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "positions" => self.positions = if auto { None } else { Some(list(key, value)?) },
            "gb_depth" => self.gb_depth = num(key, value)?,
            "passthrough_sigmoid" => self.passthrough_sigmoid = flag(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "intermediate" => self.intermediate = num(key, value)?,
            "max_positions" => self.max_positions = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            "ln_eps" => self.ln_eps = num(key, value)?,
            "output_units" => self.output_units = if auto { None } else { Some(num(key, value)?) },
            "loss" => {
                self.loss = match value {
                    "bce" => Some(LossKind::Bce),
                    "cce" => Some(LossKind::Cce),
                    "auto" => None,
                    _ => return Err(Error::Config(format!("`loss`: expected bce, cce or auto, got `{value}`"))),
                }
            }
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr0" => self.lr0 = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "total_steps" => self.total_steps = if auto { None } else { Some(num(key, value)?) },
            "seeds" => self.seeds = list(key, value)?,
            "host_params" => self.host_params = opt_path(value),
            "out" => self.out = PathBuf::from(value),
            "dump_gates" => self.dump_gates = flag(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value; parsing the result gives back an
    /// equal config.
    pub fn to_config_string(&self) -> String {
        let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let positions = match &self.positions {
            Some(p) => p.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            None => "auto".into(),
        };
        let opt = |v: Option<usize>| v.map_or("auto".to_string(), |v| v.to_string());
        let loss = match self.loss {
            Some(LossKind::Bce) => "bce",
            Some(LossKind::Cce) => "cce",
            None => "auto",
        };
        let values: Vec<(&str, String)> = vec![
            ("profile", self.profile.to_string()),
            ("task", self.task.as_str().to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("n_symbols", self.n_symbols.to_string()),
            ("train_file", path(&self.train_file)),
            ("val_file", path(&self.val_file)),
            ("max_len", self.max_len.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("variant", self.variant.to_string()),
            ("positions", positions),
            ("gb_depth", self.gb_depth.to_string()),
            ("passthrough_sigmoid", self.passthrough_sigmoid.to_string()),
            ("hidden", self.hidden.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("intermediate", self.intermediate.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("init_std", format!("{:?}", self.init_std)),
            ("ln_eps", format!("{:?}", self.ln_eps)),
            ("output_units", opt(self.output_units)),
            ("loss", loss.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr0", format!("{:?}", self.lr0)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("adam_eps", format!("{:?}", self.adam_eps)),
            ("total_steps", opt(self.total_steps)),
            ("seeds", join(&self.seeds)),
            ("host_params", path(&self.host_params)),
            ("out", self.out.display().to_string()),
            ("dump_gates", self.dump_gates.to_string()),
        ];
        debug_assert_eq!(values.len(), CONFIG_KEYS.len());
        values.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn resolved_positions(&self) -> Vec<usize> {
        match &self.positions {
            Some(p) => p.clone(),
            None => vec![sweep_positions(self.layers).1],
        }
    }

    pub fn gating_config(&self) -> GatingConfig {
        let mut g = GatingConfig::for_variant(self.variant, self.resolved_positions(), self.gb_depth);
        g.passthrough_sigmoid = self.passthrough_sigmoid;
        g
    }

    /// Number of classes and the task's metrics.
    fn task_shape(&self) -> (usize, Vec<MetricKind>) {
        use MetricKind::*;
        match self.task {
            TaskKind::Majority => (2, vec![Acc]),
            TaskKind::GatedCopy => (self.n_symbols, vec![Acc, F1Macro]),
            TaskKind::SuperGlue(Schema::Cb) => (3, vec![F1Macro, Acc]),
            TaskKind::SuperGlue(_) => (2, vec![Acc]),
        }
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        let (classes, metrics) = self.task_shape();
        let default_units = if classes == 2 { 1 } else { classes };
        let units = self.output_units.unwrap_or(default_units);
        let spec = TaskSpec {
            name: self.task.as_str().to_string(),
            num_classes: classes,
            output_units: units,
            metrics,
            multiple_choice: false,
        };
        if let Some(loss) = self.loss {
            if loss != spec.loss() {
                return Err(Error::Config(format!(
                    "loss {} is inconsistent with {units} output unit(s); bce needs 1, cce needs one per class",
                    if loss == LossKind::Bce { "bce" } else { "cce" }
                )));
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn model_config(&self, task_vocab: usize, output_units: usize) -> Result<ModelConfig> {
        let vocab_size = match self.vocab_size {
            Some(v) if v < task_vocab => {
                return Err(Error::Config(format!(
                    "profile vocabulary of {v} cannot hold the task's {task_vocab} tokens"
                )))
            }
            Some(v) => v,
            None => task_vocab,
        };
        let cfg = ModelConfig {
            vocab_size,
            max_positions: self.max_positions,
            type_vocab: 2,
            hidden: self.hidden,
            num_layers: self.layers,
            heads: self.heads,
            intermediate: self.intermediate,
            ln_eps: self.ln_eps,
            dropout: self.dropout,
            init_std: self.init_std,
            output_units,
            has_pooler: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size.max(1))
    }

    pub fn optim_config(&self, n_train: usize) -> OptimConfig {
        let total = self.total_steps.unwrap_or(self.steps_per_epoch(n_train) * self.epochs);
        OptimConfig {
            lr0: self.lr0,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.adam_eps,
            // a zero-epoch run never steps; keep the schedule well defined
            total_steps: total.max(1),
        }
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        self.task_spec()?;
        self.gating_config().validate(self.layers)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if let Some(s) = self.seeds.iter().enumerate().find(|(i, s)| self.seeds[..*i].contains(s)) {
            return Err(Error::Config(format!("seed {} listed twice", s.1)));
        }
        let encoded_len = match self.task {
            TaskKind::SuperGlue(_) => self.max_len,
            _ => self.seq_len + 2,
        };
        if encoded_len > self.max_positions {
            return Err(Error::Config(format!(
                "encoded length {encoded_len} exceeds max_positions {}",
                self.max_positions
            )));
        }
        if let TaskKind::SuperGlue(_) = self.task {
            if self.train_file.is_none() || self.val_file.is_none() {
                return Err(Error::Config(format!("task {} needs train_file and val_file", self.task.as_str())));
            }
        } else if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("n_train and n_val must be positive".into()));
        }
        self.model_config(self.vocab_size.unwrap_or(1), self.task_spec()?.output_units)?;
        self.optim_config(self.n_train).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("exp.cfg"))
    }

    #[test]
    fn toy_profile_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!((c.hidden, c.layers, c.heads, c.intermediate), (32, 4, 4, 64));
        assert_eq!((c.gb_depth, c.max_len, c.lr0, c.batch_size), (1, 32, 3e-4, 8));
        assert_eq!(c.resolved_positions(), vec![3]);
        assert_eq!(c.seeds.len(), 3);
        c.validate().unwrap();
    }

    #[test]
    fn bert_profile_defaults() {
        let c = parse("profile = bert-large-cased\n").unwrap();
        assert_eq!(c.resolved_positions(), vec![21]);
        assert_eq!(c.gb_depth, 3);
        assert_eq!(c.lr0, 1e-5);
        let m = c.model_config(6, 1).unwrap();
        assert_eq!(m, ModelConfig::bert_large_cased(1));
    }

    #[test]
    fn comments_overrides_and_order() {
        let c = parse("# exp\nlayers = 6  # deeper\nprofile = toy\npositions = 2,5\nseeds = 4\n").unwrap();
        assert_eq!(c.layers, 6);
        assert_eq!(c.resolved_positions(), vec![2, 5]);
        assert_eq!(c.seeds, vec![4]);
    }

    #[test]
    fn unknown_and_repeated_keys_are_rejected() {
        let err = parse("epochs = 2\nlearning_rate = 1\n").unwrap_err();
        assert!(err.to_string().starts_with("exp.cfg:2: unknown key"), "{err}");
        assert!(parse("epochs = 2\nepochs = 3\n").is_err());
        assert!(parse("epochs\n").is_err());
        assert!(parse("epochs = two\n").unwrap_err().to_string().starts_with("exp.cfg:1:"));
    }

    #[test]
    fn snapshot_round_trips() {
        let c = parse("task = gated-copy\nn_symbols = 5\nlr0 = 0.00123\nloss = cce\ntotal_steps = 77\nhost_params = a/b.txt\n").unwrap();
        let text = c.to_config_string();
        assert_eq!(text.lines().count(), CONFIG_KEYS.len());
        assert_eq!(parse(&text).unwrap(), c);
        assert_eq!(parse(&ExperimentConfig::default().to_config_string()).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn loss_must_match_output_units() {
        let c = parse("task = cb\ntrain_file = a\nval_file = b\nloss = cce\noutput_units = 1\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("inconsistent"));
        let ok = parse("task = cb\ntrain_file = a\nval_file = b\nloss = cce\n").unwrap();
        ok.validate().unwrap();
        assert_eq!(ok.task_spec().unwrap().output_units, 3);
        assert!(parse("loss = cce\n").unwrap().validate().is_err());
    }

    #[test]
    fn total_steps_rule() {
        let c = ExperimentConfig::default();
        assert_eq!(c.optim_config(2000).total_steps, 250 * 20);
        assert_eq!(c.optim_config(2001).total_steps, 251 * 20);
        let o = parse("total_steps = 11790\n").unwrap();
        assert_eq!(o.optim_config(5).total_steps, 11_790);
    }

    #[test]
    fn invalid_combinations() {
        assert!(parse("seq_len = 40\n").unwrap().validate().is_err());
        assert!(parse("positions = 5\n").unwrap().validate().is_err());
        assert!(parse("positions = 3,2\n").unwrap().validate().is_err());
        assert!(parse("task = rte\n").unwrap().validate().is_err());
        assert!(parse("seeds = 1,1\n").unwrap().validate().is_err());
        assert!(parse("heads = 5\n").unwrap().validate().is_err());
        assert!(parse("variant = no-gating-block\n").unwrap().validate().is_ok());
    }
}
