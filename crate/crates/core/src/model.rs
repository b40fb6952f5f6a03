//! BERT-shaped encoder: embeddings, post-norm encoder layers, pooler and a
//! single-layer prediction head read at the classification token.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::gating::{self, GatingConfig};
use crate::params::ParamStore;
use crate::seed::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Additive logit offset for masked key positions.
pub const MASK_VALUE: f64 = -1e9;

/// Position of the classification token.
pub const CLS_POSITION: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub type_vocab: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub ln_eps: f64,
    pub dropout: f64,
    pub init_std: f64,
    pub output_units: usize,
    pub has_pooler: bool,
}

impl ModelConfig {
    /// bert-large-cased geometry.
    pub fn bert_large_cased(output_units: usize) -> Self {
        Self {
            vocab_size: 28996,
            max_positions: 512,
            type_vocab: 2,
            hidden: 1024,
            num_layers: 24,
            heads: 16,
            intermediate: 4096,
            ln_eps: 1e-12,
            dropout: 0.1,
            init_std: 0.02,
            output_units,
            has_pooler: true,
        }
    }

    /// Desk-scale default: H=32, L=4, A=4, I=64.
    pub fn toy(vocab_size: usize, max_positions: usize, output_units: usize) -> Self {
        Self {
            vocab_size,
            max_positions,
            type_vocab: 2,
            hidden: 32,
            num_layers: 4,
            heads: 4,
            intermediate: 64,
            ln_eps: 1e-12,
            dropout: 0.1,
            init_std: 0.02,
            output_units,
            has_pooler: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("type_vocab", self.type_vocab),
            ("hidden", self.hidden),
            ("num_layers", self.num_layers),
            ("heads", self.heads),
            ("intermediate", self.intermediate),
            ("output_units", self.output_units),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config(format!("init_std must be positive, got {}", self.init_std)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamInit {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

impl ParamSpec {
    fn new(name: String, shape: &[usize], init: ParamInit) -> Self {
        Self { name, shape: shape.to_vec(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Trainable scalars in one encoder layer:
/// `4(H^2 + H) + (HI + I) + (IH + H) + 4H`.
pub fn layer_param_count(hidden: usize, intermediate: usize) -> usize {
    let (h, i) = (hidden, intermediate);
    4 * (h * h + h) + (h * i + i) + (i * h + h) + 4 * h
}

/// Trainable scalar count, computed in closed form.
pub fn param_count(cfg: &ModelConfig, gating: &GatingConfig) -> usize {
    let h = cfg.hidden;
    let embeddings = (cfg.vocab_size + cfg.max_positions + cfg.type_vocab) * h + 2 * h;
    let layers = cfg.num_layers * layer_param_count(h, cfg.intermediate);
    let pooler = if cfg.has_pooler { h * h + h } else { 0 };
    let head = h * cfg.output_units + cfg.output_units;
    embeddings + layers + pooler + head + gating_param_count(cfg, gating)
}

pub fn gating_param_count(cfg: &ModelConfig, gating: &GatingConfig) -> usize {
    gating.block_count() * gating.gb_depth * layer_param_count(cfg.hidden, cfg.intermediate)
}

pub(crate) fn layer_specs(prefix: &str, cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (h, i) = (cfg.hidden, cfg.intermediate);
    let mut specs = Vec::with_capacity(16);
    for proj in ["query", "key", "value", "output"] {
        specs.push(ParamSpec::new(format!("{prefix}.attn.{proj}.weight"), &[h, h], ParamInit::Normal));
        specs.push(ParamSpec::new(format!("{prefix}.attn.{proj}.bias"), &[h], ParamInit::Zeros));
    }
    specs.push(ParamSpec::new(format!("{prefix}.attn.ln.gamma"), &[h], ParamInit::Ones));
    specs.push(ParamSpec::new(format!("{prefix}.attn.ln.beta"), &[h], ParamInit::Zeros));
    specs.push(ParamSpec::new(format!("{prefix}.ffn.in.weight"), &[h, i], ParamInit::Normal));
    specs.push(ParamSpec::new(format!("{prefix}.ffn.in.bias"), &[i], ParamInit::Zeros));
    specs.push(ParamSpec::new(format!("{prefix}.ffn.out.weight"), &[i, h], ParamInit::Normal));
    specs.push(ParamSpec::new(format!("{prefix}.ffn.out.bias"), &[h], ParamInit::Zeros));
    specs.push(ParamSpec::new(format!("{prefix}.ffn.ln.gamma"), &[h], ParamInit::Ones));
    specs.push(ParamSpec::new(format!("{prefix}.ffn.ln.beta"), &[h], ParamInit::Zeros));
    specs
}

/// Name prefix of host encoder layer `layer` (1-based).
pub fn layer_prefix(layer: usize) -> String {
    format!("encoder.{layer}")
}

/// Everything except gating blocks, in initialization order.
pub fn host_param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let h = cfg.hidden;
    let mut specs = vec![
        ParamSpec::new("embeddings.word".into(), &[cfg.vocab_size, h], ParamInit::Normal),
        ParamSpec::new("embeddings.position".into(), &[cfg.max_positions, h], ParamInit::Normal),
        ParamSpec::new("embeddings.token_type".into(), &[cfg.type_vocab, h], ParamInit::Normal),
        ParamSpec::new("embeddings.ln.gamma".into(), &[h], ParamInit::Ones),
        ParamSpec::new("embeddings.ln.beta".into(), &[h], ParamInit::Zeros),
    ];
    for layer in 1..=cfg.num_layers {
        specs.extend(layer_specs(&layer_prefix(layer), cfg));
    }
    if cfg.has_pooler {
        specs.push(ParamSpec::new("pooler.weight".into(), &[h, h], ParamInit::Normal));
        specs.push(ParamSpec::new("pooler.bias".into(), &[h], ParamInit::Zeros));
    }
    specs.push(ParamSpec::new("head.weight".into(), &[h, cfg.output_units], ParamInit::Normal));
    specs.push(ParamSpec::new("head.bias".into(), &[cfg.output_units], ParamInit::Zeros));
    specs
}

pub(crate) fn materialize(spec: &ParamSpec, std: f64, rng: &mut impl Rng) -> Tensor {
    match spec.init {
        ParamInit::Zeros => Tensor::zeros(&spec.shape),
        ParamInit::Ones => Tensor::ones(&spec.shape),
        ParamInit::Normal => normal_tensor(&spec.shape, std, rng),
    }
}

/// `Normal(0, std^2)` draws.
pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is positive");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is non-empty")
}

/// Seeded initialization of the host model plus any gating blocks.
///
/// Host tensors come from the init stream and gating blocks from a separate
/// stream per insertion position, so the host parameters for a given seed are
/// the same whichever variant is selected.
pub fn init_params(cfg: &ModelConfig, gating: &GatingConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    gating.validate(cfg.num_layers)?;
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let mut store = ParamStore::new();
    for spec in host_param_specs(cfg) {
        let t = materialize(&spec, cfg.init_std, &mut rng);
        store.insert(spec.name, t);
    }
    gating::init_gating_params(cfg, gating, seed, &mut store)?;
    Ok(store)
}

/// One padded batch of token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInput {
    pub batch: usize,
    pub seq_len: usize,
    /// Row-major `[batch, seq_len]`.
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

impl BatchInput {
    /// Unpadded batch: every position is attended.
    pub fn unmasked(batch: usize, seq_len: usize, token_ids: Vec<usize>) -> Self {
        Self {
            batch,
            seq_len,
            segment_ids: vec![0; token_ids.len()],
            mask: vec![true; token_ids.len()],
            token_ids,
        }
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let n = self.batch * self.seq_len;
        if n == 0 || self.token_ids.len() != n || self.segment_ids.len() != n || self.mask.len() != n {
            return Err(Error::InvalidArgument(format!(
                "batch input of {}x{} has {} tokens, {} segments, {} mask entries",
                self.batch,
                self.seq_len,
                self.token_ids.len(),
                self.segment_ids.len(),
                self.mask.len()
            )));
        }
        if self.seq_len > cfg.max_positions {
            return Err(Error::SequenceTooLong { len: self.seq_len, max: cfg.max_positions });
        }
        if let Some(&id) = self.token_ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab_size });
        }
        if let Some(&s) = self.segment_ids.iter().find(|&&s| s >= cfg.type_vocab) {
            return Err(Error::InvalidArgument(format!(
                "segment id {s} out of range for {} token types",
                cfg.type_vocab
            )));
        }
        Ok(())
    }
}

/// `[batch*heads, seq, seq]` additive mask hiding padded key positions.
pub fn attention_mask(input: &BatchInput, heads: usize) -> Tensor {
    let s = input.seq_len;
    let mut data = Vec::with_capacity(input.batch * heads * s * s);
    for b in 0..input.batch {
        let row: Vec<f64> = input.mask[b * s..(b + 1) * s]
            .iter()
            .map(|&m| if m { 0.0 } else { MASK_VALUE })
            .collect();
        for _ in 0..heads * s {
            data.extend_from_slice(&row);
        }
    }
    Tensor::new(vec![input.batch * heads, s, s], data).expect("non-empty batch")
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    pub train: bool,
    /// Replaces every neuromodulating gate with this constant (oracle tests).
    pub gate_override: Option<f64>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train() -> Self {
        Self { train: true, gate_override: None }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[batch, output_units]`.
    pub logits: NodeId,
    /// Final hidden states `[batch, seq, hidden]`.
    pub hidden: NodeId,
    /// Gate tensors by insertion position.
    pub gates: Vec<(usize, NodeId)>,
}

pub(crate) fn maybe_dropout(g: &mut Graph, x: NodeId, rate: f64, train: bool) -> Result<NodeId> {
    if train {
        g.dropout(x, rate)
    } else {
        Ok(x)
    }
}

pub struct AttentionOutput {
    pub output: NodeId,
    /// Post-softmax weights `[batch*heads, seq, seq]`.
    pub probs: NodeId,
}

/// Multi-head scaled dot-product self-attention (before the residual).
pub fn self_attention(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    x: NodeId,
    mask_add: &Tensor,
    cfg: &ModelConfig,
    train: bool,
) -> Result<AttentionOutput> {
    let project = |g: &mut Graph, name: &str, with_bias: bool| -> Result<NodeId> {
        let w = g.param(params, &format!("{prefix}.attn.{name}.weight"))?;
        let b = match with_bias {
            true => Some(g.param(params, &format!("{prefix}.attn.{name}.bias"))?),
            false => None,
        };
        g.linear(x, w, b)
    };
    let q = project(g, "query", true)?;
    // The key bias adds q·b_k to a whole score row, which softmax cancels
    // exactly; it is stored and counted but left out of the arithmetic, so
    // its gradient is exactly zero instead of rounding noise.
    let k = project(g, "key", false)?;
    let v = project(g, "value", true)?;
    let q = g.split_heads(q, cfg.heads)?;
    let k = g.split_heads(k, cfg.heads)?;
    let v = g.split_heads(v, cfg.heads)?;

    let kt = g.transpose(k)?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, 1.0 / (cfg.head_dim() as f64).sqrt());
    let scores = g.add_const(scores, mask_add)?;
    let probs = g.softmax(scores)?;
    let dropped = maybe_dropout(g, probs, cfg.dropout, train)?;
    let ctx = g.bmm(dropped, v)?;
    let ctx = g.merge_heads(ctx, cfg.heads)?;

    let w = g.param(params, &format!("{prefix}.attn.output.weight"))?;
    let b = g.param(params, &format!("{prefix}.attn.output.bias"))?;
    let output = g.linear(ctx, w, Some(b))?;
    Ok(AttentionOutput { output, probs })
}

/// One post-norm encoder layer: attention + residual + LN, then GELU FFN +
/// residual + LN.
pub fn encoder_layer(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    x: NodeId,
    mask_add: &Tensor,
    cfg: &ModelConfig,
    train: bool,
) -> Result<NodeId> {
    let attn = self_attention(g, params, prefix, x, mask_add, cfg, train)?.output;
    let attn = maybe_dropout(g, attn, cfg.dropout, train)?;
    let res = g.add(x, attn)?;
    let gamma = g.param(params, &format!("{prefix}.attn.ln.gamma"))?;
    let beta = g.param(params, &format!("{prefix}.attn.ln.beta"))?;
    let h1 = g.layer_norm(res, gamma, beta, cfg.ln_eps)?;

    let w_in = g.param(params, &format!("{prefix}.ffn.in.weight"))?;
    let b_in = g.param(params, &format!("{prefix}.ffn.in.bias"))?;
    let inner = g.linear(h1, w_in, Some(b_in))?;
    let inner = g.gelu(inner);
    let w_out = g.param(params, &format!("{prefix}.ffn.out.weight"))?;
    let b_out = g.param(params, &format!("{prefix}.ffn.out.bias"))?;
    let ffn = g.linear(inner, w_out, Some(b_out))?;
    let ffn = maybe_dropout(g, ffn, cfg.dropout, train)?;
    let res = g.add(h1, ffn)?;
    let gamma = g.param(params, &format!("{prefix}.ffn.ln.gamma"))?;
    let beta = g.param(params, &format!("{prefix}.ffn.ln.beta"))?;
    g.layer_norm(res, gamma, beta, cfg.ln_eps)
}

/// Token + position + segment embeddings, layer norm and dropout.
pub fn embed(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &ModelConfig,
    input: &BatchInput,
    train: bool,
) -> Result<NodeId> {
    let lead = [input.batch, input.seq_len];
    let word = g.param(params, "embeddings.word")?;
    let word = g.embedding(word, &input.token_ids, &lead)?;
    let positions: Vec<usize> = (0..input.batch).flat_map(|_| 0..input.seq_len).collect();
    let pos = g.param(params, "embeddings.position")?;
    let pos = g.embedding(pos, &positions, &lead)?;
    let typ = g.param(params, "embeddings.token_type")?;
    let typ = g.embedding(typ, &input.segment_ids, &lead)?;
    let sum = g.add(word, pos)?;
    let sum = g.add(sum, typ)?;
    let gamma = g.param(params, "embeddings.ln.gamma")?;
    let beta = g.param(params, "embeddings.ln.beta")?;
    let x = g.layer_norm(sum, gamma, beta, cfg.ln_eps)?;
    maybe_dropout(g, x, cfg.dropout, train)
}

/// Pooler (when configured) and the single-layer head at the CLS position.
pub fn classify(g: &mut Graph, params: &ParamStore, cfg: &ModelConfig, hidden: NodeId) -> Result<NodeId> {
    let mut cls = g.select_position(hidden, CLS_POSITION)?;
    if cfg.has_pooler {
        let w = g.param(params, "pooler.weight")?;
        let b = g.param(params, "pooler.bias")?;
        let pooled = g.linear(cls, w, Some(b))?;
        cls = g.tanh(pooled);
    }
    let w = g.param(params, "head.weight")?;
    let b = g.param(params, "head.bias")?;
    g.linear(cls, w, Some(b))
}

/// Full forward pass to head logits.
pub fn model_forward(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &ModelConfig,
    gating: &GatingConfig,
    input: &BatchInput,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    input.validate(cfg)?;
    gating.validate(cfg.num_layers)?;
    let x0 = embed(g, params, cfg, input, opts.train)?;
    let mask_add = attention_mask(input, cfg.heads);
    let stack = gating::forward_with_gating(g, params, cfg, gating, x0, &mask_add, opts)?;
    let logits = classify(g, params, cfg, stack.hidden)?;
    Ok(ForwardOutput { logits, hidden: stack.hidden, gates: stack.gates })
}

const PARAMS_HEADER: &str = "ngt-params v1";

/// Text serialization: a header line, then per tensor one
/// `name rank d1 .. dr` line followed by one line of shortest round-trip
/// decimal values.
pub fn params_to_string(store: &ParamStore) -> String {
    let mut out = String::new();
    writeln!(out, "{PARAMS_HEADER}").unwrap();
    writeln!(out, "{}", store.len()).unwrap();
    for (name, t) in store.iter() {
        write!(out, "{name} {}", t.rank()).unwrap();
        for d in t.shape() {
            write!(out, " {d}").unwrap();
        }
        out.push('\n');
        let mut first = true;
        for v in t.data() {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn params_from_str(text: &str, path: &Path) -> Result<ParamStore> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::parse(path, 0, format!("unexpected end of file, expected {what}")))
    };
    let (ln, header) = next("header")?;
    if header.trim() != PARAMS_HEADER {
        return Err(Error::parse(path, ln, format!("expected header `{PARAMS_HEADER}`")));
    }
    let (ln, count) = next("tensor count")?;
    let count: usize = count
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, ln, "invalid tensor count"))?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let (ln, meta) = next("tensor header")?;
        let mut fields = meta.split_whitespace();
        let name = fields.next().ok_or_else(|| Error::parse(path, ln, "missing tensor name"))?;
        let nums: std::result::Result<Vec<usize>, _> = fields.map(str::parse).collect();
        let nums = nums.map_err(|_| Error::parse(path, ln, "invalid shape"))?;
        let (rank, dims) = nums.split_first().ok_or_else(|| Error::parse(path, ln, "missing rank"))?;
        if *rank != dims.len() {
            return Err(Error::parse(path, ln, format!("rank {rank} but {} dims", dims.len())));
        }
        let (ln, values) = next("tensor data")?;
        let data: std::result::Result<Vec<f64>, _> = values.split_whitespace().map(str::parse).collect();
        let data = data.map_err(|_| Error::parse(path, ln, "invalid number"))?;
        let t = Tensor::new(dims.to_vec(), data).map_err(|e| Error::parse(path, ln, e.to_string()))?;
        store.insert(name, t);
    }
    Ok(store)
}

pub fn save_params(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, params_to_string(store))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let text = fs::read_to_string(path)?;
    params_from_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::DropoutMode;
    use crate::tensor;

    fn toy() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            max_positions: 8,
            type_vocab: 2,
            hidden: 8,
            num_layers: 2,
            heads: 2,
            intermediate: 16,
            ln_eps: 1e-12,
            dropout: 0.1,
            init_std: 0.02,
            output_units: 1,
            has_pooler: true,
        }
    }

    #[test]
    fn bert_large_counts() {
        let cfg = ModelConfig::bert_large_cased(1);
        assert_eq!(param_count(&cfg, &GatingConfig::none()), 333_580_289);
        let gated = GatingConfig::neuromodulated(vec![21], 3);
        assert_eq!(param_count(&cfg, &gated), 371_368_961);
        let non = GatingConfig::non_neuromodulated(vec![21], 3);
        assert_eq!(param_count(&cfg, &non), 371_368_961);
        assert_eq!(gating_param_count(&cfg, &gated), 37_788_672);
    }

    #[test]
    fn toy_count_by_hand() {
        // embeddings (11+8+2)*8 + 16 = 184; layer = 4*72 + (128+16) + (128+8) + 32 = 600
        // pooler 72; head 9 -> 184 + 1200 + 72 + 9
        assert_eq!(layer_param_count(8, 16), 600);
        assert_eq!(param_count(&toy(), &GatingConfig::none()), 1465);
    }

    #[test]
    fn count_matches_materialized_params() {
        let mut cfg = toy();
        for (pooler, n) in [(true, 1), (false, 3)] {
            cfg.has_pooler = pooler;
            cfg.output_units = n;
            for gating in [
                GatingConfig::none(),
                GatingConfig::neuromodulated(vec![1], 2),
                GatingConfig::non_neuromodulated(vec![1, 2], 1),
            ] {
                let p = init_params(&cfg, &gating, 3).unwrap();
                assert_eq!(p.num_elements(), param_count(&cfg, &gating));
            }
        }
    }

    #[test]
    fn init_is_deterministic_with_unit_gammas() {
        let cfg = toy();
        let gating = GatingConfig::neuromodulated(vec![2], 1);
        let a = init_params(&cfg, &gating, 7).unwrap();
        let b = init_params(&cfg, &gating, 7).unwrap();
        assert_eq!(params_to_string(&a), params_to_string(&b));
        assert_ne!(a, init_params(&cfg, &gating, 8).unwrap());
        for (name, t) in a.iter() {
            if name.ends_with(".gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn host_params_do_not_depend_on_variant() {
        let cfg = toy();
        let plain = init_params(&cfg, &GatingConfig::none(), 4).unwrap();
        let gated = init_params(&cfg, &GatingConfig::neuromodulated(vec![1], 1), 4).unwrap();
        for (name, t) in plain.iter() {
            assert_eq!(gated.get(name).unwrap(), t, "{name}");
        }
    }

    #[test]
    fn normal_draw_mean_within_clt_bound() {
        let mut rng = stream_rng(2024, Stream::Init, 0);
        let t = normal_tensor(&[1_000_000], 0.02, &mut rng);
        let mean = tensor::mean(&t);
        assert!(mean.abs() < 3.0 * 0.02 / 1000.0, "{mean}");
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / 1e6;
        assert!((var.sqrt() - 0.02).abs() < 1e-4);
    }

    fn forward_logits(cfg: &ModelConfig, p: &ParamStore, gating: &GatingConfig, input: &BatchInput) -> Tensor {
        let mut g = Graph::new(DropoutMode::Disabled);
        let out = model_forward(&mut g, p, cfg, gating, input, ForwardOptions::eval()).unwrap();
        g.value(out.logits).clone()
    }

    #[test]
    fn single_token_forward_is_finite_and_deterministic() {
        let cfg = toy();
        let p = init_params(&cfg, &GatingConfig::none(), 1).unwrap();
        let input = BatchInput::unmasked(1, 1, vec![3]);
        let a = forward_logits(&cfg, &p, &GatingConfig::none(), &input);
        assert_eq!(a.shape(), &[1, 1]);
        assert!(a.all_finite());
        assert_eq!(a, forward_logits(&cfg, &p, &GatingConfig::none(), &input));
    }

    #[test]
    fn forward_rejects_bad_input() {
        let cfg = toy();
        let p = init_params(&cfg, &GatingConfig::none(), 1).unwrap();
        let mut g = Graph::new(DropoutMode::Disabled);
        let bad = BatchInput::unmasked(1, 2, vec![1, 11]);
        let err = model_forward(&mut g, &p, &cfg, &GatingConfig::none(), &bad, ForwardOptions::eval());
        assert!(matches!(err, Err(Error::TokenOutOfRange { id: 11, .. })));
        let long = BatchInput::unmasked(1, 9, vec![1; 9]);
        let err = model_forward(&mut g, &p, &cfg, &GatingConfig::none(), &long, ForwardOptions::eval());
        assert!(matches!(err, Err(Error::SequenceTooLong { len: 9, max: 8 })));
    }

    #[test]
    fn head_outputs_form_probabilities() {
        let mut cfg = toy();
        cfg.init_std = 0.5;
        let input = BatchInput::unmasked(2, 4, vec![1, 4, 5, 2, 1, 7, 7, 2]);
        let p = init_params(&cfg, &GatingConfig::none(), 5).unwrap();
        let z = forward_logits(&cfg, &p, &GatingConfig::none(), &input);
        for v in tensor::sigmoid(&z).data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
        cfg.output_units = 3;
        let p = init_params(&cfg, &GatingConfig::none(), 5).unwrap();
        let z = forward_logits(&cfg, &p, &GatingConfig::none(), &input);
        let probs = tensor::softmax(&z, 1).unwrap();
        for row in probs.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_normalize_and_ignore_padding() {
        let mut cfg = toy();
        cfg.init_std = 0.5;
        let p = init_params(&cfg, &GatingConfig::none(), 9).unwrap();
        let input = BatchInput {
            batch: 2,
            seq_len: 4,
            token_ids: vec![1, 5, 2, 0, 1, 6, 6, 2],
            segment_ids: vec![0; 8],
            mask: vec![true, true, true, false, true, true, true, true],
        };
        let mut g = Graph::new(DropoutMode::Disabled);
        let x = embed(&mut g, &p, &cfg, &input, false).unwrap();
        let mask = attention_mask(&input, cfg.heads);
        let attn = self_attention(&mut g, &p, &layer_prefix(1), x, &mask, &cfg, false).unwrap();
        let probs = g.value(attn.probs);
        assert_eq!(probs.shape(), &[4, 4, 4]);
        for (r, row) in probs.data().chunks(4).enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // first batch element's heads are rows 0..8; key 3 is padding there
            if r < 8 {
                assert!(row[3] < 1e-12);
            }
        }
    }

    #[test]
    fn params_round_trip_through_text() {
        let cfg = toy();
        let p = init_params(&cfg, &GatingConfig::neuromodulated(vec![1], 1), 12).unwrap();
        let text = params_to_string(&p);
        let back = params_from_str(&text, Path::new("mem")).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn params_parse_errors_carry_line_numbers() {
        let text = "ngt-params v1\n1\nw 1 2\n1.0 nope\n";
        let err = params_from_str(text, Path::new("p.txt")).unwrap_err();
        assert!(err.to_string().contains("p.txt:4"), "{err}");
        assert!(params_from_str("bogus\n", Path::new("p")).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = toy();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = toy();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = toy();
        cfg.hidden = 0;
        assert!(cfg.validate().is_err());
    }
}
