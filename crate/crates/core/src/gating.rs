//! Gating blocks and the three encoder variants.
//!
//! A gating block is a short stack of encoder layers, shaped like the host's,
//! followed by a sigmoid. Inserted after host layer `k`, it reads that layer's
//! output and produces a same-shaped gate in (0, 1); the elementwise product
//! of gate and activations is what layer `k + 1` sees. Gates above 0.5
//! enhance an activation relative to the neutral value, gates below suppress it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{self, ForwardOptions, ModelConfig};
use crate::params::ParamStore;
use crate::seed::{stream_rng, Stream};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GatingVariant {
    /// The unchanged host model.
    NoGatingBlock,
    /// Block output gates the host activations multiplicatively.
    NeuromodulatedGating,
    /// Block output replaces the host activations: the block acts as extra layers.
    NonNeuromodulatedGating,
}

impl GatingVariant {
    pub const ALL: [GatingVariant; 3] = [
        GatingVariant::NoGatingBlock,
        GatingVariant::NeuromodulatedGating,
        GatingVariant::NonNeuromodulatedGating,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GatingVariant::NoGatingBlock => "no-gating-block",
            GatingVariant::NeuromodulatedGating => "neuromodulated-gating",
            GatingVariant::NonNeuromodulatedGating => "non-neuromodulated-gating",
        }
    }
}

impl fmt::Display for GatingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GatingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GatingVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown gating variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingConfig {
    pub variant: GatingVariant,
    /// 1-based host layers whose outputs are gated, strictly increasing.
    pub positions: Vec<usize>,
    /// Encoder layers per gating block.
    pub gb_depth: usize,
    /// Apply the block's sigmoid in the non-neuromodulated variant too.
    pub passthrough_sigmoid: bool,
}

impl GatingConfig {
    pub const DEFAULT_DEPTH: usize = 3;

    pub fn none() -> Self {
        Self {
            variant: GatingVariant::NoGatingBlock,
            positions: Vec::new(),
            gb_depth: Self::DEFAULT_DEPTH,
            passthrough_sigmoid: false,
        }
    }

    pub fn neuromodulated(positions: Vec<usize>, gb_depth: usize) -> Self {
        Self {
            variant: GatingVariant::NeuromodulatedGating,
            positions,
            gb_depth,
            passthrough_sigmoid: false,
        }
    }

    pub fn non_neuromodulated(positions: Vec<usize>, gb_depth: usize) -> Self {
        Self {
            variant: GatingVariant::NonNeuromodulatedGating,
            positions,
            gb_depth,
            passthrough_sigmoid: false,
        }
    }

    /// The given variant at `positions`; positions are dropped for
    /// [`GatingVariant::NoGatingBlock`].
    pub fn for_variant(variant: GatingVariant, positions: Vec<usize>, gb_depth: usize) -> Self {
        match variant {
            GatingVariant::NoGatingBlock => Self { gb_depth, ..Self::none() },
            _ => Self { variant, positions, gb_depth, passthrough_sigmoid: false },
        }
    }

    /// Number of independently parameterized blocks.
    pub fn block_count(&self) -> usize {
        match self.variant {
            GatingVariant::NoGatingBlock => 0,
            _ => self.positions.len(),
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.gb_depth == 0 {
            return Err(Error::Config("gb_depth must be at least 1".into()));
        }
        let none = self.variant == GatingVariant::NoGatingBlock;
        if none != self.positions.is_empty() {
            return Err(Error::Config(format!(
                "{} requires {} positions",
                self.variant,
                if none { "no" } else { "one or more" }
            )));
        }
        if let Some(&p) = self.positions.iter().find(|&&p| p == 0 || p > num_layers) {
            return Err(Error::Config(format!(
                "gating position {p} out of range [1, {num_layers}]"
            )));
        }
        if self.positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "gating positions must be strictly increasing, got {:?}",
                self.positions
            )));
        }
        Ok(())
    }
}

/// Name prefix of layer `depth_index` (1-based) of the block at `position`.
pub fn gate_prefix(position: usize, depth_index: usize) -> String {
    format!("gate.{position}.{depth_index}")
}

/// Fresh block parameters, one independent stream per insertion position.
pub fn init_gating_params(cfg: &ModelConfig, gating: &GatingConfig, seed: u64, store: &mut ParamStore) -> Result<()> {
    gating.validate(cfg.num_layers)?;
    if gating.block_count() == 0 {
        return Ok(());
    }
    for &position in &gating.positions {
        let mut rng = stream_rng(seed, Stream::GateInit, position as u64);
        for j in 1..=gating.gb_depth {
            for spec in model::layer_specs(&gate_prefix(position, j), cfg) {
                let t = model::materialize(&spec, cfg.init_std, &mut rng);
                store.insert(spec.name, t);
            }
        }
    }
    Ok(())
}

/// The block's layer stack without the final sigmoid.
#[allow(clippy::too_many_arguments)]
pub fn gating_block_stack(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &ModelConfig,
    gb_depth: usize,
    position: usize,
    x: NodeId,
    mask_add: &Tensor,
    train: bool,
) -> Result<NodeId> {
    let shape = g.value(x).shape();
    if shape.len() != 3 || shape[2] != cfg.hidden {
        return Err(Error::InvalidShape {
            op: "gating_block",
            shape: shape.to_vec(),
            reason: format!("expected [batch, seq, {}]", cfg.hidden),
        });
    }
    let mut h = x;
    for j in 1..=gb_depth {
        h = model::encoder_layer(g, params, &gate_prefix(position, j), h, mask_add, cfg, train)?;
    }
    Ok(h)
}

/// Gate values in (0, 1) with exactly the shape of `x`.
#[allow(clippy::too_many_arguments)]
pub fn gating_block_forward(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &ModelConfig,
    gb_depth: usize,
    position: usize,
    x: NodeId,
    mask_add: &Tensor,
    train: bool,
) -> Result<NodeId> {
    let h = gating_block_stack(g, params, cfg, gb_depth, position, x, mask_add, train)?;
    Ok(g.sigmoid(h))
}

/// `gate ⊙ x`.
pub fn apply_gate(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    tensor::hadamard(gate, x)
}

#[derive(Clone, Debug)]
pub struct StackOutput {
    pub hidden: NodeId,
    pub gates: Vec<(usize, NodeId)>,
}

/// Runs the host layers, inserting the configured gating blocks.
pub fn forward_with_gating(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &ModelConfig,
    gating: &GatingConfig,
    x0: NodeId,
    mask_add: &Tensor,
    opts: ForwardOptions,
) -> Result<StackOutput> {
    gating.validate(cfg.num_layers)?;
    let mut x = x0;
    let mut gates = Vec::new();
    for layer in 1..=cfg.num_layers {
        x = model::encoder_layer(g, params, &model::layer_prefix(layer), x, mask_add, cfg, opts.train)?;
        if gating.block_count() == 0 || !gating.positions.contains(&layer) {
            continue;
        }
        match gating.variant {
            GatingVariant::NoGatingBlock => unreachable!("no blocks to insert"),
            GatingVariant::NeuromodulatedGating => {
                let gate = match opts.gate_override {
                    Some(v) => g.input(Tensor::full(g.value(x).shape(), v)),
                    None => gating_block_forward(g, params, cfg, gating.gb_depth, layer, x, mask_add, opts.train)?,
                };
                gates.push((layer, gate));
                x = g.mul(gate, x)?;
            }
            GatingVariant::NonNeuromodulatedGating => {
                x = gating_block_stack(g, params, cfg, gating.gb_depth, layer, x, mask_add, opts.train)?;
                if gating.passthrough_sigmoid {
                    x = g.sigmoid(x);
                }
            }
        }
    }
    Ok(StackOutput { hidden: x, gates })
}

/// Start and end insertion layers for an `num_layers`-deep host, scaled from
/// layers 3 and 21 of a 24-layer host and clamped to `[1, num_layers - 1]`.
pub fn sweep_positions(num_layers: usize) -> (usize, usize) {
    let hi = num_layers.saturating_sub(1).max(1);
    let map = |layer: f64| -> usize {
        let scaled = (layer * num_layers as f64 / 24.0).round() as usize;
        scaled.clamp(1, hi)
    };
    (map(3.0), map(21.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::DropoutMode;
    use crate::model::{init_params, model_forward, BatchInput};

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
            init_std: 0.3,
            output_units: 1,
            has_pooler: true,
        }
    }

    fn input() -> BatchInput {
        BatchInput {
            batch: 2,
            seq_len: 4,
            token_ids: vec![1, 4, 9, 2, 1, 6, 2, 0],
            segment_ids: vec![0, 0, 1, 1, 0, 0, 0, 0],
            mask: vec![true, true, true, true, true, true, true, false],
        }
    }

    fn logits(cfg: &ModelConfig, p: &ParamStore, gating: &GatingConfig, opts: ForwardOptions) -> Tensor {
        let mut g = Graph::new(DropoutMode::Disabled);
        let out = model_forward(&mut g, p, cfg, gating, &input(), opts).unwrap();
        g.value(out.logits).clone()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in GatingVariant::ALL {
            assert_eq!(v.as_str().parse::<GatingVariant>().unwrap(), v);
        }
        assert!("gated".parse::<GatingVariant>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GatingConfig::none().validate(2).is_ok());
        assert!(GatingConfig::neuromodulated(vec![], 1).validate(2).is_err());
        assert!(GatingConfig::neuromodulated(vec![3], 1).validate(2).is_err());
        assert!(GatingConfig::neuromodulated(vec![0], 1).validate(2).is_err());
        assert!(GatingConfig::neuromodulated(vec![2, 1], 1).validate(2).is_err());
        assert!(GatingConfig::neuromodulated(vec![1, 1], 1).validate(2).is_err());
        assert!(GatingConfig::neuromodulated(vec![1], 0).validate(2).is_err());
        let mut bad = GatingConfig::none();
        bad.positions = vec![1];
        assert!(bad.validate(2).is_err());
    }

    #[test]
    fn no_gating_block_carries_no_parameters() {
        let cfg = toy();
        let p = init_params(&cfg, &GatingConfig::none(), 1).unwrap();
        assert!(p.names().all(|n| !n.starts_with("gate.")));
    }

    #[test]
    fn apply_gate_examples() {
        let x = Tensor::new(vec![2], vec![2.0, -4.0]).unwrap();
        assert_eq!(apply_gate(&x, &Tensor::ones(&[2])).unwrap(), x);
        assert_eq!(apply_gate(&x, &Tensor::zeros(&[2])).unwrap(), Tensor::zeros(&[2]));
        let gate = Tensor::new(vec![2], vec![0.5, 0.25]).unwrap();
        assert_eq!(apply_gate(&x, &gate).unwrap().data(), &[1.0, -1.0]);
        assert!(apply_gate(&x, &Tensor::ones(&[3])).is_err());
    }

    #[test]
    fn gate_has_input_shape_and_open_range() {
        let cfg = toy();
        let gating = GatingConfig::neuromodulated(vec![1], 2);
        let p = init_params(&cfg, &gating, 3).unwrap();
        let mut g = Graph::new(DropoutMode::Disabled);
        let out = model_forward(&mut g, &p, &cfg, &gating, &input(), ForwardOptions::eval()).unwrap();
        let (pos, gate) = out.gates[0];
        assert_eq!(pos, 1);
        let gv = g.value(gate);
        assert_eq!(gv.shape(), &[2, 4, 8]);
        assert!(gv.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zeroed_block_gives_neutral_gate() {
        let cfg = toy();
        let gating = GatingConfig::neuromodulated(vec![1], 3);
        let mut p = init_params(&cfg, &gating, 3).unwrap();
        for (name, t) in p.iter_mut() {
            if name.starts_with("gate.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new(DropoutMode::Disabled);
        let out = model_forward(&mut g, &p, &cfg, &gating, &input(), ForwardOptions::eval()).unwrap();
        assert!(g.value(out.gates[0].1).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn block_rejects_wrong_hidden_size() {
        let cfg = toy();
        let gating = GatingConfig::neuromodulated(vec![1], 1);
        let p = init_params(&cfg, &gating, 3).unwrap();
        let mut g = Graph::new(DropoutMode::Disabled);
        let x = g.input(Tensor::ones(&[1, 2, 6]));
        let mask = Tensor::zeros(&[2, 2, 2]);
        let err = gating_block_forward(&mut g, &p, &cfg, 1, 1, x, &mask, false).unwrap_err();
        assert!(matches!(err, Error::InvalidShape { .. }));
    }

    #[test]
    fn identity_gate_matches_plain_model() {
        let cfg = toy();
        for pos in [1, 2] {
            let gating = GatingConfig::neuromodulated(vec![pos], 2);
            let p = init_params(&cfg, &gating, 11).unwrap();
            let opts = ForwardOptions { train: false, gate_override: Some(1.0) };
            let gated = logits(&cfg, &p, &gating, opts);
            let plain = logits(&cfg, &p, &GatingConfig::none(), ForwardOptions::eval());
            assert!(gated.max_abs_diff(&plain).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn non_neuromodulated_equals_transplanted_stack() {
        let cfg = toy();
        for k in [1, 2] {
            let gating = GatingConfig::non_neuromodulated(vec![k], 1);
            let p = init_params(&cfg, &gating, 21).unwrap();
            let gated = logits(&cfg, &p, &gating, ForwardOptions::eval());

            let deep = ModelConfig { num_layers: 3, ..cfg.clone() };
            let mut spliced = ParamStore::new();
            for (name, t) in p.iter() {
                let renamed = if let Some(rest) = name.strip_prefix(&format!("{}.", gate_prefix(k, 1))) {
                    format!("{}.{rest}", model::layer_prefix(k + 1))
                } else if let Some(rest) = name.strip_prefix("encoder.") {
                    let (layer, tail) = rest.split_once('.').unwrap();
                    let layer: usize = layer.parse().unwrap();
                    let shifted = if layer > k { layer + 1 } else { layer };
                    format!("{}.{tail}", model::layer_prefix(shifted))
                } else {
                    name.to_string()
                };
                spliced.insert(renamed, t.clone());
            }
            let plain = logits(&deep, &spliced, &GatingConfig::none(), ForwardOptions::eval());
            assert_eq!(gated, plain, "position {k}");
        }
    }

    #[test]
    fn removing_one_of_two_blocks_restores_single_block_behavior() {
        let cfg = toy();
        let both = GatingConfig::neuromodulated(vec![1, 2], 1);
        let p_both = init_params(&cfg, &both, 5).unwrap();
        for single in [vec![1], vec![2]] {
            let gating = GatingConfig::neuromodulated(single, 1);
            let p_single = init_params(&cfg, &gating, 5).unwrap();
            for (name, t) in p_single.iter() {
                assert_eq!(p_both.get(name).unwrap(), t);
            }
            assert_eq!(
                logits(&cfg, &p_both, &gating, ForwardOptions::eval()),
                logits(&cfg, &p_single, &gating, ForwardOptions::eval())
            );
        }
        let two = logits(&cfg, &p_both, &both, ForwardOptions::eval());
        let one = logits(&cfg, &p_both, &GatingConfig::neuromodulated(vec![1], 1), ForwardOptions::eval());
        assert_ne!(two, one);
    }

    #[test]
    fn output_shape_is_variant_independent() {
        let cfg = toy();
        for gating in [
            GatingConfig::none(),
            GatingConfig::neuromodulated(vec![1, 2], 1),
            GatingConfig::non_neuromodulated(vec![2], 2),
        ] {
            let p = init_params(&cfg, &gating, 2).unwrap();
            let mut g = Graph::new(DropoutMode::Disabled);
            let out = model_forward(&mut g, &p, &cfg, &gating, &input(), ForwardOptions::eval()).unwrap();
            assert_eq!(g.value(out.hidden).shape(), &[2, 4, 8]);
        }
    }

    #[test]
    fn gradients_reach_block_and_lower_layers() {
        let cfg = toy();
        let gating = GatingConfig::neuromodulated(vec![1], 1);
        let p = init_params(&cfg, &gating, 8).unwrap();
        let mut g = Graph::new(DropoutMode::Disabled);
        let out = model_forward(&mut g, &p, &cfg, &gating, &input(), ForwardOptions::eval()).unwrap();
        let loss = g.bce_with_logits(out.logits, &[1.0, 0.0]).unwrap();
        let grads = g.backward(loss).unwrap();
        let norm = |prefix: &str| -> f64 {
            grads
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt()
        };
        assert!(norm("gate.1.") > 0.0);
        assert!(norm("encoder.1.") > 0.0);
        assert!(norm("embeddings.") > 0.0);
    }

    #[test]
    fn literal_reading_squashes_block_output() {
        let cfg = toy();
        let mut gating = GatingConfig::non_neuromodulated(vec![1], 1);
        let p = init_params(&cfg, &gating, 8).unwrap();
        let a = logits(&cfg, &p, &gating, ForwardOptions::eval());
        gating.passthrough_sigmoid = true;
        let b = logits(&cfg, &p, &gating, ForwardOptions::eval());
        assert_ne!(a, b);
    }

    #[test]
    fn sweep_positions_scale_from_24_layers() {
        assert_eq!(sweep_positions(24), (3, 21));
        assert_eq!(sweep_positions(4), (1, 3));
        assert_eq!(sweep_positions(8), (1, 7));
        assert_eq!(sweep_positions(12), (2, 11));
        assert_eq!(sweep_positions(2), (1, 1));
    }
}
