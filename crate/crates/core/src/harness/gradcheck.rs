//! Finite-difference check of a whole two-layer model for every variant.

use crate::autodiff::{grad_check, DropoutMode, GradCheckConfig, GradCheckReport, Graph};
use crate::error::Result;
use crate::gating::{GatingConfig, GatingVariant};
use crate::model::{init_params, model_forward, BatchInput, ForwardOptions, ModelConfig};

/// Two layers, H=8, A=2, I=16, one single-layer block after layer 1.
///
/// The init std is larger than the training default so that gradients sit
/// well above the finite-difference noise floor.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        max_positions: 6,
        type_vocab: 2,
        hidden: 8,
        num_layers: 2,
        heads: 2,
        intermediate: 16,
        ln_eps: 1e-12,
        dropout: 0.1,
        init_std: 0.4,
        output_units: 3,
        has_pooler: true,
    }
}

fn gradcheck_input() -> (BatchInput, Vec<usize>) {
    let input = BatchInput {
        batch: 2,
        seq_len: 6,
        token_ids: vec![1, 5, 7, 2, 9, 2, 1, 4, 11, 2, 0, 0],
        segment_ids: vec![0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0],
        mask: vec![true, true, true, true, true, true, true, true, true, true, false, false],
    };
    (input, vec![2, 0])
}

/// Runs the check on each variant with frozen dropout masks.
pub fn run_gradcheck(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<(GatingVariant, GradCheckReport)>> {
    let model = gradcheck_model();
    let (input, labels) = gradcheck_input();
    GatingVariant::ALL
        .into_iter()
        .map(|variant| {
            let gating = GatingConfig::for_variant(variant, vec![1], 1);
            let params = init_params(&model, &gating, seed)?;
            let report = grad_check(
                &params,
                |p| {
                    let mut g = Graph::new(DropoutMode::Frozen(seed));
                    let out = model_forward(&mut g, p, &model, &gating, &input, ForwardOptions::train())?;
                    let loss = g.cross_entropy(out.logits, &labels)?;
                    Ok((g, loss))
                },
                cfg,
            )?;
            Ok((variant, report))
        })
        .collect()
}
