//! Pre-training: forward/backward over masked examples and the outer
//! optimization loop.
//!
//! One example contributes the cross-entropy of its masked word positions,
//! the cross-entropy of its masked phone positions, and the alignment-pair
//! loss, exactly as dictated by its loss flags; the example total is their
//! unweighted sum and a batch averages example totals.  The loop walks the
//! shard in order with a fixed batch layout, applies linear warmup/decay on
//! the first learning rate of the grid, and emits one loss record per step,
//! so a rerun with the same seed reproduces the log byte for byte.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::model::{
    embed_backward, embed_input, encode, encode_backward, lm_backward, lm_logits,
    restrict_to_block, wsa_backward, wsa_logits, LmSupport, ModelConfig, ModelParams,
};
use crate::pretrain::{LossKind, PretrainExample};
use crate::rng::{domain, stream};

use super::losses::{masked_ce_grad, wsa_grad};
use super::optim::{adam_step, clip_grad_norm, OptimizerState, Schedule};
use super::{combine_pretrain_losses, LossBundle, LossRecord, TrainConfig, TrainError};

/// Result of a pre-training run: the trained parameters and the step log.
#[derive(Debug)]
pub struct PretrainOutcome {
    /// Architecture the parameters belong to.
    pub model_cfg: ModelConfig,
    /// Parameters after the final step.
    pub params: ModelParams,
    /// One record per optimization step.
    pub loss_log: Vec<LossRecord>,
}

/// Forward (and optionally backward) pass of one masked example.
///
/// Computes the loss components the example's flags call for and validates
/// the match; with `grads` supplied, accumulates parameter gradients of
/// `scale * total` (the caller passes `1/batch_size` so batch gradients
/// match the mean batch loss).  `rng` feeds dropout and is only touched in
/// training mode with a non-zero dropout rate.
pub fn pretrain_example_pass(
    params: &ModelParams,
    cfg: &ModelConfig,
    pex: &PretrainExample,
    scale: f64,
    grads: Option<&mut ModelParams>,
    train_mode: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossBundle, TrainError> {
    let ex = &pex.example;
    let input = embed_input(params, cfg, ex)?;
    let mask = vec![true; ex.len()];
    let (out, cache) = encode(params, cfg, &input, &mask, train_mode, rng)?;
    let wv = cfg.word_vocab_size;

    let mut computed: BTreeMap<LossKind, f64> = BTreeMap::new();
    let mut word_back = None;
    if !ex.mlm_targets.is_empty() {
        let positions: Vec<usize> = ex.mlm_targets.keys().copied().collect();
        let gold: Vec<u32> = ex.mlm_targets.values().copied().collect();
        let mut logits = lm_logits(params, &out.hidden, &positions);
        if cfg.lm_support == LmSupport::PerModality {
            for row in logits.rows_mut() {
                restrict_to_block(row, 0, wv);
            }
        }
        let (loss, d_logits) = masked_ce_grad(&logits, &gold);
        let kind = if pex.loss_flags.contains(&LossKind::CondMlm) {
            LossKind::CondMlm
        } else {
            LossKind::Mlm
        };
        computed.insert(kind, loss);
        word_back = Some((positions, d_logits));
    }
    let mut phone_back = None;
    if !ex.msm_targets.is_empty() {
        let positions: Vec<usize> = ex.msm_targets.keys().copied().collect();
        let gold: Vec<u32> = ex.msm_targets.values().copied().collect();
        let mut logits = lm_logits(params, &out.hidden, &positions);
        if cfg.lm_support == LmSupport::PerModality {
            for row in logits.rows_mut() {
                restrict_to_block(row, wv, cfg.vocab_size());
            }
        }
        let (loss, d_logits) = masked_ce_grad(&logits, &gold);
        let kind = if pex.loss_flags.contains(&LossKind::CondMsm) {
            LossKind::CondMsm
        } else {
            LossKind::Msm
        };
        computed.insert(kind, loss);
        phone_back = Some((positions, d_logits));
    }
    let mut pair_back = None;
    if pex.loss_flags.contains(&LossKind::Wsa) {
        let label = ex.wsa_label.ok_or_else(|| {
            TrainError::BadConfig("alignment loss flagged but the example has no pair label".into())
        })?;
        let logits = wsa_logits(params, &out.hidden);
        let (loss, d_logits) = wsa_grad(&logits, label);
        computed.insert(LossKind::Wsa, loss);
        pair_back = Some(d_logits);
    }

    let bundle = combine_pretrain_losses(pex, &computed)?;
    for (name, value) in bundle.components() {
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss(name.into()));
        }
    }

    if let Some(grads) = grads {
        let mut d_hidden = ndarray::Array2::zeros(out.hidden.dim());
        if let Some((positions, d_logits)) = word_back {
            lm_backward(params, &out.hidden, &positions, &(d_logits * scale), grads, &mut d_hidden);
        }
        if let Some((positions, d_logits)) = phone_back {
            lm_backward(params, &out.hidden, &positions, &(d_logits * scale), grads, &mut d_hidden);
        }
        if let Some(d_logits) = pair_back {
            wsa_backward(params, &out.hidden, &(d_logits * scale), grads, &mut d_hidden);
        }
        let d_emb = encode_backward(params, cfg, &cache, &d_hidden, grads);
        embed_backward(cfg, ex, None, &d_emb, grads);
    }
    Ok(bundle)
}

/// Runs the pre-training loop over `shard`.
///
/// Parameters start from `init` when given (for resumed or staged runs),
/// otherwise from a fresh seeded initialization.  Batches are consecutive
/// shard windows taken modulo the shard length; the learning rate follows
/// linear warmup and decay on the first rate of the grid.
pub fn pretrain(
    shard: &[PretrainExample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    init: Option<ModelParams>,
) -> Result<PretrainOutcome, TrainError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if shard.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut params = match init {
        Some(p) => p,
        None => ModelParams::init(model_cfg, &mut stream(train_cfg.seed, domain::INIT, 0)),
    };
    let mut state = OptimizerState::new(model_cfg);
    let schedule = Schedule::new(
        train_cfg.learning_rates[0],
        train_cfg.warmup_fraction,
        train_cfg.max_steps,
    );
    let mut drop_rng = stream(train_cfg.seed, domain::TRAIN, 0);
    let batch = train_cfg.batch_size;
    let scale = 1.0 / batch as f64;
    let mut loss_log = Vec::with_capacity(train_cfg.max_steps as usize);
    for step in 0..train_cfg.max_steps {
        let lr = schedule.lr_at(step);
        let mut grads = ModelParams::zeros(model_cfg);
        let mut bundles = Vec::with_capacity(batch);
        for b in 0..batch {
            let idx = (step as usize * batch + b) % shard.len();
            let bundle = pretrain_example_pass(
                &params,
                model_cfg,
                &shard[idx],
                scale,
                Some(&mut grads),
                true,
                Some(&mut drop_rng),
            )?;
            bundles.push(bundle);
        }
        if let Some(max_norm) = train_cfg.max_grad_norm {
            clip_grad_norm(&mut grads, max_norm);
        }
        adam_step(&mut params, &grads, &mut state, lr)?;
        loss_log.push(LossRecord::from_batch(step, lr, &bundles));
    }
    Ok(PretrainOutcome {
        model_cfg: model_cfg.clone(),
        params,
        loss_log,
    })
}

/// Mean example loss over `shard` in evaluation mode (no dropout, no
/// gradient).
pub fn evaluate_pretrain_loss(
    shard: &[PretrainExample],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<f64, TrainError> {
    if shard.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut sum = 0.0;
    for pex in shard {
        sum += pretrain_example_pass(params, cfg, pex, 1.0, None, false, None)?.total;
    }
    Ok(sum / shard.len() as f64)
}
