//! Fine-tuning: fresh task heads on a pre-trained backbone, with a grid
//! search over learning rates and phone-mixing weights.
//!
//! The backbone keeps its embeddings and encoder; the intent and slot heads
//! are re-drawn from the head-initialization stream, identically for every
//! grid candidate, so candidates differ only in their learning rate and
//! mixing weight.  Each candidate trains with the same loop mechanics as
//! pre-training, tracks its best validation intent accuracy (checkpointing
//! the parameters that achieved it), and the candidate with the strictly
//! highest accuracy wins; ties keep the earlier grid entry.
//!
//! Phones enter in one of three ways: not at all (text-only input), added
//! into the first sub-token embedding of each word scaled by a weight `beta`
//! (searched over a grid), or concatenated as a second input segment.

use ndarray::{Array1, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::intent_accuracy;
use crate::lexicon::{Lexicon, PhoneVocab};
use crate::model::{
    argmax, embed_backward, embed_input, embed_input_with_phones, encode, encode_backward,
    ic_backward, ic_forward, ic_logits, sf_backward, sf_logits, ModelConfig, ModelParams,
    PhoneAugmentation,
};
use crate::rng::{domain, stream};
use crate::slu::{build_label_maps, encode_for_finetune, EncodedSlu, SluExample, SluLabels};
use crate::textproc::Vocab;

use super::losses::masked_ce_grad;
use super::optim::{adam_step, clip_grad_norm, OptimizerState, Schedule};
use super::{finetune_loss, LossBundle, LossRecord, TrainConfig, TrainError};

/// Which task heads train: intent classification alone, or intent plus slot
/// tagging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    IcOnly,
    #[default]
    Joint,
}

/// How phonetic information reaches the fine-tuned model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhoneMode {
    /// Text-only input.
    #[default]
    None,
    /// Phone embeddings summed into each word's first sub-token, scaled by a
    /// searched weight.
    Additive,
    /// Phones concatenated as the second input segment.
    Concat,
}

/// Default search grid for the additive phone-mixing weight.
pub const DEFAULT_BETA_GRID: [f64; 4] = [0.1, 0.25, 0.5, 1.0];

/// Task mode, phone mode, and search settings of a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    #[serde(default)]
    pub mode: FinetuneMode,
    #[serde(default)]
    pub phone_mode: PhoneMode,
    /// Mixing weights tried when `phone_mode` is additive; ignored otherwise.
    #[serde(default = "default_beta_grid")]
    pub beta_grid: Vec<f64>,
    /// Evaluate on the validation split every this many steps (the end of
    /// the run is always evaluated); the best-scoring parameters are kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<u64>,
}

fn default_beta_grid() -> Vec<f64> {
    DEFAULT_BETA_GRID.to_vec()
}

impl FinetuneOptions {
    /// Options with the default mixing-weight grid and end-of-run evaluation
    /// only.
    pub fn new(mode: FinetuneMode, phone_mode: PhoneMode) -> Self {
        FinetuneOptions {
            mode,
            phone_mode,
            beta_grid: default_beta_grid(),
            eval_every: None,
        }
    }
}

/// One grid point and the validation intent accuracy it reached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneCandidate {
    pub lr: f64,
    /// Additive mixing weight; absent unless the phone mode is additive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub val_icacc: f64,
}

/// Result of a fine-tuning run: the winning parameters and the full grid.
#[derive(Debug)]
pub struct FinetuneOutcome {
    /// Architecture of `params` (head sizes follow the label maps).
    pub model_cfg: ModelConfig,
    /// Parameters of the winning candidate at its best validation score.
    pub params: ModelParams,
    /// Label maps frozen from the training split.
    pub labels: SluLabels,
    /// The winning grid point.
    pub best: FinetuneCandidate,
    /// Every grid point tried, in search order.
    pub candidates: Vec<FinetuneCandidate>,
    /// Loss log of the winning candidate.
    pub loss_log: Vec<LossRecord>,
}

/// Forward (and optionally backward) pass of one labeled utterance.
///
/// Computes the intent loss, and in joint mode also the slot loss over the
/// first sub-token of every word; `beta` switches on the additive phone
/// path.  With `grads` supplied, accumulates gradients of `scale * total`.
pub fn finetune_example_pass(
    params: &ModelParams,
    cfg: &ModelConfig,
    enc: &EncodedSlu,
    mode: FinetuneMode,
    beta: Option<f64>,
    scale: f64,
    grads: Option<&mut ModelParams>,
    train_mode: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossBundle, TrainError> {
    let ex = &enc.example;
    let aug = beta.map(|b| PhoneAugmentation {
        per_word: enc.phones_per_word.clone(),
        beta: b,
    });
    let input = match &aug {
        Some(a) => embed_input_with_phones(params, cfg, ex, a)?,
        None => embed_input(params, cfg, ex)?,
    };
    let mask = vec![true; ex.len()];
    let (out, cache) = encode(params, cfg, &input, &mask, train_mode, rng)?;

    let (ic_l, ic_cache) = ic_forward(params, &out.hidden);
    let ic_rows = ic_l.insert_axis(Axis(0));
    let (ic_loss, d_ic_rows) = masked_ce_grad(&ic_rows, &[enc.intent_id]);
    let d_ic: Array1<f64> = d_ic_rows.row(0).to_owned();

    let mut slot_back = None;
    let sf_loss = match mode {
        FinetuneMode::IcOnly => None,
        FinetuneMode::Joint => {
            let positions: Vec<usize> = ex.word_sub_spans.iter().map(|s| s.start).collect();
            let logits = sf_logits(params, &out.hidden, &positions, ex.word_region)?;
            let (loss, d_logits) = masked_ce_grad(&logits, &enc.tag_ids);
            slot_back = Some((positions, d_logits));
            Some(loss)
        }
    };

    let bundle = finetune_loss(mode, ic_loss, sf_loss)?;
    for (name, value) in bundle.components() {
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss(name.into()));
        }
    }

    if let Some(grads) = grads {
        let mut d_hidden = ndarray::Array2::zeros(out.hidden.dim());
        ic_backward(params, &out.hidden, &ic_cache, &(d_ic * scale), grads, &mut d_hidden);
        if let Some((positions, d_logits)) = slot_back {
            sf_backward(params, &out.hidden, &positions, &(d_logits * scale), grads, &mut d_hidden);
        }
        let d_emb = encode_backward(params, cfg, &cache, &d_hidden, grads);
        embed_backward(cfg, ex, aug.as_ref(), &d_emb, grads);
    }
    Ok(bundle)
}

/// Predicted intent id and per-word tag ids for one encoded utterance, in
/// evaluation mode.  Callers fine-tuned without the slot head simply ignore
/// the tags.
pub fn predict(
    params: &ModelParams,
    cfg: &ModelConfig,
    enc: &EncodedSlu,
    beta: Option<f64>,
) -> Result<(u32, Vec<u32>), TrainError> {
    let ex = &enc.example;
    let input = match beta {
        Some(b) => embed_input_with_phones(
            params,
            cfg,
            ex,
            &PhoneAugmentation {
                per_word: enc.phones_per_word.clone(),
                beta: b,
            },
        )?,
        None => embed_input(params, cfg, ex)?,
    };
    let mask = vec![true; ex.len()];
    let (out, _) = encode(params, cfg, &input, &mask, false, None)?;
    let intent = argmax(ic_logits(params, &out.hidden).view()) as u32;
    let positions: Vec<usize> = ex.word_sub_spans.iter().map(|s| s.start).collect();
    let logits = sf_logits(params, &out.hidden, &positions, ex.word_region)?;
    let tags = logits.rows().into_iter().map(|r| argmax(r) as u32).collect();
    Ok((intent, tags))
}

fn validation_accuracy(
    params: &ModelParams,
    cfg: &ModelConfig,
    val: &[EncodedSlu],
    beta: Option<f64>,
) -> Result<f64, TrainError> {
    let mut hyps = Vec::with_capacity(val.len());
    let mut golds = Vec::with_capacity(val.len());
    for enc in val {
        hyps.push(predict(params, cfg, enc, beta)?.0);
        golds.push(enc.intent_id);
    }
    Ok(intent_accuracy(&hyps, &golds)?)
}

/// Trains one grid candidate and returns its re-headed config, the
/// parameters at the best validation score, that score, and the loss log.
#[allow(clippy::too_many_arguments)]
fn run_candidate(
    backbone_cfg: &ModelConfig,
    backbone: &ModelParams,
    enc_train: &[EncodedSlu],
    enc_val: &[EncodedSlu],
    labels: &SluLabels,
    opts: &FinetuneOptions,
    train_cfg: &TrainConfig,
    lr: f64,
    beta: Option<f64>,
) -> Result<(ModelConfig, ModelParams, f64, Vec<LossRecord>), TrainError> {
    // The head stream restarts per candidate, so every grid point begins
    // from identical freshly drawn heads.
    let mut head_rng = stream(train_cfg.seed, domain::FINETUNE, 0);
    let (cfg, mut params) = backbone.with_new_heads(
        backbone_cfg,
        labels.intents.len(),
        labels.tags.len(),
        &mut head_rng,
    );
    let mut state = OptimizerState::new(&cfg);
    let schedule = Schedule::new(lr, train_cfg.warmup_fraction, train_cfg.max_steps);
    let mut drop_rng = stream(train_cfg.seed, domain::TRAIN, 1);
    let batch = train_cfg.batch_size;
    let scale = 1.0 / batch as f64;
    let mut loss_log = Vec::with_capacity(train_cfg.max_steps as usize);
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    for step in 0..train_cfg.max_steps {
        let step_lr = schedule.lr_at(step);
        let mut grads = ModelParams::zeros(&cfg);
        let mut bundles = Vec::with_capacity(batch);
        for b in 0..batch {
            let idx = (step as usize * batch + b) % enc_train.len();
            bundles.push(finetune_example_pass(
                &params,
                &cfg,
                &enc_train[idx],
                opts.mode,
                beta,
                scale,
                Some(&mut grads),
                true,
                Some(&mut drop_rng),
            )?);
        }
        if let Some(max_norm) = train_cfg.max_grad_norm {
            clip_grad_norm(&mut grads, max_norm);
        }
        adam_step(&mut params, &grads, &mut state, step_lr)?;
        loss_log.push(LossRecord::from_batch(step, step_lr, &bundles));
        if let Some(every) = opts.eval_every {
            if every > 0 && (step + 1) % every == 0 && step + 1 < train_cfg.max_steps {
                let acc = validation_accuracy(&params, &cfg, enc_val, beta)?;
                if acc > best_acc {
                    best_acc = acc;
                    best_params = params.clone();
                }
            }
        }
    }
    let final_acc = validation_accuracy(&params, &cfg, enc_val, beta)?;
    if final_acc > best_acc {
        best_acc = final_acc;
        best_params = params;
    }
    Ok((cfg, best_params, best_acc, loss_log))
}

/// Fine-tunes `backbone` on a labeled training split, selecting the learning
/// rate (and, in additive phone mode, the mixing weight) by validation
/// intent accuracy.
///
/// Label maps freeze on the training split; a validation label unseen in
/// training is an error.  Utterances are encoded once against the frozen
/// vocabularies and reused across all grid candidates.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    backbone_cfg: &ModelConfig,
    backbone: &ModelParams,
    train_data: &[SluExample],
    val_data: &[SluExample],
    vocab: &Vocab,
    lexicon: &Lexicon,
    phone_vocab: &PhoneVocab,
    opts: &FinetuneOptions,
    train_cfg: &TrainConfig,
) -> Result<FinetuneOutcome, TrainError> {
    backbone_cfg.validate()?;
    train_cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let betas: Vec<Option<f64>> = match opts.phone_mode {
        PhoneMode::Additive => {
            if opts.beta_grid.is_empty() {
                return Err(TrainError::BadConfig("mixing-weight grid is empty".into()));
            }
            for &b in &opts.beta_grid {
                if !(b.is_finite() && b >= 0.0) {
                    return Err(TrainError::BadConfig(format!(
                        "mixing weight {b} must be finite and non-negative"
                    )));
                }
            }
            opts.beta_grid.iter().map(|&b| Some(b)).collect()
        }
        PhoneMode::None | PhoneMode::Concat => vec![None],
    };
    let labels = build_label_maps(train_data)?;
    let concat = opts.phone_mode == PhoneMode::Concat;
    let encode_all = |data: &[SluExample]| -> Result<Vec<EncodedSlu>, TrainError> {
        data.iter()
            .map(|ex| {
                Ok(encode_for_finetune(
                    ex,
                    vocab,
                    lexicon,
                    phone_vocab,
                    &labels,
                    backbone_cfg.max_seq_len,
                    concat,
                )?)
            })
            .collect()
    };
    let enc_train = encode_all(train_data)?;
    let enc_val = encode_all(val_data)?;

    let mut candidates = Vec::new();
    let mut best: Option<(FinetuneCandidate, ModelConfig, ModelParams, Vec<LossRecord>)> = None;
    for &lr in &train_cfg.learning_rates {
        for &beta in &betas {
            let (cfg, params, acc, log) = run_candidate(
                backbone_cfg,
                backbone,
                &enc_train,
                &enc_val,
                &labels,
                opts,
                train_cfg,
                lr,
                beta,
            )?;
            let candidate = FinetuneCandidate {
                lr,
                beta,
                val_icacc: acc,
            };
            candidates.push(candidate);
            let better = match &best {
                None => true,
                Some((incumbent, ..)) => acc > incumbent.val_icacc,
            };
            if better {
                best = Some((candidate, cfg, params, log));
            }
        }
    }
    let (best, model_cfg, params, loss_log) = best.expect("grid has at least one point");
    Ok(FinetuneOutcome {
        model_cfg,
        params,
        labels,
        best,
        candidates,
        loss_log,
    })
}
