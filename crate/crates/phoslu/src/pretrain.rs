//! Pre-training data generation: whole-word masking over the word and phone
//! segments, task presets, word/speech alignment pairs, and shard files.
//!
//! Masking always operates on whole words: every sub-token of a selected
//! word is substituted at once, and on the phone side every phone of a
//! selected word's group. Each selected word draws one action — mask /
//! random / keep with probabilities from the substitution split — and
//! prediction targets are recorded for all selected positions regardless of
//! the action taken. Which side of the pair is masked is governed by the
//! strategy: `OneMod` masks exactly one side per example (fair coin),
//! `TwoMod` masks both, `TextOnly` drops the phone segment entirely and
//! masks words (the plain masked-LM baseline), and `Mix` draws one task arm
//! per example from an explicit list, which expresses presets that alternate
//! between conditional masking and the plain baseline.
//!
//! Every example draws from its own random stream keyed by the config seed
//! and the example's index, so shards are reproducible and insensitive to
//! generation order.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::PhoneVocab;
use crate::rng;
use crate::textproc::{
    assemble_example, truncate_to_fit, EncodedExample, Layout, PairedUtterance, Span, TextError,
    Vocab, WsaLabel, MASK_ID,
};

#[derive(Debug, Error)]
pub enum MaskingError {
    #[error("substitution split must be non-negative and sum to 1, got sum {0}")]
    BadSplit(f64),
    #[error("masking percentage {0} exceeds 100")]
    BadPct(u8),
    #[error("wsa_negative_rate must lie in [0, 1], got {0}")]
    BadNegativeRate(f64),
    #[error(
        "alignment classification with oneMod at 100%/100% is infeasible: one side of every \
         pair would be fully masked, leaving nothing to align"
    )]
    InfeasibleWsa,
    #[error("alignment classification requires the paired layout; the {0} arm has no phone segment")]
    WsaWithoutPhones(&'static str),
    #[error("strategy mix must list at least one task arm")]
    EmptyMix,
    #[error("cannot sample a mismatched phone sequence from a single-utterance corpus")]
    SingletonCorpus,
    #[error("vocabulary has no substitutable {0} ids to draw random replacements from")]
    EmptyPool(&'static str),
    #[error("shard header is missing or malformed")]
    BadShardHeader,
    #[error("shard format version {found} is not supported (expected {SHARD_VERSION})")]
    BadShardVersion { found: u32 },
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Loss components an example contributes to, determined by the task arm and
/// the alignment polarity: masking a side of a matched pair conditions on the
/// other side (`CondMlm`/`CondMsm`); on mismatched pairs or the text-only
/// layout the same computation is booked as plain `Mlm`/`Msm`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "condMLM")]
    CondMlm,
    #[serde(rename = "condMSM")]
    CondMsm,
    #[serde(rename = "MLM")]
    Mlm,
    #[serde(rename = "MSM")]
    Msm,
    #[serde(rename = "WSA")]
    Wsa,
}

impl LossKind {
    /// Stable display name, used as the component key in loss logs.
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::CondMlm => "condMLM",
            LossKind::CondMsm => "condMSM",
            LossKind::Mlm => "MLM",
            LossKind::Msm => "MSM",
            LossKind::Wsa => "WSA",
        }
    }
}

/// One task arm of a strategy mix: which layout to build and which side to
/// mask, with its whole-word masking percentage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskArm {
    /// Paired layout, mask words at the given percentage.
    PairedWords(u8),
    /// Paired layout, mask phones at the given percentage.
    PairedPhones(u8),
    /// Text-only layout `[CLS] W [SEP]`, mask words at the given percentage.
    TextWords(u8),
}

/// Which side(s) of an example get masked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Fair coin per example: mask the word side at `word_mask_pct` or the
    /// phone side at `phone_mask_pct`, never both.
    OneMod,
    /// Mask both sides of every example.
    TwoMod,
    /// Text-only layout, word masking only (plain masked-LM baseline).
    TextOnly,
    /// Draw one arm per example, uniformly.
    Mix(Vec<TaskArm>),
}

/// Probabilities of the three substitution actions for a selected word.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionSplit {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for SubstitutionSplit {
    fn default() -> Self {
        Self { mask: 0.8, random: 0.1, keep: 0.1 }
    }
}

/// Full masking/pairing configuration for shard generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    /// Whole-word masking percentage for the word side (M).
    pub word_mask_pct: u8,
    /// Whole-word masking percentage for the phone side (N).
    pub phone_mask_pct: u8,
    pub strategy: Strategy,
    #[serde(default)]
    pub substitution_split: SubstitutionSplit,
    /// Adds an alignment label to every example and mixes in mismatched
    /// pairs at `wsa_negative_rate`.
    #[serde(default)]
    pub wsa_enabled: bool,
    #[serde(default = "default_negative_rate")]
    pub wsa_negative_rate: f64,
    pub seed: u64,
}

fn default_negative_rate() -> f64 {
    0.5
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), MaskingError> {
        let s = &self.substitution_split;
        let sum = s.mask + s.random + s.keep;
        if s.mask < 0.0 || s.random < 0.0 || s.keep < 0.0 || (sum - 1.0).abs() > 1e-9 {
            return Err(MaskingError::BadSplit(sum));
        }
        for pct in self.pcts() {
            if pct > 100 {
                return Err(MaskingError::BadPct(pct));
            }
        }
        if !(0.0..=1.0).contains(&self.wsa_negative_rate) {
            return Err(MaskingError::BadNegativeRate(self.wsa_negative_rate));
        }
        match &self.strategy {
            Strategy::Mix(arms) if arms.is_empty() => return Err(MaskingError::EmptyMix),
            _ => {}
        }
        if self.wsa_enabled {
            match &self.strategy {
                Strategy::OneMod if self.word_mask_pct == 100 && self.phone_mask_pct == 100 => {
                    return Err(MaskingError::InfeasibleWsa)
                }
                Strategy::TextOnly => return Err(MaskingError::WsaWithoutPhones("textOnly")),
                Strategy::Mix(arms) => {
                    if arms.iter().any(|a| matches!(a, TaskArm::TextWords(_))) {
                        return Err(MaskingError::WsaWithoutPhones("textWords"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn pcts(&self) -> Vec<u8> {
        let mut out = vec![self.word_mask_pct, self.phone_mask_pct];
        if let Strategy::Mix(arms) = &self.strategy {
            for arm in arms {
                let (TaskArm::PairedWords(p) | TaskArm::PairedPhones(p) | TaskArm::TextWords(p)) =
                    arm;
                out.push(*p);
            }
        }
        out
    }
}

/// The named pre-training task presets, one per ablation row: combinations
/// of conditional masked word prediction (condMLM), conditional masked phone
/// prediction (condMSM), plain masked-LM (MLM), and alignment classification
/// (WSA). `(oneMod)` rows draw one task arm per example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskPreset {
    /// Plain masked-LM at 15%, text-only input.
    Mlm15,
    /// Masked-LM at 15% on the paired layout plus alignment classification
    /// (the sentence-pair-prediction analogue for single utterances).
    Mlm15Nsp,
    /// condMLM 100% / condMSM 100%, one side per example.
    Cond100OneMod,
    /// condMLM 30% and condMSM 30% on every example.
    Cond30TwoMod,
    /// condMLM 30% + condMSM 30% + WSA.
    Cond30TwoModWsa,
    /// condMLM 100% or plain MLM 15%, one arm per example.
    CondMlm100Mlm15OneMod,
    /// condMSM 100% or plain MLM 15%, one arm per example.
    CondMsm100Mlm15OneMod,
    /// condMLM 100%, condMSM 100%, or plain MLM 15%, one arm per example.
    Cond100Mlm15OneMod,
}

impl TaskPreset {
    pub const ALL: [TaskPreset; 8] = [
        TaskPreset::Mlm15,
        TaskPreset::Mlm15Nsp,
        TaskPreset::Cond100OneMod,
        TaskPreset::Cond30TwoMod,
        TaskPreset::Cond30TwoModWsa,
        TaskPreset::CondMlm100Mlm15OneMod,
        TaskPreset::CondMsm100Mlm15OneMod,
        TaskPreset::Cond100Mlm15OneMod,
    ];

    /// Stable config/CLI key, mirroring the ablation row labels.
    pub fn key(&self) -> &'static str {
        match self {
            TaskPreset::Mlm15 => "mlm15",
            TaskPreset::Mlm15Nsp => "mlm15+nsp",
            TaskPreset::Cond100OneMod => "condmlm100+condmsm100(onemod)",
            TaskPreset::Cond30TwoMod => "condmlm30+condmsm30(twomod)",
            TaskPreset::Cond30TwoModWsa => "condmlm30+condmsm30(twomod)+wsa",
            TaskPreset::CondMlm100Mlm15OneMod => "condmlm100+mlm15(onemod)",
            TaskPreset::CondMsm100Mlm15OneMod => "condmsm100+mlm15(onemod)",
            TaskPreset::Cond100Mlm15OneMod => "condmlm100+condmsm100+mlm15(onemod)",
        }
    }

    pub fn parse(key: &str) -> Option<Self> {
        let key = key.to_lowercase();
        Self::ALL.into_iter().find(|p| p.key() == key)
    }

    /// The masking configuration this preset stands for.
    pub fn masking(&self, seed: u64) -> MaskingConfig {
        let base = MaskingConfig {
            word_mask_pct: 15,
            phone_mask_pct: 15,
            strategy: Strategy::TextOnly,
            substitution_split: SubstitutionSplit::default(),
            wsa_enabled: false,
            wsa_negative_rate: 0.5,
            seed,
        };
        match self {
            TaskPreset::Mlm15 => base,
            TaskPreset::Mlm15Nsp => MaskingConfig {
                strategy: Strategy::Mix(vec![TaskArm::PairedWords(15)]),
                wsa_enabled: true,
                ..base
            },
            TaskPreset::Cond100OneMod => MaskingConfig {
                word_mask_pct: 100,
                phone_mask_pct: 100,
                strategy: Strategy::OneMod,
                ..base
            },
            TaskPreset::Cond30TwoMod => MaskingConfig {
                word_mask_pct: 30,
                phone_mask_pct: 30,
                strategy: Strategy::TwoMod,
                ..base
            },
            TaskPreset::Cond30TwoModWsa => MaskingConfig {
                word_mask_pct: 30,
                phone_mask_pct: 30,
                strategy: Strategy::TwoMod,
                wsa_enabled: true,
                ..base
            },
            TaskPreset::CondMlm100Mlm15OneMod => MaskingConfig {
                strategy: Strategy::Mix(vec![TaskArm::PairedWords(100), TaskArm::TextWords(15)]),
                ..base
            },
            TaskPreset::CondMsm100Mlm15OneMod => MaskingConfig {
                strategy: Strategy::Mix(vec![TaskArm::PairedPhones(100), TaskArm::TextWords(15)]),
                ..base
            },
            TaskPreset::Cond100Mlm15OneMod => MaskingConfig {
                strategy: Strategy::Mix(vec![
                    TaskArm::PairedWords(100),
                    TaskArm::PairedPhones(100),
                    TaskArm::TextWords(15),
                ]),
                ..base
            },
        }
    }
}

/// Substitution ids and draw pools for both modalities, assembled once per
/// run from the vocabularies. Phone ids are in the joint space.
#[derive(Debug, Clone)]
pub struct MaskingVocab {
    pub word_mask_id: u32,
    pub word_pool: Vec<u32>,
    pub phone_mask_id: u32,
    pub phone_pool: Vec<u32>,
}

impl MaskingVocab {
    pub fn new(vocab: &Vocab, phone_vocab: &PhoneVocab) -> Result<Self, MaskingError> {
        let offset = vocab.len() as u32;
        let word_pool = vocab.substitutable_ids();
        let phone_pool: Vec<u32> =
            phone_vocab.substitutable_ids().into_iter().map(|i| offset + i).collect();
        if word_pool.is_empty() {
            return Err(MaskingError::EmptyPool("word"));
        }
        if phone_pool.is_empty() {
            return Err(MaskingError::EmptyPool("phone"));
        }
        Ok(Self {
            word_mask_id: MASK_ID,
            word_pool,
            phone_mask_id: offset + phone_vocab.mask_id(),
            phone_pool,
        })
    }
}

/// Action drawn for one selected word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Mask,
    Random,
    Keep,
}

/// A masked view of one modality's id sequence: substituted ids, original
/// ids at every selected position, and the per-word actions taken (in
/// ascending word order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSeq {
    pub ids: Vec<u32>,
    pub targets: BTreeMap<usize, u32>,
    pub actions: Vec<Action>,
}

/// Number of words to select at `pct` percent out of `m`: nearest integer,
/// at least one whenever `pct > 0`.
pub fn select_word_count(m: usize, pct: u8) -> usize {
    if pct == 0 || m == 0 {
        return 0;
    }
    ((pct as f64 / 100.0 * m as f64).round() as usize).max(1)
}

/// Masks whole spans of `ids`: selects `pct`% of `spans` uniformly without
/// replacement, draws one action per selected span (ascending order), and
/// substitutes every position of the span accordingly. Targets hold the
/// original ids for all selected positions, whatever the action.
fn mask_spans(
    ids: &[u32],
    spans: &[Span],
    pct: u8,
    split: &SubstitutionSplit,
    mask_id: u32,
    pool: &[u32],
    rng: &mut ChaCha8Rng,
) -> MaskedSeq {
    let mut out =
        MaskedSeq { ids: ids.to_vec(), targets: BTreeMap::new(), actions: Vec::new() };
    let k = select_word_count(spans.len(), pct);
    if k == 0 {
        return out;
    }
    let mut selected = rand::seq::index::sample(rng, spans.len(), k).into_vec();
    selected.sort_unstable();
    for word in selected {
        let r: f64 = rng.gen();
        let action = if r < split.mask {
            Action::Mask
        } else if r < split.mask + split.random {
            Action::Random
        } else {
            Action::Keep
        };
        out.actions.push(action);
        for pos in spans[word].range() {
            out.targets.insert(pos, ids[pos]);
            match action {
                Action::Mask => out.ids[pos] = mask_id,
                Action::Random => out.ids[pos] = pool[rng.gen_range(0..pool.len())],
                Action::Keep => {}
            }
        }
    }
    out
}

/// Whole-word masking of the word side at `cfg.word_mask_pct`.
pub fn mask_words(
    u: &PairedUtterance,
    cfg: &MaskingConfig,
    mv: &MaskingVocab,
    rng: &mut ChaCha8Rng,
) -> MaskedSeq {
    mask_spans(
        &u.word_ids,
        &u.word_sub_spans,
        cfg.word_mask_pct,
        &cfg.substitution_split,
        mv.word_mask_id,
        &mv.word_pool,
        rng,
    )
}

/// Whole-word masking of the phone side at `cfg.phone_mask_pct`.
pub fn mask_phones(
    u: &PairedUtterance,
    cfg: &MaskingConfig,
    mv: &MaskingVocab,
    rng: &mut ChaCha8Rng,
) -> MaskedSeq {
    mask_spans(
        &u.phone_ids,
        &u.word_phone_spans,
        cfg.phone_mask_pct,
        &cfg.substitution_split,
        mv.phone_mask_id,
        &mv.phone_pool,
        rng,
    )
}

/// One generated pre-training example: the laid-out input plus the loss
/// components it feeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub example: EncodedExample,
    pub loss_flags: BTreeSet<LossKind>,
}

/// The per-example task arm actually drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ArmChoice {
    PairedWords(u8),
    PairedPhones(u8),
    PairedBoth(u8, u8),
    TextWords(u8),
}

impl ArmChoice {
    fn layout(&self) -> Layout {
        match self {
            ArmChoice::TextWords(_) => Layout::TextOnly,
            _ => Layout::Paired,
        }
    }
}

fn draw_arm(cfg: &MaskingConfig, rng: &mut ChaCha8Rng) -> ArmChoice {
    match &cfg.strategy {
        Strategy::OneMod => {
            if rng.gen_bool(0.5) {
                ArmChoice::PairedWords(cfg.word_mask_pct)
            } else {
                ArmChoice::PairedPhones(cfg.phone_mask_pct)
            }
        }
        Strategy::TwoMod => ArmChoice::PairedBoth(cfg.word_mask_pct, cfg.phone_mask_pct),
        Strategy::TextOnly => ArmChoice::TextWords(cfg.word_mask_pct),
        Strategy::Mix(arms) => match arms[rng.gen_range(0..arms.len())] {
            TaskArm::PairedWords(p) => ArmChoice::PairedWords(p),
            TaskArm::PairedPhones(p) => ArmChoice::PairedPhones(p),
            TaskArm::TextWords(p) => ArmChoice::TextWords(p),
        },
    }
}

/// Applies the configured strategy to one utterance (no alignment pairing):
/// draws a task arm, truncates to the arm's layout, masks, and lays out the
/// example with the matching loss flags.
pub fn apply_strategy(
    u: &PairedUtterance,
    cfg: &MaskingConfig,
    mv: &MaskingVocab,
    max_seq_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PretrainExample, MaskingError> {
    let arm = draw_arm(cfg, rng);
    let t = truncate_to_fit(u, max_seq_len, arm.layout())?;
    Ok(build_from_arm(&t, None, arm, cfg, mv, false, rng))
}

/// Masks according to `arm` and assembles the example. `donor` supplies the
/// phone side for mismatched pairs; `mismatched` switches the loss
/// bookkeeping from conditional to plain.
fn build_from_arm(
    t: &PairedUtterance,
    donor: Option<&PairedUtterance>,
    arm: ArmChoice,
    cfg: &MaskingConfig,
    mv: &MaskingVocab,
    mismatched: bool,
    rng: &mut ChaCha8Rng,
) -> PretrainExample {
    let phone_side = donor.unwrap_or(t);
    let (word_pct, phone_pct) = match arm {
        ArmChoice::PairedWords(p) | ArmChoice::TextWords(p) => (p, 0),
        ArmChoice::PairedPhones(p) => (0, p),
        ArmChoice::PairedBoth(w, p) => (w, p),
    };
    let masked_words = mask_spans(
        &t.word_ids,
        &t.word_sub_spans,
        word_pct,
        &cfg.substitution_split,
        mv.word_mask_id,
        &mv.word_pool,
        rng,
    );
    let masked_phones = mask_spans(
        &phone_side.phone_ids,
        &phone_side.word_phone_spans,
        phone_pct,
        &cfg.substitution_split,
        mv.phone_mask_id,
        &mv.phone_pool,
        rng,
    );

    let mut flags = BTreeSet::new();
    if !masked_words.targets.is_empty() {
        flags.insert(if arm.layout() == Layout::TextOnly || mismatched {
            LossKind::Mlm
        } else {
            LossKind::CondMlm
        });
    }
    if !masked_phones.targets.is_empty() {
        flags.insert(if mismatched { LossKind::Msm } else { LossKind::CondMsm });
    }

    let (phones, wsa_label) = match arm.layout() {
        Layout::TextOnly => (None, None),
        Layout::Paired => {
            let label = if cfg.wsa_enabled {
                flags.insert(LossKind::Wsa);
                Some(if mismatched { WsaLabel::Mismatch } else { WsaLabel::Match })
            } else {
                None
            };
            (Some((masked_phones.ids.as_slice(), phone_side.word_phone_spans.as_slice())), label)
        }
    };
    let example = assemble_example(
        &masked_words.ids,
        &t.word_sub_spans,
        phones,
        wsa_label,
        &masked_words.targets,
        &masked_phones.targets,
    );
    PretrainExample { example, loss_flags: flags }
}

/// Builds the shard example with stream index `stream_idx` from utterance
/// `i`: draws alignment polarity and donor (when enabled), the task arm, and
/// the masking, all from the `(cfg.seed, stream_idx)` stream.
pub fn build_example(
    corpus: &[PairedUtterance],
    i: usize,
    stream_idx: u64,
    cfg: &MaskingConfig,
    mv: &MaskingVocab,
    max_seq_len: usize,
) -> Result<PretrainExample, MaskingError> {
    let mut rng = rng::stream(cfg.seed, rng::domain::MASKING, stream_idx);
    let mismatched = cfg.wsa_enabled && rng.gen_bool(cfg.wsa_negative_rate);
    let donor_idx = if mismatched {
        // Uniform over the other utterances.
        let j = rng.gen_range(0..corpus.len() - 1);
        Some(if j >= i { j + 1 } else { j })
    } else {
        None
    };
    let arm = draw_arm(cfg, &mut rng);
    let t = truncate_to_fit(&corpus[i], max_seq_len, arm.layout())?;
    match donor_idx {
        None => Ok(build_from_arm(&t, None, arm, cfg, mv, false, &mut rng)),
        Some(j) => {
            let mut d = truncate_to_fit(&corpus[j], max_seq_len, Layout::Paired)?;
            let mut t = t;
            // Mixed pair may still overflow; shed donor phone groups first,
            // then trailing words, keeping at least one of each.
            loop {
                let len = 3 + t.word_ids.len() + d.phone_ids.len();
                if len <= max_seq_len {
                    break;
                }
                if d.word_phone_spans.len() > 1 {
                    let keep = d.word_phone_spans.len() - 1;
                    d.phone_ids.truncate(d.word_phone_spans[keep - 1].end);
                    d.word_phone_spans.truncate(keep);
                    d.words.truncate(keep);
                    let sub_end = d.word_sub_spans[keep - 1].end;
                    d.word_ids.truncate(sub_end);
                    d.word_sub_spans.truncate(keep);
                } else if t.words.len() > 1 {
                    t = truncate_to_fit(&t, 3 + t.word_ids.len() - 1 + d.phone_ids.len(), Layout::Paired)?;
                } else {
                    return Err(MaskingError::Text(TextError::TooLong {
                        needed: len,
                        max: max_seq_len,
                    }));
                }
            }
            Ok(build_from_arm(&t, Some(&d), arm, cfg, mv, true, &mut rng))
        }
    }
}

/// Generates alignment-labelled examples for a whole corpus, one per
/// utterance, mixing in mismatched pairs at the configured rate.
pub fn build_wsa_batch(
    corpus: &[PairedUtterance],
    cfg: &MaskingConfig,
    mv: &MaskingVocab,
    max_seq_len: usize,
) -> Result<Vec<PretrainExample>, MaskingError> {
    cfg.validate()?;
    if cfg.wsa_enabled && cfg.wsa_negative_rate > 0.0 && corpus.len() < 2 {
        return Err(MaskingError::SingletonCorpus);
    }
    (0..corpus.len())
        .map(|i| build_example(corpus, i, i as u64, cfg, mv, max_seq_len))
        .collect()
}

/// Aggregate masking statistics of a generated shard, for generation reports
/// and rate checks.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MaskingStats {
    pub examples: usize,
    pub word_side_examples: usize,
    pub phone_side_examples: usize,
    pub text_only_examples: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Words in examples whose word side was eligible for masking.
    pub words_eligible: usize,
    pub words_masked: usize,
    /// Phone groups in examples whose phone side was eligible.
    pub phone_groups_eligible: usize,
    pub phone_groups_masked: usize,
    /// Per-selected-word action tallies, both modalities combined.
    pub action_mask: usize,
    pub action_random: usize,
    pub action_keep: usize,
}

impl MaskingStats {
    pub fn word_mask_rate(&self) -> f64 {
        self.words_masked as f64 / self.words_eligible.max(1) as f64
    }

    pub fn phone_group_mask_rate(&self) -> f64 {
        self.phone_groups_masked as f64 / self.phone_groups_eligible.max(1) as f64
    }

    pub fn action_fractions(&self) -> (f64, f64, f64) {
        let n = (self.action_mask + self.action_random + self.action_keep).max(1) as f64;
        (self.action_mask as f64 / n, self.action_random as f64 / n, self.action_keep as f64 / n)
    }

    pub fn negative_fraction(&self) -> f64 {
        self.negatives as f64 / (self.positives + self.negatives).max(1) as f64
    }

    /// Tallies one example. Actions are inferred from the substituted ids
    /// against the recorded targets, so the statistics measure the output,
    /// not the generator's intent: a whole span of mask-ids is `mask`, an
    /// unchanged span is `keep`, anything else is `random`.
    pub fn record(&mut self, ex: &PretrainExample, mv: &MaskingVocab) {
        self.examples += 1;
        match ex.example.wsa_label {
            Some(WsaLabel::Match) => self.positives += 1,
            Some(WsaLabel::Mismatch) => self.negatives += 1,
            None => {}
        }
        let e = &ex.example;
        let word_arm = e.layout() == Layout::TextOnly || word_side_active(ex);
        if word_arm {
            self.word_side_examples += usize::from(e.layout() != Layout::TextOnly);
            self.text_only_examples += usize::from(e.layout() == Layout::TextOnly);
            self.words_eligible += e.word_sub_spans.len();
            for span in &e.word_sub_spans {
                if span.range().all(|p| e.mlm_targets.contains_key(&p)) {
                    self.words_masked += 1;
                    self.tally_action(span, &e.mlm_targets, &e.input_ids, mv.word_mask_id);
                }
            }
        }
        if phone_side_active(ex) {
            self.phone_side_examples += 1;
            self.phone_groups_eligible += e.phone_group_spans.len();
            for span in &e.phone_group_spans {
                if span.range().all(|p| e.msm_targets.contains_key(&p)) {
                    self.phone_groups_masked += 1;
                    self.tally_action(span, &e.msm_targets, &e.input_ids, mv.phone_mask_id);
                }
            }
        }
    }

    fn tally_action(
        &mut self,
        span: &Span,
        targets: &BTreeMap<usize, u32>,
        ids: &[u32],
        mask_id: u32,
    ) {
        if span.range().all(|p| ids[p] == mask_id) {
            self.action_mask += 1;
        } else if span.range().all(|p| ids[p] == targets[&p]) {
            self.action_keep += 1;
        } else {
            self.action_random += 1;
        }
    }
}

fn word_side_active(ex: &PretrainExample) -> bool {
    ex.loss_flags.contains(&LossKind::CondMlm) || ex.loss_flags.contains(&LossKind::Mlm)
}

fn phone_side_active(ex: &PretrainExample) -> bool {
    ex.loss_flags.contains(&LossKind::CondMsm) || ex.loss_flags.contains(&LossKind::Msm)
}

/// Checks that masking respected word boundaries: within every whole-word
/// span, positions are either all targeted or all untouched.
pub fn whole_word_atomicity_ok(ex: &EncodedExample) -> bool {
    let span_ok = |span: &Span, targets: &BTreeMap<usize, u32>| {
        let hits = span.range().filter(|p| targets.contains_key(p)).count();
        hits == 0 || hits == span.len()
    };
    ex.word_sub_spans.iter().all(|s| span_ok(s, &ex.mlm_targets))
        && ex.phone_group_spans.iter().all(|s| span_ok(s, &ex.msm_targets))
}

/// Generates `passes` examples per utterance; copy `p` of utterance `i`
/// draws from stream `p * corpus_len + i`, so masks vary across passes while
/// every example stays individually reproducible.
pub fn generate_shard(
    corpus: &[PairedUtterance],
    cfg: &MaskingConfig,
    mv: &MaskingVocab,
    max_seq_len: usize,
    passes: usize,
) -> Result<(Vec<PretrainExample>, MaskingStats), MaskingError> {
    cfg.validate()?;
    if cfg.wsa_enabled && cfg.wsa_negative_rate > 0.0 && corpus.len() < 2 {
        return Err(MaskingError::SingletonCorpus);
    }
    let mut examples = Vec::with_capacity(corpus.len() * passes);
    let mut stats = MaskingStats::default();
    for pass in 0..passes {
        for i in 0..corpus.len() {
            let stream_idx = (pass * corpus.len() + i) as u64;
            let ex = build_example(corpus, i, stream_idx, cfg, mv, max_seq_len)?;
            stats.record(&ex, mv);
            examples.push(ex);
        }
    }
    Ok((examples, stats))
}

/// Shard file format version; the first line of a shard names it.
pub const SHARD_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ShardHeader {
    format_version: u32,
}

/// Writes a shard: a version header line, then one JSON record per example.
pub fn write_shard(
    examples: &[PretrainExample],
    mut writer: impl Write,
) -> Result<(), MaskingError> {
    serde_json::to_writer(&mut writer, &ShardHeader { format_version: SHARD_VERSION })?;
    writer.write_all(b"\n")?;
    for ex in examples {
        serde_json::to_writer(&mut writer, ex)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a shard, validating the version header.
pub fn read_shard(reader: impl BufRead) -> Result<Vec<PretrainExample>, MaskingError> {
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or(MaskingError::BadShardHeader)??;
    let header: ShardHeader =
        serde_json::from_str(&header_line).map_err(|_| MaskingError::BadShardHeader)?;
    if header.format_version != SHARD_VERSION {
        return Err(MaskingError::BadShardVersion { found: header.format_version });
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
