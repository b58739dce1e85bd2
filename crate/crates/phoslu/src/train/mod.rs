//! Loss computation, Adam optimization, gradient checking, and the
//! pre-training and fine-tuning loops.
//!
//! Losses are plain softmax cross-entropies.  A [`LossBundle`] carries the
//! per-task components of one example (or one batch) and their unweighted
//! sum; which components are present is dictated by the example's loss flags
//! during pre-training and by the task mode during fine-tuning, and any
//! mismatch is a contract error rather than a silent default.
//!
//! Both loops are single-threaded and process examples in a fixed order with
//! all randomness drawn from seeded streams, so two runs with the same seed
//! produce byte-identical loss logs.

pub mod finetune;
pub mod losses;
pub mod optim;
pub mod pretrain;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pretrain::{LossKind, MaskingError, PretrainExample};

pub use finetune::{
    finetune, predict, FinetuneCandidate, FinetuneOptions, FinetuneOutcome, FinetuneMode,
    PhoneMode, DEFAULT_BETA_GRID,
};
pub use losses::{masked_ce_grad, masked_ce_loss, wsa_class_index, wsa_grad, wsa_loss};
pub use optim::{
    adam_step, clip_grad_norm, grad_check, GradCheckEntry, GradCheckReport, OptimizerState,
    Schedule,
};
pub use pretrain::{evaluate_pretrain_loss, pretrain, PretrainOutcome};

/// Errors raised by loss combination, optimization, and the training loops.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("loss components {got} do not match the example's flags {expected}")]
    FlagMismatch { expected: String, got: String },
    #[error("{mode} fine-tuning requires {component} but it is {state}")]
    ComponentMismatch {
        mode: &'static str,
        component: &'static str,
        state: &'static str,
    },
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGrad(String),
    #[error("non-finite parameters after update in tensor {0}")]
    NonFiniteParam(String),
    #[error("non-finite loss ({0})")]
    NonFiniteLoss(String),
    #[error("training set is empty")]
    EmptyData,
    #[error("malformed loss log at line {line}: {source}")]
    BadLossLog {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error(transparent)]
    Slu(#[from] crate::slu::SluError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-task loss components of one example or batch, with their unweighted
/// sum.  Absent components simply do not contribute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cond_mlm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cond_msm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wsa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sf: Option<f64>,
    pub total: f64,
}

impl LossBundle {
    /// Present components in a stable order, named as in the loss logs.
    pub fn components(&self) -> Vec<(&'static str, f64)> {
        let all = [
            ("condMLM", self.cond_mlm),
            ("condMSM", self.cond_msm),
            ("MLM", self.mlm),
            ("MSM", self.msm),
            ("WSA", self.wsa),
            ("IC", self.ic),
            ("SF", self.sf),
        ];
        all.into_iter()
            .filter_map(|(name, v)| v.map(|v| (name, v)))
            .collect()
    }

    fn with_total(mut self) -> Self {
        self.total = self.components().iter().map(|(_, v)| v).sum();
        self
    }
}

/// Builds the loss bundle of a pre-training example from the per-task losses
/// actually computed.  The computed set must equal the example's loss flags
/// exactly; the total is their unweighted sum.
pub fn combine_pretrain_losses(
    example: &PretrainExample,
    computed: &BTreeMap<LossKind, f64>,
) -> Result<LossBundle, TrainError> {
    let got: std::collections::BTreeSet<LossKind> = computed.keys().copied().collect();
    if got != example.loss_flags {
        let fmt = |set: &std::collections::BTreeSet<LossKind>| {
            let names: Vec<&str> = set.iter().map(|k| k.name()).collect();
            format!("{{{}}}", names.join(", "))
        };
        return Err(TrainError::FlagMismatch {
            expected: fmt(&example.loss_flags),
            got: fmt(&got),
        });
    }
    let mut bundle = LossBundle::default();
    for (kind, &value) in computed {
        match kind {
            LossKind::CondMlm => bundle.cond_mlm = Some(value),
            LossKind::CondMsm => bundle.cond_msm = Some(value),
            LossKind::Mlm => bundle.mlm = Some(value),
            LossKind::Msm => bundle.msm = Some(value),
            LossKind::Wsa => bundle.wsa = Some(value),
        }
    }
    Ok(bundle.with_total())
}

/// Builds the loss bundle of a fine-tuning example: intent loss alone in
/// intent-only mode, intent plus slot loss in joint mode.  A slot loss must
/// be present exactly when the mode is joint.
pub fn finetune_loss(
    mode: FinetuneMode,
    ic_loss: f64,
    sf_loss: Option<f64>,
) -> Result<LossBundle, TrainError> {
    match (mode, sf_loss) {
        (FinetuneMode::IcOnly, None) => Ok(LossBundle {
            ic: Some(ic_loss),
            ..LossBundle::default()
        }
        .with_total()),
        (FinetuneMode::Joint, Some(sf)) => Ok(LossBundle {
            ic: Some(ic_loss),
            sf: Some(sf),
            ..LossBundle::default()
        }
        .with_total()),
        (FinetuneMode::IcOnly, Some(_)) => Err(TrainError::ComponentMismatch {
            mode: "intent-only",
            component: "a slot loss",
            state: "present",
        }),
        (FinetuneMode::Joint, None) => Err(TrainError::ComponentMismatch {
            mode: "joint",
            component: "a slot loss",
            state: "absent",
        }),
    }
}

/// Batch-size, step-count, and learning-rate settings of a training run.
///
/// `learning_rates` is a grid: pre-training uses its first entry, while
/// fine-tuning searches the whole grid (crossed with the phone-mixing
/// weights) by validation intent accuracy.  The `deterministic` flag records
/// the mode for config round-trips; this implementation is deterministic
/// unconditionally — batches run in a fixed order with fixed reduction order
/// and all randomness comes from seeded counter-based streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub learning_rates: Vec<f64>,
    /// Fraction of `max_steps` spent ramping the learning rate up linearly.
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    /// Optional global gradient-norm ceiling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
}

fn default_warmup() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// Desk-scale pre-training defaults (full-scale runs would use batch 64
    /// and 100K steps with the same learning-rate grid).
    pub fn desk_pretrain(seed: u64) -> Self {
        TrainConfig {
            batch_size: 8,
            max_steps: 2000,
            learning_rates: vec![1e-4, 5e-5],
            warmup_fraction: 0.1,
            seed,
            deterministic: true,
            max_grad_norm: None,
        }
    }

    /// Desk-scale fine-tuning defaults.
    pub fn desk_finetune(seed: u64) -> Self {
        TrainConfig {
            batch_size: 8,
            max_steps: 300,
            learning_rates: vec![3e-5, 5e-5],
            warmup_fraction: 0.1,
            seed,
            deterministic: true,
            max_grad_norm: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::BadConfig(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.max_steps == 0 {
            return fail("max_steps must be positive".into());
        }
        if self.learning_rates.is_empty() {
            return fail("learning-rate grid is empty".into());
        }
        for &lr in &self.learning_rates {
            if !(lr.is_finite() && lr > 0.0) {
                return fail(format!("learning rate {lr} must be finite and positive"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!(
                "warmup fraction {} must lie in [0, 1)",
                self.warmup_fraction
            ));
        }
        if let Some(mn) = self.max_grad_norm {
            if !(mn.is_finite() && mn > 0.0) {
                return fail(format!("max gradient norm {mn} must be finite and positive"));
            }
        }
        Ok(())
    }
}

/// One loss-log line: the step index, the learning rate applied, the mean of
/// each loss component over the examples of the batch that carried it, and
/// the mean total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub components: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossRecord {
    /// Averages a batch of bundles into one record.  Each component averages
    /// over the examples that actually carried it; the total averages over
    /// all examples.
    pub fn from_batch(step: u64, lr: f64, bundles: &[LossBundle]) -> Self {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut total = 0.0;
        for bundle in bundles {
            total += bundle.total;
            for (name, value) in bundle.components() {
                let entry = sums.entry(name.to_string()).or_insert((0.0, 0));
                entry.0 += value;
                entry.1 += 1;
            }
        }
        LossRecord {
            step,
            lr,
            components: sums
                .into_iter()
                .map(|(name, (sum, n))| (name, sum / n as f64))
                .collect(),
            total: total / bundles.len().max(1) as f64,
        }
    }
}

/// Writes a loss log as line-delimited JSON, one record per step.
pub fn write_loss_log(w: &mut impl Write, records: &[LossRecord]) -> Result<(), TrainError> {
    for record in records {
        let line = serde_json::to_string(record).expect("loss records serialize");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads a loss log written by [`write_loss_log`].
pub fn read_loss_log(r: impl BufRead) -> Result<Vec<LossRecord>, TrainError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            serde_json::from_str(&line).map_err(|source| TrainError::BadLossLog {
                line: i + 1,
                source,
            })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::{EncodedExample, Span};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn dummy_example(flags: &[LossKind]) -> PretrainExample {
        PretrainExample {
            example: EncodedExample {
                input_ids: vec![1, 5, 2],
                segment_ids: vec![0, 0, 0],
                position_ids: vec![0, 1, 2],
                word_region: Span::new(1, 2),
                phone_region: Span::new(3, 3),
                word_sub_spans: vec![Span::new(1, 2)],
                phone_group_spans: vec![],
                wsa_label: None,
                mlm_targets: Default::default(),
                msm_targets: Default::default(),
            },
            loss_flags: BTreeSet::from_iter(flags.iter().copied()),
        }
    }

    #[test]
    fn positive_one_sided_example_sums_word_and_pair_losses() {
        let ex = dummy_example(&[LossKind::CondMlm, LossKind::Wsa]);
        let computed = BTreeMap::from([(LossKind::CondMlm, 0.5), (LossKind::Wsa, 0.25)]);
        let bundle = combine_pretrain_losses(&ex, &computed).unwrap();
        assert_eq!(bundle.cond_mlm, Some(0.5));
        assert_eq!(bundle.wsa, Some(0.25));
        assert_eq!(bundle.cond_msm, None);
        assert_eq!(bundle.total, 0.75);
    }

    #[test]
    fn negative_two_sided_example_sums_plain_losses() {
        let ex = dummy_example(&[LossKind::Mlm, LossKind::Msm, LossKind::Wsa]);
        let computed = BTreeMap::from([
            (LossKind::Mlm, 0.4),
            (LossKind::Msm, 0.3),
            (LossKind::Wsa, 0.2),
        ]);
        let bundle = combine_pretrain_losses(&ex, &computed).unwrap();
        assert!((bundle.total - 0.9).abs() < 1e-15);
    }

    #[test]
    fn disabled_pair_task_leaves_only_masking_losses() {
        let ex = dummy_example(&[LossKind::CondMlm, LossKind::CondMsm]);
        let computed = BTreeMap::from([(LossKind::CondMlm, 1.0), (LossKind::CondMsm, 2.0)]);
        let bundle = combine_pretrain_losses(&ex, &computed).unwrap();
        assert_eq!(bundle.wsa, None);
        assert_eq!(bundle.total, 3.0);
    }

    #[test]
    fn component_flag_mismatch_is_a_contract_error() {
        let ex = dummy_example(&[LossKind::CondMlm]);
        let computed = BTreeMap::from([(LossKind::Mlm, 1.0)]);
        let err = combine_pretrain_losses(&ex, &computed).unwrap_err();
        assert!(matches!(err, TrainError::FlagMismatch { .. }));
        let missing = BTreeMap::new();
        assert!(combine_pretrain_losses(&ex, &missing).is_err());
    }

    #[test]
    fn finetune_bundles_follow_the_task_mode() {
        let ic_only = finetune_loss(FinetuneMode::IcOnly, 0.7, None).unwrap();
        assert_eq!(ic_only.total, 0.7);
        assert_eq!(ic_only.sf, None);

        let joint = finetune_loss(FinetuneMode::Joint, 0.7, Some(0.3)).unwrap();
        assert!((joint.total - 1.0).abs() < 1e-15);

        assert!(matches!(
            finetune_loss(FinetuneMode::Joint, 0.7, None),
            Err(TrainError::ComponentMismatch { .. })
        ));
        assert!(matches!(
            finetune_loss(FinetuneMode::IcOnly, 0.7, Some(0.3)),
            Err(TrainError::ComponentMismatch { .. })
        ));
    }

    proptest! {
        /// The bundle total always equals the sum of its present components.
        #[test]
        fn totals_are_additive(
            values in proptest::collection::vec(0.0f64..10.0, 5),
            mask in proptest::collection::vec(proptest::bool::ANY, 5),
        ) {
            let kinds = [
                LossKind::CondMlm, LossKind::CondMsm, LossKind::Mlm,
                LossKind::Msm, LossKind::Wsa,
            ];
            let chosen: Vec<LossKind> = kinds
                .iter()
                .zip(&mask)
                .filter_map(|(k, keep)| keep.then_some(*k))
                .collect();
            prop_assume!(!chosen.is_empty());
            let ex = dummy_example(&chosen);
            let computed: BTreeMap<LossKind, f64> = chosen
                .iter()
                .zip(&values)
                .map(|(k, v)| (*k, *v))
                .collect();
            let bundle = combine_pretrain_losses(&ex, &computed).unwrap();
            let sum: f64 = bundle.components().iter().map(|(_, v)| v).sum();
            prop_assert!((bundle.total - sum).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_records_average_components_over_carriers_only() {
        let a = LossBundle {
            cond_mlm: Some(1.0),
            wsa: Some(0.5),
            ..Default::default()
        }
        .with_total();
        let b = LossBundle {
            cond_msm: Some(2.0),
            wsa: Some(1.5),
            ..Default::default()
        }
        .with_total();
        let record = LossRecord::from_batch(7, 1e-4, &[a, b]);
        assert_eq!(record.step, 7);
        assert_eq!(record.components["condMLM"], 1.0);
        assert_eq!(record.components["condMSM"], 2.0);
        assert_eq!(record.components["WSA"], 1.0);
        assert!((record.total - (1.5 + 3.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn loss_log_round_trips() {
        let records = vec![
            LossRecord {
                step: 0,
                lr: 0.0,
                components: BTreeMap::from([("IC".to_string(), 0.7)]),
                total: 0.7,
            },
            LossRecord {
                step: 1,
                lr: 5e-5,
                components: BTreeMap::from([("IC".to_string(), 0.6), ("SF".to_string(), 0.2)]),
                total: 0.8,
            },
        ];
        let mut buf = Vec::new();
        write_loss_log(&mut buf, &records).unwrap();
        let back = read_loss_log(buf.as_slice()).unwrap();
        assert_eq!(back, records);

        assert!(matches!(
            read_loss_log(&b"garbage\n"[..]),
            Err(TrainError::BadLossLog { line: 1, .. })
        ));
    }

    #[test]
    fn train_config_validation_catches_bad_grids() {
        let mut cfg = TrainConfig::desk_pretrain(1);
        cfg.validate().unwrap();
        cfg.learning_rates.clear();
        assert!(cfg.validate().is_err());
        cfg.learning_rates = vec![-1.0];
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::desk_finetune(1);
        cfg.warmup_fraction = 1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::desk_finetune(1);
        cfg.max_grad_norm = Some(0.0);
        assert!(cfg.validate().is_err());
    }
}
