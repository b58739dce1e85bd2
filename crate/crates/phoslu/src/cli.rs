//! Command-line pipeline driver.
//!
//! Subcommands mirror the experiment stages: `build-lexicon` compiles a
//! pronunciation dictionary into a phone vocabulary, `synth` writes the
//! synthetic homophone world, `prepare` materializes a masked pre-training
//! shard, `pretrain` and `finetune` train the encoder and search the
//! fine-tuning grid, and `eval`/`mrr` score checkpoints.  Every stage reads
//! one TOML [`RunConfig`] (plus `--set key=value` dotted overrides), funnels
//! all randomness through the single `seed`, writes its outputs under
//! `paths.out_dir`, and echoes the effective configuration there.  With a
//! fixed seed and fixed inputs, re-running a stage rewrites byte-identical
//! artifacts.
//!
//! Configuration sections are whole-or-default: a section omitted from the
//! file takes its stage-appropriate defaults, while a partially written
//! section backfills the remaining fields from the generic defaults.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::eval::{
    extract_confusion_pairs, intent_accuracy, mrr, semer_corpus, Frame, MetricReport, SemErReport,
};
use crate::lexicon::{Lexicon, PhoneVocab};
use crate::model::{checkpoint, LmSupport, ModelConfig};
use crate::pretrain::{
    generate_shard, read_shard, write_shard, MaskingConfig, MaskingStats, MaskingVocab, TaskPreset,
};
use crate::slu::{
    decode_bio, encode_for_finetune, read_dataset, write_dataset_path, LabelMap, SluLabels,
};
use crate::synth::{self, SynthConfig};
use crate::textproc::{build_paired, PairedUtterance, Vocab};
use crate::train::{
    finetune, pretrain, predict, write_loss_log, FinetuneCandidate, FinetuneMode, FinetuneOptions,
    PhoneMode, TrainConfig,
};

/// Effective-configuration echo written by every config-driven command.
pub const EFFECTIVE_CONFIG: &str = "config.toml";
/// Masked pre-training shard written by `prepare`.
pub const SHARD_FILE: &str = "shard.jsonl";
/// Masking-rate generation report written by `prepare`.
pub const PREPARE_REPORT: &str = "prepare_report.json";
/// Encoder checkpoint written by `pretrain`.
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
/// Step-by-step loss log written by `pretrain`.
pub const PRETRAIN_LOSS_LOG: &str = "pretrain_loss.jsonl";
/// Winning checkpoint written by `finetune`.
pub const FINETUNE_CKPT: &str = "finetune.ckpt";
/// Loss log of the winning fine-tuning candidate.
pub const FINETUNE_LOSS_LOG: &str = "finetune_loss.jsonl";
/// Grid-search report written by `finetune`.
pub const FINETUNE_REPORT: &str = "finetune_report.json";
/// Intent label map frozen by `finetune`.
pub const INTENT_LABELS: &str = "intent_labels.txt";
/// Slot-tag label map frozen by `finetune`.
pub const TAG_LABELS: &str = "tag_labels.txt";
/// Human-readable metric report written by `eval`.
pub const EVAL_REPORT_TEXT: &str = "eval_report.txt";
/// Line-delimited metric report written by `eval`.
pub const EVAL_REPORT_JSONL: &str = "eval_report.jsonl";
/// Retrieval report written by `mrr`.
pub const MRR_REPORT: &str = "mrr_report.json";

/// Pronunciation dictionary written by `synth`.
pub const SYNTH_DICT: &str = "dict.txt";
/// Word-piece vocabulary written by `synth`.
pub const SYNTH_VOCAB: &str = "vocab.txt";
/// Phone vocabulary written by `synth`.
pub const SYNTH_PHONE_VOCAB: &str = "phone_vocab.txt";
/// Pre-training corpus written by `synth`, one utterance per line.
pub const SYNTH_CORPUS: &str = "corpus.txt";
/// Labeled training split written by `synth`.
pub const SYNTH_SLU_TRAIN: &str = "slu_train.jsonl";
/// Validation split written by `synth`.
pub const SYNTH_SLU_VALID: &str = "slu_valid.jsonl";
/// Clean test split written by `synth`.
pub const SYNTH_SLU_TEST: &str = "slu_test.jsonl";
/// Homophone-corrupted test split written by `synth`.
pub const SYNTH_SLU_TEST_CORRUPTED: &str = "slu_test_corrupted.jsonl";
/// Reference transcripts (clean test texts) written by `synth`.
pub const SYNTH_ASR_REFS: &str = "asr_refs.txt";
/// Hypothesis transcripts (homophone-corrupted texts) written by `synth`.
pub const SYNTH_ASR_HYPS: &str = "asr_hyps.txt";

/// Input and output locations of a run.  Paths a command does not use may
/// stay empty; every path a command does use must exist when it starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory receiving every artifact of the run.
    pub out_dir: PathBuf,
    /// Pronunciation dictionary (one `word PH ONE S` line per entry).
    pub lexicon: PathBuf,
    /// Word-piece vocabulary listing.
    pub vocab: PathBuf,
    /// Phone vocabulary listing; derived from the dictionary when empty.
    pub phone_vocab: PathBuf,
    /// Pre-training corpus, one utterance per line.
    pub corpus: PathBuf,
    /// Labeled training split (line-delimited JSON).
    pub slu_train: PathBuf,
    /// Validation split used for grid selection.
    pub slu_valid: PathBuf,
    /// Test split scored by `eval`.
    pub slu_test: PathBuf,
    /// Reference transcripts for confusion-pair extraction.
    pub asr_refs: PathBuf,
    /// Hypothesis transcripts for confusion-pair extraction.
    pub asr_hyps: PathBuf,
    /// Backbone checkpoint override; `finetune` and `mrr` default to the
    /// `pretrain` output in `out_dir`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out_dir: PathBuf::from("out"),
            lexicon: PathBuf::new(),
            vocab: PathBuf::new(),
            phone_vocab: PathBuf::new(),
            corpus: PathBuf::new(),
            slu_train: PathBuf::new(),
            slu_valid: PathBuf::new(),
            slu_test: PathBuf::new(),
            asr_refs: PathBuf::new(),
            asr_hyps: PathBuf::new(),
            checkpoint: None,
        }
    }
}

/// Pre-training task selection: a named preset, optionally with the
/// alignment task toggled on top of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    /// Preset key, e.g. `mlm15` or `condmlm100+condmsm100(onemod)`.
    pub preset: String,
    /// Forces the word/speech alignment task on or off regardless of the
    /// preset.  Some combinations cannot produce alignment evidence (both
    /// sides fully masked on every example) and fail validation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wsa: Option<bool>,
    /// Shard passes over the corpus; each pass re-draws the masking.
    pub passes: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            preset: TaskPreset::Cond100OneMod.key().to_string(),
            wsa: None,
            passes: 1,
        }
    }
}

/// Encoder architecture; vocabulary and head sizes come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub lm_support: LmSupport,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            max_seq_len: 128,
            dropout: 0.1,
            lm_support: LmSupport::JointFull,
        }
    }
}

impl ModelSection {
    /// Completes the architecture with the vocabulary sizes.  Head widths
    /// are placeholders here; fine-tuning replaces the heads to fit the
    /// label maps of its training split.
    pub fn to_model_config(&self, word_vocab_size: usize, phone_vocab_size: usize) -> ModelConfig {
        ModelConfig {
            word_vocab_size,
            phone_vocab_size,
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
            num_intents: 2,
            num_slot_tags: 1,
            lm_support: self.lm_support,
        }
    }
}

/// Optimization settings of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub max_steps: u64,
    /// Pre-training uses the first rate; fine-tuning grids over all of them.
    pub learning_rates: Vec<f64>,
    pub warmup_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 8,
            max_steps: 2000,
            learning_rates: vec![1e-4],
            warmup_fraction: 0.1,
            max_grad_norm: None,
        }
    }
}

impl TrainSection {
    /// Fine-tuning defaults: short schedule, small learning-rate grid.
    pub fn default_finetune() -> Self {
        TrainSection {
            batch_size: 8,
            max_steps: 300,
            learning_rates: vec![3e-5, 5e-5],
            warmup_fraction: 0.1,
            max_grad_norm: None,
        }
    }

    /// Completes the stage configuration with the run seed.
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            learning_rates: self.learning_rates.clone(),
            warmup_fraction: self.warmup_fraction,
            seed,
            deterministic: true,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

/// Scoring options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Confusion pairs kept for retrieval scoring.
    pub top_k_pairs: usize,
    /// Row label of the retrieval report.
    pub label: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            top_k_pairs: 20,
            label: "model".to_string(),
        }
    }
}

/// Synthetic-world size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Pre-training utterances to sample.
    pub utterances: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { utterances: 128 }
    }
}

fn default_finetune_opts() -> FinetuneOptions {
    FinetuneOptions::new(FinetuneMode::Joint, PhoneMode::None)
}

/// One configuration drives every stage; a stage reads only the sections it
/// needs.  All randomness descends from the single `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub task: TaskSection,
    pub model: ModelSection,
    pub pretrain: TrainSection,
    pub finetune: TrainSection,
    pub finetune_opts: FinetuneOptions,
    pub eval: EvalSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            task: TaskSection::default(),
            model: ModelSection::default(),
            pretrain: TrainSection::default(),
            finetune: TrainSection::default_finetune(),
            finetune_opts: default_finetune_opts(),
            eval: EvalSection::default(),
            synth: SynthSection::default(),
        }
    }
}

impl RunConfig {
    /// The masking configuration the task section describes, validated.
    pub fn masking_config(&self) -> Result<MaskingConfig> {
        let preset = TaskPreset::parse(&self.task.preset).with_context(|| {
            let known: Vec<&str> = TaskPreset::ALL.iter().map(|p| p.key()).collect();
            format!(
                "unknown task preset {:?} (known presets: {})",
                self.task.preset,
                known.join(", ")
            )
        })?;
        let mut cfg = preset.masking(self.seed);
        if let Some(wsa) = self.task.wsa {
            cfg.wsa_enabled = wsa;
        }
        cfg.validate()
            .with_context(|| format!("task configuration {:?} is infeasible", self.task.preset))?;
        Ok(cfg)
    }
}

/// Parses a raw override value: anything TOML accepts as a value (numbers,
/// booleans, arrays, quoted strings) keeps its type; everything else is a
/// bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("wrapper key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `key=value` override with a dotted key path, creating
/// intermediate tables as needed.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(|p| p.is_empty()) {
        bail!("override {assignment:?} has an empty key component");
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("config key {part:?} is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

/// Loads a run configuration from `path` and applies `--set` overrides.
pub fn load_run_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut table: toml::Table = text
        .parse()
        .with_context(|| format!("parsing config {}", path.display()))?;
    for assignment in overrides {
        apply_override(&mut table, assignment)?;
    }
    let run: RunConfig = table.try_into().context("invalid run configuration")?;
    Ok(run)
}

/// Writes the effective configuration into the output directory and returns
/// its path.  The file re-loads to an identical configuration.
pub fn write_effective_config(run: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let path = out_dir.join(EFFECTIVE_CONFIG);
    let text = toml::to_string_pretty(run).context("serializing effective config")?;
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

#[derive(Parser, Debug)]
#[command(
    name = "phoslu",
    version,
    about = "Joint word/phone masked-LM pre-training and spoken language understanding"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Shared `--config`/`--set` arguments of the config-driven subcommands.
#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Run-configuration file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted-path overrides, e.g. --set pretrain.max_steps=100
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        load_run_config(&self.config, &self.overrides)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compile a pronunciation dictionary into a phone vocabulary file.
    BuildLexicon {
        /// Pronunciation dictionary to read.
        #[arg(long)]
        dict: PathBuf,
        /// Phone vocabulary file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic homophone world into the output directory.
    Synth(ConfigArgs),
    /// Materialize a masked pre-training shard from the corpus.
    Prepare(ConfigArgs),
    /// Pre-train the encoder on a prepared shard.
    Pretrain(ConfigArgs),
    /// Fine-tune a pre-trained checkpoint for intent and slot prediction.
    Finetune(ConfigArgs),
    /// Score predictions on a labeled test split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Test split override (defaults to paths.slu_test).
        #[arg(long)]
        test: Option<PathBuf>,
        /// Score this hypothesis-frames file instead of running the model.
        #[arg(long)]
        hyps: Option<PathBuf>,
    },
    /// Rank transcript confusion pairs by trained-embedding similarity.
    Mrr(ConfigArgs),
}

/// Dispatches one parsed invocation.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::BuildLexicon { dict, out } => cmd_build_lexicon(dict, out),
        Command::Synth(args) => cmd_synth(&args.load()?),
        Command::Prepare(args) => cmd_prepare(&args.load()?),
        Command::Pretrain(args) => cmd_pretrain(&args.load()?),
        Command::Finetune(args) => cmd_finetune(&args.load()?),
        Command::Eval { config, test, hyps } => {
            cmd_eval(&config.load()?, test.as_deref(), hyps.as_deref())
        }
        Command::Mrr(args) => cmd_mrr(&args.load()?),
    }
}

fn require_file(name: &str, path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() {
        bail!("{name} is not set in the configuration");
    }
    if !path.is_file() {
        bail!("{name} does not exist: {}", path.display());
    }
    Ok(())
}

fn open_buffered(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| {
        format!("opening {}", path.display())
    })?))
}

fn read_nonempty_lines(path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in open_buffered(path)?.lines() {
        let line = line?;
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
    }
    Ok(out)
}

/// The loaded vocabularies every data-touching stage shares.
struct World {
    vocab: Vocab,
    lexicon: Lexicon,
    phone_vocab: PhoneVocab,
}

fn load_world(run: &RunConfig) -> Result<World> {
    require_file("paths.vocab", &run.paths.vocab)?;
    require_file("paths.lexicon", &run.paths.lexicon)?;
    let vocab = Vocab::read(open_buffered(&run.paths.vocab)?)
        .with_context(|| format!("reading vocabulary {}", run.paths.vocab.display()))?;
    let lexicon = Lexicon::parse_dictionary(open_buffered(&run.paths.lexicon)?)
        .with_context(|| format!("reading dictionary {}", run.paths.lexicon.display()))?;
    let phone_vocab = if run.paths.phone_vocab.as_os_str().is_empty() {
        lexicon.phone_vocab()
    } else {
        require_file("paths.phone_vocab", &run.paths.phone_vocab)?;
        PhoneVocab::read(open_buffered(&run.paths.phone_vocab)?)
            .with_context(|| format!("reading phone vocabulary {}", run.paths.phone_vocab.display()))?
    };
    Ok(World {
        vocab,
        lexicon,
        phone_vocab,
    })
}

/// Compiles a pronunciation dictionary into a phone vocabulary file and
/// prints entry statistics plus an unknown-word probe.
pub fn cmd_build_lexicon(dict: &Path, out: &Path) -> Result<()> {
    require_file("--dict", dict)?;
    let lexicon = Lexicon::parse_dictionary(open_buffered(dict)?)
        .with_context(|| format!("reading dictionary {}", dict.display()))?;
    let phone_vocab = lexicon.phone_vocab();
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(
        File::create(out).with_context(|| format!("creating {}", out.display()))?,
    );
    phone_vocab.write(&mut w)?;
    w.flush()?;

    let observed: std::collections::BTreeSet<&str> = lexicon
        .iter()
        .flat_map(|(_, phones)| phones.iter().map(String::as_str))
        .collect();
    println!("dictionary entries: {}", lexicon.len());
    println!(
        "phone vocabulary size: {} ({} observed symbols plus specials)",
        phone_vocab.len(),
        observed.len()
    );
    let probe = "zzzunheard";
    let unk = phone_vocab
        .symbol(phone_vocab.unk_id())
        .unwrap_or("?")
        .to_string();
    if lexicon.contains(probe) {
        println!("unk probe: {probe:?} unexpectedly present in the dictionary");
    } else {
        println!(
            "unk probe: {probe:?} absent; unknown phones fall back to {unk:?} (id {})",
            phone_vocab.unk_id()
        );
    }
    Ok(())
}

/// Writes the synthetic homophone world into the output directory.
pub fn cmd_synth(run: &RunConfig) -> Result<()> {
    let out_dir = &run.paths.out_dir;
    write_effective_config(run, out_dir)?;
    let world = synth::generate(&SynthConfig {
        seed: run.seed,
        pretrain_utterances: run.synth.utterances,
    })?;

    fs::write(out_dir.join(SYNTH_DICT), &world.dictionary)?;
    let mut vw = BufWriter::new(File::create(out_dir.join(SYNTH_VOCAB))?);
    world.vocab.write(&mut vw)?;
    vw.flush()?;
    let mut pw = BufWriter::new(File::create(out_dir.join(SYNTH_PHONE_VOCAB))?);
    world.phone_vocab.write(&mut pw)?;
    pw.flush()?;
    let mut corpus = world.pretrain_texts.join("\n");
    corpus.push('\n');
    fs::write(out_dir.join(SYNTH_CORPUS), corpus)?;

    for (file, split) in [
        (SYNTH_SLU_TRAIN, &world.slu_train),
        (SYNTH_SLU_VALID, &world.slu_test),
        (SYNTH_SLU_TEST, &world.slu_test),
        (SYNTH_SLU_TEST_CORRUPTED, &world.slu_test_corrupted),
    ] {
        write_dataset_path(out_dir.join(file), split)?;
    }
    // Clean-vs-corrupted transcripts double as an aligned reference/ASR
    // pair, so the confusion-pair and retrieval stages run off this world.
    for (file, split) in [
        (SYNTH_ASR_REFS, &world.slu_test),
        (SYNTH_ASR_HYPS, &world.slu_test_corrupted),
    ] {
        let mut text = split
            .iter()
            .map(|e| e.text.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        text.push('\n');
        fs::write(out_dir.join(file), text)?;
    }

    println!(
        "synthesized world: {} pre-training utterances, {} labeled examples, {} homophone pairs",
        world.pretrain_texts.len(),
        world.slu_train.len(),
        world.twin_pairs.len()
    );
    Ok(())
}

/// Masking-rate summary of a generated shard.
#[derive(Debug, Serialize)]
pub struct PrepareReport {
    pub preset: String,
    pub passes: usize,
    pub utterances: usize,
    pub examples: usize,
    pub word_mask_rate: f64,
    pub phone_group_mask_rate: f64,
    pub mask_fraction: f64,
    pub random_fraction: f64,
    pub keep_fraction: f64,
    pub negative_fraction: f64,
    pub stats: MaskingStats,
}

/// Materializes the masked pre-training shard from the corpus.
pub fn cmd_prepare(run: &RunConfig) -> Result<()> {
    // Task validation comes first so an infeasible combination fails before
    // any file is touched.
    let masking = run.masking_config()?;
    if run.task.passes == 0 {
        bail!("task.passes must be positive");
    }
    let world = load_world(run)?;
    require_file("paths.corpus", &run.paths.corpus)?;
    let texts = read_nonempty_lines(&run.paths.corpus)?;
    if texts.is_empty() {
        bail!("corpus {} has no utterances", run.paths.corpus.display());
    }
    let paired: Vec<PairedUtterance> = texts
        .iter()
        .map(|t| build_paired(t, &world.vocab, &world.lexicon, &world.phone_vocab))
        .collect::<Result<_, _>>()
        .context("encoding corpus")?;
    let mv = MaskingVocab::new(&world.vocab, &world.phone_vocab)?;
    let (examples, stats) = generate_shard(
        &paired,
        &masking,
        &mv,
        run.model.max_seq_len,
        run.task.passes,
    )?;

    let out_dir = &run.paths.out_dir;
    write_effective_config(run, out_dir)?;
    let mut w = BufWriter::new(File::create(out_dir.join(SHARD_FILE))?);
    write_shard(&examples, &mut w)?;
    w.flush()?;

    let (mask_fraction, random_fraction, keep_fraction) = stats.action_fractions();
    let report = PrepareReport {
        preset: run.task.preset.clone(),
        passes: run.task.passes,
        utterances: texts.len(),
        examples: examples.len(),
        word_mask_rate: stats.word_mask_rate(),
        phone_group_mask_rate: stats.phone_group_mask_rate(),
        mask_fraction,
        random_fraction,
        keep_fraction,
        negative_fraction: stats.negative_fraction(),
        stats,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(out_dir.join(PREPARE_REPORT), json)?;

    println!(
        "prepared {} examples from {} utterances ({} passes)",
        report.examples, report.utterances, report.passes
    );
    println!(
        "word mask rate {:.3}, phone group mask rate {:.3}, negative fraction {:.3}",
        report.word_mask_rate, report.phone_group_mask_rate, report.negative_fraction
    );
    Ok(())
}

/// Pre-trains the encoder on the prepared shard.
pub fn cmd_pretrain(run: &RunConfig) -> Result<()> {
    let world = load_world(run)?;
    let shard_path = run.paths.out_dir.join(SHARD_FILE);
    require_file("prepared shard (run `prepare` first); it", &shard_path)?;
    let shard = read_shard(open_buffered(&shard_path)?)
        .with_context(|| format!("reading shard {}", shard_path.display()))?;

    let model_cfg = run
        .model
        .to_model_config(world.vocab.len(), world.phone_vocab.len());
    let train_cfg = run.pretrain.to_train_config(run.seed);
    let outcome = pretrain(&shard, &model_cfg, &train_cfg, None)?;

    let out_dir = &run.paths.out_dir;
    write_effective_config(run, out_dir)?;
    checkpoint::save_to_path(out_dir.join(PRETRAIN_CKPT), &outcome.model_cfg, &outcome.params)?;
    let mut w = BufWriter::new(File::create(out_dir.join(PRETRAIN_LOSS_LOG))?);
    write_loss_log(&mut w, &outcome.loss_log)?;
    w.flush()?;

    match (outcome.loss_log.first(), outcome.loss_log.last()) {
        (Some(first), Some(last)) => println!(
            "pretrained {} steps on {} examples; total loss {:.4} -> {:.4}",
            outcome.loss_log.len(),
            shard.len(),
            first.total,
            last.total
        ),
        _ => println!("pretrained 0 steps"),
    }
    Ok(())
}

/// Grid-search summary of a fine-tuning run; `eval` reads the winning
/// candidate back to score the checkpoint consistently.
#[derive(Debug, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub mode: FinetuneMode,
    pub phone_mode: PhoneMode,
    pub best: FinetuneCandidate,
    pub candidates: Vec<FinetuneCandidate>,
}

/// Fine-tunes a pre-trained checkpoint on the labeled splits.
pub fn cmd_finetune(run: &RunConfig) -> Result<()> {
    let world = load_world(run)?;
    require_file("paths.slu_train", &run.paths.slu_train)?;
    require_file("paths.slu_valid", &run.paths.slu_valid)?;
    let train_data = read_dataset(open_buffered(&run.paths.slu_train)?)
        .with_context(|| format!("reading {}", run.paths.slu_train.display()))?;
    let val_data = read_dataset(open_buffered(&run.paths.slu_valid)?)
        .with_context(|| format!("reading {}", run.paths.slu_valid.display()))?;

    let backbone_path = run
        .paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| run.paths.out_dir.join(PRETRAIN_CKPT));
    require_file("backbone checkpoint (run `pretrain` first); it", &backbone_path)?;
    let (backbone_cfg, backbone) = checkpoint::load_from_path(&backbone_path)
        .with_context(|| format!("loading checkpoint {}", backbone_path.display()))?;

    let outcome = finetune(
        &backbone_cfg,
        &backbone,
        &train_data,
        &val_data,
        &world.vocab,
        &world.lexicon,
        &world.phone_vocab,
        &run.finetune_opts,
        &run.finetune.to_train_config(run.seed),
    )?;

    let out_dir = &run.paths.out_dir;
    write_effective_config(run, out_dir)?;
    checkpoint::save_to_path(out_dir.join(FINETUNE_CKPT), &outcome.model_cfg, &outcome.params)?;
    outcome
        .labels
        .intents
        .write_to_path(out_dir.join(INTENT_LABELS))?;
    outcome.labels.tags.write_to_path(out_dir.join(TAG_LABELS))?;
    let mut w = BufWriter::new(File::create(out_dir.join(FINETUNE_LOSS_LOG))?);
    write_loss_log(&mut w, &outcome.loss_log)?;
    w.flush()?;

    let report = FinetuneReport {
        mode: run.finetune_opts.mode,
        phone_mode: run.finetune_opts.phone_mode,
        best: outcome.best,
        candidates: outcome.candidates.clone(),
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(out_dir.join(FINETUNE_REPORT), json)?;

    for c in &report.candidates {
        match c.beta {
            Some(b) => println!("candidate lr {} beta {}: val icacc {:.4}", c.lr, b, c.val_icacc),
            None => println!("candidate lr {}: val icacc {:.4}", c.lr, c.val_icacc),
        }
    }
    match report.best.beta {
        Some(b) => println!(
            "best: lr {} beta {} -> val icacc {:.4}",
            report.best.lr, b, report.best.val_icacc
        ),
        None => println!(
            "best: lr {} -> val icacc {:.4}",
            report.best.lr, report.best.val_icacc
        ),
    }
    Ok(())
}

/// Scores a test split: either the fine-tuned checkpoint's predictions, or
/// a hypothesis-frames file against the references.
pub fn cmd_eval(run: &RunConfig, test: Option<&Path>, hyps: Option<&Path>) -> Result<()> {
    let test_path = test.unwrap_or(&run.paths.slu_test);
    require_file("paths.slu_test", test_path)?;
    let golds = read_dataset(open_buffered(test_path)?)
        .with_context(|| format!("reading {}", test_path.display()))?;
    let gold_intents: Vec<String> = golds.iter().map(|e| e.intent.clone()).collect();
    let ref_frames: Vec<Frame> = golds
        .iter()
        .map(|e| Frame::new(e.intent.clone(), e.frame()))
        .collect();

    let (pred_intents, hyp_frames) = match hyps {
        Some(hyp_path) => {
            require_file("--hyps", hyp_path)?;
            let hyp_examples = read_dataset(open_buffered(hyp_path)?)
                .with_context(|| format!("reading {}", hyp_path.display()))?;
            if hyp_examples.len() != golds.len() {
                bail!(
                    "{} hypothesis frames for {} references",
                    hyp_examples.len(),
                    golds.len()
                );
            }
            let intents = hyp_examples.iter().map(|e| e.intent.clone()).collect();
            let frames = hyp_examples
                .iter()
                .map(|e| Frame::new(e.intent.clone(), e.frame()))
                .collect();
            (intents, frames)
        }
        None => predict_test_split(run, &golds)?,
    };

    let icacc = intent_accuracy(&pred_intents, &gold_intents)?;
    let (counts, _) = semer_corpus(&ref_frames, &hyp_frames)?;
    let report = MetricReport {
        icacc: Some(icacc),
        semer: Some(SemErReport::from_counts(counts)),
        mrr: None,
        confusion_pairs: Vec::new(),
    };

    let out_dir = &run.paths.out_dir;
    write_effective_config(run, out_dir)?;
    fs::write(out_dir.join(EVAL_REPORT_TEXT), report.to_pretty())?;
    let mut w = BufWriter::new(File::create(out_dir.join(EVAL_REPORT_JSONL))?);
    report.write_jsonl(&mut w)?;
    w.flush()?;

    print!("{}", report.to_pretty());
    Ok(())
}

/// Runs the fine-tuned checkpoint over the test split and returns predicted
/// intents and frames.
fn predict_test_split(
    run: &RunConfig,
    golds: &[crate::slu::SluExample],
) -> Result<(Vec<String>, Vec<Frame>)> {
    let out_dir = &run.paths.out_dir;
    let ckpt_path = out_dir.join(FINETUNE_CKPT);
    require_file("fine-tuned checkpoint (run `finetune` first); it", &ckpt_path)?;
    let (model_cfg, params) = checkpoint::load_from_path(&ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let labels = SluLabels {
        intents: LabelMap::read_from_path(out_dir.join(INTENT_LABELS))
            .context("reading intent labels (run `finetune` first)")?,
        tags: LabelMap::read_from_path(out_dir.join(TAG_LABELS))
            .context("reading tag labels (run `finetune` first)")?,
    };
    let report_path = out_dir.join(FINETUNE_REPORT);
    let ft_report: FinetuneReport = serde_json::from_str(
        &fs::read_to_string(&report_path)
            .with_context(|| format!("reading {} (run `finetune` first)", report_path.display()))?,
    )
    .context("parsing the fine-tuning report")?;
    let beta = ft_report.best.beta;
    let concat = ft_report.phone_mode == PhoneMode::Concat;
    let world = load_world(run)?;

    let mut intents = Vec::with_capacity(golds.len());
    let mut frames = Vec::with_capacity(golds.len());
    for ex in golds {
        let enc = encode_for_finetune(
            ex,
            &world.vocab,
            &world.lexicon,
            &world.phone_vocab,
            &labels,
            model_cfg.max_seq_len,
            concat,
        )?;
        let (intent_id, tag_ids) = predict(&params, &model_cfg, &enc, beta)?;
        let intent = labels
            .intents
            .name(intent_id)
            .ok_or_else(|| anyhow!("predicted intent id {intent_id} has no label"))?
            .to_string();
        let tags: Vec<String> = tag_ids
            .iter()
            .map(|t| {
                labels
                    .tags
                    .name(*t)
                    .map(str::to_string)
                    .ok_or_else(|| anyhow!("predicted tag id {t} has no label"))
            })
            .collect::<Result<_>>()?;
        frames.push(Frame::new(intent.clone(), decode_bio(&enc.words, &tags)));
        intents.push(intent);
    }
    Ok((intents, frames))
}

/// Retrieval report: reciprocal-rank retrieval of reference words from
/// hypothesis words over the trained input embeddings.
#[derive(Debug, Serialize, Deserialize)]
pub struct MrrReport {
    pub label: String,
    pub top_k: usize,
    pub num_pairs: usize,
    pub mrr: f64,
}

/// Extracts transcript confusion pairs and scores embedding retrieval.
pub fn cmd_mrr(run: &RunConfig) -> Result<()> {
    let world = load_world(run)?;
    require_file("paths.asr_refs", &run.paths.asr_refs)?;
    require_file("paths.asr_hyps", &run.paths.asr_hyps)?;
    let refs = read_nonempty_lines(&run.paths.asr_refs)?;
    let hyps = read_nonempty_lines(&run.paths.asr_hyps)?;
    let pairs = extract_confusion_pairs(&refs, &hyps, run.eval.top_k_pairs, &world.vocab)?;
    if pairs.is_empty() {
        bail!("no in-vocabulary confusion pairs between the transcripts");
    }

    let ckpt_path = run
        .paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| run.paths.out_dir.join(PRETRAIN_CKPT));
    require_file("checkpoint (run `pretrain` first); it", &ckpt_path)?;
    let (_, params) = checkpoint::load_from_path(&ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let value = mrr(&pairs, params.token_embedding.view(), &world.vocab)?;

    let report = MrrReport {
        label: run.eval.label.clone(),
        top_k: run.eval.top_k_pairs,
        num_pairs: pairs.len(),
        mrr: value,
    };
    let out_dir = &run.paths.out_dir;
    write_effective_config(run, out_dir)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(out_dir.join(MRR_REPORT), json)?;

    println!("{} MRR {:.4} over {} pairs", report.label, value, report.num_pairs);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn effective_config_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.paths.corpus = PathBuf::from("corpus.txt");
        cfg.task.wsa = Some(true);
        cfg.finetune_opts.phone_mode = PhoneMode::Additive;
        cfg.finetune_opts.eval_every = Some(25);
        cfg.pretrain.max_grad_norm = Some(5.0);
        let path = write_effective_config(&cfg, dir.path()).unwrap();
        let back = load_run_config(&path, &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_parse_into_typed_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 1\n").unwrap();
        let overrides = vec![
            "pretrain.max_steps=50".to_string(),
            "model.dropout=0.0".to_string(),
            "task.wsa=true".to_string(),
            "task.preset=mlm15".to_string(),
            "finetune_opts.beta_grid=[0.1, 0.5]".to_string(),
            "paths.corpus=data/corpus.txt".to_string(),
            "eval.label=\"joint model\"".to_string(),
        ];
        let cfg = load_run_config(&path, &overrides).unwrap();
        assert_eq!(cfg.seed, 1);
        assert_eq!(cfg.pretrain.max_steps, 50);
        assert_eq!(cfg.model.dropout, 0.0);
        assert_eq!(cfg.task.wsa, Some(true));
        assert_eq!(cfg.task.preset, "mlm15");
        assert_eq!(cfg.finetune_opts.beta_grid, vec![0.1, 0.5]);
        assert_eq!(cfg.paths.corpus, PathBuf::from("data/corpus.txt"));
        assert_eq!(cfg.eval.label, "joint model");
    }

    #[test]
    fn override_creates_missing_section_tables() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 3\n").unwrap();
        let cfg = load_run_config(&path, &["task.passes=4".to_string()]).unwrap();
        assert_eq!(cfg.task.passes, 4);
        // Untouched fields of the created section keep their defaults.
        assert_eq!(cfg.task.preset, TaskSection::default().preset);
    }

    #[test]
    fn malformed_overrides_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 3\n").unwrap();
        let missing_eq = load_run_config(&path, &["seed".to_string()]).unwrap_err();
        assert!(missing_eq.to_string().contains("key=value"));
        let empty_part = load_run_config(&path, &["task..x=1".to_string()]).unwrap_err();
        assert!(empty_part.to_string().contains("empty key component"));
        // A scalar in the key path cannot be descended into.
        let not_table = load_run_config(&path, &["seed.x=1".to_string()]).unwrap_err();
        assert!(format!("{not_table:#}").contains("not a table"));
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 3\nbogus_field = 1\n").unwrap();
        let err = load_run_config(&path, &[]).unwrap_err();
        assert!(format!("{err:#}").contains("bogus_field"));
    }

    #[test]
    fn unknown_preset_is_rejected_with_the_known_keys() {
        let mut cfg = RunConfig::default();
        cfg.task.preset = "nonsense".to_string();
        let err = cfg.masking_config().unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("nonsense"));
        assert!(msg.contains("mlm15"));
    }

    #[test]
    fn fully_masked_single_modality_with_alignment_fails_validation() {
        // Both sides of every example fully masked leaves no alignment
        // evidence, so forcing the alignment task on is rejected.
        let mut cfg = RunConfig::default();
        cfg.task.preset = TaskPreset::Cond100OneMod.key().to_string();
        cfg.task.wsa = Some(true);
        let err = cfg.masking_config().unwrap_err();
        assert!(format!("{err:#}").contains("infeasible"));
        // The same preset without the override is fine.
        cfg.task.wsa = None;
        assert!(cfg.masking_config().is_ok());
        // And the alignment-enabled preset can be toggled off.
        cfg.task.preset = TaskPreset::Cond30TwoModWsa.key().to_string();
        cfg.task.wsa = Some(false);
        assert!(!cfg.masking_config().unwrap().wsa_enabled);
    }

    #[test]
    fn run_seed_reaches_the_stage_configs() {
        let mut cfg = RunConfig::default();
        cfg.seed = 41;
        assert_eq!(cfg.masking_config().unwrap().seed, 41);
        assert_eq!(cfg.pretrain.to_train_config(cfg.seed).seed, 41);
        assert_eq!(cfg.finetune.to_train_config(cfg.seed).seed, 41);
        assert!(cfg.pretrain.to_train_config(cfg.seed).deterministic);
    }

    #[test]
    fn bare_strings_and_quoted_strings_both_work_as_override_values() {
        assert_eq!(
            parse_override_value("hello"),
            toml::Value::String("hello".to_string())
        );
        assert_eq!(
            parse_override_value("\"hello\""),
            toml::Value::String("hello".to_string())
        );
        assert_eq!(parse_override_value("5"), toml::Value::Integer(5));
        assert_eq!(parse_override_value("true"), toml::Value::Boolean(true));
        // A path with dots stays a single string.
        assert_eq!(
            parse_override_value("a/b.txt"),
            toml::Value::String("a/b.txt".to_string())
        );
    }
}
