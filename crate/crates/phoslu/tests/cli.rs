//! End-to-end tests of the `phoslu` binary: every stage runs as a real
//! subprocess against one shared configuration file, and the exit-code /
//! diagnostic contract is checked on the failure paths.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use phoslu::cli;
use phoslu::lexicon::PhoneVocab;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_phoslu"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawning the binary");
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawning the binary");
    assert!(!out.status.success(), "command {args:?} unexpectedly succeeded");
    out
}

/// A run configuration whose data paths all point at the synth outputs in
/// `out`, sized so the whole pipeline finishes in seconds.
fn write_pipeline_config(dir: &Path, out: &Path) -> PathBuf {
    let out = out.display();
    let text = format!(
        r#"seed = 5

[paths]
out_dir = "{out}"
lexicon = "{out}/{dict}"
vocab = "{out}/{vocab}"
phone_vocab = "{out}/{phones}"
corpus = "{out}/{corpus}"
slu_train = "{out}/{train}"
slu_valid = "{out}/{valid}"
slu_test = "{out}/{test}"
asr_refs = "{out}/{refs}"
asr_hyps = "{out}/{hyps}"

[task]
preset = "condmlm100+condmsm100(onemod)"
passes = 2

[model]
num_layers = 1
hidden_dim = 16
num_heads = 2
ffn_dim = 32
max_seq_len = 64
dropout = 0.0

[pretrain]
batch_size = 4
max_steps = 30
learning_rates = [3e-3]

[finetune]
batch_size = 4
max_steps = 40
learning_rates = [1e-2]

[finetune_opts]
mode = "joint"
phone_mode = "none"

[synth]
utterances = 48
"#,
        dict = cli::SYNTH_DICT,
        vocab = cli::SYNTH_VOCAB,
        phones = cli::SYNTH_PHONE_VOCAB,
        corpus = cli::SYNTH_CORPUS,
        train = cli::SYNTH_SLU_TRAIN,
        valid = cli::SYNTH_SLU_VALID,
        test = cli::SYNTH_SLU_TEST,
        refs = cli::SYNTH_ASR_REFS,
        hyps = cli::SYNTH_ASR_HYPS,
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run_pipeline(config: &Path) {
    let cfg = config.to_str().unwrap();
    run_ok(&["synth", "--config", cfg]);
    run_ok(&["prepare", "--config", cfg]);
    run_ok(&["pretrain", "--config", cfg]);
    run_ok(&["finetune", "--config", cfg]);
    run_ok(&["eval", "--config", cfg]);
    run_ok(&["mrr", "--config", cfg]);
}

#[test]
fn pipeline_stages_share_one_config_and_rerun_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = write_pipeline_config(dir.path(), &out);

    run_pipeline(&config);
    let artifacts = [
        cli::SHARD_FILE,
        cli::PREPARE_REPORT,
        cli::PRETRAIN_CKPT,
        cli::PRETRAIN_LOSS_LOG,
        cli::FINETUNE_CKPT,
        cli::FINETUNE_LOSS_LOG,
        cli::FINETUNE_REPORT,
        cli::EVAL_REPORT_TEXT,
        cli::EVAL_REPORT_JSONL,
        cli::MRR_REPORT,
    ];
    let first: Vec<Vec<u8>> = artifacts
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap_or_else(|_| panic!("{f} missing")))
        .collect();

    run_pipeline(&config);
    for (f, before) in artifacts.iter().zip(&first) {
        let after = fs::read(out.join(f)).unwrap();
        assert_eq!(&after, before, "{f} changed across identical reruns");
    }

    // The echoed configuration reloads to the very configuration used.
    let effective = out.join(cli::EFFECTIVE_CONFIG);
    let reloaded = cli::load_run_config(&effective, &[]).unwrap();
    let original = cli::load_run_config(&config, &[]).unwrap();
    assert_eq!(reloaded, original);
}

#[test]
fn eval_scores_a_perfect_hypothesis_file_at_full_marks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = write_pipeline_config(dir.path(), &out);
    let cfg = config.to_str().unwrap();
    run_ok(&["synth", "--config", cfg]);

    // The references themselves as hypotheses: everything must score clean.
    let test_file = out.join(cli::SYNTH_SLU_TEST);
    let stdout = run_ok(&["eval", "--config", cfg, "--hyps", test_file.to_str().unwrap()]).stdout;
    let text = String::from_utf8(stdout).unwrap();
    assert!(text.contains("icacc 1.0000"), "stdout: {text}");
    assert!(text.contains("value=0.0000"), "stdout: {text}");
    assert!(out.join(cli::EVAL_REPORT_JSONL).is_file());

    // A wrong-intent hypothesis file scores below full marks.
    let mut examples = phoslu::slu::read_dataset_path(&test_file).unwrap();
    examples[0].intent = "bogus".to_string();
    let wrong = dir.path().join("wrong.jsonl");
    phoslu::slu::write_dataset_path(&wrong, &examples).unwrap();
    let stdout = run_ok(&["eval", "--config", cfg, "--hyps", wrong.to_str().unwrap()]).stdout;
    let text = String::from_utf8(stdout).unwrap();
    assert!(text.contains("icacc 0.9375"), "stdout: {text}");
}

#[test]
fn infeasible_task_combination_fails_before_writing_anything() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = write_pipeline_config(dir.path(), &out);
    let cfg = config.to_str().unwrap();
    run_ok(&["synth", "--config", cfg]);

    // Forcing alignment on top of the fully-masked one-modality preset must
    // fail validation before the fresh output directory is even created.
    let fresh = dir.path().join("fresh");
    let set = format!("paths.out_dir={}", fresh.display());
    let out_err = run_err(&[
        "prepare", "--config", cfg, "--set", "task.wsa=true", "--set", &set,
    ]);
    let stderr = String::from_utf8(out_err.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "diagnostic must be one line: {stderr}");
    assert!(stderr.starts_with("error:"), "stderr: {stderr}");
    assert!(stderr.contains("infeasible"), "stderr: {stderr}");
    assert!(!fresh.exists(), "no output may be written on validation failure");
}

#[test]
fn missing_inputs_fail_with_a_one_line_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = write_pipeline_config(dir.path(), &out);
    let cfg = config.to_str().unwrap();

    // The corpus (and everything else) does not exist yet: prepare refuses.
    let out_err = run_err(&["prepare", "--config", cfg]);
    let stderr = String::from_utf8(out_err.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "stderr: {stderr}");
    assert!(stderr.starts_with("error:"), "stderr: {stderr}");

    // A config file that does not exist is equally fatal.
    let out_err = run_err(&["pretrain", "--config", "/definitely/not/here.toml"]);
    assert!(String::from_utf8(out_err.stderr).unwrap().starts_with("error:"));
}

#[test]
fn build_lexicon_compiles_the_phone_vocabulary_with_stats() {
    let dir = tempfile::tempdir().unwrap();
    let dict = dir.path().join("dict.txt");
    fs::write(&dict, "hello HH AH L OW\nworld W ER L D\n").unwrap();
    let out = dir.path().join("phones.txt");

    let stdout = run_ok(&[
        "build-lexicon",
        "--dict",
        dict.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
    .stdout;
    let text = String::from_utf8(stdout).unwrap();
    assert!(text.contains("dictionary entries: 2"), "stdout: {text}");
    assert!(text.contains("unk probe"), "stdout: {text}");

    let vocab = PhoneVocab::read(std::io::BufReader::new(fs::File::open(&out).unwrap())).unwrap();
    assert!(vocab.id("HH").is_ok());
    assert!(vocab.id("ER").is_ok());
}

#[test]
fn set_overrides_reach_the_generated_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = write_pipeline_config(dir.path(), &out);
    let cfg = config.to_str().unwrap();

    run_ok(&["synth", "--config", cfg, "--set", "synth.utterances=5"]);
    let corpus = fs::read_to_string(out.join(cli::SYNTH_CORPUS)).unwrap();
    assert_eq!(corpus.lines().count(), 5);
    let effective = fs::read_to_string(out.join(cli::EFFECTIVE_CONFIG)).unwrap();
    assert!(effective.contains("utterances = 5"), "echo: {effective}");
}
