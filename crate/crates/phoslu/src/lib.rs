//! Joint word/phone representation learning for spoken language understanding.
//!
//! The crate trains a small transformer encoder on paired inputs
//! `[CLS] w_1..w_n [SEP] p_1..p_l [SEP]`, where the first segment is the
//! word-piece tokenization of an utterance and the second is its phone
//! sequence from a pronunciation lexicon. Pre-training masks whole words on
//! either side (masked word prediction conditioned on phones, masked phone
//! prediction conditioned on words) and optionally classifies whether the two
//! segments belong to the same utterance. Fine-tuning drops the phone segment
//! and trains intent classification and slot filling heads; pronunciation
//! information can be re-injected by adding a scaled sum of phone embeddings
//! to each word's first sub-token embedding.
//!
//! Module map:
//! - [`lexicon`]: pronunciation dictionary parsing and word → phone lookup
//! - [`textproc`]: word-piece vocabulary, tokenization, paired encoding
//! - [`pretrain`]: whole-word masking, task presets, alignment pairs, shards
//! - [`model`]: embeddings, encoder, task heads, checkpoints (manual backprop)
//! - [`train`]: losses, Adam with warmup/decay, gradient checking, loops
//! - [`eval`]: intent accuracy, semantic error rate, confusion pairs, MRR
//! - [`slu`]: line-delimited utterance/intent/slot datasets and label maps
//! - [`synth`]: deterministic synthetic corpora with planted homophones
//! - [`cli`]: config files, task presets, and the `phoslu` subcommands

pub mod cli;
pub mod eval;
pub mod lexicon;
pub mod model;
pub mod pretrain;
pub mod rng;
pub mod slu;
pub mod synth;
pub mod textproc;
pub mod train;
