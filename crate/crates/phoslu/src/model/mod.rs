//! Transformer encoder over the joint word/phone id space, with task heads.
//!
//! The model is a small pre-LN transformer that consumes the flat id
//! sequences produced by [`crate::textproc`]: word piece ids in the low range
//! `[0, |Vw|)` and phone ids in the high range `[|Vw|, |Vw|+|Vp|)`, so a
//! single embedding table covers both modalities.  On top of the shared
//! hidden states sit four heads:
//!
//! * a masked-LM head tied to the input embedding table (used for both word
//!   and phone prediction),
//! * a 2-way pair classifier on the `[CLS]` state (word/speech match),
//! * an intent classifier on the `[CLS]` state, and
//! * a per-token slot tagger over the word region.
//!
//! Everything is computed in `f64` with hand-written backward passes so that
//! gradients can be checked against finite differences at tight tolerances.
//! Checkpoints store tensors as little-endian `f32` (see [`checkpoint`]).

pub mod checkpoint;
pub mod encoder;
pub mod heads;
pub mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use encoder::{
    embed_backward, embed_input, embed_input_with_phones, encode, encode_backward, EncoderCache,
    EncoderOutput, PhoneAugmentation, LN_EPS,
};
pub use heads::{
    argmax, ic_backward, ic_forward, ic_logits, lm_backward, lm_logits, restrict_to_block,
    sf_backward, sf_logits, wsa_backward, wsa_logits, IcCache,
};
pub use params::{LayerNormParams, LayerParams, LinearParams, ModelParams};

/// Number of segment ids the model distinguishes (word side vs. phone side).
pub const NUM_SEGMENTS: usize = 2;

/// Standard deviation of the truncated-normal weight initialisation.
pub const INIT_STD: f64 = 0.02;

/// Errors raised by model construction, the forward/backward passes, and
/// checkpoint IO.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("input id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("position {pos} exceeds maximum sequence length {max}")]
    PosOutOfRange { pos: usize, max: usize },
    #[error("segment id {0} out of range (must be < {NUM_SEGMENTS})")]
    SegOutOfRange(u8),
    #[error("non-finite activations after layer {layer}")]
    NonFinite { layer: usize },
    #[error("phone-augmentation weight must be non-negative, got {0}")]
    BadBeta(f64),
    #[error("phone augmentation covers {aug} words but the input has {words}")]
    AugMismatch { aug: usize, words: usize },
    #[error("token index {idx} lies outside the word region {lo}..{hi}")]
    OutsideWordRegion { idx: usize, lo: usize, hi: usize },
    #[error("dropout is active in training mode but no rng was supplied")]
    MissingRng,
    #[error("attention mask has {mask} entries for {rows} input rows")]
    MaskLength { mask: usize, rows: usize },
    #[error("not a model checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("checkpoint tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint contains unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which rows of the LM softmax a masked position may range over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmSupport {
    /// Score every id in the joint vocabulary (default).
    #[default]
    JointFull,
    /// Restrict word predictions to word ids and phone predictions to phone
    /// ids, implemented by masking the opposite block of logits.
    PerModality,
}

/// Hyper-parameters that fix every tensor shape in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Word-piece vocabulary size; word ids occupy `[0, word_vocab_size)`.
    pub word_vocab_size: usize,
    /// Phone vocabulary size; phone ids occupy the range directly above the
    /// word ids.
    pub phone_vocab_size: usize,
    /// Transformer layers in the encoder stack (0 is allowed and makes the
    /// encoder the identity, which is useful for isolating the embeddings).
    pub num_layers: usize,
    /// Width of every hidden state; must be divisible by `num_heads`.
    pub hidden_dim: usize,
    /// Attention heads per layer.
    pub num_heads: usize,
    /// Inner width of the position-wise feed-forward blocks.
    pub ffn_dim: usize,
    /// Longest id sequence the position table supports.
    pub max_seq_len: usize,
    /// Dropout probability applied to sub-layer outputs in training mode.
    pub dropout: f64,
    /// Output classes of the intent head.
    pub num_intents: usize,
    /// Output classes of the slot-tagging head.
    pub num_slot_tags: usize,
    /// LM softmax support (full joint vocabulary or per-modality blocks).
    #[serde(default)]
    pub lm_support: LmSupport,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, 64-dim hidden states, 4 heads.  Small
    /// enough that full pre-training runs finish in seconds on a laptop.
    pub fn desk(word_vocab_size: usize, phone_vocab_size: usize) -> Self {
        ModelConfig {
            word_vocab_size,
            phone_vocab_size,
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            max_seq_len: 128,
            dropout: 0.1,
            num_intents: 2,
            num_slot_tags: 1,
            lm_support: LmSupport::JointFull,
        }
    }

    /// Total size of the joint embedding table.
    pub fn vocab_size(&self) -> usize {
        self.word_vocab_size + self.phone_vocab_size
    }

    /// Per-head width of the attention projections.
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Checks the internal consistency of the configuration.
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::BadConfig(msg));
        if self.word_vocab_size == 0 || self.phone_vocab_size == 0 {
            return fail(format!(
                "vocabulary sizes must be positive (word {}, phone {})",
                self.word_vocab_size, self.phone_vocab_size
            ));
        }
        if self.hidden_dim == 0 {
            return fail("hidden_dim must be positive".into());
        }
        if self.num_heads == 0 {
            return fail("num_heads must be positive".into());
        }
        if self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be positive".into());
        }
        if self.max_seq_len < 3 {
            return fail(format!(
                "max_seq_len {} cannot hold [CLS] plus a word and a separator",
                self.max_seq_len
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.num_intents == 0 {
            return fail("num_intents must be positive".into());
        }
        if self.num_slot_tags == 0 {
            return fail("num_slot_tags must be positive".into());
        }
        Ok(())
    }
}
