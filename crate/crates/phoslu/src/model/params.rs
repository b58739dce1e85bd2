//! Parameter tensors, initialisation, and the flat named-tensor view.
//!
//! Every learnable tensor lives in [`ModelParams`].  The struct offers a
//! stable, ordered view of `(name, tensor)` pairs via [`ModelParams::tensors`]
//! and [`ModelParams::tensors_mut`]; the optimizer, the finite-difference
//! gradient checker, and the checkpoint reader/writer all walk that one view,
//! so tensor names are the single point of truth for "what is learnable".

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, INIT_STD, NUM_SEGMENTS};

/// Gain/bias pair of a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNormParams {
    /// Identity normalisation parameters (gain 1, bias 0).
    pub fn identity(dim: usize) -> Self {
        LayerNormParams {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNormParams {
            gain: Array1::zeros(dim),
            bias: Array1::zeros(dim),
        }
    }
}

/// Dense affine map stored as `weight: [in, out]` plus `bias: [out]`, so the
/// forward pass is `y = x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearParams {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        LinearParams {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearParams {
            weight: trunc_normal2((d_in, d_out), rng),
            bias: Array1::zeros(d_out),
        }
    }
}

/// Parameters of one pre-LN transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1: LayerNormParams,
    pub attn_q: LinearParams,
    pub attn_k: LinearParams,
    pub attn_v: LinearParams,
    pub attn_out: LinearParams,
    pub ln2: LayerNormParams,
    pub ffn_inner: LinearParams,
    pub ffn_outer: LinearParams,
}

impl LayerParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        LayerParams {
            ln1: LayerNormParams::zeros(d),
            attn_q: LinearParams::zeros(d, d),
            attn_k: LinearParams::zeros(d, d),
            attn_v: LinearParams::zeros(d, d),
            attn_out: LinearParams::zeros(d, d),
            ln2: LayerNormParams::zeros(d),
            ffn_inner: LinearParams::zeros(d, cfg.ffn_dim),
            ffn_outer: LinearParams::zeros(cfg.ffn_dim, d),
        }
    }

    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden_dim;
        LayerParams {
            ln1: LayerNormParams::identity(d),
            attn_q: LinearParams::init(d, d, rng),
            attn_k: LinearParams::init(d, d, rng),
            attn_v: LinearParams::init(d, d, rng),
            attn_out: LinearParams::init(d, d, rng),
            ln2: LayerNormParams::identity(d),
            ffn_inner: LinearParams::init(d, cfg.ffn_dim, rng),
            ffn_outer: LinearParams::init(cfg.ffn_dim, d, rng),
        }
    }
}

/// All learnable tensors of the model.
///
/// The LM head is tied to `token_embedding` (logits are `h · Eᵀ + lm_bias`),
/// so it owns only a bias.  The intent head applies a `tanh`-activated pooling
/// projection before its output layer; the pair head and the slot tagger are
/// plain affine maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Joint word+phone embedding table, `[vocab, hidden]`.
    pub token_embedding: Array2<f64>,
    /// Learned position table, `[max_seq_len, hidden]`.
    pub position_embedding: Array2<f64>,
    /// Segment table, `[NUM_SEGMENTS, hidden]`.
    pub segment_embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
    /// Normalisation applied after the last layer (unused when
    /// `num_layers == 0`, where the encoder is the identity).
    pub final_ln: LayerNormParams,
    /// Output bias of the tied LM head, `[vocab]`.
    pub lm_bias: Array1<f64>,
    /// 2-way word/speech pair classifier on the `[CLS]` state.
    pub wsa: LinearParams,
    /// Pooling projection of the intent head (`tanh(h · W + b)`).
    pub ic_proj: LinearParams,
    /// Output layer of the intent head.
    pub ic_out: LinearParams,
    /// Slot tagger applied to each word-region token.
    pub sf: LinearParams,
}

fn trunc_normal2(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_fn(shape, |_| loop {
        let x = normal.sample(rng);
        if x.abs() <= 2.0 * INIT_STD {
            break x;
        }
    })
}

impl ModelParams {
    /// Fresh parameters: weights and embeddings drawn from a normal with
    /// standard deviation [`INIT_STD`] truncated at two standard deviations,
    /// all biases zero, layer-norm gains one.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden_dim;
        ModelParams {
            token_embedding: trunc_normal2((cfg.vocab_size(), d), rng),
            position_embedding: trunc_normal2((cfg.max_seq_len, d), rng),
            segment_embedding: trunc_normal2((NUM_SEGMENTS, d), rng),
            layers: (0..cfg.num_layers).map(|_| LayerParams::init(cfg, rng)).collect(),
            final_ln: LayerNormParams::identity(d),
            lm_bias: Array1::zeros(cfg.vocab_size()),
            wsa: LinearParams::init(d, 2, rng),
            ic_proj: LinearParams::init(d, d, rng),
            ic_out: LinearParams::init(d, cfg.num_intents, rng),
            sf: LinearParams::init(d, cfg.num_slot_tags, rng),
        }
    }

    /// All-zero parameters with the shapes implied by `cfg`; used as the
    /// gradient accumulator and as the target of checkpoint loading.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        ModelParams {
            token_embedding: Array2::zeros((cfg.vocab_size(), d)),
            position_embedding: Array2::zeros((cfg.max_seq_len, d)),
            segment_embedding: Array2::zeros((NUM_SEGMENTS, d)),
            layers: (0..cfg.num_layers).map(|_| LayerParams::zeros(cfg)).collect(),
            final_ln: LayerNormParams::zeros(d),
            lm_bias: Array1::zeros(cfg.vocab_size()),
            wsa: LinearParams::zeros(d, 2),
            ic_proj: LinearParams::zeros(d, d),
            ic_out: LinearParams::zeros(d, cfg.num_intents),
            sf: LinearParams::zeros(d, cfg.num_slot_tags),
        }
    }

    /// Zero tensors with the same shapes as `self`.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, mut t) in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    /// Copies the encoder backbone (embeddings, layers, final norm, LM bias)
    /// and draws fresh intent/slot heads sized for a downstream label set.
    /// The word/speech pair head is carried over unchanged; it simply goes
    /// unused downstream.
    pub fn with_new_heads(
        &self,
        cfg: &ModelConfig,
        num_intents: usize,
        num_slot_tags: usize,
        rng: &mut ChaCha8Rng,
    ) -> (ModelConfig, ModelParams) {
        let new_cfg = ModelConfig {
            num_intents,
            num_slot_tags,
            ..cfg.clone()
        };
        let d = cfg.hidden_dim;
        let params = ModelParams {
            ic_proj: LinearParams::init(d, d, rng),
            ic_out: LinearParams::init(d, num_intents, rng),
            sf: LinearParams::init(d, num_slot_tags, rng),
            ..self.clone()
        };
        (new_cfg, params)
    }

    /// Ordered `(name, tensor)` view over every learnable tensor.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> = vec![
            ("embedding.token".into(), self.token_embedding.view().into_dyn()),
            ("embedding.position".into(), self.position_embedding.view().into_dyn()),
            ("embedding.segment".into(), self.segment_embedding.view().into_dyn()),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            let named = |part: &str| format!("layer.{i}.{part}");
            out.push((named("ln1.gain"), layer.ln1.gain.view().into_dyn()));
            out.push((named("ln1.bias"), layer.ln1.bias.view().into_dyn()));
            out.push((named("attn.q.weight"), layer.attn_q.weight.view().into_dyn()));
            out.push((named("attn.q.bias"), layer.attn_q.bias.view().into_dyn()));
            out.push((named("attn.k.weight"), layer.attn_k.weight.view().into_dyn()));
            out.push((named("attn.k.bias"), layer.attn_k.bias.view().into_dyn()));
            out.push((named("attn.v.weight"), layer.attn_v.weight.view().into_dyn()));
            out.push((named("attn.v.bias"), layer.attn_v.bias.view().into_dyn()));
            out.push((named("attn.out.weight"), layer.attn_out.weight.view().into_dyn()));
            out.push((named("attn.out.bias"), layer.attn_out.bias.view().into_dyn()));
            out.push((named("ln2.gain"), layer.ln2.gain.view().into_dyn()));
            out.push((named("ln2.bias"), layer.ln2.bias.view().into_dyn()));
            out.push((named("ffn.inner.weight"), layer.ffn_inner.weight.view().into_dyn()));
            out.push((named("ffn.inner.bias"), layer.ffn_inner.bias.view().into_dyn()));
            out.push((named("ffn.outer.weight"), layer.ffn_outer.weight.view().into_dyn()));
            out.push((named("ffn.outer.bias"), layer.ffn_outer.bias.view().into_dyn()));
        }
        out.push(("final_ln.gain".into(), self.final_ln.gain.view().into_dyn()));
        out.push(("final_ln.bias".into(), self.final_ln.bias.view().into_dyn()));
        out.push(("lm.bias".into(), self.lm_bias.view().into_dyn()));
        out.push(("wsa.weight".into(), self.wsa.weight.view().into_dyn()));
        out.push(("wsa.bias".into(), self.wsa.bias.view().into_dyn()));
        out.push(("ic.proj.weight".into(), self.ic_proj.weight.view().into_dyn()));
        out.push(("ic.proj.bias".into(), self.ic_proj.bias.view().into_dyn()));
        out.push(("ic.out.weight".into(), self.ic_out.weight.view().into_dyn()));
        out.push(("ic.out.bias".into(), self.ic_out.bias.view().into_dyn()));
        out.push(("sf.weight".into(), self.sf.weight.view().into_dyn()));
        out.push(("sf.bias".into(), self.sf.bias.view().into_dyn()));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], in the same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, f64>)> = vec![
            ("embedding.token".into(), self.token_embedding.view_mut().into_dyn()),
            ("embedding.position".into(), self.position_embedding.view_mut().into_dyn()),
            ("embedding.segment".into(), self.segment_embedding.view_mut().into_dyn()),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let named = |part: &str| format!("layer.{i}.{part}");
            out.push((named("ln1.gain"), layer.ln1.gain.view_mut().into_dyn()));
            out.push((named("ln1.bias"), layer.ln1.bias.view_mut().into_dyn()));
            out.push((named("attn.q.weight"), layer.attn_q.weight.view_mut().into_dyn()));
            out.push((named("attn.q.bias"), layer.attn_q.bias.view_mut().into_dyn()));
            out.push((named("attn.k.weight"), layer.attn_k.weight.view_mut().into_dyn()));
            out.push((named("attn.k.bias"), layer.attn_k.bias.view_mut().into_dyn()));
            out.push((named("attn.v.weight"), layer.attn_v.weight.view_mut().into_dyn()));
            out.push((named("attn.v.bias"), layer.attn_v.bias.view_mut().into_dyn()));
            out.push((named("attn.out.weight"), layer.attn_out.weight.view_mut().into_dyn()));
            out.push((named("attn.out.bias"), layer.attn_out.bias.view_mut().into_dyn()));
            out.push((named("ln2.gain"), layer.ln2.gain.view_mut().into_dyn()));
            out.push((named("ln2.bias"), layer.ln2.bias.view_mut().into_dyn()));
            out.push((named("ffn.inner.weight"), layer.ffn_inner.weight.view_mut().into_dyn()));
            out.push((named("ffn.inner.bias"), layer.ffn_inner.bias.view_mut().into_dyn()));
            out.push((named("ffn.outer.weight"), layer.ffn_outer.weight.view_mut().into_dyn()));
            out.push((named("ffn.outer.bias"), layer.ffn_outer.bias.view_mut().into_dyn()));
        }
        out.push(("final_ln.gain".into(), self.final_ln.gain.view_mut().into_dyn()));
        out.push(("final_ln.bias".into(), self.final_ln.bias.view_mut().into_dyn()));
        out.push(("lm.bias".into(), self.lm_bias.view_mut().into_dyn()));
        out.push(("wsa.weight".into(), self.wsa.weight.view_mut().into_dyn()));
        out.push(("wsa.bias".into(), self.wsa.bias.view_mut().into_dyn()));
        out.push(("ic.proj.weight".into(), self.ic_proj.weight.view_mut().into_dyn()));
        out.push(("ic.proj.bias".into(), self.ic_proj.bias.view_mut().into_dyn()));
        out.push(("ic.out.weight".into(), self.ic_out.weight.view_mut().into_dyn()));
        out.push(("ic.out.bias".into(), self.ic_out.bias.view_mut().into_dyn()));
        out.push(("sf.weight".into(), self.sf.weight.view_mut().into_dyn()));
        out.push(("sf.bias".into(), self.sf.bias.view_mut().into_dyn()));
        out
    }

    /// Name of the first tensor containing a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(name, _)| name)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}
