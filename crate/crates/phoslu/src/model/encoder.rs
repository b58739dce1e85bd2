//! Input embedding, the pre-LN transformer stack, and their backward passes.
//!
//! The forward pass records every intermediate needed for backpropagation in
//! an [`EncoderCache`]; [`encode_backward`] consumes the cache and accumulates
//! parameter gradients into a second [`ModelParams`] used as a gradient
//! buffer.  All math is `f64` and single-threaded with a fixed evaluation
//! order, so same-seed runs are bit-identical.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::textproc::EncodedExample;

use super::params::{LayerNormParams, LinearParams};
use super::{ModelConfig, ModelError, ModelParams, NUM_SEGMENTS};

/// Variance floor of the layer-norm denominator.
pub const LN_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Hidden states produced by the encoder; position 0 is the `[CLS]` state.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[T, hidden_dim]` output states.
    pub hidden: Array2<f64>,
}

impl EncoderOutput {
    /// The `[CLS]` state (row 0), used by the pair and intent heads.
    pub fn h_cls(&self) -> ArrayView1<'_, f64> {
        self.hidden.row(0)
    }
}

/// Per-word phone ids (already mapped into the joint id space) used to mix
/// phonetic information into the word embeddings at the first sub-token of
/// each word, scaled by `beta`.
#[derive(Debug, Clone)]
pub struct PhoneAugmentation {
    /// One phone id list per word of the utterance, parallel to the word
    /// sub-token spans of the example being embedded.
    pub per_word: Vec<Vec<u32>>,
    /// Non-negative mixing weight; 0 disables the augmentation exactly.
    pub beta: f64,
}

impl PhoneAugmentation {
    /// Builds the per-word phone id lists by dictionary lookup, mapping phone
    /// symbols into the joint id space at `word_id_offset`.  Out-of-dictionary
    /// words fall back to the unknown-phone symbol.
    pub fn from_lexicon(
        words: &[String],
        lexicon: &crate::lexicon::Lexicon,
        phone_vocab: &crate::lexicon::PhoneVocab,
        word_id_offset: usize,
        beta: f64,
    ) -> Self {
        let unk = phone_vocab.unk_id();
        let per_word = words
            .iter()
            .map(|w| {
                lexicon
                    .lookup(w)
                    .iter()
                    .map(|p| word_id_offset as u32 + phone_vocab.id(p).unwrap_or(unk))
                    .collect()
            })
            .collect();
        PhoneAugmentation { per_word, beta }
    }
}

fn check_ids(cfg: &ModelConfig, ex: &EncodedExample) -> Result<(), ModelError> {
    let vocab = cfg.vocab_size();
    for &id in &ex.input_ids {
        if id as usize >= vocab {
            return Err(ModelError::IdOutOfRange { id, vocab });
        }
    }
    for &pos in &ex.position_ids {
        if pos as usize >= cfg.max_seq_len {
            return Err(ModelError::PosOutOfRange {
                pos: pos as usize,
                max: cfg.max_seq_len,
            });
        }
    }
    for &seg in &ex.segment_ids {
        if seg as usize >= NUM_SEGMENTS {
            return Err(ModelError::SegOutOfRange(seg));
        }
    }
    Ok(())
}

/// Per-position sum of token, position, and segment embeddings.
pub fn embed_input(
    params: &ModelParams,
    cfg: &ModelConfig,
    ex: &EncodedExample,
) -> Result<Array2<f64>, ModelError> {
    check_ids(cfg, ex)?;
    let t_len = ex.input_ids.len();
    let mut out = Array2::zeros((t_len, cfg.hidden_dim));
    for t in 0..t_len {
        let tok = params.token_embedding.row(ex.input_ids[t] as usize);
        let pos = params.position_embedding.row(ex.position_ids[t] as usize);
        let seg = params.segment_embedding.row(ex.segment_ids[t] as usize);
        let mut row = out.row_mut(t);
        row.assign(&tok);
        row += &pos;
        row += &seg;
    }
    Ok(out)
}

/// [`embed_input`] plus, at the first sub-token of every word, `beta` times
/// the sum of the word's phone embeddings.  Continuation pieces and special
/// tokens receive only the standard embedding.  With `beta == 0` the result
/// is bit-identical to [`embed_input`].
pub fn embed_input_with_phones(
    params: &ModelParams,
    cfg: &ModelConfig,
    ex: &EncodedExample,
    aug: &PhoneAugmentation,
) -> Result<Array2<f64>, ModelError> {
    if aug.beta < 0.0 || !aug.beta.is_finite() {
        return Err(ModelError::BadBeta(aug.beta));
    }
    if aug.beta == 0.0 {
        return embed_input(params, cfg, ex);
    }
    if aug.per_word.len() != ex.word_sub_spans.len() {
        return Err(ModelError::AugMismatch {
            aug: aug.per_word.len(),
            words: ex.word_sub_spans.len(),
        });
    }
    let mut out = embed_input(params, cfg, ex)?;
    let vocab = cfg.vocab_size();
    for (span, phones) in ex.word_sub_spans.iter().zip(&aug.per_word) {
        let first = span.start;
        for &p in phones {
            if p as usize >= vocab {
                return Err(ModelError::IdOutOfRange { id: p, vocab });
            }
            let phone_row = params.token_embedding.row(p as usize).to_owned();
            let mut row = out.row_mut(first);
            row.scaled_add(aug.beta, &phone_row);
        }
    }
    Ok(out)
}

/// Routes `d_emb` (gradient w.r.t. the embedding sum) back into the token,
/// position, and segment tables, including the phone rows touched by the
/// augmentation when one was applied in the forward pass.
pub fn embed_backward(
    cfg: &ModelConfig,
    ex: &EncodedExample,
    aug: Option<&PhoneAugmentation>,
    d_emb: &Array2<f64>,
    grads: &mut ModelParams,
) {
    let _ = cfg;
    for t in 0..ex.input_ids.len() {
        let d_row = d_emb.row(t);
        grads
            .token_embedding
            .row_mut(ex.input_ids[t] as usize)
            .scaled_add(1.0, &d_row);
        grads
            .position_embedding
            .row_mut(ex.position_ids[t] as usize)
            .scaled_add(1.0, &d_row);
        grads
            .segment_embedding
            .row_mut(ex.segment_ids[t] as usize)
            .scaled_add(1.0, &d_row);
    }
    if let Some(aug) = aug {
        if aug.beta != 0.0 {
            for (span, phones) in ex.word_sub_spans.iter().zip(&aug.per_word) {
                let d_row = d_emb.row(span.start).to_owned();
                for &p in phones {
                    grads
                        .token_embedding
                        .row_mut(p as usize)
                        .scaled_add(aug.beta, &d_row);
                }
            }
        }
    }
}

/// Row statistics recorded by a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn ln_forward(x: &Array2<f64>, ln: &LayerNormParams) -> (Array2<f64>, LnCache) {
    let (rows, dim) = x.dim();
    let mut xhat = Array2::zeros((rows, dim));
    let mut inv_std = Array1::zeros(rows);
    let mut y = Array2::zeros((rows, dim));
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = inv;
        for j in 0..dim {
            let h = (row[j] - mean) * inv;
            xhat[[i, j]] = h;
            y[[i, j]] = h * ln.gain[j] + ln.bias[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn ln_backward(
    d_y: &Array2<f64>,
    cache: &LnCache,
    ln: &LayerNormParams,
    d_ln: &mut LayerNormParams,
) -> Array2<f64> {
    let (rows, dim) = d_y.dim();
    let mut d_x = Array2::zeros((rows, dim));
    for i in 0..rows {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..dim {
            let q = d_y[[i, j]] * ln.gain[j];
            m1 += q;
            m2 += q * cache.xhat[[i, j]];
            d_ln.gain[j] += d_y[[i, j]] * cache.xhat[[i, j]];
            d_ln.bias[j] += d_y[[i, j]];
        }
        m1 /= dim as f64;
        m2 /= dim as f64;
        let inv = cache.inv_std[i];
        for j in 0..dim {
            let q = d_y[[i, j]] * ln.gain[j];
            d_x[[i, j]] = inv * (q - m1 - cache.xhat[[i, j]] * m2);
        }
    }
    d_x
}

fn linear_forward(x: &Array2<f64>, lin: &LinearParams) -> Array2<f64> {
    x.dot(&lin.weight) + &lin.bias
}

fn linear_backward(
    x: &Array2<f64>,
    lin: &LinearParams,
    d_y: &Array2<f64>,
    d_lin: &mut LinearParams,
) -> Array2<f64> {
    d_lin.weight.scaled_add(1.0, &x.t().dot(d_y));
    d_lin.bias.scaled_add(1.0, &d_y.sum_axis(Axis(0)));
    d_y.dot(&lin.weight.t())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep_scale = 1.0 / (1.0 - p);
    Array2::from_shape_fn(shape, |_| {
        if rng.gen::<f64>() < p {
            0.0
        } else {
            keep_scale
        }
    })
}

/// Intermediates of one transformer layer, kept for the backward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    ln2: LnCache,
    bn: Array2<f64>,
    h1: Array2<f64>,
    gv: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
}

/// Everything [`encode`] computed that [`encode_backward`] needs.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    layers: Vec<LayerCache>,
    final_ln: Option<LnCache>,
}

fn layer_forward(
    lp: &super::params::LayerParams,
    cfg: &ModelConfig,
    x: Array2<f64>,
    mask: &[bool],
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> (Array2<f64>, LayerCache) {
    let t_len = x.nrows();
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let (a, ln1) = ln_forward(&x, &lp.ln1);
    let q = linear_forward(&a, &lp.attn_q);
    let k = linear_forward(&a, &lp.attn_k);
    let v = linear_forward(&a, &lp.attn_v);

    let mut probs = Vec::with_capacity(heads);
    let mut ctx = Array2::zeros((t_len, cfg.hidden_dim));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t()) * scale;
        for j in 0..t_len {
            if !mask[j] {
                scores.column_mut(j).fill(f64::NEG_INFINITY);
            }
        }
        let mut p = Array2::zeros((t_len, t_len));
        for i in 0..t_len {
            let row = scores.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..t_len {
                let e = (row[j] - max).exp();
                p[[i, j]] = e;
                sum += e;
            }
            p.row_mut(i).mapv_inplace(|e| e / sum);
        }
        ctx.slice_mut(cols).assign(&p.dot(&vh));
        probs.push(p);
    }

    let o = linear_forward(&ctx, &lp.attn_out);
    let mut dropout = dropout;
    let attn_drop = dropout
        .as_mut()
        .map(|(rng, p)| dropout_mask(o.dim(), *p, rng));
    let o_d = match &attn_drop {
        Some(m) => &o * m,
        None => o,
    };
    let r1 = &x + &o_d;

    let (bn, ln2) = ln_forward(&r1, &lp.ln2);
    let h1 = linear_forward(&bn, &lp.ffn_inner);
    let gv = h1.mapv(gelu);
    let f = linear_forward(&gv, &lp.ffn_outer);
    let ffn_drop = dropout
        .as_mut()
        .map(|(rng, p)| dropout_mask(f.dim(), *p, rng));
    let f_d = match &ffn_drop {
        Some(m) => &f * m,
        None => f,
    };
    let out = &r1 + &f_d;

    let cache = LayerCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        ctx,
        attn_drop,
        ln2,
        bn,
        h1,
        gv,
        ffn_drop,
    };
    (out, cache)
}

/// Runs the pre-LN transformer stack over `input` (shape `[T, hidden_dim]`).
///
/// `attention_mask[j] == false` marks position `j` as padding: it is excluded
/// as an attention key everywhere, so its content cannot influence any other
/// position.  In training mode with a non-zero dropout probability an RNG
/// must be supplied; evaluation mode never touches the RNG and is
/// deterministic.  With zero layers the encoder is the identity; otherwise a
/// final layer norm is applied after the stack.
pub fn encode(
    params: &ModelParams,
    cfg: &ModelConfig,
    input: &Array2<f64>,
    attention_mask: &[bool],
    train_mode: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(EncoderOutput, EncoderCache), ModelError> {
    if attention_mask.len() != input.nrows() {
        return Err(ModelError::MaskLength {
            mask: attention_mask.len(),
            rows: input.nrows(),
        });
    }
    if !attention_mask.iter().any(|&m| m) {
        return Err(ModelError::BadConfig(
            "attention mask excludes every position".into(),
        ));
    }
    let use_dropout = train_mode && cfg.dropout > 0.0;
    if use_dropout && rng.is_none() {
        return Err(ModelError::MissingRng);
    }

    let mut cur = input.clone();
    let mut layer_caches = Vec::with_capacity(cfg.num_layers);
    for (l, lp) in params.layers.iter().enumerate() {
        let dropout = if use_dropout {
            rng.as_deref_mut().map(|r| (r, cfg.dropout))
        } else {
            None
        };
        let (next, cache) = layer_forward(lp, cfg, cur, attention_mask, dropout);
        if next.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite { layer: l });
        }
        layer_caches.push(cache);
        cur = next;
    }

    let final_ln = if cfg.num_layers > 0 {
        let (y, cache) = ln_forward(&cur, &params.final_ln);
        if y.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite {
                layer: cfg.num_layers,
            });
        }
        cur = y;
        Some(cache)
    } else {
        None
    };

    Ok((
        EncoderOutput { hidden: cur },
        EncoderCache {
            layers: layer_caches,
            final_ln,
        },
    ))
}

fn layer_backward(
    lp: &super::params::LayerParams,
    cfg: &ModelConfig,
    cache: &LayerCache,
    d_out: &Array2<f64>,
    gl: &mut super::params::LayerParams,
) -> Array2<f64> {
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let t_len = d_out.nrows();

    // out = r1 + dropout(f)
    let mut d_r1 = d_out.clone();
    let d_f = match &cache.ffn_drop {
        Some(m) => d_out * m,
        None => d_out.clone(),
    };
    let d_gv = linear_backward(&cache.gv, &lp.ffn_outer, &d_f, &mut gl.ffn_outer);
    let d_h1 = &d_gv * &cache.h1.mapv(gelu_prime);
    let d_bn = linear_backward(&cache.bn, &lp.ffn_inner, &d_h1, &mut gl.ffn_inner);
    d_r1 += &ln_backward(&d_bn, &cache.ln2, &lp.ln2, &mut gl.ln2);

    // r1 = x + dropout(o)
    let mut d_x = d_r1.clone();
    let d_o = match &cache.attn_drop {
        Some(m) => &d_r1 * m,
        None => d_r1,
    };
    let d_ctx = linear_backward(&cache.ctx, &lp.attn_out, &d_o, &mut gl.attn_out);

    let mut d_q = Array2::zeros((t_len, cfg.hidden_dim));
    let mut d_k = Array2::zeros((t_len, cfg.hidden_dim));
    let mut d_v = Array2::zeros((t_len, cfg.hidden_dim));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        let vh = cache.v.slice(cols);
        let d_ctx_h = d_ctx.slice(cols);

        d_v.slice_mut(cols).assign(&p.t().dot(&d_ctx_h));
        let d_p = d_ctx_h.dot(&vh.t());
        // Softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P)); masked columns
        // carry P = 0 and therefore dS = 0 automatically.
        let row_dot = (&d_p * p).sum_axis(Axis(1));
        let mut d_s = Array2::zeros((t_len, t_len));
        for i in 0..t_len {
            for j in 0..t_len {
                d_s[[i, j]] = p[[i, j]] * (d_p[[i, j]] - row_dot[i]);
            }
        }
        d_q.slice_mut(cols).assign(&(d_s.dot(&kh) * scale));
        d_k.slice_mut(cols).assign(&(d_s.t().dot(&qh) * scale));
    }

    let mut d_a = linear_backward(&cache.a, &lp.attn_q, &d_q, &mut gl.attn_q);
    d_a += &linear_backward(&cache.a, &lp.attn_k, &d_k, &mut gl.attn_k);
    d_a += &linear_backward(&cache.a, &lp.attn_v, &d_v, &mut gl.attn_v);
    d_x += &ln_backward(&d_a, &cache.ln1, &lp.ln1, &mut gl.ln1);
    d_x
}

/// Backpropagates `d_hidden` (gradient w.r.t. the encoder output) through the
/// stack, accumulating parameter gradients into `grads` and returning the
/// gradient w.r.t. the input embeddings.
pub fn encode_backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    cache: &EncoderCache,
    d_hidden: &Array2<f64>,
    grads: &mut ModelParams,
) -> Array2<f64> {
    let mut d_cur = match &cache.final_ln {
        Some(lnc) => {
            // The final norm read the last layer's output.
            ln_backward(d_hidden, lnc, &params.final_ln, &mut grads.final_ln)
        }
        None => d_hidden.clone(),
    };
    for l in (0..cache.layers.len()).rev() {
        d_cur = layer_backward(
            &params.layers[l],
            cfg,
            &cache.layers[l],
            &d_cur,
            &mut grads.layers[l],
        );
    }
    d_cur
}
