//! Task heads on top of the encoder states.
//!
//! Four heads share the hidden states: the tied masked-LM head (word and
//! phone prediction over the joint vocabulary), the 2-way word/speech pair
//! classifier, the intent classifier (tanh pooling then affine), and the
//! per-token slot tagger.  Each forward has a matching backward that
//! accumulates parameter gradients and adds the state gradient into a shared
//! `[T, hidden_dim]` buffer, so several heads can backpropagate into one
//! encoder pass.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1, Axis};

use crate::textproc::Span;

use super::{ModelError, ModelParams};

/// Logits of the tied LM head for the selected positions: row `k` is
/// `hidden[positions[k]] · Eᵀ + lm_bias` over the joint vocabulary.
pub fn lm_logits(params: &ModelParams, hidden: &Array2<f64>, positions: &[usize]) -> Array2<f64> {
    let selected = select_rows(hidden, positions);
    selected.dot(&params.token_embedding.t()) + &params.lm_bias
}

/// Backward of [`lm_logits`]: accumulates into the embedding table (tied
/// projection) and LM bias, and adds the state gradients into `d_hidden`.
pub fn lm_backward(
    params: &ModelParams,
    hidden: &Array2<f64>,
    positions: &[usize],
    d_logits: &Array2<f64>,
    grads: &mut ModelParams,
    d_hidden: &mut Array2<f64>,
) {
    let selected = select_rows(hidden, positions);
    grads
        .token_embedding
        .scaled_add(1.0, &d_logits.t().dot(&selected));
    grads.lm_bias.scaled_add(1.0, &d_logits.sum_axis(Axis(0)));
    let d_selected = d_logits.dot(&params.token_embedding);
    for (k, &pos) in positions.iter().enumerate() {
        d_hidden.row_mut(pos).scaled_add(1.0, &d_selected.row(k));
    }
}

/// Marks every logit outside `[lo, hi)` as impossible, restricting the
/// downstream softmax to one modality block of the joint vocabulary.
pub fn restrict_to_block(mut logits: ArrayViewMut1<'_, f64>, lo: usize, hi: usize) {
    for (i, v) in logits.iter_mut().enumerate() {
        if i < lo || i >= hi {
            *v = f64::NEG_INFINITY;
        }
    }
}

/// 2-way match/mismatch logits of the pair head on the `[CLS]` state.
pub fn wsa_logits(params: &ModelParams, hidden: &Array2<f64>) -> Array1<f64> {
    hidden.row(0).dot(&params.wsa.weight) + &params.wsa.bias
}

/// Backward of [`wsa_logits`]; adds into row 0 of `d_hidden`.
pub fn wsa_backward(
    params: &ModelParams,
    hidden: &Array2<f64>,
    d_logits: &Array1<f64>,
    grads: &mut ModelParams,
    d_hidden: &mut Array2<f64>,
) {
    let h = hidden.row(0);
    for i in 0..h.len() {
        for j in 0..d_logits.len() {
            grads.wsa.weight[[i, j]] += h[i] * d_logits[j];
        }
    }
    grads.wsa.bias.scaled_add(1.0, d_logits);
    d_hidden
        .row_mut(0)
        .scaled_add(1.0, &params.wsa.weight.dot(d_logits));
}

/// Tanh pooling activations cached by the intent head forward pass.
#[derive(Debug, Clone)]
pub struct IcCache {
    pooled: Array1<f64>,
}

/// Intent logits: the `[CLS]` state through a tanh-activated projection, then
/// an affine output layer.  Softmax/argmax happen downstream.
pub fn ic_forward(params: &ModelParams, hidden: &Array2<f64>) -> (Array1<f64>, IcCache) {
    let pooled = (hidden.row(0).dot(&params.ic_proj.weight) + &params.ic_proj.bias).mapv(f64::tanh);
    let logits = pooled.dot(&params.ic_out.weight) + &params.ic_out.bias;
    (logits, IcCache { pooled })
}

/// Convenience wrapper returning only the intent logits.
pub fn ic_logits(params: &ModelParams, hidden: &Array2<f64>) -> Array1<f64> {
    ic_forward(params, hidden).0
}

/// Backward of [`ic_forward`]; adds into row 0 of `d_hidden`.
pub fn ic_backward(
    params: &ModelParams,
    hidden: &Array2<f64>,
    cache: &IcCache,
    d_logits: &Array1<f64>,
    grads: &mut ModelParams,
    d_hidden: &mut Array2<f64>,
) {
    let pooled = &cache.pooled;
    for i in 0..pooled.len() {
        for j in 0..d_logits.len() {
            grads.ic_out.weight[[i, j]] += pooled[i] * d_logits[j];
        }
    }
    grads.ic_out.bias.scaled_add(1.0, d_logits);
    let d_pooled = params.ic_out.weight.dot(d_logits);
    let d_pre = &d_pooled * &pooled.mapv(|a| 1.0 - a * a);
    let h = hidden.row(0);
    for i in 0..h.len() {
        for j in 0..d_pre.len() {
            grads.ic_proj.weight[[i, j]] += h[i] * d_pre[j];
        }
    }
    grads.ic_proj.bias.scaled_add(1.0, &d_pre);
    d_hidden
        .row_mut(0)
        .scaled_add(1.0, &params.ic_proj.weight.dot(&d_pre));
}

/// Slot-tag logits for the given first-sub-token positions: row `i` is
/// `hidden[positions[i]] · W + b`.  Every position must lie inside the word
/// region — the tagger never reads `[CLS]`, separators, or phone states.
pub fn sf_logits(
    params: &ModelParams,
    hidden: &Array2<f64>,
    positions: &[usize],
    word_region: Span,
) -> Result<Array2<f64>, ModelError> {
    check_word_region(positions, word_region)?;
    let selected = select_rows(hidden, positions);
    Ok(selected.dot(&params.sf.weight) + &params.sf.bias)
}

/// Backward of [`sf_logits`]; adds into the tagged rows of `d_hidden`.
pub fn sf_backward(
    params: &ModelParams,
    hidden: &Array2<f64>,
    positions: &[usize],
    d_logits: &Array2<f64>,
    grads: &mut ModelParams,
    d_hidden: &mut Array2<f64>,
) {
    let selected = select_rows(hidden, positions);
    grads.sf.weight.scaled_add(1.0, &selected.t().dot(d_logits));
    grads.sf.bias.scaled_add(1.0, &d_logits.sum_axis(Axis(0)));
    let d_selected = d_logits.dot(&params.sf.weight.t());
    for (k, &pos) in positions.iter().enumerate() {
        d_hidden.row_mut(pos).scaled_add(1.0, &d_selected.row(k));
    }
}

fn check_word_region(positions: &[usize], word_region: Span) -> Result<(), ModelError> {
    for &idx in positions {
        if idx < word_region.start || idx >= word_region.end {
            return Err(ModelError::OutsideWordRegion {
                idx,
                lo: word_region.start,
                hi: word_region.end,
            });
        }
    }
    Ok(())
}

fn select_rows(hidden: &Array2<f64>, positions: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((positions.len(), hidden.ncols()));
    for (k, &pos) in positions.iter().enumerate() {
        out.row_mut(k).assign(&hidden.row(pos));
    }
    out
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(logits: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};
    use super::super::{LmSupport, ModelConfig};
    use ndarray::arr1;

    fn cfg(hidden: usize, heads: usize, intents: usize, tags: usize) -> ModelConfig {
        ModelConfig {
            word_vocab_size: 8,
            phone_vocab_size: 4,
            num_layers: 0,
            hidden_dim: hidden,
            num_heads: heads,
            ffn_dim: 4,
            max_seq_len: 16,
            dropout: 0.0,
            num_intents: intents,
            num_slot_tags: tags,
            lm_support: LmSupport::JointFull,
        }
    }

    #[test]
    fn intent_head_with_zero_weights_ties_to_lowest_index() {
        let c = cfg(4, 2, 2, 1);
        let p = ModelParams::zeros(&c);
        let hidden = Array2::ones((3, 4));
        let logits = ic_logits(&p, &hidden);
        assert_eq!(logits, arr1(&[0.0, 0.0]));
        assert_eq!(argmax(logits.view()), 0);
    }

    #[test]
    fn intent_head_bias_dominates_zero_weights() {
        let c = cfg(4, 2, 2, 1);
        let mut p = ModelParams::zeros(&c);
        p.ic_out.bias = arr1(&[0.0, 3.0]);
        let hidden = Array2::ones((1, 4));
        assert_eq!(argmax(ic_logits(&p, &hidden).view()), 1);
    }

    #[test]
    fn intent_head_scalar_case_matches_hand_computation() {
        let c = cfg(1, 1, 1, 1);
        let mut p = ModelParams::zeros(&c);
        p.ic_proj.weight[[0, 0]] = 1.0;
        p.ic_out.weight[[0, 0]] = 2.0;
        let mut hidden = Array2::zeros((1, 1));
        hidden[[0, 0]] = 0.5;
        let logits = ic_logits(&p, &hidden);
        assert!((logits[0] - 0.9242).abs() < 1e-4, "got {}", logits[0]);
    }

    #[test]
    fn positive_scaling_never_changes_predicted_intent() {
        let c = cfg(6, 2, 5, 1);
        let p = ModelParams::init(&c, &mut stream(11, domain::INIT, 0));
        let hidden = Array2::from_shape_fn((1, 6), |(_, j)| (j as f64 - 2.0) * 0.3);
        let logits = ic_logits(&p, &hidden);
        let scaled = logits.mapv(|v| v * 37.5);
        assert_eq!(argmax(logits.view()), argmax(scaled.view()));
    }

    #[test]
    fn slot_head_identity_weights_pass_hidden_through() {
        let c = cfg(2, 1, 1, 2);
        let mut p = ModelParams::zeros(&c);
        p.sf.weight[[0, 0]] = 1.0;
        p.sf.weight[[1, 1]] = 1.0;
        let mut hidden = Array2::zeros((4, 2));
        hidden.row_mut(1).assign(&arr1(&[0.3, -0.2]));
        let logits = sf_logits(&p, &hidden, &[1], Span::new(1, 3)).unwrap();
        assert_eq!(logits.nrows(), 1);
        assert!((logits[[0, 0]] - 0.3).abs() < 1e-15);
        assert!((logits[[0, 1]] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn slot_head_shape_follows_position_count() {
        let c = cfg(4, 2, 1, 3);
        let p = ModelParams::zeros(&c);
        let hidden = Array2::zeros((6, 4));
        let logits = sf_logits(&p, &hidden, &[1, 2, 4], Span::new(1, 5)).unwrap();
        assert_eq!(logits.dim(), (3, 3));
        // Zero weights give uniform scores over tags.
        assert!(logits.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn slot_head_rejects_positions_outside_word_region() {
        let c = cfg(4, 2, 1, 2);
        let p = ModelParams::zeros(&c);
        let hidden = Array2::zeros((6, 4));
        let err = sf_logits(&p, &hidden, &[0], Span::new(1, 5)).unwrap_err();
        assert!(matches!(
            err,
            ModelError::OutsideWordRegion { idx: 0, lo: 1, hi: 5 }
        ));
        assert!(sf_logits(&p, &hidden, &[5], Span::new(1, 5)).is_err());
    }

    #[test]
    fn lm_head_is_tied_to_the_embedding_table() {
        let c = cfg(4, 2, 1, 1);
        let mut p = ModelParams::zeros(&c);
        // Orthogonal one-hot embedding rows for the first four ids.
        for i in 0..4 {
            p.token_embedding[[i, i]] = 1.0;
        }
        let mut hidden = Array2::zeros((2, 4));
        hidden.row_mut(1).assign(&p.token_embedding.row(2).to_owned());
        let logits = lm_logits(&p, &hidden, &[1]);
        assert_eq!(logits.dim(), (1, c.vocab_size()));
        assert_eq!(argmax(logits.row(0)), 2);
    }

    #[test]
    fn lm_head_zero_hidden_returns_the_bias() {
        let c = cfg(4, 2, 1, 1);
        let mut p = ModelParams::zeros(&c);
        for (i, b) in p.lm_bias.iter_mut().enumerate() {
            *b = i as f64 * 0.1;
        }
        let hidden = Array2::zeros((3, 4));
        let logits = lm_logits(&p, &hidden, &[0, 2]);
        for k in 0..2 {
            for (j, b) in p.lm_bias.iter().enumerate() {
                assert_eq!(logits[[k, j]], *b);
            }
        }
    }

    #[test]
    fn block_restriction_disables_out_of_modality_ids() {
        let mut logits = arr1(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        restrict_to_block(logits.view_mut(), 2, 4);
        assert_eq!(logits[0], f64::NEG_INFINITY);
        assert_eq!(logits[1], f64::NEG_INFINITY);
        assert_eq!(logits[2], 0.3);
        assert_eq!(logits[3], 0.4);
        assert_eq!(logits[4], f64::NEG_INFINITY);
    }

    #[test]
    fn pair_head_is_affine_in_the_cls_state() {
        let c = cfg(3, 1, 1, 1);
        let mut p = ModelParams::zeros(&c);
        p.wsa.weight[[0, 0]] = 1.0;
        p.wsa.weight[[2, 1]] = -1.0;
        p.wsa.bias = arr1(&[0.5, 0.0]);
        let mut hidden = Array2::zeros((2, 3));
        hidden.row_mut(0).assign(&arr1(&[2.0, 9.0, 3.0]));
        let logits = wsa_logits(&p, &hidden);
        assert_eq!(logits, arr1(&[2.5, -3.0]));
    }
}
