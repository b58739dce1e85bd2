//! Softmax cross-entropy losses and their logit gradients.
//!
//! All task losses reduce to two shapes: a mean cross-entropy over a set of
//! target rows (masked-token prediction, intent classification, slot
//! tagging) and a binary cross-entropy on the pair-classifier output.  The
//! `_grad` variants additionally return `d loss / d logits`, which the
//! training loops scale and feed into the head backward passes.

use ndarray::{Array1, Array2};

use crate::textproc::WsaLabel;

fn row_softmax(row: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = row.mapv(|x| (x - max).exp());
    let sum = p.sum();
    p.mapv_inplace(|e| e / sum);
    p
}

/// Mean over target rows of `−log softmax(row)[gold]`.  Rows marked
/// impossible (negative infinity, used to restrict the vocabulary support)
/// receive zero probability and never contribute.
///
/// The caller decides what an empty target set means; this function requires
/// at least one row and one gold id per row.
pub fn masked_ce_loss(logits: &Array2<f64>, gold_ids: &[u32]) -> f64 {
    masked_ce(logits, gold_ids).0
}

/// [`masked_ce_loss`] plus the gradient w.r.t. the logits.
pub fn masked_ce_grad(logits: &Array2<f64>, gold_ids: &[u32]) -> (f64, Array2<f64>) {
    masked_ce(logits, gold_ids)
}

fn masked_ce(logits: &Array2<f64>, gold_ids: &[u32]) -> (f64, Array2<f64>) {
    let k = gold_ids.len();
    assert_eq!(
        logits.nrows(),
        k,
        "one logit row per target ({} rows, {} targets)",
        logits.nrows(),
        k
    );
    assert!(k > 0, "cross-entropy over zero targets is undefined");
    let mut loss = 0.0;
    let mut d = Array2::zeros(logits.dim());
    let scale = 1.0 / k as f64;
    for (i, &gold) in gold_ids.iter().enumerate() {
        let p = row_softmax(logits.row(i));
        loss -= p[gold as usize].ln();
        let mut d_row = d.row_mut(i);
        d_row.assign(&p);
        d_row *= scale;
        d_row[gold as usize] -= scale;
    }
    (loss * scale, d)
}

/// Class index of a pair label in the 2-way classifier: a matching pair is
/// class 0, a mismatched pair class 1.
pub fn wsa_class_index(label: WsaLabel) -> usize {
    match label {
        WsaLabel::Match => 0,
        WsaLabel::Mismatch => 1,
    }
}

/// Binary softmax cross-entropy of the pair-classifier logits.
pub fn wsa_loss(logits: &Array1<f64>, label: WsaLabel) -> f64 {
    wsa_grad(logits, label).0
}

/// [`wsa_loss`] plus the gradient w.r.t. the two logits.
pub fn wsa_grad(logits: &Array1<f64>, label: WsaLabel) -> (f64, Array1<f64>) {
    assert_eq!(logits.len(), 2, "pair classifier emits two logits");
    let gold = wsa_class_index(label);
    let p = row_softmax(logits.view());
    let loss = -p[gold].ln();
    let mut d = p;
    d[gold] -= 1.0;
    (loss, d)
}
