//! Metrics: intent accuracy, slot error rate, transcript confusion pairs,
//! and embedding-space retrieval quality (mean reciprocal rank).
//!
//! The slot error rate scores `(name, value)` frames with the intent counted
//! as one extra pseudo-slot, so every utterance contributes at least one
//! reference entry and the rate is always well defined.  Confusion pairs come
//! from word-level minimum-edit alignments of reference/hypothesis transcript
//! pairs; the substituted word pairs are then used as retrieval queries for
//! the MRR probe over trained input embeddings.
//!
//! Everything here is a pure function of its inputs; reports serialize
//! deterministically (no paths, no timestamps) so same-seed pipeline runs
//! produce byte-identical report files.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slu::Slot;
use crate::textproc::Vocab;

/// Errors raised by metric computation.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference and hypothesis sets differ in size ({refs} vs {hyps})")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("metric over an empty set is undefined")]
    EmptySet,
    #[error("word {0:?} is not a single vocabulary token")]
    NotSingleToken(String),
    #[error("embedding of token {0:?} has zero norm")]
    ZeroNormEmbedding(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fraction of predictions exactly equal to their gold labels.
pub fn intent_accuracy<T: PartialEq>(predictions: &[T], golds: &[T]) -> Result<f64, EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            refs: golds.len(),
            hyps: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p == g)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Outcome tallies of frame scoring: correct, deleted, inserted, and
/// substituted entries (the intent pseudo-slot included).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemErCounts {
    pub cor: usize,
    pub del: usize,
    pub ins: usize,
    pub sub: usize,
}

impl SemErCounts {
    pub fn add(&mut self, other: SemErCounts) {
        self.cor += other.cor;
        self.del += other.del;
        self.ins += other.ins;
        self.sub += other.sub;
    }

    /// Slot error rate `(del + ins + sub) / (cor + del + sub)`.  The
    /// denominator counts reference entries and is positive for any counts
    /// produced by [`semer`], which always scores the intent pseudo-slot.
    pub fn value(&self) -> f64 {
        let denom = self.cor + self.del + self.sub;
        assert!(denom > 0, "slot error rate needs at least one reference entry");
        (self.del + self.ins + self.sub) as f64 / denom as f64
    }
}

/// A full semantic frame: the intent plus the slot entries (a multiset;
/// duplicate names are allowed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub intent: String,
    pub slots: Vec<Slot>,
}

impl Frame {
    pub fn new(intent: impl Into<String>, slots: Vec<Slot>) -> Self {
        Frame {
            intent: intent.into(),
            slots,
        }
    }
}

impl From<&crate::slu::SluExample> for Frame {
    fn from(ex: &crate::slu::SluExample) -> Self {
        Frame {
            intent: ex.intent.clone(),
            slots: ex.frame(),
        }
    }
}

/// Scores a hypothesis frame against a reference frame.
///
/// Matching is greedy over the slot multisets: first every reference slot
/// that pairs with an unused hypothesis slot of equal name *and* value is
/// counted correct; then remaining reference slots pair by name alone as
/// substitutions (wrong value); leftover reference slots are deletions and
/// leftover hypothesis slots insertions.  The intent is scored as one
/// pseudo-slot: correct when equal, substituted when not.  Returns the counts
/// and the error rate.
pub fn semer(reference: &Frame, hypothesis: &Frame) -> (SemErCounts, f64) {
    let mut counts = SemErCounts::default();
    if reference.intent == hypothesis.intent {
        counts.cor += 1;
    } else {
        counts.sub += 1;
    }

    let mut used = vec![false; hypothesis.slots.len()];
    let mut matched = vec![false; reference.slots.len()];
    for (i, r) in reference.slots.iter().enumerate() {
        if let Some(j) = hypothesis
            .slots
            .iter()
            .enumerate()
            .position(|(j, h)| !used[j] && h.name == r.name && h.value == r.value)
        {
            used[j] = true;
            matched[i] = true;
            counts.cor += 1;
        }
    }
    for (i, r) in reference.slots.iter().enumerate() {
        if matched[i] {
            continue;
        }
        if let Some(j) = hypothesis
            .slots
            .iter()
            .enumerate()
            .position(|(j, h)| !used[j] && h.name == r.name)
        {
            used[j] = true;
            counts.sub += 1;
        } else {
            counts.del += 1;
        }
    }
    counts.ins += used.iter().filter(|u| !**u).count();
    let value = counts.value();
    (counts, value)
}

/// Corpus-level slot error rate: counts are summed over all utterance pairs
/// and the rate computed once from the totals.
pub fn semer_corpus(
    references: &[Frame],
    hypotheses: &[Frame],
) -> Result<(SemErCounts, f64), EvalError> {
    if references.len() != hypotheses.len() {
        return Err(EvalError::LengthMismatch {
            refs: references.len(),
            hyps: hypotheses.len(),
        });
    }
    if references.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut total = SemErCounts::default();
    for (r, h) in references.iter().zip(hypotheses) {
        total.add(semer(r, h).0);
    }
    let value = total.value();
    Ok((total, value))
}

/// One step of a word-level alignment between a reference and a hypothesis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AlignOp {
    /// Same word on both sides.
    Match(usize, usize),
    /// Different words aligned to each other (ref index, hyp index).
    Sub(usize, usize),
    /// Reference word with no hypothesis counterpart.
    Del(usize),
    /// Hypothesis word with no reference counterpart.
    Ins(usize),
}

/// Minimum-edit alignment of hypothesis words to reference words with unit
/// substitution/insertion/deletion costs.  Where several alignments reach the
/// minimum cost, backtracking prefers match, then substitution, then
/// deletion, then insertion, making the operation list reproducible.  Returns
/// the operations (in left-to-right order) and the total cost.
pub fn align_words<S: AsRef<str>>(ref_words: &[S], hyp_words: &[S]) -> (Vec<AlignOp>, usize) {
    let m = ref_words.len();
    let n = hyp_words.len();
    let mut dist = vec![vec![0usize; n + 1]; m + 1];
    for (i, row) in dist.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=n {
        dist[0][j] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let diag = dist[i - 1][j - 1]
                + usize::from(ref_words[i - 1].as_ref() != hyp_words[j - 1].as_ref());
            let del = dist[i - 1][j] + 1;
            let ins = dist[i][j - 1] + 1;
            dist[i][j] = diag.min(del).min(ins);
        }
    }

    let mut ops = Vec::new();
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let here = dist[i][j];
        if i > 0 && j > 0 && ref_words[i - 1].as_ref() == hyp_words[j - 1].as_ref()
            && here == dist[i - 1][j - 1]
        {
            ops.push(AlignOp::Match(i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && here == dist[i - 1][j - 1] + 1 {
            ops.push(AlignOp::Sub(i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if i > 0 && here == dist[i - 1][j] + 1 {
            ops.push(AlignOp::Del(i - 1));
            i -= 1;
        } else {
            ops.push(AlignOp::Ins(j - 1));
            j -= 1;
        }
    }
    ops.reverse();
    (ops, dist[m][n])
}

/// A hypothesis word systematically aligned against a different reference
/// word, with its occurrence count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionPair {
    pub hyp_word: String,
    pub ref_word: String,
    pub count: usize,
}

/// Tallies substitution-aligned word pairs over a transcript corpus and
/// returns the `top_k` most frequent.  Pairs where either word is not a
/// single token of `vocab` are dropped.  Ordering: count descending, then
/// `(hyp_word, ref_word)` lexicographically ascending.
pub fn extract_confusion_pairs(
    references: &[String],
    hypotheses: &[String],
    top_k: usize,
    vocab: &Vocab,
) -> Result<Vec<ConfusionPair>, EvalError> {
    if references.len() != hypotheses.len() {
        return Err(EvalError::LengthMismatch {
            refs: references.len(),
            hyps: hypotheses.len(),
        });
    }
    let mut tally: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (r, h) in references.iter().zip(hypotheses) {
        let ref_words: Vec<&str> = r.split_whitespace().collect();
        let hyp_words: Vec<&str> = h.split_whitespace().collect();
        let (ops, _) = align_words(&ref_words, &hyp_words);
        for op in ops {
            if let AlignOp::Sub(ri, hi) = op {
                let rw = ref_words[ri];
                let hw = hyp_words[hi];
                if single_token_id(vocab, rw).is_some() && single_token_id(vocab, hw).is_some() {
                    *tally.entry((hw.to_string(), rw.to_string())).or_insert(0) += 1;
                }
            }
        }
    }
    let mut pairs: Vec<ConfusionPair> = tally
        .into_iter()
        .map(|((hyp_word, ref_word), count)| ConfusionPair {
            hyp_word,
            ref_word,
            count,
        })
        .collect();
    pairs.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| a.hyp_word.cmp(&b.hyp_word))
            .then_with(|| a.ref_word.cmp(&b.ref_word))
    });
    pairs.truncate(top_k);
    Ok(pairs)
}

fn single_token_id(vocab: &Vocab, word: &str) -> Option<u32> {
    let id = vocab.id(word)?;
    if vocab.is_special(id) {
        return None;
    }
    Some(id)
}

fn cosine(
    embeddings: &ArrayView2<'_, f64>,
    a: u32,
    b: u32,
    vocab: &Vocab,
) -> Result<f64, EvalError> {
    let norm = |id: u32| -> Result<f64, EvalError> {
        let n = embeddings.row(id as usize).dot(&embeddings.row(id as usize)).sqrt();
        if n == 0.0 {
            Err(EvalError::ZeroNormEmbedding(
                vocab.token(id).unwrap_or("?").to_string(),
            ))
        } else {
            Ok(n)
        }
    };
    let dot = embeddings.row(a as usize).dot(&embeddings.row(b as usize));
    Ok(dot / (norm(a)? * norm(b)?))
}

/// Mean reciprocal rank of each pair's reference word when retrieving by
/// cosine similarity to the hypothesis word's input embedding.
///
/// The candidate pool is every single-token, non-special word of `vocab`
/// except the query itself; candidates with equal similarity rank in id
/// order (lower id first).  Both words of every pair must be single tokens,
/// and all involved embeddings must have non-zero norm.
pub fn mrr(
    pairs: &[ConfusionPair],
    embeddings: ArrayView2<'_, f64>,
    vocab: &Vocab,
) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let candidates = vocab.single_token_word_ids();
    let mut sum = 0.0;
    for pair in pairs {
        let query = single_token_id(vocab, &pair.hyp_word)
            .ok_or_else(|| EvalError::NotSingleToken(pair.hyp_word.clone()))?;
        let target = single_token_id(vocab, &pair.ref_word)
            .ok_or_else(|| EvalError::NotSingleToken(pair.ref_word.clone()))?;
        let target_sim = cosine(&embeddings, query, target, vocab)?;
        let mut rank = 1usize;
        for &c in &candidates {
            if c == query || c == target {
                continue;
            }
            let sim = cosine(&embeddings, query, c, vocab)?;
            if sim > target_sim || (sim == target_sim && c < target) {
                rank += 1;
            }
        }
        sum += 1.0 / rank as f64;
    }
    Ok(sum / pairs.len() as f64)
}

/// Slot-error section of a [`MetricReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemErReport {
    pub cor: usize,
    pub del: usize,
    pub ins: usize,
    pub sub: usize,
    pub value: f64,
}

impl SemErReport {
    pub fn from_counts(counts: SemErCounts) -> Self {
        SemErReport {
            cor: counts.cor,
            del: counts.del,
            ins: counts.ins,
            sub: counts.sub,
            value: counts.value(),
        }
    }
}

/// Evaluation results, with absent sections omitted.  Serialization contains
/// no paths or timestamps, so reports from same-seed runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icacc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semer: Option<SemErReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mrr: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub confusion_pairs: Vec<ConfusionPair>,
}

impl MetricReport {
    /// Human-readable section dump.
    pub fn to_pretty(&self) -> String {
        let mut out = String::new();
        if let Some(v) = self.icacc {
            out.push_str(&format!("icacc {v:.4}\n"));
        }
        if let Some(s) = &self.semer {
            out.push_str(&format!(
                "semer cor={} del={} ins={} sub={} value={:.4}\n",
                s.cor, s.del, s.ins, s.sub, s.value
            ));
        }
        if let Some(v) = self.mrr {
            out.push_str(&format!("mrr {v:.4}\n"));
        }
        if !self.confusion_pairs.is_empty() {
            out.push_str("confusion_pairs\n");
            for p in &self.confusion_pairs {
                out.push_str(&format!("  {} -> {}  {}\n", p.hyp_word, p.ref_word, p.count));
            }
        }
        out
    }

    /// Machine-readable variant: one JSON record per section/pair, suitable
    /// for line-oriented assertions in CI.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<(), EvalError> {
        if let Some(v) = self.icacc {
            writeln!(w, "{}", serde_json::json!({"metric": "icacc", "value": v}))?;
        }
        if let Some(s) = &self.semer {
            writeln!(
                w,
                "{}",
                serde_json::json!({
                    "metric": "semer",
                    "cor": s.cor, "del": s.del, "ins": s.ins, "sub": s.sub,
                    "value": s.value,
                })
            )?;
        }
        if let Some(v) = self.mrr {
            writeln!(w, "{}", serde_json::json!({"metric": "mrr", "value": v}))?;
        }
        for p in &self.confusion_pairs {
            writeln!(
                w,
                "{}",
                serde_json::json!({
                    "metric": "confusion_pair",
                    "hyp": p.hyp_word, "ref": p.ref_word, "count": p.count,
                })
            )?;
        }
        Ok(())
    }
}
