//! Word-piece vocabulary, tokenization, and encoding of word/phone pairs.
//!
//! An utterance is whitespace-split into words, each word greedily decomposed
//! into the longest matching vocabulary pieces (`##`-prefixed continuations),
//! and paired with its per-word phone sequences from the lexicon. Encoded
//! examples use the layout `[CLS] W [SEP] P [SEP]` (segment 0 over
//! `[CLS] W [SEP]`, segment 1 over `P [SEP]`) or `[CLS] W [SEP]` when the
//! phone segment is dropped, as during fine-tuning. Word and phone ids share
//! one embedding table: word-piece ids occupy `[0, |Vw|)` and phone ids
//! `[|Vw|, |Vw|+|Vp|)`.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{Lexicon, LexiconError, PhoneVocab};

/// Reserved word-piece tokens, in id order: indices 0 through 4.
pub const SPECIALS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];
pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
/// Prefix marking a word-internal continuation piece.
pub const CONTINUATION: &str = "##";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("vocabulary must begin with {SPECIALS:?} at ids 0..5, found {found:?} at id {id}")]
    BadSpecials { id: usize, found: String },
    #[error("duplicate vocabulary token {0:?}")]
    DuplicateToken(String),
    #[error("utterance is empty")]
    EmptyUtterance,
    #[error(
        "utterance does not fit in max_seq_len={max}: the first word alone needs {needed} positions"
    )]
    TooLong { needed: usize, max: usize },
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Word-piece vocabulary; a token's line number in the on-disk listing is its
/// id, and the five reserved tokens occupy ids 0..5.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TextError> {
        for (i, want) in SPECIALS.iter().enumerate() {
            match tokens.get(i) {
                Some(t) if t == want => {}
                other => {
                    return Err(TextError::BadSpecials {
                        id: i,
                        found: other.cloned().unwrap_or_default(),
                    })
                }
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TextError::DuplicateToken(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Loads a one-token-per-line listing.
    pub fn read(reader: impl BufRead) -> Result<Self, TextError> {
        let mut tokens = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let t = line.trim_end();
            if !t.is_empty() {
                tokens.push(t.to_string());
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn write(&self, mut writer: impl std::io::Write) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(writer, "{t}")?;
        }
        Ok(())
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn is_continuation(&self, id: u32) -> bool {
        self.token(id).is_some_and(|t| t.starts_with(CONTINUATION))
    }

    /// Ids eligible as random-substitution draws: every non-reserved token.
    pub fn substitutable_ids(&self) -> Vec<u32> {
        (SPECIALS.len() as u32..self.len() as u32).collect()
    }

    /// Ids of words that are themselves single vocabulary tokens (no
    /// reserved tokens, no `##` continuations); the candidate pool for
    /// embedding-similarity ranking.
    pub fn single_token_word_ids(&self) -> Vec<u32> {
        (SPECIALS.len() as u32..self.len() as u32).filter(|&id| !self.is_continuation(id)).collect()
    }
}

/// Half-open index range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    fn shift(&self, by: usize) -> Self {
        Self::new(self.start + by, self.end + by)
    }
}

/// Tokenization of one utterance: sub-token ids plus the whole-word spans
/// that tile them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub words: Vec<String>,
    pub ids: Vec<u32>,
    pub word_spans: Vec<Span>,
}

/// Whitespace-splits `text` and decomposes each word by greedy longest-match
/// against the vocabulary. A word with no valid decomposition becomes the
/// single token `[UNK]`. Empty text yields an empty tokenization.
pub fn tokenize(text: &str, vocab: &Vocab) -> Tokenized {
    let mut out = Tokenized { words: Vec::new(), ids: Vec::new(), word_spans: Vec::new() };
    for word in text.split_whitespace() {
        let start = out.ids.len();
        match tokenize_word(word, vocab) {
            Some(ids) => out.ids.extend(ids),
            None => out.ids.push(UNK_ID),
        }
        out.word_spans.push(Span::new(start, out.ids.len()));
        out.words.push(word.to_string());
    }
    out
}

/// Greedy longest-prefix decomposition of a single word; `None` when some
/// residue cannot be matched.
fn tokenize_word(word: &str, vocab: &Vocab) -> Option<Vec<u32>> {
    let mut ids = Vec::new();
    let mut start = 0;
    while start < word.len() {
        let mut matched = None;
        // Candidate ends, longest first, restricted to char boundaries.
        for end in (start + 1..=word.len()).rev() {
            if !word.is_char_boundary(end) {
                continue;
            }
            let piece = if start == 0 {
                word[..end].to_string()
            } else {
                format!("{CONTINUATION}{}", &word[start..end])
            };
            if let Some(id) = vocab.id(&piece) {
                matched = Some((id, end));
                break;
            }
        }
        let (id, end) = matched?;
        ids.push(id);
        start = end;
    }
    Some(ids)
}

/// One utterance with aligned word, sub-token, and phone views. Phone ids are
/// already mapped into the joint id space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedUtterance {
    pub words: Vec<String>,
    pub word_ids: Vec<u32>,
    pub word_sub_spans: Vec<Span>,
    pub phone_ids: Vec<u32>,
    pub word_phone_spans: Vec<Span>,
}

impl PairedUtterance {
    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    /// Length of the encoded paired layout `[CLS] W [SEP] P [SEP]`.
    pub fn paired_len(&self) -> usize {
        3 + self.word_ids.len() + self.phone_ids.len()
    }

    /// Checks the span-tiling invariants; used by tests and debug assertions.
    pub fn validate(&self) -> bool {
        tiles(&self.word_sub_spans, self.word_ids.len())
            && tiles(&self.word_phone_spans, self.phone_ids.len())
            && self.word_sub_spans.len() == self.words.len()
            && self.word_phone_spans.len() == self.words.len()
    }
}

/// True when `spans` are non-empty, contiguous, and cover `[0, len)` exactly.
fn tiles(spans: &[Span], len: usize) -> bool {
    let mut cursor = 0;
    for s in spans {
        if s.start != cursor || s.is_empty() {
            return false;
        }
        cursor = s.end;
    }
    cursor == len
}

/// Tokenizes `text` and attaches per-word phone sequences from the lexicon;
/// out-of-dictionary words carry the single `<UNK>` phone.
pub fn build_paired(
    text: &str,
    vocab: &Vocab,
    lexicon: &Lexicon,
    phone_vocab: &PhoneVocab,
) -> Result<PairedUtterance, TextError> {
    let tok = tokenize(text, vocab);
    let offset = vocab.len() as u32;
    let mut phone_ids = Vec::new();
    let mut word_phone_spans = Vec::with_capacity(tok.words.len());
    for word in &tok.words {
        let start = phone_ids.len();
        for label in lexicon.lookup(word) {
            phone_ids.push(offset + phone_vocab.id(label)?);
        }
        word_phone_spans.push(Span::new(start, phone_ids.len()));
    }
    let u = PairedUtterance {
        words: tok.words,
        word_ids: tok.ids,
        word_sub_spans: tok.word_spans,
        phone_ids,
        word_phone_spans,
    };
    debug_assert!(u.validate());
    Ok(u)
}

/// Whether an utterance keeps its phone segment when encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `[CLS] W [SEP] P [SEP]`
    Paired,
    /// `[CLS] W [SEP]`
    TextOnly,
}

/// Match/mismatch label for word/phone alignment classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WsaLabel {
    Match,
    Mismatch,
}

/// A fully laid-out model input. Target maps are keyed by absolute position
/// in `input_ids` and hold the original (pre-substitution) ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub input_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub position_ids: Vec<u32>,
    /// Word sub-token positions (excludes `[CLS]` and separators).
    pub word_region: Span,
    /// Phone positions (excludes the trailing separator); empty for text-only.
    pub phone_region: Span,
    /// Per-word sub-token spans, absolute.
    pub word_sub_spans: Vec<Span>,
    /// Whole-word phone groups, absolute. Aligned with `word_sub_spans` for
    /// matched pairs; for mismatched alignment pairs these are the donor
    /// utterance's groups and the two lists may differ in length.
    pub phone_group_spans: Vec<Span>,
    pub wsa_label: Option<WsaLabel>,
    pub mlm_targets: BTreeMap<usize, u32>,
    pub msm_targets: BTreeMap<usize, u32>,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Structural invariants: parallel arrays, monotone positions, segment
    /// boundaries matching the regions, spans tiling their regions, target
    /// keys confined to their modality's region.
    pub fn validate(&self) -> bool {
        let t = self.input_ids.len();
        if self.segment_ids.len() != t || self.position_ids.len() != t {
            return false;
        }
        if !self.position_ids.iter().enumerate().all(|(i, &p)| p as usize == i) {
            return false;
        }
        let seg_ok = match self.layout() {
            Layout::Paired => {
                let seg1_start = self.word_region.end + 1;
                self.segment_ids[..seg1_start].iter().all(|&s| s == 0)
                    && self.segment_ids[seg1_start..].iter().all(|&s| s == 1)
            }
            Layout::TextOnly => self.segment_ids.iter().all(|&s| s == 0),
        };
        let word_spans_ok = self.word_sub_spans.first().map(|s| s.start) == Some(self.word_region.start)
            && self.word_sub_spans.last().map(|s| s.end) == Some(self.word_region.end)
            && self.word_sub_spans.windows(2).all(|w| w[0].end == w[1].start)
            && self.word_sub_spans.iter().all(|s| !s.is_empty());
        let phone_spans_ok = if self.phone_region.is_empty() {
            self.phone_group_spans.is_empty()
        } else {
            self.phone_group_spans.first().map(|s| s.start) == Some(self.phone_region.start)
                && self.phone_group_spans.last().map(|s| s.end) == Some(self.phone_region.end)
                && self.phone_group_spans.windows(2).all(|w| w[0].end == w[1].start)
                && self.phone_group_spans.iter().all(|s| !s.is_empty())
        };
        let targets_ok = self.mlm_targets.keys().all(|&k| self.word_region.contains(k))
            && self.msm_targets.keys().all(|&k| self.phone_region.contains(k));
        seg_ok && word_spans_ok && phone_spans_ok && targets_ok
    }

    pub fn layout(&self) -> Layout {
        if self.phone_region.is_empty() {
            Layout::TextOnly
        } else {
            Layout::Paired
        }
    }
}

/// Lays out already-masked (or unmasked) sequences without truncating;
/// callers truncate first. Target maps are utterance-local on entry and are
/// shifted to absolute positions here.
pub fn assemble_example(
    word_ids: &[u32],
    word_sub_spans: &[Span],
    phones: Option<(&[u32], &[Span])>,
    wsa_label: Option<WsaLabel>,
    mlm_targets_local: &BTreeMap<usize, u32>,
    msm_targets_local: &BTreeMap<usize, u32>,
) -> EncodedExample {
    let n = word_ids.len();
    let mut input_ids = Vec::with_capacity(n + 3);
    input_ids.push(CLS_ID);
    input_ids.extend_from_slice(word_ids);
    input_ids.push(SEP_ID);
    let word_region = Span::new(1, 1 + n);
    let mut segment_ids = vec![0u8; input_ids.len()];
    let (phone_region, phone_group_spans) = match phones {
        Some((phone_ids, phone_spans)) => {
            let p_start = input_ids.len();
            input_ids.extend_from_slice(phone_ids);
            input_ids.push(SEP_ID);
            segment_ids.resize(input_ids.len(), 1);
            (
                Span::new(p_start, p_start + phone_ids.len()),
                phone_spans.iter().map(|s| s.shift(p_start)).collect(),
            )
        }
        None => {
            debug_assert!(msm_targets_local.is_empty());
            (Span::new(1 + n + 1, 1 + n + 1), Vec::new())
        }
    };
    let position_ids = (0..input_ids.len() as u32).collect();
    let ex = EncodedExample {
        input_ids,
        segment_ids,
        position_ids,
        word_region,
        phone_region,
        word_sub_spans: word_sub_spans.iter().map(|s| s.shift(1)).collect(),
        phone_group_spans,
        wsa_label,
        mlm_targets: mlm_targets_local.iter().map(|(&k, &v)| (k + 1, v)).collect(),
        msm_targets: msm_targets_local
            .iter()
            .map(|(&k, &v)| (k + phone_region.start, v))
            .collect(),
    };
    debug_assert!(ex.validate());
    ex
}

/// Drops trailing whole words (and their phone spans, symmetrically) until
/// the chosen layout fits `max_seq_len`. Errors when the utterance is empty
/// or even its first word does not fit.
pub fn truncate_to_fit(
    u: &PairedUtterance,
    max_seq_len: usize,
    layout: Layout,
) -> Result<PairedUtterance, TextError> {
    if u.words.is_empty() {
        return Err(TextError::EmptyUtterance);
    }
    let overhead = match layout {
        Layout::Paired => 3,
        Layout::TextOnly => 2,
    };
    let word_cost = |i: usize| {
        u.word_sub_spans[i].len()
            + match layout {
                Layout::Paired => u.word_phone_spans[i].len(),
                Layout::TextOnly => 0,
            }
    };
    let mut used = overhead;
    let mut keep = 0;
    while keep < u.num_words() && used + word_cost(keep) <= max_seq_len {
        used += word_cost(keep);
        keep += 1;
    }
    if keep == 0 {
        return Err(TextError::TooLong { needed: overhead + word_cost(0), max: max_seq_len });
    }
    if keep == u.num_words() {
        return Ok(u.clone());
    }
    let sub_end = u.word_sub_spans[keep - 1].end;
    let phone_end = u.word_phone_spans[keep - 1].end;
    Ok(PairedUtterance {
        words: u.words[..keep].to_vec(),
        word_ids: u.word_ids[..sub_end].to_vec(),
        word_sub_spans: u.word_sub_spans[..keep].to_vec(),
        phone_ids: u.phone_ids[..phone_end].to_vec(),
        word_phone_spans: u.word_phone_spans[..keep].to_vec(),
    })
}

/// Encodes the paired layout `[CLS] W [SEP] P [SEP]` with no masking.
pub fn encode_pair(u: &PairedUtterance, max_seq_len: usize) -> Result<EncodedExample, TextError> {
    let t = truncate_to_fit(u, max_seq_len, Layout::Paired)?;
    Ok(assemble_example(
        &t.word_ids,
        &t.word_sub_spans,
        Some((&t.phone_ids, &t.word_phone_spans)),
        None,
        &BTreeMap::new(),
        &BTreeMap::new(),
    ))
}

/// Encodes the text-only layout `[CLS] W [SEP]`, the fine-tuning input.
pub fn encode_text_only(
    u: &PairedUtterance,
    max_seq_len: usize,
) -> Result<EncodedExample, TextError> {
    let t = truncate_to_fit(u, max_seq_len, Layout::TextOnly)?;
    Ok(assemble_example(
        &t.word_ids,
        &t.word_sub_spans,
        None,
        None,
        &BTreeMap::new(),
        &BTreeMap::new(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Lexicon;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn test_vocab() -> Vocab {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for t in ["play", "a", "song", "the", "turn", "lights", "off", "##ing", "do", "hello"] {
            tokens.push(t.to_string());
        }
        Vocab::from_tokens(tokens).unwrap()
    }

    fn test_lexicon() -> Lexicon {
        let dict = "\
A  AH0
DOING  D UW1 IH0 NG
HELLO  HH AH0 L OW1
LIGHTS  L AY1 T S
OFF  AO1 F
PLAY  P L EY1
SONG  S AO1 NG
THE  DH AH0
TURN  T ER1 N
";
        Lexicon::parse_dictionary(Cursor::new(dict)).unwrap()
    }

    #[test]
    fn tokenize_single_piece_words() {
        let v = test_vocab();
        let t = tokenize("play a song", &v);
        assert_eq!(t.words, ["play", "a", "song"]);
        assert_eq!(t.ids, [v.id("play").unwrap(), v.id("a").unwrap(), v.id("song").unwrap()]);
        assert_eq!(t.word_spans, [Span::new(0, 1), Span::new(1, 2), Span::new(2, 3)]);
    }

    #[test]
    fn tokenize_uses_continuations() {
        let v = test_vocab();
        let t = tokenize("doing", &v);
        assert_eq!(t.ids, [v.id("do").unwrap(), v.id("##ing").unwrap()]);
        assert_eq!(t.word_spans, [Span::new(0, 2)]);
    }

    #[test]
    fn tokenize_unknown_word_is_unk() {
        let t = tokenize("qqq", &test_vocab());
        assert_eq!(t.ids, [UNK_ID]);
        assert_eq!(t.word_spans, [Span::new(0, 1)]);
    }

    #[test]
    fn tokenize_empty_text() {
        let t = tokenize("   ", &test_vocab());
        assert!(t.ids.is_empty() && t.words.is_empty() && t.word_spans.is_empty());
    }

    #[test]
    fn greedy_prefers_longest_match() {
        // "playing": "play" matches before shorter prefixes would.
        let v = test_vocab();
        let t = tokenize("playing", &v);
        assert_eq!(t.ids, [v.id("play").unwrap(), v.id("##ing").unwrap()]);
    }

    #[test]
    fn build_paired_concatenates_phone_spans() {
        let v = test_vocab();
        let lex = test_lexicon();
        let pv = lex.phone_vocab();
        let u = build_paired("play a song", &v, &lex, &pv).unwrap();
        assert!(u.validate());
        let off = v.len() as u32;
        let want: Vec<u32> =
            ["P", "L", "EY", "AH", "S", "AO", "NG"].iter().map(|p| off + pv.id(p).unwrap()).collect();
        assert_eq!(u.phone_ids, want);
        assert_eq!(u.word_phone_spans, [Span::new(0, 3), Span::new(3, 4), Span::new(4, 7)]);
    }

    #[test]
    fn build_paired_oov_word_gets_unk_phone() {
        let v = test_vocab();
        let lex = test_lexicon();
        let pv = lex.phone_vocab();
        let u = build_paired("play zzz", &v, &lex, &pv).unwrap();
        assert_eq!(u.word_phone_spans[1].len(), 1);
        assert_eq!(u.phone_ids[3], v.len() as u32 + pv.unk_id());
    }

    #[test]
    fn encode_pair_layout() {
        let v = test_vocab();
        let lex = test_lexicon();
        let pv = lex.phone_vocab();
        let u = build_paired("play a song", &v, &lex, &pv).unwrap();
        let ex = encode_pair(&u, 64).unwrap();
        assert!(ex.validate());

        let mut want = vec![CLS_ID];
        want.extend_from_slice(&u.word_ids);
        want.push(SEP_ID);
        want.extend_from_slice(&u.phone_ids);
        want.push(SEP_ID);
        assert_eq!(ex.input_ids, want);
        assert_eq!(ex.segment_ids, [0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1]);
        assert_eq!(ex.position_ids, (0..13).collect::<Vec<u32>>());
        assert_eq!(ex.word_region, Span::new(1, 4));
        assert_eq!(ex.phone_region, Span::new(5, 12));
        assert_eq!(ex.word_sub_spans, [Span::new(1, 2), Span::new(2, 3), Span::new(3, 4)]);
        assert_eq!(ex.phone_group_spans, [Span::new(5, 8), Span::new(8, 9), Span::new(9, 12)]);
        assert_eq!(ex.wsa_label, None);
    }

    #[test]
    fn encode_text_only_layout() {
        let v = test_vocab();
        let lex = test_lexicon();
        let pv = lex.phone_vocab();
        let u = build_paired("turn the lights off", &v, &lex, &pv).unwrap();
        let ex = encode_text_only(&u, 64).unwrap();
        assert!(ex.validate());
        assert_eq!(ex.len(), 6);
        assert_eq!(ex.input_ids[0], CLS_ID);
        assert_eq!(ex.input_ids[5], SEP_ID);
        assert!(ex.segment_ids.iter().all(|&s| s == 0));
        assert!(ex.phone_region.is_empty() && ex.phone_group_spans.is_empty());
        assert_eq!(ex.layout(), Layout::TextOnly);
    }

    #[test]
    fn truncation_drops_whole_words_symmetrically() {
        let v = test_vocab();
        let lex = test_lexicon();
        let pv = lex.phone_vocab();
        let u = build_paired("play a song", &v, &lex, &pv).unwrap();
        // Full length is 13; a budget of 12 must drop the last word ("song",
        // 1 sub-token + 2 phones), leaving 3 + 2 + 4 = 9 positions.
        let ex = encode_pair(&u, 12).unwrap();
        assert!(ex.validate());
        assert_eq!(ex.word_sub_spans.len(), 2);
        assert_eq!(ex.phone_group_spans.len(), 2);
        assert_eq!(ex.len(), 9);
    }

    #[test]
    fn truncation_fails_when_first_word_does_not_fit() {
        let v = test_vocab();
        let lex = test_lexicon();
        let pv = lex.phone_vocab();
        let u = build_paired("hello", &v, &lex, &pv).unwrap();
        // hello: 1 sub-token + 4 phones + 3 overhead = 8.
        assert!(matches!(encode_pair(&u, 7), Err(TextError::TooLong { needed: 8, max: 7 })));
        assert!(encode_pair(&u, 8).is_ok());
    }

    #[test]
    fn empty_utterance_cannot_encode() {
        let v = test_vocab();
        let lex = test_lexicon();
        let pv = lex.phone_vocab();
        let u = build_paired("", &v, &lex, &pv).unwrap();
        assert!(matches!(encode_pair(&u, 64), Err(TextError::EmptyUtterance)));
    }

    #[test]
    fn vocab_listing_round_trips() {
        let v = test_vocab();
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let reread = Vocab::read(Cursor::new(buf)).unwrap();
        assert_eq!(reread.len(), v.len());
        for id in 0..v.len() as u32 {
            assert_eq!(reread.token(id), v.token(id));
        }
    }

    #[test]
    fn vocab_requires_specials_in_order() {
        let res = Vocab::from_tokens(vec!["[PAD]".into(), "[SEP]".into(), "[CLS]".into()]);
        assert!(matches!(res, Err(TextError::BadSpecials { id: 1, .. })));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.push("play".into());
        tokens.push("play".into());
        assert!(matches!(Vocab::from_tokens(tokens), Err(TextError::DuplicateToken(_))));
    }

    #[test]
    fn single_token_word_ids_skip_specials_and_continuations() {
        let v = test_vocab();
        let ids = v.single_token_word_ids();
        assert!(!ids.contains(&UNK_ID));
        assert!(!ids.contains(&v.id("##ing").unwrap()));
        assert!(ids.contains(&v.id("play").unwrap()));
    }

    proptest! {
        /// Whole-word spans always tile the sub-token sequence exactly.
        #[test]
        fn spans_tile_for_random_text(words in proptest::collection::vec("[abc]{1,6}", 0..8)) {
            let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
            // Single letters plus their continuations and two multi-letter
            // pieces; every word decomposes, so [UNK] never appears.
            for t in ["a", "b", "c", "##a", "##b", "##c", "ab", "##bc"] {
                tokens.push(t.to_string());
            }
            let v = Vocab::from_tokens(tokens).unwrap();
            let text = words.join(" ");
            let t = tokenize(&text, &v);
            prop_assert_eq!(t.words.len(), t.word_spans.len());
            prop_assert!(tiles(&t.word_spans, t.ids.len()));
            // Reconstructing each word from its pieces gives the word back.
            for (w, s) in t.words.iter().zip(&t.word_spans) {
                let rebuilt: String = t.ids[s.range()]
                    .iter()
                    .map(|&id| v.token(id).unwrap().trim_start_matches(CONTINUATION))
                    .collect();
                prop_assert_eq!(&rebuilt, w);
            }
        }

        /// Encoding is a pure function of its inputs.
        #[test]
        fn encode_is_deterministic(seedless in 0u8..4) {
            let v = test_vocab();
            let lex = test_lexicon();
            let pv = lex.phone_vocab();
            let texts = ["play a song", "turn the lights off", "doing hello", "a"];
            let u = build_paired(texts[seedless as usize], &v, &lex, &pv).unwrap();
            prop_assert_eq!(encode_pair(&u, 64).unwrap(), encode_pair(&u, 64).unwrap());
        }
    }
}
