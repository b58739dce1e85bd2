//! Labeled utterances for intent classification and slot filling.
//!
//! A dataset is line-delimited JSON, one utterance per line, with a text, an
//! intent label, and slots given either as `(name, value)` entries or as
//! per-word BIO tags (`O`, `B-name`, `I-name`).  The two representations are
//! interconvertible here: training derives BIO tags from slot entries when
//! only those are present, and slot-error evaluation reconstructs `(name,
//! value)` frames from predicted tag sequences.
//!
//! Label maps (intent names and tag names, each sorted) are frozen from the
//! training split and persisted beside checkpoints; encountering a label
//! outside the map — e.g. in a validation split — is an error rather than a
//! silent extension, so train/validation/test always share one id space.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{Lexicon, PhoneVocab};
use crate::textproc::{
    assemble_example, build_paired, truncate_to_fit, EncodedExample, Layout, TextError, Vocab,
};

/// Errors raised by dataset parsing, tag handling, and label lookup.
#[derive(Debug, Error)]
pub enum SluError {
    #[error("line {line}: malformed utterance record: {source}")]
    BadRecord {
        line: usize,
        source: serde_json::Error,
    },
    #[error("utterance {text:?}: {tags} tags for {words} words")]
    TagCount {
        text: String,
        tags: usize,
        words: usize,
    },
    #[error("utterance {text:?}: malformed tag {tag:?}")]
    BadTag { text: String, tag: String },
    #[error("utterance {text:?}: tag {tag:?} at word {word} continues nothing")]
    DanglingContinuation {
        text: String,
        tag: String,
        word: usize,
    },
    #[error("utterance {text:?}: slot {name}={value:?} matches no word span")]
    SlotNotFound {
        text: String,
        name: String,
        value: String,
    },
    #[error("unknown {kind} label {label:?} (not in the training label map)")]
    UnknownLabel { kind: &'static str, label: String },
    #[error("dataset contains no utterances")]
    Empty,
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One named slot with its surface value (whitespace-joined words).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub value: String,
}

impl Slot {
    pub fn new(name: impl Into<String>, value: impl Into<String>) -> Self {
        Slot {
            name: name.into(),
            value: value.into(),
        }
    }
}

/// One labeled utterance.  `slots` and `tags` are alternative slot encodings;
/// either (or both, when consistent) may be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SluExample {
    pub text: String,
    pub intent: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slots: Vec<Slot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
}

impl SluExample {
    /// Whitespace words of the utterance, the unit the BIO tags align to.
    pub fn words(&self) -> Vec<String> {
        self.text.split_whitespace().map(str::to_string).collect()
    }

    /// Per-word BIO tags: the stored tags when present (validated), else
    /// derived from the slot entries by matching each value against the
    /// words left-to-right.
    pub fn bio_tags(&self) -> Result<Vec<String>, SluError> {
        let words = self.words();
        match &self.tags {
            Some(tags) => {
                validate_bio(&self.text, &words, tags)?;
                Ok(tags.clone())
            }
            None => derive_bio(&self.text, &words, &self.slots),
        }
    }

    /// The `(name, value)` slot frame: stored entries when present, else
    /// decoded from the stored tags, else empty.
    pub fn frame(&self) -> Vec<Slot> {
        if !self.slots.is_empty() {
            return self.slots.clone();
        }
        match &self.tags {
            Some(tags) => decode_bio(&self.words(), tags),
            None => Vec::new(),
        }
    }
}

/// Splits a tag into its BIO marker and slot name; `O` has no name.
fn split_tag(tag: &str) -> Option<(char, Option<&str>)> {
    if tag == "O" {
        return Some(('O', None));
    }
    let name = tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-"))?;
    if name.is_empty() {
        return None;
    }
    Some((tag.as_bytes()[0] as char, Some(name)))
}

/// Strict well-formedness check for gold tag sequences: one tag per word,
/// `O`/`B-name`/`I-name` syntax, and every `I-name` continuing a span of the
/// same name.
pub fn validate_bio(text: &str, words: &[String], tags: &[String]) -> Result<(), SluError> {
    if tags.len() != words.len() {
        return Err(SluError::TagCount {
            text: text.to_string(),
            tags: tags.len(),
            words: words.len(),
        });
    }
    let mut open: Option<&str> = None;
    for (w, tag) in tags.iter().enumerate() {
        match split_tag(tag) {
            None => {
                return Err(SluError::BadTag {
                    text: text.to_string(),
                    tag: tag.clone(),
                })
            }
            Some(('O', _)) => open = None,
            Some(('B', name)) => open = name,
            Some(('I', name)) => {
                if open != name {
                    return Err(SluError::DanglingContinuation {
                        text: text.to_string(),
                        tag: tag.clone(),
                        word: w,
                    });
                }
            }
            Some(_) => unreachable!("split_tag yields O/B/I only"),
        }
    }
    Ok(())
}

/// Derives BIO tags from slot entries.  Each slot value is matched against
/// the words left-to-right as a contiguous, not-yet-tagged word run; slots
/// are processed in listed order, so duplicate values bind earliest-first.
pub fn derive_bio(text: &str, words: &[String], slots: &[Slot]) -> Result<Vec<String>, SluError> {
    let mut tags = vec!["O".to_string(); words.len()];
    let mut taken = vec![false; words.len()];
    for slot in slots {
        let value_words: Vec<&str> = slot.value.split_whitespace().collect();
        let found = (0..words.len().saturating_sub(value_words.len() - 1).max(0)).find(|&start| {
            !value_words.is_empty()
                && (0..value_words.len())
                    .all(|j| !taken[start + j] && words[start + j] == value_words[j])
        });
        match found {
            Some(start) => {
                for j in 0..value_words.len() {
                    taken[start + j] = true;
                    let marker = if j == 0 { "B" } else { "I" };
                    tags[start + j] = format!("{marker}-{}", slot.name);
                }
            }
            None => {
                return Err(SluError::SlotNotFound {
                    text: text.to_string(),
                    name: slot.name.clone(),
                    value: slot.value.clone(),
                })
            }
        }
    }
    Ok(tags)
}

/// Decodes a tag sequence into slot entries, leniently: an `I-name` that does
/// not continue a same-name span opens a new one, and anything unparseable
/// reads as `O`.  Used on model predictions, which carry no well-formedness
/// guarantee.
pub fn decode_bio(words: &[String], tags: &[String]) -> Vec<Slot> {
    let mut out = Vec::new();
    let mut current: Option<(String, Vec<String>)> = None;
    for (w, tag) in tags.iter().enumerate().take(words.len()) {
        let parsed = split_tag(tag);
        match parsed {
            Some(('B', Some(name))) => {
                if let Some((n, vs)) = current.take() {
                    out.push(Slot::new(n, vs.join(" ")));
                }
                current = Some((name.to_string(), vec![words[w].clone()]));
            }
            Some(('I', Some(name))) => match &mut current {
                Some((n, vs)) if n == name => vs.push(words[w].clone()),
                _ => {
                    if let Some((n, vs)) = current.take() {
                        out.push(Slot::new(n, vs.join(" ")));
                    }
                    current = Some((name.to_string(), vec![words[w].clone()]));
                }
            },
            _ => {
                if let Some((n, vs)) = current.take() {
                    out.push(Slot::new(n, vs.join(" ")));
                }
            }
        }
    }
    if let Some((n, vs)) = current.take() {
        out.push(Slot::new(n, vs.join(" ")));
    }
    out
}

/// Sorted bijection between label strings and dense ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    /// Builds a map from any label collection; duplicates collapse and the
    /// id order is the sorted name order, so the map is input-order
    /// independent.
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = labels.into_iter().map(Into::into).collect();
        LabelMap {
            names: set.into_iter().collect(),
        }
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.names
            .binary_search_by(|n| n.as_str().cmp(name))
            .ok()
            .map(|i| i as u32)
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Writes one label per line.
    pub fn write(&self, w: &mut impl Write) -> Result<(), SluError> {
        for name in &self.names {
            writeln!(w, "{name}")?;
        }
        Ok(())
    }

    /// Reads a one-label-per-line listing (blank lines ignored).
    pub fn read(r: impl BufRead) -> Result<Self, SluError> {
        let mut names = Vec::new();
        for line in r.lines() {
            let line = line?;
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                names.push(trimmed.to_string());
            }
        }
        Ok(LabelMap::from_labels(names))
    }

    pub fn write_to_path(&self, path: impl AsRef<Path>) -> Result<(), SluError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from_path(path: impl AsRef<Path>) -> Result<Self, SluError> {
        LabelMap::read(BufReader::new(File::open(path)?))
    }
}

/// Intent and tag label maps frozen from a training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SluLabels {
    pub intents: LabelMap,
    pub tags: LabelMap,
}

/// Collects every intent and BIO tag of the training split into label maps.
/// The `O` tag is always present even if no training utterance is slot-free.
pub fn build_label_maps(examples: &[SluExample]) -> Result<SluLabels, SluError> {
    if examples.is_empty() {
        return Err(SluError::Empty);
    }
    let mut intents = BTreeSet::new();
    let mut tags = BTreeSet::from(["O".to_string()]);
    for ex in examples {
        intents.insert(ex.intent.clone());
        tags.extend(ex.bio_tags()?);
    }
    Ok(SluLabels {
        intents: LabelMap::from_labels(intents),
        tags: LabelMap::from_labels(tags),
    })
}

/// An utterance encoded for fine-tuning: the id sequence (text-only layout,
/// or the paired layout when phone concatenation is requested), the gold
/// label ids, and the per-word phone ids kept available for the additive
/// phone-embedding path.
#[derive(Debug, Clone)]
pub struct EncodedSlu {
    pub example: EncodedExample,
    /// Words that survived truncation (a prefix of the utterance's words).
    pub words: Vec<String>,
    pub intent_id: u32,
    /// One tag id per surviving word.
    pub tag_ids: Vec<u32>,
    /// Joint-space phone ids per surviving word (dictionary lookup).
    pub phones_per_word: Vec<Vec<u32>>,
}

/// Encodes one labeled utterance against frozen vocabularies and label maps.
/// Truncation drops trailing whole words, and the labels and phone lists are
/// cut to match, so all per-word structures stay aligned.
pub fn encode_for_finetune(
    ex: &SluExample,
    vocab: &Vocab,
    lexicon: &Lexicon,
    phone_vocab: &PhoneVocab,
    labels: &SluLabels,
    max_seq_len: usize,
    concat_phones: bool,
) -> Result<EncodedSlu, SluError> {
    let intent_id = labels.intents.id(&ex.intent).ok_or(SluError::UnknownLabel {
        kind: "intent",
        label: ex.intent.clone(),
    })?;
    let tags = ex.bio_tags()?;

    let full = build_paired(&ex.text, vocab, lexicon, phone_vocab)?;
    let layout = if concat_phones {
        Layout::Paired
    } else {
        Layout::TextOnly
    };
    let t = truncate_to_fit(&full, max_seq_len, layout)?;
    let kept = t.words.len();

    let tag_ids = tags[..kept]
        .iter()
        .map(|tag| {
            labels.tags.id(tag).ok_or(SluError::UnknownLabel {
                kind: "slot tag",
                label: tag.clone(),
            })
        })
        .collect::<Result<Vec<u32>, SluError>>()?;
    let phones_per_word = t
        .word_phone_spans
        .iter()
        .map(|span| t.phone_ids[span.range()].to_vec())
        .collect();

    let empty = std::collections::BTreeMap::new();
    let example = match layout {
        Layout::Paired => assemble_example(
            &t.word_ids,
            &t.word_sub_spans,
            Some((&t.phone_ids, &t.word_phone_spans)),
            None,
            &empty,
            &empty,
        ),
        Layout::TextOnly => {
            assemble_example(&t.word_ids, &t.word_sub_spans, None, None, &empty, &empty)
        }
    };
    Ok(EncodedSlu {
        example,
        words: t.words.clone(),
        intent_id,
        tag_ids,
        phones_per_word,
    })
}

/// Reads a line-delimited dataset; blank lines are skipped and parse errors
/// carry 1-based line numbers.
pub fn read_dataset(r: impl BufRead) -> Result<Vec<SluExample>, SluError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: SluExample =
            serde_json::from_str(&line).map_err(|source| SluError::BadRecord {
                line: i + 1,
                source,
            })?;
        out.push(ex);
    }
    if out.is_empty() {
        return Err(SluError::Empty);
    }
    Ok(out)
}

pub fn read_dataset_path(path: impl AsRef<Path>) -> Result<Vec<SluExample>, SluError> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Writes a line-delimited dataset.
pub fn write_dataset(w: &mut impl Write, examples: &[SluExample]) -> Result<(), SluError> {
    for ex in examples {
        let line = serde_json::to_string(ex).expect("utterances serialize");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_dataset_path(
    path: impl AsRef<Path>,
    examples: &[SluExample],
) -> Result<(), SluError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, examples)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Lexicon;
    use crate::textproc::Vocab;

    fn ex(text: &str, intent: &str, slots: &[(&str, &str)]) -> SluExample {
        SluExample {
            text: text.into(),
            intent: intent.into(),
            slots: slots.iter().map(|(n, v)| Slot::new(*n, *v)).collect(),
            tags: None,
        }
    }

    #[test]
    fn derives_bio_tags_from_slot_entries() {
        let e = ex(
            "turn on the kitchen light",
            "lights_on",
            &[("device", "kitchen light")],
        );
        assert_eq!(
            e.bio_tags().unwrap(),
            vec!["O", "O", "O", "B-device", "I-device"]
        );
    }

    #[test]
    fn duplicate_slot_values_bind_left_to_right() {
        let e = ex(
            "light light",
            "x",
            &[("first", "light"), ("second", "light")],
        );
        assert_eq!(e.bio_tags().unwrap(), vec!["B-first", "B-second"]);
    }

    #[test]
    fn unmatched_slot_value_is_an_error() {
        let e = ex("play a song", "play", &[("artist", "sia")]);
        assert!(matches!(
            e.bio_tags(),
            Err(SluError::SlotNotFound { name, .. }) if name == "artist"
        ));
    }

    #[test]
    fn stored_tags_are_validated() {
        let mut e = ex("turn on", "x", &[]);
        e.tags = Some(vec!["O".into()]);
        assert!(matches!(e.bio_tags(), Err(SluError::TagCount { .. })));

        e.tags = Some(vec!["O".into(), "B".into()]);
        assert!(matches!(e.bio_tags(), Err(SluError::BadTag { .. })));

        e.tags = Some(vec!["I-device".into(), "O".into()]);
        assert!(matches!(
            e.bio_tags(),
            Err(SluError::DanglingContinuation { word: 0, .. })
        ));

        e.tags = Some(vec!["B-device".into(), "I-device".into()]);
        assert_eq!(e.bio_tags().unwrap().len(), 2);
    }

    #[test]
    fn bio_round_trip_recovers_the_frame() {
        let e = ex(
            "play thriller by michael jackson now",
            "play",
            &[("track", "thriller"), ("artist", "michael jackson")],
        );
        let tags = e.bio_tags().unwrap();
        let decoded = decode_bio(&e.words(), &tags);
        assert_eq!(
            decoded,
            vec![
                Slot::new("track", "thriller"),
                Slot::new("artist", "michael jackson")
            ]
        );
    }

    #[test]
    fn lenient_decode_tolerates_orphan_continuations() {
        let words: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let tags: Vec<String> = ["I-x", "I-x", "I-y"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            decode_bio(&words, &tags),
            vec![Slot::new("x", "a b"), Slot::new("y", "c")]
        );
    }

    #[test]
    fn label_map_is_sorted_and_input_order_independent() {
        let a = LabelMap::from_labels(["b", "a", "c", "a"]);
        let b = LabelMap::from_labels(["c", "a", "b"]);
        assert_eq!(a, b);
        assert_eq!(a.names(), &["a", "b", "c"]);
        assert_eq!(a.id("b"), Some(1));
        assert_eq!(a.id("z"), None);
        assert_eq!(a.name(2), Some("c"));
    }

    #[test]
    fn label_map_round_trips_through_text() {
        let m = LabelMap::from_labels(["play", "stop", "pause"]);
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let back = LabelMap::read(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn label_maps_cover_intents_and_tags_with_o_always_present() {
        let data = vec![
            ex("turn on the light", "lights_on", &[("device", "light")]),
            ex("stop", "stop", &[]),
        ];
        let labels = build_label_maps(&data).unwrap();
        assert_eq!(labels.intents.names(), &["lights_on", "stop"]);
        assert_eq!(labels.tags.names(), &["B-device", "O"]);
        assert!(build_label_maps(&[]).is_err());
    }

    #[test]
    fn dataset_round_trips_and_reports_bad_lines() {
        let data = vec![
            ex("play a song", "play", &[("item", "song")]),
            ex("stop", "stop", &[]),
        ];
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, data);

        let broken = b"{\"text\": \"ok\", \"intent\": \"a\"}\nnot json\n";
        assert!(matches!(
            read_dataset(&broken[..]),
            Err(SluError::BadRecord { line: 2, .. })
        ));
    }

    fn tiny_fixtures() -> (Vocab, Lexicon, PhoneVocab) {
        let vocab = Vocab::from_tokens(
            ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "play", "a", "song", "stop"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        let dict = "PLAY  P L EY1\nA  AH0\nSONG  S AO1 NG\nSTOP  S T AA1 P\n";
        let lexicon = Lexicon::parse_dictionary(dict.as_bytes()).unwrap();
        let phone_vocab = lexicon.phone_vocab();
        (vocab, lexicon, phone_vocab)
    }

    #[test]
    fn finetune_encoding_aligns_labels_words_and_phones() {
        let (vocab, lexicon, phone_vocab) = tiny_fixtures();
        let data = vec![
            ex("play a song", "play", &[("item", "song")]),
            ex("stop", "stop", &[]),
        ];
        let labels = build_label_maps(&data).unwrap();
        let enc =
            encode_for_finetune(&data[0], &vocab, &lexicon, &phone_vocab, &labels, 32, false)
                .unwrap();
        assert_eq!(enc.words, vec!["play", "a", "song"]);
        assert_eq!(enc.intent_id, labels.intents.id("play").unwrap());
        let o = labels.tags.id("O").unwrap();
        let b_item = labels.tags.id("B-item").unwrap();
        assert_eq!(enc.tag_ids, vec![o, o, b_item]);
        // Text-only layout: [CLS] play a song [SEP], no phone region.
        assert_eq!(enc.example.input_ids.len(), 5);
        assert_eq!(enc.example.phone_region.len(), 0);
        // Phones are still available for the additive path: "play" → 3.
        assert_eq!(enc.phones_per_word[0].len(), 3);
        assert!(enc.phones_per_word.iter().flatten().all(|&p| p >= vocab.len() as u32));
    }

    #[test]
    fn finetune_encoding_concat_mode_uses_paired_layout() {
        let (vocab, lexicon, phone_vocab) = tiny_fixtures();
        let data = vec![ex("play a song", "play", &[("item", "song")])];
        let labels = build_label_maps(&data).unwrap();
        let enc =
            encode_for_finetune(&data[0], &vocab, &lexicon, &phone_vocab, &labels, 32, true)
                .unwrap();
        // [CLS] 3 words [SEP] 7 phones [SEP] = 13 positions.
        assert_eq!(enc.example.input_ids.len(), 13);
        assert!(enc.example.phone_region.len() > 0);
    }

    #[test]
    fn unknown_labels_are_rejected_against_frozen_maps() {
        let (vocab, lexicon, phone_vocab) = tiny_fixtures();
        let train = vec![ex("play a song", "play", &[("item", "song")])];
        let labels = build_label_maps(&train).unwrap();

        let unseen_intent = ex("stop", "halt", &[]);
        assert!(matches!(
            encode_for_finetune(&unseen_intent, &vocab, &lexicon, &phone_vocab, &labels, 32, false),
            Err(SluError::UnknownLabel { kind: "intent", .. })
        ));

        let unseen_tag = ex("play a song", "play", &[("genre", "song")]);
        assert!(matches!(
            encode_for_finetune(&unseen_tag, &vocab, &lexicon, &phone_vocab, &labels, 32, false),
            Err(SluError::UnknownLabel { kind: "slot tag", .. })
        ));
    }

    #[test]
    fn truncation_keeps_prefix_alignment() {
        let (vocab, lexicon, phone_vocab) = tiny_fixtures();
        let train = vec![ex("play a song", "play", &[("item", "song")])];
        let labels = build_label_maps(&train).unwrap();
        // Room for [CLS] + 2 word tokens + [SEP] only.
        let enc = encode_for_finetune(
            &train[0], &vocab, &lexicon, &phone_vocab, &labels, 4, false,
        )
        .unwrap();
        assert_eq!(enc.words, vec!["play", "a"]);
        assert_eq!(enc.tag_ids.len(), 2);
        assert_eq!(enc.phones_per_word.len(), 2);
    }
}
