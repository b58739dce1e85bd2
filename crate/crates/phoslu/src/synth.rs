//! Synthetic desk-scale world for end-to-end experiments.
//!
//! The world plants four exact-homophone twin pairs (e.g. *sun*/*son*, both
//! `S AH N`) in a small pronunciation dictionary.  Labeled utterances and
//! the intent-bearing templates use only the first form of each pair; the
//! second forms appear in the pre-training corpus exclusively inside private
//! nonsense contexts, so nothing in the text distribution links a twin to
//! its partner — the shared phone sequence is the only bridge.  A test set
//! "corrupted" by swapping each word for its nearest phone-sequence
//! neighbour (its twin, at distance zero) then separates models that learned
//! the phonetic link from models that did not: on corrupted text the intent
//! keyword is a word the labeled split never contained.
//!
//! Generation is deterministic: utterance `i` draws from the stream
//! `(seed, SYNTH, i)`, so corpora are reproducible and extendable without
//! disturbing earlier entries.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::eval::align_words;
use crate::lexicon::{Lexicon, LexiconError, PhoneVocab};
use crate::rng::{domain, stream};
use crate::slu::{Slot, SluExample};
use crate::textproc::{TextError, Vocab, SPECIALS};

/// Errors raised while generating the synthetic world.
#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad synthesis config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Text(#[from] TextError),
}

/// The four intents, each carried by the first form of a homophone pair.
const INTENTS: [&str; 4] = ["weather", "ocean", "evening", "garden"];

/// Twin keyword pairs `(labeled form, homophone form)`; the two forms share
/// a pronunciation exactly.
const TWINS: [(&str, &str); 4] = [
    ("sun", "son"),
    ("sea", "see"),
    ("night", "knight"),
    ("flower", "flour"),
];

/// Sentence frames of the labeled split; `{}` takes the intent keyword.
const TEMPLATES: [(&str, &str, &str); 4] = [
    ("show the", "report", "show the {} report"),
    ("open the", "panel", "open the {} panel"),
    ("start the", "mode", "start the {} mode"),
    ("check the", "status", "check the {} status"),
];

/// Words shared by every template; they carry no intent information.
const CARRIERS: [&str; 9] = [
    "show", "open", "start", "check", "the", "report", "panel", "mode", "status",
];

/// Nonsense context words: two per twin form, used nowhere else, so each
/// form's textual neighbourhood is private to it.
const FILLERS: [&str; 16] = [
    "zibble", "quorf", "trandle", "mivvy", "plonk", "gristle", "fandor", "welkin", "snib",
    "crome", "dapple", "yonder", "brill", "tusk", "vex", "jorum",
];

/// Pronunciation dictionary source; twins share lines' phone sequences.
const DICTIONARY: &str = "\
sun S AH N
son S AH N
sea S IY
see S IY
night N AY T
knight N AY T
flower F L AW ER
flour F L AW ER
show SH OW
open OW P AH N
start S T AA R T
check CH EH K
the DH AH
report R IH P AO R T
panel P AE N AH L
mode M OW D
status S T AE T AH S
zibble Z IH B AH L
quorf K W AO R F
trandle T R AE N D AH L
mivvy M IH V IY
plonk P L AA NG K
gristle G R IH S AH L
fandor F AE N D AO R
welkin W EH L K IH N
snib S N IH B
crome K R OW M
dapple D AE P AH L
yonder Y AA N D ER
brill B R IH L
tusk T AH S K
vex V EH K S
jorum JH AO R AH M
";

/// Size and seed of a generated world.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Number of pre-training utterances to sample.
    pub pretrain_utterances: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            pretrain_utterances: 128,
        }
    }
}

/// A complete generated world: vocabularies, corpora, and labeled splits.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    /// Pronunciation dictionary source text.
    pub dictionary: String,
    pub vocab: Vocab,
    pub lexicon: Lexicon,
    pub phone_vocab: PhoneVocab,
    /// `(labeled form, homophone form)` keyword pairs.
    pub twin_pairs: Vec<(String, String)>,
    /// Pre-training utterances (plain text, one utterance per entry).
    pub pretrain_texts: Vec<String>,
    /// Labeled training split: every intent crossed with every template.
    pub slu_train: Vec<SluExample>,
    /// Clean evaluation split (same distribution as training).
    pub slu_test: Vec<SluExample>,
    /// The evaluation split with every keyword swapped for its homophone.
    pub slu_test_corrupted: Vec<SluExample>,
}

/// Builds the labeled example for intent `p` and template `t` with the
/// given keyword surface form.
fn labeled_example(p: usize, t: usize, keyword: &str) -> SluExample {
    let (prefix, suffix, _) = TEMPLATES[t];
    SluExample {
        text: format!("{prefix} {keyword} {suffix}"),
        intent: INTENTS[p].to_string(),
        slots: vec![Slot {
            name: "topic".to_string(),
            value: keyword.to_string(),
        }],
        tags: None,
    }
}

/// The two private context words of twin form `form` (0..4 labeled forms,
/// then 4..8 homophone forms).
fn form_fillers(form: usize) -> [&'static str; 2] {
    [FILLERS[2 * form], FILLERS[2 * form + 1]]
}

/// Generates the world for `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthWorld, SynthError> {
    if cfg.pretrain_utterances == 0 {
        return Err(SynthError::BadConfig(
            "pretrain_utterances must be positive".into(),
        ));
    }
    let lexicon = Lexicon::parse_dictionary(DICTIONARY.as_bytes())?;
    let phone_vocab = lexicon.phone_vocab();
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(CARRIERS.iter().map(|s| s.to_string()));
    for (a, b) in TWINS {
        tokens.push(a.to_string());
        tokens.push(b.to_string());
    }
    tokens.extend(FILLERS.iter().map(|s| s.to_string()));
    let vocab = Vocab::from_tokens(tokens)?;

    let mut pretrain_texts = Vec::with_capacity(cfg.pretrain_utterances);
    for i in 0..cfg.pretrain_utterances {
        let mut rng = stream(cfg.seed, domain::SYNTH, i as u64);
        let pair = rng.gen_range(0..TWINS.len());
        let kind = rng.gen_range(0..4u8);
        let text = match kind {
            // Intent-bearing template with the labeled form.
            0 | 1 => {
                let t = rng.gen_range(0..TEMPLATES.len());
                let (prefix, suffix, _) = TEMPLATES[t];
                format!("{prefix} {} {suffix}", TWINS[pair].0)
            }
            // Nonsense context around the labeled form.
            2 => noise_text(TWINS[pair].0, form_fillers(pair), &mut rng),
            // Nonsense context around the homophone form; its only contexts.
            _ => noise_text(TWINS[pair].1, form_fillers(4 + pair), &mut rng),
        };
        pretrain_texts.push(text);
    }

    let mut slu_train = Vec::new();
    for p in 0..INTENTS.len() {
        for t in 0..TEMPLATES.len() {
            slu_train.push(labeled_example(p, t, TWINS[p].0));
        }
    }
    let slu_test = slu_train.clone();
    let neighbors = nearest_phone_neighbors(&lexicon);
    let slu_test_corrupted = slu_test
        .iter()
        .map(|ex| corrupt_example(ex, &neighbors, 0))
        .collect();

    Ok(SynthWorld {
        dictionary: DICTIONARY.to_string(),
        vocab,
        lexicon,
        phone_vocab,
        twin_pairs: TWINS
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect(),
        pretrain_texts,
        slu_train,
        slu_test,
        slu_test_corrupted,
    })
}

/// A three-word nonsense utterance placing `keyword` at a random position
/// among its two private context words.
fn noise_text(keyword: &str, fillers: [&str; 2], rng: &mut impl Rng) -> String {
    let (f1, f2) = if rng.gen_bool(0.5) {
        (fillers[0], fillers[1])
    } else {
        (fillers[1], fillers[0])
    };
    match rng.gen_range(0..3u8) {
        0 => format!("{keyword} {f1} {f2}"),
        1 => format!("{f1} {keyword} {f2}"),
        _ => format!("{f1} {f2} {keyword}"),
    }
}

/// Phone-sequence edit distance between two dictionary entries.
pub fn phone_distance(a: &[String], b: &[String]) -> usize {
    align_words(a, b).1
}

/// For every dictionary word, its nearest other dictionary word by
/// phone-sequence edit distance; ties resolve to the lexicographically
/// smallest neighbour.
pub fn nearest_phone_neighbors(lexicon: &Lexicon) -> BTreeMap<String, (String, usize)> {
    let entries: Vec<(&str, &[String])> = lexicon.iter().collect();
    let mut out = BTreeMap::new();
    for &(word, phones) in &entries {
        let mut best: Option<(&str, usize)> = None;
        for &(other, other_phones) in &entries {
            if other == word {
                continue;
            }
            let d = phone_distance(phones, other_phones);
            let closer = match best {
                None => true,
                Some((bw, bd)) => d < bd || (d == bd && other < bw),
            };
            if closer {
                best = Some((other, d));
            }
        }
        if let Some((neighbor, d)) = best {
            out.insert(word.to_string(), (neighbor.to_string(), d));
        }
    }
    out
}

/// Replaces every word whose nearest phone neighbour lies within
/// `max_distance` by that neighbour; other words pass through.
pub fn corrupt_text(
    text: &str,
    neighbors: &BTreeMap<String, (String, usize)>,
    max_distance: usize,
) -> String {
    text.split_whitespace()
        .map(|w| match neighbors.get(w) {
            Some((n, d)) if *d <= max_distance => n.as_str(),
            _ => w,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Corrupts an utterance and its slot values consistently: the text and the
/// slot-value words undergo the same substitution, and the intent label is
/// kept, so the corrupted example scores a model's robustness to
/// homophone-confused input against the original gold intent.
pub fn corrupt_example(
    ex: &SluExample,
    neighbors: &BTreeMap<String, (String, usize)>,
    max_distance: usize,
) -> SluExample {
    SluExample {
        text: corrupt_text(&ex.text, neighbors, max_distance),
        intent: ex.intent.clone(),
        slots: ex
            .slots
            .iter()
            .map(|s| Slot {
                name: s.name.clone(),
                value: corrupt_text(&s.value, neighbors, max_distance),
            })
            .collect(),
        tags: ex.tags.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::build_paired;
    use std::collections::BTreeSet;

    #[test]
    fn twins_share_their_phone_sequences_exactly() {
        let world = generate(&SynthConfig::default()).unwrap();
        for (a, b) in &world.twin_pairs {
            assert_eq!(
                world.lexicon.lookup(a),
                world.lexicon.lookup(b),
                "{a}/{b} must be exact homophones"
            );
            assert_ne!(a, b);
        }
    }

    #[test]
    fn nearest_neighbour_of_each_twin_is_its_partner_at_distance_zero() {
        let world = generate(&SynthConfig::default()).unwrap();
        let neighbors = nearest_phone_neighbors(&world.lexicon);
        for (a, b) in &world.twin_pairs {
            assert_eq!(neighbors[a], (b.clone(), 0));
            assert_eq!(neighbors[b], (a.clone(), 0));
        }
        // No carrier or filler accidentally collides with anything.
        for w in CARRIERS.iter().chain(FILLERS.iter()) {
            assert!(neighbors[*w].1 > 0, "{w} has an unintended homophone");
        }
    }

    #[test]
    fn corruption_swaps_exactly_the_twin_keywords() {
        let world = generate(&SynthConfig::default()).unwrap();
        let neighbors = nearest_phone_neighbors(&world.lexicon);
        assert_eq!(
            corrupt_text("show the sun report", &neighbors, 0),
            "show the son report"
        );
        assert_eq!(
            corrupt_text("check the flour status", &neighbors, 0),
            "check the flower status"
        );
        for (clean, corrupted) in world.slu_test.iter().zip(&world.slu_test_corrupted) {
            assert_eq!(clean.intent, corrupted.intent);
            assert_ne!(clean.text, corrupted.text, "keyword must have moved");
            // The corrupted example stays self-consistent: its slot value
            // appears in its text, so BIO tags derive cleanly.
            let tags = corrupted.bio_tags().unwrap();
            assert!(tags.iter().any(|t| t == "B-topic"));
        }
    }

    #[test]
    fn labeled_split_covers_every_intent_and_template() {
        let world = generate(&SynthConfig::default()).unwrap();
        assert_eq!(world.slu_train.len(), 16);
        let intents: BTreeSet<&str> =
            world.slu_train.iter().map(|e| e.intent.as_str()).collect();
        assert_eq!(intents.len(), 4);
        let texts: BTreeSet<&str> = world.slu_train.iter().map(|e| e.text.as_str()).collect();
        assert_eq!(texts.len(), 16, "all template crossings distinct");
        // Labeled text never contains a homophone form.
        for ex in &world.slu_train {
            for (_, b) in &world.twin_pairs {
                assert!(!ex.text.split_whitespace().any(|w| w == b));
            }
        }
    }

    #[test]
    fn homophone_forms_appear_only_inside_their_private_contexts() {
        let cfg = SynthConfig {
            seed: 3,
            pretrain_utterances: 400,
        };
        let world = generate(&cfg).unwrap();
        let mut b_seen = BTreeSet::new();
        for (pair, (_, b)) in world.twin_pairs.iter().enumerate() {
            let allowed: BTreeSet<&str> = form_fillers(4 + pair).into_iter().collect();
            for text in &world.pretrain_texts {
                let words: Vec<&str> = text.split_whitespace().collect();
                if words.contains(&b.as_str()) {
                    b_seen.insert(b.clone());
                    for w in words {
                        assert!(
                            w == b || allowed.contains(w),
                            "{b} co-occurred with {w} in {text:?}"
                        );
                    }
                }
            }
        }
        // With 400 draws every homophone form actually occurred.
        assert_eq!(b_seen.len(), 4);
    }

    #[test]
    fn every_generated_utterance_encodes_against_the_world_vocabularies() {
        let world = generate(&SynthConfig {
            seed: 1,
            pretrain_utterances: 64,
        })
        .unwrap();
        for text in &world.pretrain_texts {
            let u = build_paired(text, &world.vocab, &world.lexicon, &world.phone_vocab).unwrap();
            assert!(u.validate());
            // No out-of-dictionary word slipped in.
            for word in text.split_whitespace() {
                assert!(world.lexicon.contains(word), "{word} missing from dictionary");
                assert!(world.vocab.id(word).is_some(), "{word} missing from vocab");
            }
        }
        for ex in world.slu_train.iter().chain(&world.slu_test_corrupted) {
            build_paired(&ex.text, &world.vocab, &world.lexicon, &world.phone_vocab).unwrap();
        }
    }

    #[test]
    fn generation_is_deterministic_and_stream_indexed() {
        let cfg = SynthConfig {
            seed: 9,
            pretrain_utterances: 40,
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.pretrain_texts, b.pretrain_texts);
        assert_eq!(a.slu_train, b.slu_train);
        // A longer run extends the shorter one without disturbing it.
        let longer = generate(&SynthConfig {
            seed: 9,
            pretrain_utterances: 60,
        })
        .unwrap();
        assert_eq!(&longer.pretrain_texts[..40], &a.pretrain_texts[..]);
        // A different seed moves the corpus.
        let other = generate(&SynthConfig {
            seed: 10,
            pretrain_utterances: 40,
        })
        .unwrap();
        assert_ne!(a.pretrain_texts, other.pretrain_texts);
    }

    #[test]
    fn zero_utterances_is_rejected() {
        let err = generate(&SynthConfig {
            seed: 0,
            pretrain_utterances: 0,
        })
        .unwrap_err();
        assert!(matches!(err, SynthError::BadConfig(_)));
    }
}
