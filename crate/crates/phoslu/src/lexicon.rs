//! Pronunciation lexicon: parsing a CMU-style dictionary and mapping words to
//! phone label sequences.
//!
//! The dictionary format is one entry per line, `WORD  P1 P2 ...`, with `;;;`
//! comment lines and `WORD(2)`-style alternate pronunciations. Only the first
//! listed pronunciation of a word is kept; vowel stress digits (`AH0` → `AH`)
//! are stripped so that the phone inventory stays small; lookup is
//! case-insensitive. Words absent from the dictionary resolve to the single
//! reserved label `<UNK>`, which is itself a member of the phone vocabulary
//! and receives a trained embedding like any real phone.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;

use thiserror::Error;

/// Reserved phone-vocabulary symbol for out-of-dictionary words.
pub const PHONE_UNK: &str = "<UNK>";
/// Reserved phone-vocabulary padding symbol.
pub const PHONE_PAD: &str = "[PAD]";
/// Reserved phone-vocabulary mask symbol, substituted during phone masking.
pub const PHONE_MASK: &str = "[MASK]";

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("line {line}: dictionary entry has a word but no phones")]
    MalformedEntry { line: usize },
    #[error("dictionary contains no entries")]
    Empty,
    #[error("unknown phone symbol {0:?} (not in the phone vocabulary)")]
    UnknownPhone(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Word → phone-sequence mapping derived from a pronunciation dictionary.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
    unk_seq: Vec<String>,
}

impl Lexicon {
    /// Parses a CMU-format dictionary.
    ///
    /// Skips `;;;` comments and blank lines, keeps the first pronunciation of
    /// each word (alternates `WORD(n)` are dropped), strips stress digits,
    /// and lowercases words. A line with a word but no phones is an error
    /// naming the 1-based line number; a stream with no entries at all is an
    /// error.
    pub fn parse_dictionary(reader: impl BufRead) -> Result<Self, LexiconError> {
        let mut entries = BTreeMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with(";;;") {
                continue;
            }
            let mut fields = trimmed.split_whitespace();
            let word = fields.next().expect("non-empty line has a first field");
            let phones: Vec<String> = fields.map(strip_stress).collect();
            if phones.is_empty() {
                return Err(LexiconError::MalformedEntry { line: idx + 1 });
            }
            if is_alternate(word) {
                continue;
            }
            entries.entry(word.to_lowercase()).or_insert(phones);
        }
        if entries.is_empty() {
            return Err(LexiconError::Empty);
        }
        Ok(Self { entries, unk_seq: vec![PHONE_UNK.to_string()] })
    }

    /// Returns the phone sequence for `word` (case-insensitive), or the
    /// single-label `<UNK>` sequence when the word has no entry.
    pub fn lookup(&self, word: &str) -> &[String] {
        debug_assert!(!word.is_empty(), "lookup requires a non-empty word");
        self.entries.get(&word.to_lowercase()).map(Vec::as_slice).unwrap_or(&self.unk_seq)
    }

    /// True when the word has a dictionary entry (case-insensitive).
    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(&word.to_lowercase())
    }

    /// Number of distinct words.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Iterates `(word, phones)` in sorted word order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.entries.iter().map(|(w, p)| (w.as_str(), p.as_slice()))
    }

    /// Fraction of `words` that resolve to `<UNK>` (0.0 for an empty input).
    /// Diagnostic mirroring the out-of-dictionary rate of a corpus.
    pub fn unk_rate<'a>(&self, words: impl IntoIterator<Item = &'a str>) -> f64 {
        let mut total = 0usize;
        let mut unk = 0usize;
        for w in words {
            total += 1;
            if !self.contains(w) {
                unk += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            unk as f64 / total as f64
        }
    }

    /// The phone vocabulary induced by this lexicon: reserved symbols first,
    /// then the observed base phones in sorted order.
    pub fn phone_vocab(&self) -> PhoneVocab {
        let observed: BTreeSet<&str> =
            self.entries.values().flat_map(|p| p.iter().map(String::as_str)).collect();
        let mut symbols: Vec<String> =
            vec![PHONE_PAD.to_string(), PHONE_MASK.to_string(), PHONE_UNK.to_string()];
        symbols.extend(observed.into_iter().map(String::from));
        PhoneVocab::from_symbols(symbols).expect("induced vocabulary has no duplicates")
    }
}

/// Ordered phone symbol set; the line number of a symbol in the on-disk
/// listing is its index.
#[derive(Debug, Clone)]
pub struct PhoneVocab {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl PhoneVocab {
    /// Builds the vocabulary from an explicit symbol order. The reserved
    /// symbols `[PAD]`, `[MASK]`, `<UNK>` must be present.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self, LexiconError> {
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(LexiconError::UnknownPhone(format!("duplicate symbol {s}")));
            }
        }
        for reserved in [PHONE_PAD, PHONE_MASK, PHONE_UNK] {
            if !index.contains_key(reserved) {
                return Err(LexiconError::UnknownPhone(reserved.to_string()));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Loads a one-symbol-per-line listing.
    pub fn read(reader: impl BufRead) -> Result<Self, LexiconError> {
        let mut symbols = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let s = line.trim();
            if !s.is_empty() {
                symbols.push(s.to_string());
            }
        }
        Self::from_symbols(symbols)
    }

    /// Writes the one-symbol-per-line listing; `read` restores the same
    /// vocabulary with the same indices.
    pub fn write(&self, mut writer: impl std::io::Write) -> std::io::Result<()> {
        for s in &self.symbols {
            writeln!(writer, "{s}")?;
        }
        Ok(())
    }

    pub fn id(&self, symbol: &str) -> Result<u32, LexiconError> {
        self.index.get(symbol).copied().ok_or_else(|| LexiconError::UnknownPhone(symbol.to_string()))
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        self.index[PHONE_PAD]
    }

    pub fn mask_id(&self) -> u32 {
        self.index[PHONE_MASK]
    }

    pub fn unk_id(&self) -> u32 {
        self.index[PHONE_UNK]
    }

    /// Ids of real phones (everything except the three reserved symbols),
    /// the draw set for random phone substitution.
    pub fn substitutable_ids(&self) -> Vec<u32> {
        self.symbols
            .iter()
            .enumerate()
            .filter(|(_, s)| ![PHONE_PAD, PHONE_MASK, PHONE_UNK].contains(&s.as_str()))
            .map(|(i, _)| i as u32)
            .collect()
    }
}

/// Removes trailing stress digits: `AH0` → `AH`, `EY1` → `EY`.
fn strip_stress(token: &str) -> String {
    token.trim_end_matches(|c: char| c.is_ascii_digit()).to_string()
}

/// True for alternate-pronunciation entries like `WORD(2)`.
fn is_alternate(word: &str) -> bool {
    if let Some(open) = word.rfind('(') {
        let inner = &word[open + 1..];
        inner.ends_with(')') && inner[..inner.len() - 1].chars().all(|c| c.is_ascii_digit())
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    // Entries copied verbatim from the public CMU pronouncing dictionary.
    const CMU_SAMPLE: &str = "\
;;; # CMUdict  -- Major Version: 0.07
A  AH0
A(2)  EY1
HELLO  HH AH0 L OW1
LIGHTS  L AY1 T S
OFF  AO1 F
PLAY  P L EY1
SONG  S AO1 NG
THE  DH AH0
THE(2)  DH AH1
THE(3)  DH IY0
TURN  T ER1 N
";

    fn sample() -> Lexicon {
        Lexicon::parse_dictionary(Cursor::new(CMU_SAMPLE)).unwrap()
    }

    #[test]
    fn strips_stress_digits() {
        let lex = sample();
        assert_eq!(lex.lookup("hello"), ["HH", "AH", "L", "OW"]);
        assert_eq!(lex.lookup("play"), ["P", "L", "EY"]);
        assert_eq!(lex.lookup("song"), ["S", "AO", "NG"]);
    }

    #[test]
    fn first_pronunciation_wins() {
        let lex = sample();
        assert_eq!(lex.lookup("a"), ["AH"]);
        assert_eq!(lex.lookup("the"), ["DH", "AH"]);
    }

    #[test]
    fn lookup_is_case_insensitive() {
        let lex = sample();
        assert_eq!(lex.lookup("HELLO"), lex.lookup("hello"));
        assert_eq!(lex.lookup("Hello"), lex.lookup("hello"));
    }

    #[test]
    fn oov_resolves_to_unk() {
        let lex = sample();
        assert_eq!(lex.lookup("zzyzx"), [PHONE_UNK]);
    }

    #[test]
    fn malformed_entry_names_line() {
        let text = "HELLO  HH AH0 L OW1\nBROKEN\n";
        match Lexicon::parse_dictionary(Cursor::new(text)) {
            Err(LexiconError::MalformedEntry { line }) => assert_eq!(line, 2),
            other => panic!("expected malformed-entry error, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_comment_only_streams_fail() {
        assert!(matches!(Lexicon::parse_dictionary(Cursor::new("")), Err(LexiconError::Empty)));
        assert!(matches!(
            Lexicon::parse_dictionary(Cursor::new(";;; nothing here\n")),
            Err(LexiconError::Empty)
        ));
    }

    #[test]
    fn no_stored_symbol_ends_in_digit() {
        let lex = sample();
        for (_, phones) in lex.iter() {
            for p in phones {
                assert!(!p.ends_with(|c: char| c.is_ascii_digit()), "unstripped stress in {p}");
            }
        }
    }

    #[test]
    fn unk_rate_counts_oov_tokens() {
        let lex = sample();
        // 2 of 8 tokens miss the dictionary.
        let words = ["turn", "the", "lights", "off", "zzz", "play", "qqq", "song"];
        assert_eq!(lex.unk_rate(words), 0.25);
        assert_eq!(lex.unk_rate([]), 0.0);
    }

    #[test]
    fn phone_vocab_reserved_then_sorted() {
        let vocab = sample().phone_vocab();
        assert_eq!(vocab.symbol(vocab.pad_id()), Some(PHONE_PAD));
        assert_eq!(vocab.symbol(vocab.mask_id()), Some(PHONE_MASK));
        assert_eq!(vocab.symbol(vocab.unk_id()), Some(PHONE_UNK));
        let base: Vec<&str> = (3..vocab.len() as u32).map(|i| vocab.symbol(i).unwrap()).collect();
        let mut sorted = base.clone();
        sorted.sort_unstable();
        assert_eq!(base, sorted);
        assert!(base.contains(&"HH") && base.contains(&"NG"));
        assert!(vocab.substitutable_ids().iter().all(|&i| i >= 3));
    }

    #[test]
    fn phone_vocab_listing_round_trips() {
        let vocab = sample().phone_vocab();
        let mut buf = Vec::new();
        vocab.write(&mut buf).unwrap();
        let reread = PhoneVocab::read(Cursor::new(buf)).unwrap();
        assert_eq!(reread.len(), vocab.len());
        for i in 0..vocab.len() as u32 {
            assert_eq!(reread.symbol(i), vocab.symbol(i));
        }
    }

    #[test]
    fn duplicate_symbol_rejected() {
        let res = PhoneVocab::from_symbols(vec![
            PHONE_PAD.into(),
            PHONE_MASK.into(),
            PHONE_UNK.into(),
            "AA".into(),
            "AA".into(),
        ]);
        assert!(res.is_err());
    }
}
