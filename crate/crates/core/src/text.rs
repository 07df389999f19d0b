//! Query tokenisation, subject extraction and attribute vocabularies.
//!
//! Part-of-speech comes from a closed lexicon that mirrors the corpus
//! template grammar; no statistical parser is involved.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use serde::{Deserialize, Serialize};

use crate::corpus::{Action, SceneConfig};
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pos {
    Determiner,
    Adjective,
    Noun,
    /// Content verb carrying a motion attribute ("grows", "walks").
    Verb,
    /// Verb without attribute content ("moves", "is").
    LightVerb,
    /// Direction particle carrying a motion attribute ("left", "up").
    Particle,
    Relative,
    Conjunction,
    Other,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    entries: BTreeMap<String, Pos>,
}

const DEFAULT_ENTRIES: &[(&str, Pos)] = &[
    ("the", Pos::Determiner),
    ("a", Pos::Determiner),
    ("an", Pos::Determiner),
    ("that", Pos::Relative),
    ("which", Pos::Relative),
    ("who", Pos::Relative),
    ("and", Pos::Conjunction),
    ("moves", Pos::LightVerb),
    ("is", Pos::LightVerb),
    ("goes", Pos::LightVerb),
    ("left", Pos::Particle),
    ("right", Pos::Particle),
    ("up", Pos::Particle),
    ("down", Pos::Particle),
    ("away", Pos::Particle),
    ("grows", Pos::Verb),
    ("shrinks", Pos::Verb),
    ("stays", Pos::Verb),
    ("walks", Pos::Verb),
    ("runs", Pos::Verb),
    ("jumps", Pos::Verb),
    ("stops", Pos::Verb),
    ("turns", Pos::Verb),
    ("rides", Pos::Verb),
    ("tall", Pos::Adjective),
    ("small", Pos::Adjective),
    ("big", Pos::Adjective),
    ("short", Pos::Adjective),
    ("red", Pos::Adjective),
    ("green", Pos::Adjective),
    ("blue", Pos::Adjective),
    ("yellow", Pos::Adjective),
    ("magenta", Pos::Adjective),
    ("cyan", Pos::Adjective),
    ("white", Pos::Adjective),
    ("orange", Pos::Adjective),
    ("purple", Pos::Adjective),
    ("gray", Pos::Adjective),
    ("black", Pos::Adjective),
    ("brown", Pos::Adjective),
    ("square", Pos::Noun),
    ("circle", Pos::Noun),
    ("triangle", Pos::Noun),
    ("diamond", Pos::Noun),
    ("man", Pos::Noun),
    ("woman", Pos::Noun),
    ("girl", Pos::Noun),
    ("boy", Pos::Noun),
    ("person", Pos::Noun),
    ("ball", Pos::Noun),
    ("car", Pos::Noun),
    ("dog", Pos::Noun),
];

impl Lexicon {
    pub fn builtin() -> Self {
        Self {
            entries: DEFAULT_ENTRIES
                .iter()
                .map(|&(w, p)| (w.to_string(), p))
                .collect(),
        }
    }

    /// Built-in lexicon extended with the words a scene configuration can emit.
    pub fn for_scene(cfg: &SceneConfig) -> Self {
        let mut lex = Self::builtin();
        for c in &cfg.colors {
            lex.insert(c, Pos::Adjective);
        }
        for s in &cfg.shapes {
            lex.insert(s, Pos::Noun);
        }
        for a in cfg.actions.iter().filter_map(|a| Action::from_phrase(a)) {
            let words: Vec<&str> = a.phrase().split(' ').collect();
            let (last, head) = words.split_last().unwrap();
            for w in head {
                lex.insert(w, Pos::LightVerb);
            }
            if !lex.entries.contains_key(*last) {
                lex.insert(last, Pos::Verb);
            }
        }
        lex
    }

    pub fn insert(&mut self, word: &str, pos: Pos) {
        self.entries.insert(word.to_lowercase(), pos);
    }

    pub fn tag(&self, word: &str) -> Pos {
        self.entries.get(word).copied().unwrap_or(Pos::Other)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSeq {
    /// Exactly `N_t` entries; padding uses [`PAD`].
    pub tokens: Vec<String>,
    /// `true` for real tokens.
    pub pad_mask: Vec<bool>,
    pub subject_span: (usize, usize),
    /// Input had more than `N_t` tokens and was cut.
    pub truncated: bool,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_real(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    pub fn real_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens
            .iter()
            .zip(&self.pad_mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t.as_str())
    }

    pub fn detokenize(&self) -> String {
        self.real_tokens().collect::<Vec<_>>().join(" ")
    }
}

fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Head noun of the first noun phrase.
fn find_subject(words: &[String], lex: &Lexicon) -> Option<usize> {
    words.iter().position(|w| lex.tag(w) == Pos::Noun)
}

/// Lowercase and split on whitespace/punctuation, then pad or truncate to `n_t`.
pub fn tokenize_with(text: &str, n_t: usize, lex: &Lexicon) -> Result<TokenSeq> {
    let words = split_words(text);
    if words.is_empty() {
        return Err(Error::Empty("query text"));
    }
    if n_t == 0 {
        return Err(Error::Config("token length must be >= 1".into()));
    }
    let subject = find_subject(&words, lex)
        .ok_or_else(|| Error::Text(format!("no subject noun in {:?}", text)))?;
    if subject >= n_t {
        return Err(Error::Text(format!(
            "subject at token {} would be truncated to {} tokens",
            subject, n_t
        )));
    }
    let truncated = words.len() > n_t;
    let n_real = words.len().min(n_t);
    let mut tokens: Vec<String> = words.into_iter().take(n_real).collect();
    tokens.resize(n_t, PAD.to_string());
    let mut pad_mask = vec![true; n_real];
    pad_mask.resize(n_t, false);
    Ok(TokenSeq {
        tokens,
        pad_mask,
        subject_span: (subject, subject),
        truncated,
    })
}

pub fn tokenize(text: &str, n_t: usize) -> Result<TokenSeq> {
    tokenize_with(text, n_t, &Lexicon::builtin())
}

/// Token range of the subject: the head noun (one token under the template grammar).
pub fn extract_subject(seq: &TokenSeq, lex: &Lexicon) -> Result<(usize, usize)> {
    let real: Vec<String> = seq.real_tokens().map(|s| s.to_string()).collect();
    find_subject(&real, lex)
        .map(|i| (i, i))
        .ok_or_else(|| Error::Text(format!("no subject noun in {:?}", seq.detokenize())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Appearance,
    Motion,
}

impl VocabKind {
    fn accepts(self, pos: Pos) -> bool {
        match self {
            VocabKind::Appearance => pos == Pos::Adjective,
            VocabKind::Motion => matches!(pos, Pos::Verb | Pos::Particle),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub kind: VocabKind,
    pub words: Vec<String>,
    pub min_count: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }
}

/// Attribute words of `kind` occurring at least `min_count` times, sorted.
pub fn build_vocabulary<S: AsRef<str>>(
    texts: &[S],
    kind: VocabKind,
    min_count: usize,
    lex: &Lexicon,
) -> Result<Vocabulary> {
    if texts.is_empty() {
        return Err(Error::Empty("vocabulary corpus"));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in texts {
        for w in split_words(t.as_ref()) {
            if kind.accepts(lex.tag(&w)) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    // BTreeMap iteration is already lexicographic
    let words: Vec<String> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .map(|(w, _)| w)
        .collect();
    if words.is_empty() {
        return Err(Error::Text(format!(
            "{:?} vocabulary is empty at min_count {}",
            kind, min_count
        )));
    }
    Ok(Vocabulary {
        kind,
        words,
        min_count,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeLabels {
    pub appearance: Vec<f64>,
    pub motion: Vec<f64>,
    /// No vocabulary word matched in one of the two vocabularies.
    pub empty: bool,
}

pub fn attribute_labels(seq: &TokenSeq, va: &Vocabulary, vm: &Vocabulary) -> AttributeLabels {
    let hot = |v: &Vocabulary| {
        let mut out = vec![0.0; v.len()];
        for t in seq.real_tokens() {
            if let Some(i) = v.index_of(t) {
                out[i] = 1.0;
            }
        }
        out
    };
    let appearance = hot(va);
    let motion = hot(vm);
    let empty = !appearance.contains(&1.0) || !motion.contains(&1.0);
    AttributeLabels {
        appearance,
        motion,
        empty,
    }
}

/// Token-to-row mapping for the learned word embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordIndex {
    /// Row 0 is [`PAD`], row 1 is [`UNK`].
    pub words: Vec<String>,
}

impl WordIndex {
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut set: Vec<String> = texts.iter().flat_map(|t| split_words(t.as_ref())).collect();
        set.sort();
        set.dedup();
        let mut words = vec![PAD.to_string(), UNK.to_string()];
        words.extend(set);
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        if token == PAD {
            return 0;
        }
        self.words[2..]
            .binary_search_by(|w| w.as_str().cmp(token))
            .map(|i| i + 2)
            .unwrap_or(1)
    }

    pub fn ids(&self, seq: &TokenSeq) -> Vec<usize> {
        seq.tokens.iter().map(|t| self.id(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, SceneConfig};

    fn vocab(kind: VocabKind, words: &[&str]) -> Vocabulary {
        Vocabulary {
            kind,
            words: words.iter().map(|s| s.to_string()).collect(),
            min_count: 1,
        }
    }

    #[test]
    fn pads_to_fixed_length() {
        let s = tokenize("the red square that moves right", 8).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s.n_real(), 6);
        assert_eq!(&s.tokens[6], PAD);
        assert_eq!(s.detokenize(), "the red square that moves right");
        assert!(!s.truncated);
    }

    #[test]
    fn punctuation_and_case_are_normalised() {
        let s = tokenize("The RED square, that moves right!", 8).unwrap();
        assert_eq!(s.detokenize(), "the red square that moves right");
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(tokenize("", 8), Err(Error::Empty(_))));
        assert!(tokenize("  ,, ", 8).is_err());
    }

    #[test]
    fn truncation_keeps_subject_or_fails() {
        let s = tokenize("the red square that moves right", 4).unwrap();
        assert!(s.truncated);
        assert_eq!(s.n_real(), 4);
        assert!(tokenize("the big red square", 3).is_err());
    }

    #[test]
    fn subject_is_head_noun() {
        let lex = Lexicon::builtin();
        let s = tokenize("the red square that moves right", 8).unwrap();
        assert_eq!(extract_subject(&s, &lex).unwrap(), (2, 2));
        let s = tokenize("the tall man walks", 8).unwrap();
        assert_eq!(extract_subject(&s, &lex).unwrap(), (2, 2));
        assert!(tokenize("red red red", 8).is_err());
        let seq = TokenSeq {
            tokens: vec!["red".into(); 3],
            pad_mask: vec![true; 3],
            subject_span: (0, 0),
            truncated: false,
        };
        assert!(extract_subject(&seq, &lex).is_err());
    }

    #[test]
    fn labels_follow_vocab_membership() {
        let va = vocab(VocabKind::Appearance, &["blue", "green", "red"]);
        let vm = vocab(VocabKind::Motion, &["left", "right"]);
        let s = tokenize("the red square that moves right", 8).unwrap();
        let l = attribute_labels(&s, &va, &vm);
        assert_eq!(l.appearance, vec![0.0, 0.0, 1.0]);
        assert_eq!(l.motion, vec![0.0, 1.0]);
        assert!(!l.empty);

        let s = tokenize("the circle", 8).unwrap();
        let l = attribute_labels(&s, &va, &vm);
        assert!(l.empty);
        assert!(l.appearance.iter().chain(&l.motion).all(|&x| x == 0.0));

        let s = tokenize("red and green ball moves", 8).unwrap();
        let l = attribute_labels(&s, &va, &vm);
        assert_eq!(l.appearance, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn vocabulary_from_templated_corpus() {
        let cfg = SceneConfig::default();
        let lex = Lexicon::for_scene(&cfg);
        let texts: Vec<String> = generate_corpus(&cfg, 200, 1)
            .unwrap()
            .into_iter()
            .map(|s| s.text)
            .collect();
        let va = build_vocabulary(&texts, VocabKind::Appearance, 1, &lex).unwrap();
        assert_eq!(va.words, vec!["blue", "green", "red", "yellow"]);
        let vm = build_vocabulary(&texts, VocabKind::Motion, 1, &lex).unwrap();
        assert_eq!(vm.words, cfg.motion_words());
        assert!(build_vocabulary(&texts, VocabKind::Appearance, 201, &lex).is_err());
        let none: [&str; 0] = [];
        assert!(build_vocabulary(&none, VocabKind::Appearance, 1, &lex).is_err());
    }

    #[test]
    fn word_index_maps_unknown_tokens() {
        let idx = WordIndex::build(&["the red square"]);
        assert_eq!(idx.id(PAD), 0);
        assert_eq!(idx.id("zebra"), 1);
        assert_eq!(idx.words[idx.id("red")], "red");
    }
}
