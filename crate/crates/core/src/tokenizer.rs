//! Word-level tokenizer with fixed special ids.
//!
//! Text is lowercased and split on whitespace; every character that is
//! neither alphanumeric nor whitespace becomes a token of its own.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercased word and punctuation tokens of `text`.
pub fn normalize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else if c.is_alphanumeric() {
            word.push(c);
        } else {
            flush(&mut word, &mut tokens);
            tokens.push(c.to_string());
        }
    }
    flush(&mut word, &mut tokens);
    tokens
}

fn flush(word: &mut String, tokens: &mut Vec<String>) {
    if !word.is_empty() {
        tokens.push(std::mem::take(word));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    /// Tokens with frequency ≥ `min_freq`, most frequent first (ties in
    /// lexicographic order), truncated so the vocab including specials has at
    /// most `max_size` entries.
    pub fn build<'a, I>(corpus: I, min_freq: usize, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if min_freq < 1 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        if max_size < SPECIALS.len() + 1 {
            return Err(Error::Config(format!("max_size must be at least {}", SPECIALS.len() + 1)));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut texts = 0;
        for text in corpus {
            texts += 1;
            for tok in normalize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if texts == 0 {
            return Err(Error::Corpus("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - SPECIALS.len());
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    /// Specials followed by `tokens` in order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        Self::try_from(SPECIALS.iter().map(|s| s.to_string()).chain(tokens).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, text: &str, add_bos_eos: bool) -> Vec<usize> {
        let mut ids = Vec::new();
        if add_bos_eos {
            ids.push(BOS_ID);
        }
        ids.extend(normalize(text).iter().map(|t| self.id(t).unwrap_or(UNK_ID)));
        if add_bos_eos {
            ids.push(EOS_ID);
        }
        ids
    }

    /// Space-joined tokens. Pad, bos and eos are dropped; unk renders as
    /// `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::Index { what: "token id", index: id, len: self.len() })?;
            if !matches!(id, PAD_ID | BOS_ID | EOS_ID) {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }

    /// Like [`Vocab::decode`], but ids past the vocabulary (possible when
    /// the model embeds more rows than the vocab has) render as `<unk>`.
    pub fn decode_lossy(&self, ids: &[usize]) -> String {
        let mapped: Vec<usize> = ids.iter().map(|&id| if id < self.len() { id } else { UNK_ID }).collect();
        self.decode(&mapped).expect("ids are in range")
    }

    /// One token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        Self::try_from(body.split('\n').map(str::to_string).collect::<Vec<_>>())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(id_to_token: Vec<String>) -> Result<Self> {
        if id_to_token.len() < SPECIALS.len() || id_to_token[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Config(format!("vocabulary must start with {SPECIALS:?}")));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {t:?} at id {i}")));
            }
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { id_to_token, token_to_id })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.id_to_token
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_orders_by_frequency_then_lexicographic() {
        let v = Vocab::build(["a a b"], 1, 100).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<bos>", "<eos>", "<unk>", "a", "b"]);
        let v = Vocab::build(["c b", "b c a"], 1, 100).unwrap();
        assert_eq!(&v.tokens()[4..], &["b", "c", "a"]);
    }

    #[test]
    fn build_applies_threshold_and_cap() {
        let v = Vocab::build(["x"], 2, 10).unwrap();
        assert_eq!(v.len(), 4);
        let v = Vocab::build(["a a a b b c"], 1, 5).unwrap();
        assert_eq!(&v.tokens()[4..], &["a"]);
        assert!(Vocab::build(Vec::<&str>::new(), 1, 10).is_err());
        assert!(Vocab::build(["a"], 0, 10).is_err());
        assert!(Vocab::build(["a"], 1, 4).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let corpus = ["the cat sat on the mat .", "a dog , the cat !"];
        assert_eq!(Vocab::build(corpus, 1, 50).unwrap(), Vocab::build(corpus, 1, 50).unwrap());
    }

    #[test]
    fn encode_examples() {
        let v = Vocab::from_tokens(["world".to_string(), ",".to_string()]).unwrap();
        assert_eq!(v.encode("", true), vec![BOS_ID, EOS_ID]);
        let world = v.id("world").unwrap();
        let comma = v.id(",").unwrap();
        assert_eq!(v.encode("Hello, world", true), vec![BOS_ID, UNK_ID, comma, world, EOS_ID]);
        assert_eq!(v.encode("WORLD", false), vec![world]);
    }

    #[test]
    fn decode_examples() {
        let v = Vocab::from_tokens(["a".to_string(), "b".to_string()]).unwrap();
        assert_eq!(v.decode(&[BOS_ID, EOS_ID]).unwrap(), "");
        assert_eq!(v.decode(&v.encode("a b", true)).unwrap(), "a b");
        assert_eq!(v.decode(&[UNK_ID]).unwrap(), "<unk>");
        assert!(matches!(v.decode(&[99]), Err(Error::Index { index: 99, .. })));
        assert_eq!(v.decode_lossy(&[4, 99, EOS_ID]), "a <unk>");
    }

    #[test]
    fn normalize_splits_punctuation() {
        assert_eq!(normalize("Don't stop, OK?"), vec!["don", "'", "t", "stop", ",", "ok", "?"]);
        assert_eq!(normalize("  \t\n"), Vec::<String>::new());
    }

    #[test]
    fn vocab_file_rejects_bad_headers_and_duplicates() {
        assert!(Vocab::parse("<pad>\n<bos>\n<eos>\n").is_err());
        assert!(Vocab::parse("<pad>\n<bos>\n<eos>\n<unk>\na\na\n").is_err());
        assert!(Vocab::parse("<bos>\n<pad>\n<eos>\n<unk>\n").is_err());
        assert!(Vocab::parse("<pad>\n<bos>\n<eos>\n<unk>\n\n").is_err());
        assert_eq!(Vocab::parse("<pad>\n<bos>\n<eos>\n<unk>\n").unwrap().len(), 4);
    }

    proptest! {
        #[test]
        fn encode_is_total(text in "\\PC*") {
            let v = Vocab::build(["some words here ."], 1, 20).unwrap();
            let ids = v.encode(&text, true);
            prop_assert!(ids.iter().all(|&i| i < v.len()));
        }

        #[test]
        fn vocab_respects_size_and_threshold(
            corpus in prop::collection::vec("[a-e ,.]{0,30}", 1..6),
            min_freq in 1usize..4,
            max_size in 5usize..12,
        ) {
            let v = Vocab::build(corpus.iter().map(String::as_str), min_freq, max_size).unwrap();
            prop_assert!(v.len() <= max_size);
            let mut counts = HashMap::new();
            for text in &corpus {
                for t in normalize(text) {
                    *counts.entry(t).or_insert(0usize) += 1;
                }
            }
            for t in &v.tokens()[SPECIALS.len()..] {
                prop_assert!(counts[t] >= min_freq);
            }
            for (i, t) in v.tokens().iter().enumerate() {
                prop_assert_eq!(v.id(t), Some(i));
            }
        }

        #[test]
        fn vocab_file_round_trips_bit_exact(corpus in prop::collection::vec("\\PC{0,40}", 1..5)) {
            let v = Vocab::build(corpus.iter().map(String::as_str), 1, 64).unwrap();
            let text = v.to_file_string();
            let back = Vocab::parse(&text).unwrap();
            prop_assert_eq!(back.to_file_string(), text);
            prop_assert_eq!(back, v);
        }
    }
}
