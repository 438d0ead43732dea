//! Word-level vocabulary and text ↔ token-id conversion.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

pub fn is_special(id: u32) -> bool {
    (id as usize) < SPECIAL_TOKENS.len()
}

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub text: Option<String>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq { ids, text: None }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, u32>,
    min_freq: u64,
}

impl Vocab {
    /// Builds a vocabulary. Tokens seen at least `min_freq` times get ids after
    /// the reserved block, most frequent first, ties in lexicographic order.
    pub fn build<'t>(corpus: impl IntoIterator<Item = &'t str>, min_freq: u64) -> Result<Self> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut docs = 0usize;
        for doc in corpus {
            docs += 1;
            for tok in tokenize(doc) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::Empty("vocabulary corpus has no documents".into()));
        }
        let mut kept: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0; SPECIAL_TOKENS.len()];
        for (t, c) in kept {
            tokens.push(t);
            freqs.push(c);
        }
        Ok(Self::from_parts(tokens, freqs, min_freq))
    }

    fn from_parts(tokens: Vec<String>, freqs: Vec<u64>, min_freq: u64) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens,
            freqs,
            index,
            min_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> u64 {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn frequency(&self, id: u32) -> Option<u64> {
        self.freqs.get(id as usize).copied()
    }

    /// Encodes at most `max_len` tokens; unseen words map to `UNK`.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSeq {
        let ids = tokenize(text)
            .iter()
            .take(max_len)
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect();
        TokenSeq {
            ids,
            text: Some(text.to_string()),
        }
    }

    /// Joins tokens with single spaces. Reserved tokens render as their
    /// literal names unless `strip_special` drops them.
    pub fn decode(&self, ids: &[u32], strip_special: bool) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::Index {
                what: "token id",
                index: id as usize,
                bound: self.len(),
            })?;
            if strip_special && is_special(id) {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }

    /// `id<TAB>token<TAB>frequency` per line, ids ascending.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, (t, f)) in self.tokens.iter().zip(&self.freqs).enumerate() {
            let _ = writeln!(s, "{i}\t{t}\t{f}");
        }
        s
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let malformed = |reason: &str| Error::Malformed {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: reason.to_string(),
            };
            let mut parts = line.split('\t');
            let (Some(id), Some(tok), Some(freq), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(malformed("expected id, token, frequency"));
            };
            let id: usize = id.parse().map_err(|_| malformed("bad id"))?;
            if id != tokens.len() {
                return Err(malformed("ids must be dense and ascending"));
            }
            if id < SPECIAL_TOKENS.len() && tok != SPECIAL_TOKENS[id] {
                return Err(malformed("reserved id reassigned"));
            }
            freqs.push(freq.parse().map_err(|_| malformed("bad frequency"))?);
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: "vocabulary lacks reserved tokens".into(),
            });
        }
        let min_freq = freqs[SPECIAL_TOKENS.len()..]
            .iter()
            .copied()
            .min()
            .unwrap_or(1);
        Ok(Self::from_parts(tokens, freqs, min_freq))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(
            tokenize("The Matrix (1999), Reloaded!"),
            ["the", "matrix", "(", "1999", ")", ",", "reloaded", "!"]
        );
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn small_corpus_vocab() {
        let v = Vocab::build(["a a b"], 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));

        let v = Vocab::build(["a a b"], 2).unwrap();
        assert_eq!(v.encode("b", 8).ids, vec![UNK]);
        assert_eq!(v.encode("a b", 8).ids, vec![5, UNK]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocab::build(std::iter::empty::<&str>(), 1).is_err());
    }

    #[test]
    fn encode_truncates_to_max_len() {
        let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let title = words.join(" ");
        let v = Vocab::build([title.as_str()], 1).unwrap();
        let seq = v.encode(&title, 32);
        assert_eq!(seq.len(), 32);
        let expected: Vec<u32> = words[..32].iter().map(|w| v.id(w).unwrap()).collect();
        assert_eq!(seq.ids, expected);
    }

    #[test]
    fn unseen_word_is_unk() {
        let v = Vocab::build(["the matrix"], 1).unwrap();
        assert_eq!(v.encode("Zyzzyva", 32).ids, vec![UNK]);
    }

    #[test]
    fn decode_examples() {
        let v = Vocab::build(["the matrix"], 1).unwrap();
        let ids = [v.id("the").unwrap(), v.id("matrix").unwrap()];
        assert_eq!(v.decode(&ids, false).unwrap(), "the matrix");
        assert_eq!(v.decode(&[], false).unwrap(), "");
        let with_sep = [ids[0], SEP, ids[1]];
        assert_eq!(v.decode(&with_sep, false).unwrap(), "the <sep> matrix");
        assert_eq!(v.decode(&with_sep, true).unwrap(), "the matrix");
        assert!(v.decode(&[99], false).is_err());
    }

    #[test]
    fn tsv_round_trip_is_byte_identical() {
        let v = Vocab::build(["b a c a", "c c d"], 1).unwrap();
        let text = v.to_tsv();
        let back = Vocab::from_tsv(&text, Path::new("vocab.tsv")).unwrap();
        assert_eq!(back.to_tsv(), text);
        assert_eq!(back, v);
        let again = Vocab::build(["b a c a", "c c d"], 1).unwrap();
        assert_eq!(again.to_tsv(), text);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(words in prop::collection::vec("[a-z]{1,6}", 1..20)) {
            let text = words.join(" ");
            let v = Vocab::build([text.as_str()], 1).unwrap();
            let seq = v.encode(&text, 64);
            prop_assert!(!seq.ids.contains(&UNK));
            let decoded = v.decode(&seq.ids, false).unwrap();
            prop_assert_eq!(&decoded, &text);
            prop_assert_eq!(v.encode(&decoded, 64).ids, seq.ids);
        }

        #[test]
        fn ids_are_dense(docs in prop::collection::vec("[a-c ]{0,12}", 1..8)) {
            let v = Vocab::build(docs.iter().map(String::as_str), 1).unwrap();
            for id in 0..v.len() as u32 {
                let tok = v.token(id).unwrap();
                prop_assert_eq!(v.id(tok), Some(id));
            }
        }
    }
}
