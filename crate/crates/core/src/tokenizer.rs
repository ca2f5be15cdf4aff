//! Pluggable tokenization: whitespace word vocabularies with optional
//! character fallback, or an external WordPiece-style vocabulary file.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::keyword_enum;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
/// Ids below this are special in vocabularies built here.
pub const NUM_SPECIAL: u32 = 5;

const SPECIAL_NAMES: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
const CONTINUATION: &str = "##";

keyword_enum!(
    /// How text is split into vocabulary ids.
    TokenizerMode {
        WhitespaceVocab => "whitespace-vocab",
        CharFallback => "char-fallback",
        ExternalVocab => "external-vocab-file",
    }
);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

impl Specials {
    pub fn contains(&self, id: u32) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    mode: TokenizerMode,
    specials: Specials,
}

impl Tokenizer {
    /// Builds a vocabulary from whitespace-separated words: specials first,
    /// then words by descending frequency (ties alphabetical), capped at
    /// `max_vocab` entries. In char-fallback mode every character seen is
    /// added too, as a word-initial and a `##` continuation token.
    pub fn build<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        max_vocab: usize,
        mode: TokenizerMode,
    ) -> Result<Self> {
        if mode == TokenizerMode::ExternalVocab {
            return Err(Error::config("external-vocab-file tokenizers are loaded, not built"));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        let mut chars: Vec<char> = Vec::new();
        for line in lines {
            for w in line.split_whitespace() {
                *freq.entry(w).or_default() += 1;
                if mode == TokenizerMode::CharFallback {
                    chars.extend(w.chars());
                }
            }
        }
        let mut vocab: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        if mode == TokenizerMode::CharFallback {
            chars.sort_unstable();
            chars.dedup();
            for c in &chars {
                vocab.push(c.to_string());
                vocab.push(format!("{CONTINUATION}{c}"));
            }
        }
        let mut words: Vec<(&str, usize)> = freq.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut seen: std::collections::HashSet<String> = vocab.iter().cloned().collect();
        for (w, _) in words {
            if vocab.len() >= max_vocab {
                break;
            }
            if seen.insert(w.to_string()) {
                vocab.push(w.to_string());
            }
        }
        Self::from_vocab(vocab, mode)
    }

    pub fn from_vocab(vocab: Vec<String>, mode: TokenizerMode) -> Result<Self> {
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::config(format!("duplicate vocabulary entry `{tok}`")));
            }
        }
        let find = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::config(format!("vocabulary lacks special token {name}")))
        };
        let specials = Specials {
            pad: find(SPECIAL_NAMES[0])?,
            unk: find(SPECIAL_NAMES[1])?,
            cls: find(SPECIAL_NAMES[2])?,
            sep: find(SPECIAL_NAMES[3])?,
            mask: find(SPECIAL_NAMES[4])?,
        };
        Ok(Tokenizer {
            vocab,
            index,
            mode,
            specials,
        })
    }

    /// Loads a vocabulary file: one token per line, line number = id.
    pub fn load_vocab(path: &Path, mode: TokenizerMode) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        Self::from_vocab(vocab, mode)
    }

    pub fn save_vocab(&self, path: &Path) -> Result<()> {
        let mut text = self.vocab.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if let Some(&id) = self.index.get(word) {
                out.push(id);
                continue;
            }
            match self.mode {
                TokenizerMode::WhitespaceVocab => out.push(self.specials.unk),
                TokenizerMode::CharFallback => {
                    for (i, c) in word.chars().enumerate() {
                        let key = if i == 0 {
                            c.to_string()
                        } else {
                            format!("{CONTINUATION}{c}")
                        };
                        out.push(self.index.get(&key).copied().unwrap_or(self.specials.unk));
                    }
                }
                TokenizerMode::ExternalVocab => self.wordpiece(word, &mut out),
            }
        }
        out
    }

    /// Greedy longest-match-first split; the whole word becomes UNK when any
    /// remainder has no match.
    fn wordpiece(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, CONTINUATION);
                }
                if let Some(&id) = self.index.get(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.specials.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or(SPECIAL_NAMES[1]);
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_distinct_and_low() {
        let t = Tokenizer::build(["a b c a"], 100, TokenizerMode::WhitespaceVocab).unwrap();
        let s = t.specials();
        let ids = [s.pad, s.unk, s.cls, s.sep, s.mask];
        assert_eq!(ids, [PAD, UNK, CLS, SEP, MASK]);
        assert!(ids.iter().all(|&i| i < 100));
        assert_eq!(t.id("a"), Some(NUM_SPECIAL));
    }

    #[test]
    fn whitespace_round_trip() {
        let corpus = ["the cat sat on the mat", "a dog"];
        let t = Tokenizer::build(corpus, 1000, TokenizerMode::WhitespaceVocab).unwrap();
        for text in corpus {
            assert_eq!(t.decode(&t.encode(text)), text);
        }
        assert_eq!(t.encode("unseen"), vec![UNK]);
    }

    #[test]
    fn char_fallback_splits_unknown_words() {
        let t = Tokenizer::build(["ab ba"], 1000, TokenizerMode::CharFallback).unwrap();
        let ids = t.encode("aab");
        assert_eq!(ids.len(), 3);
        assert_eq!(t.decode(&ids), "aab");
        assert_eq!(t.encode("z"), vec![UNK]);
    }

    #[test]
    fn vocab_file_wordpiece() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nplay\n##ing\n##s\nthe\n").unwrap();
        let t = Tokenizer::load_vocab(&path, TokenizerMode::ExternalVocab).unwrap();
        assert_eq!(t.vocab_size(), 9);
        assert_eq!(t.encode("the playing plays xyz"), vec![8, 5, 6, 5, 7, UNK]);
        assert_eq!(t.decode(&[5, 6]), "playing");
    }

    #[test]
    fn vocab_without_specials_rejected() {
        assert!(Tokenizer::from_vocab(vec!["a".into()], TokenizerMode::WhitespaceVocab).is_err());
    }

    #[test]
    fn save_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        let t = Tokenizer::build(["x y z y"], 100, TokenizerMode::WhitespaceVocab).unwrap();
        t.save_vocab(&path).unwrap();
        let back = Tokenizer::load_vocab(&path, TokenizerMode::WhitespaceVocab).unwrap();
        assert_eq!(back.encode("z y x"), t.encode("z y x"));
    }
}
