//! Shared loading of text sources, tokenizers and models.

use std::path::{Path, PathBuf};

use neobert::checkpoint::Checkpoint;
use neobert::config::Section;
use neobert::model::Encoder;
use neobert::synthetic::{pattern_text, PatternSpec};
use neobert::tokenizer::{Tokenizer, TokenizerMode};
use neobert::train::load_encoder;
use neobert::{Error, Result};

/// Non-blank lines of a UTF-8 file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

/// Documents from `<prefix>corpus = PATH` (one per line) or from the
/// generator when `<prefix>synthetic_docs = N` is set.
pub fn text_source(sec: &mut Section, file_key: &str) -> Result<Vec<String>> {
    let path: Option<PathBuf> = sec.take_opt(file_key)?;
    let n: Option<usize> = sec.take_opt("synthetic_docs")?;
    let max_len: usize = sec.take("synthetic_max_len", 128)?;
    let seed: u64 = sec.take("synthetic_seed", 0)?;
    match (path, n) {
        (Some(p), None) => {
            let lines = read_lines(&p)?;
            if lines.is_empty() {
                return Err(Error::EmptySource(p.display().to_string()));
            }
            Ok(lines)
        }
        (None, Some(n)) => Ok(pattern_text(&PatternSpec::toy(n, max_len), seed)),
        (Some(_), Some(_)) => Err(Error::config(format!(
            "[{}] sets both {file_key} and synthetic_docs",
            sec.name()
        ))),
        (None, None) => Err(Error::config(format!(
            "[{}] needs {file_key} = PATH or synthetic_docs = N",
            sec.name()
        ))),
    }
}

/// Loads `vocab = PATH` when given, otherwise builds a vocabulary from `texts`.
pub fn tokenizer(sec: &mut Section, texts: &[String]) -> Result<Tokenizer> {
    let mode: TokenizerMode = sec.take("tokenizer", TokenizerMode::WhitespaceVocab)?;
    let max_vocab: usize = sec.take("max_vocab", 30_000)?;
    match sec.take_opt::<PathBuf>("vocab")? {
        Some(p) => Tokenizer::load_vocab(&p, mode),
        None => Tokenizer::build(texts.iter().map(String::as_str), max_vocab, mode),
    }
}

/// `CLS ⧺ ids ⧺ SEP`, with the ids cut so the whole fits in `max_len`.
pub fn encode_doc(tok: &Tokenizer, text: &str, max_len: usize) -> Vec<u32> {
    let s = tok.specials();
    let mut ids = vec![s.cls];
    ids.extend(tok.encode(text).into_iter().take(max_len.saturating_sub(2)));
    ids.push(s.sep);
    ids
}

/// The encoder of `checkpoint = PATH` with the vocabulary from `vocab`
/// (default: `vocab.txt` beside the checkpoint).
pub fn trained_model(sec: &mut Section) -> Result<(Encoder, Tokenizer, PathBuf)> {
    let ckpt: PathBuf = sec
        .take_opt("checkpoint")?
        .ok_or_else(|| Error::config(format!("[{}] needs checkpoint = PATH", sec.name())))?;
    let mode: TokenizerMode = sec.take("tokenizer", TokenizerMode::WhitespaceVocab)?;
    let vocab: PathBuf = match sec.take_opt::<PathBuf>("vocab")? {
        Some(v) => v,
        None => ckpt.parent().unwrap_or(Path::new(".")).join("vocab.txt"),
    };
    let encoder = load_encoder(&Checkpoint::load(&ckpt)?)?;
    let tok = Tokenizer::load_vocab(&vocab, mode)?;
    if tok.vocab_size() > encoder.cfg.vocab_size {
        return Err(Error::config(format!(
            "vocabulary {} has {} entries but the model embeds {}",
            vocab.display(),
            tok.vocab_size(),
            encoder.cfg.vocab_size
        )));
    }
    Ok((encoder, tok, vocab))
}
