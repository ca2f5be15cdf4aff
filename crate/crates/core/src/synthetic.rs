//! Generated corpora with learnable structure, for toy-scale runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contrastive::PairExample;
use crate::tokenizer::{CLS, NUM_SPECIAL, SEP};

/// Shape of a generated pattern corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatternSpec {
    pub n_docs: usize,
    /// Ids used are `NUM_SPECIAL..vocab_size`.
    pub vocab_size: usize,
    pub topics: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of following the topic's stride instead of a random jump.
    pub regularity: f64,
}

impl PatternSpec {
    pub fn toy(n_docs: usize, max_len: usize) -> Self {
        PatternSpec {
            n_docs,
            vocab_size: 128,
            topics: 4,
            min_len: 8,
            max_len,
            regularity: 0.85,
        }
    }
}

/// Documents are walks through a topic-specific band of ids: each token is
/// the previous one plus the topic stride (wrapping within the band) or, now
/// and then, a random band member. Every document starts with CLS and ends
/// with SEP. Lengths are log-uniform between `min_len` and `max_len`.
pub fn pattern_corpus(spec: &PatternSpec, seed: u64) -> Vec<Vec<u32>> {
    labeled_pattern_corpus(spec, seed).into_iter().map(|(d, _)| d).collect()
}

/// [`pattern_corpus`] with each document's topic index.
pub fn labeled_pattern_corpus(spec: &PatternSpec, seed: u64) -> Vec<(Vec<u32>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let usable = spec.vocab_size.saturating_sub(NUM_SPECIAL as usize).max(1);
    let band = (usable / spec.topics.max(1)).max(1);
    let (lo, hi) = ((spec.min_len.max(3)) as f64, (spec.max_len.max(spec.min_len.max(3))) as f64);
    (0..spec.n_docs)
        .map(|_| {
            let topic = rng.random_range(0..spec.topics.max(1));
            let base = NUM_SPECIAL as usize + topic * band;
            let stride = 1 + topic % (band - 1).max(1);
            let len = (lo * (hi / lo).powf(rng.random::<f64>())).round() as usize;
            let mut doc = Vec::with_capacity(len);
            doc.push(CLS);
            let mut cur = rng.random_range(0..band);
            while doc.len() + 1 < len {
                doc.push((base + cur) as u32);
                cur = if rng.random::<f64>() < spec.regularity {
                    (cur + stride) % band
                } else {
                    rng.random_range(0..band)
                };
            }
            doc.push(SEP);
            (doc, topic)
        })
        .collect()
}

/// The same corpus rendered as text, one document per line, ids as words
/// `w<id>` and the CLS/SEP markers dropped.
pub fn pattern_text(spec: &PatternSpec, seed: u64) -> Vec<String> {
    pattern_corpus(spec, seed)
        .into_iter()
        .map(|d| {
            d[1..d.len() - 1]
                .iter()
                .map(|t| format!("w{t}"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Shape of a generated retrieval task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSpec {
    pub n_pairs: usize,
    pub vocab_size: usize,
    /// Words a query shares with its positive.
    pub key_words: usize,
    /// Unrelated words added to each side.
    pub noise_words: usize,
    pub hard_negatives: usize,
}

impl PairSpec {
    pub fn toy(n_pairs: usize) -> Self {
        PairSpec {
            n_pairs,
            vocab_size: 128,
            key_words: 4,
            noise_words: 4,
            hard_negatives: 0,
        }
    }
}

/// Query and positive share a random set of key words, each side mixed
/// with its own noise words and shuffled. A hard negative keeps half the
/// key words.
pub fn paired_pattern_task(spec: &PairSpec, seed: u64) -> Vec<PairExample> {
    use rand::seq::{index::sample, SliceRandom};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = NUM_SPECIAL as usize;
    let usable = spec.vocab_size.saturating_sub(lo).max(spec.key_words + 1);
    let word = |i: usize| format!("w{}", lo + i);
    (0..spec.n_pairs)
        .map(|_| {
            let key: Vec<usize> = sample(&mut rng, usable, spec.key_words).into_vec();
            let side = |keep: &[usize], rng: &mut ChaCha8Rng| {
                let mut words: Vec<usize> = keep.to_vec();
                words.extend((0..spec.noise_words).map(|_| rng.random_range(0..usable)));
                words.shuffle(rng);
                words.into_iter().map(word).collect::<Vec<_>>().join(" ")
            };
            let query = side(&key, &mut rng);
            let positive = side(&key, &mut rng);
            let hard_negatives = (0..spec.hard_negatives)
                .map(|_| {
                    let mut half: Vec<usize> = key[..spec.key_words / 2].to_vec();
                    half.extend((0..spec.key_words - half.len()).map(|_| rng.random_range(0..usable)));
                    side(&half, &mut rng)
                })
                .collect();
            PairExample {
                task: "pattern".into(),
                instruction: "match".into(),
                query,
                positive,
                hard_negatives,
            }
        })
        .collect()
}

/// `(topic, text)` rows of a topic-classification task over
/// [`labeled_pattern_corpus`] documents.
pub fn topic_rows(spec: &PatternSpec, seed: u64) -> Vec<(usize, String)> {
    labeled_pattern_corpus(spec, seed)
        .into_iter()
        .map(|(d, t)| {
            let text = d[1..d.len() - 1].iter().map(|t| format!("w{t}")).collect::<Vec<_>>().join(" ");
            (t, text)
        })
        .collect()
}
