//! Batching for masked-language-model training: corruption, padding and
//! packing, and the document-length mixture sampler.

use rand::Rng;

use crate::autodiff::AttentionMask;
use crate::error::{Error, Result};
use crate::model::config::keyword_enum;
use crate::tokenizer::Specials;

/// Label value for positions that carry no MLM target.
pub const IGNORE_INDEX: i32 = -100;

keyword_enum!(
    /// How documents share rows and what attention may cross.
    MaskMode {
        Padded => "padded",
        PackedNaive => "packed-naive",
        PackedBlockDiagonal => "packed-block-diagonal",
    }
);

/// A flat run of tokens split into rows.
///
/// `seq_ids` name the source document of each token; `positions` restart at
/// zero for each document. Rows are laid out back to back and `row_starts`
/// holds the offset of each.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    pub token_ids: Vec<u32>,
    pub positions: Vec<u32>,
    pub seq_ids: Vec<u32>,
    pub mlm_labels: Vec<i32>,
    pub mask_mode: MaskMode,
    pub row_starts: Vec<usize>,
    pub pad_id: u32,
}

impl PackedBatch {
    /// One row per document, full attention inside each (no padding).
    pub fn from_sequences(docs: &[Vec<u32>], mode: MaskMode, pad_id: u32) -> Self {
        let mut b = PackedBatch::empty(mode, pad_id);
        for (i, d) in docs.iter().enumerate() {
            b.row_starts.push(b.token_ids.len());
            b.push_doc(d, i as u32);
        }
        b
    }

    fn empty(mode: MaskMode, pad_id: u32) -> Self {
        PackedBatch {
            token_ids: Vec::new(),
            positions: Vec::new(),
            seq_ids: Vec::new(),
            mlm_labels: Vec::new(),
            mask_mode: mode,
            row_starts: Vec::new(),
            pad_id,
        }
    }

    fn push_doc(&mut self, doc: &[u32], seq: u32) {
        for (p, &t) in doc.iter().enumerate() {
            self.token_ids.push(t);
            self.positions.push(p as u32);
            self.seq_ids.push(seq);
            self.mlm_labels.push(IGNORE_INDEX);
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn n_rows(&self) -> usize {
        self.row_starts.len()
    }

    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        let end = self.row_starts.get(r + 1).copied().unwrap_or(self.len());
        self.row_starts[r]..end
    }

    /// Tokens that are not padding.
    pub fn valid(&self) -> Vec<bool> {
        self.token_ids.iter().map(|&t| t != self.pad_id).collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.mlm_labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }

    /// Longest document (in tokens, padding excluded) in the batch.
    pub fn max_seq_len(&self) -> usize {
        let mut best = 0;
        let mut run = 0;
        for i in 0..self.len() {
            if i > 0 && self.seq_ids[i] == self.seq_ids[i - 1] && !self.row_starts.contains(&i) {
                run += 1;
            } else {
                run = 1;
            }
            if self.token_ids[i] != self.pad_id {
                best = best.max(run);
            }
        }
        best
    }

    /// Token index lists per document (runs of one seq id inside a row),
    /// padding excluded.
    pub fn documents(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for r in 0..self.n_rows() {
            let range = self.row_range(r);
            let start = range.start;
            for i in range {
                if self.token_ids[i] == self.pad_id {
                    continue;
                }
                let new_doc = i == start || self.seq_ids[i] != self.seq_ids[i - 1] || groups.is_empty();
                if new_doc {
                    groups.push(Vec::new());
                }
                groups.last_mut().expect("group pushed").push(i);
            }
        }
        groups
    }

    /// Attention structure implied by the mask mode: padded rows hide their
    /// pad keys, naive packing attends across the whole row, block-diagonal
    /// packing only within a document.
    pub fn attention_mask(&self) -> AttentionMask {
        let mut segments = Vec::new();
        for r in 0..self.n_rows() {
            let range = self.row_range(r);
            if range.is_empty() {
                continue;
            }
            match self.mask_mode {
                MaskMode::Padded | MaskMode::PackedNaive => segments.push((range.start, range.len())),
                MaskMode::PackedBlockDiagonal => {
                    let mut start = range.start;
                    for i in range.start + 1..range.end {
                        if self.seq_ids[i] != self.seq_ids[i - 1] {
                            segments.push((start, i - start));
                            start = i;
                        }
                    }
                    segments.push((start, range.end - start));
                }
            }
        }
        let key_valid = if self.mask_mode == MaskMode::Padded {
            Some(self.valid())
        } else {
            None
        };
        AttentionMask { segments, key_valid }
    }

    /// Concatenates batches row-wise.
    pub fn concat(parts: &[PackedBatch]) -> Result<PackedBatch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero batches"))?;
        let mut out = PackedBatch::empty(first.mask_mode, first.pad_id);
        for p in parts {
            if p.mask_mode != first.mask_mode || p.pad_id != first.pad_id {
                return Err(Error::invalid("concat of batches with different layouts"));
            }
            let offset = out.len();
            out.row_starts.extend(p.row_starts.iter().map(|r| r + offset));
            out.token_ids.extend(&p.token_ids);
            out.positions.extend(&p.positions);
            out.mlm_labels.extend(&p.mlm_labels);
            out.seq_ids.extend(&p.seq_ids);
        }
        Ok(out)
    }
}

/// First-fit placement of documents into rows of at most `max_len` tokens.
struct FirstFit {
    max_len: usize,
    max_rows: Option<usize>,
    rows: Vec<Vec<(u32, Vec<u32>)>>,
    used: Vec<usize>,
}

impl FirstFit {
    fn new(max_len: usize, max_rows: Option<usize>) -> Self {
        FirstFit {
            max_len,
            max_rows,
            rows: Vec::new(),
            used: Vec::new(),
        }
    }

    /// Returns false when the document fits nowhere and no row may be opened.
    fn place(&mut self, seq: u32, doc: &[u32]) -> bool {
        let doc = &doc[..doc.len().min(self.max_len)];
        if let Some(r) = self.used.iter().position(|&u| u + doc.len() <= self.max_len) {
            self.used[r] += doc.len();
            self.rows[r].push((seq, doc.to_vec()));
            return true;
        }
        if self.max_rows.is_some_and(|m| self.rows.len() >= m) {
            return false;
        }
        self.used.push(doc.len());
        self.rows.push(vec![(seq, doc.to_vec())]);
        true
    }

    fn into_rows(self, mode: MaskMode, pad_id: u32) -> Vec<PackedBatch> {
        self.rows
            .into_iter()
            .map(|row| {
                let mut b = PackedBatch::empty(mode, pad_id);
                b.row_starts.push(0);
                for (seq, doc) in row {
                    b.push_doc(&doc, seq);
                }
                b
            })
            .collect()
    }
}

fn padded_row(doc: &[u32], seq: u32, max_len: usize, pad_id: u32) -> PackedBatch {
    let doc = &doc[..doc.len().min(max_len)];
    let mut b = PackedBatch::empty(MaskMode::Padded, pad_id);
    b.row_starts.push(0);
    b.push_doc(doc, seq);
    for p in doc.len()..max_len {
        b.token_ids.push(pad_id);
        b.positions.push(p as u32);
        b.seq_ids.push(seq);
        b.mlm_labels.push(IGNORE_INDEX);
    }
    b
}

/// Lays documents out as rows. Documents longer than `max_len` are
/// truncated. Padded mode gives one padded row per document; the packed
/// modes concatenate documents greedily (first fit) without padding.
pub fn pack_sequences(docs: &[Vec<u32>], max_len: usize, mode: MaskMode, pad_id: u32) -> Vec<PackedBatch> {
    match mode {
        MaskMode::Padded => docs
            .iter()
            .enumerate()
            .map(|(i, d)| padded_row(d, i as u32, max_len, pad_id))
            .collect(),
        _ => {
            let mut ff = FirstFit::new(max_len, None);
            for (i, d) in docs.iter().enumerate() {
                ff.place(i as u32, d);
            }
            ff.into_rows(mode, pad_id)
        }
    }
}

/// Fractions of selected tokens replaced by MASK, by a random id, or kept.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingScheme {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl MaskingScheme {
    pub const ALL_MASK: MaskingScheme = MaskingScheme {
        mask: 1.0,
        random: 0.0,
        keep: 0.0,
    };
    pub const BERT: MaskingScheme = MaskingScheme {
        mask: 0.8,
        random: 0.1,
        keep: 0.1,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.mask, self.random, self.keep];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "masking scheme {self} must be nonnegative and sum to 1"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for MaskingScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.mask, self.random, self.keep)
    }
}

impl std::str::FromStr for MaskingScheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<f64> = s
            .split('/')
            .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
            .collect::<std::result::Result<_, _>>()?;
        match parts.as_slice() {
            [m, r, k] => Ok(MaskingScheme {
                mask: *m,
                random: *r,
                keep: *k,
            }),
            _ => Err(format!("expected mask/random/keep, got `{s}`")),
        }
    }
}

/// Applies MLM corruption.
#[derive(Clone, Debug)]
pub struct Corruptor {
    pub rate: f64,
    pub scheme: MaskingScheme,
    pub specials: Specials,
    pub vocab_size: usize,
}

impl Corruptor {
    pub fn new(rate: f64, scheme: MaskingScheme, specials: Specials, vocab_size: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::invalid(format!("masking rate {rate} outside [0, 1]")));
        }
        scheme.validate()?;
        Ok(Corruptor {
            rate,
            scheme,
            specials,
            vocab_size,
        })
    }

    /// Each non-special token is selected independently with probability
    /// `rate`; selected tokens become MASK, a random non-special id, or stay,
    /// per the scheme. Labels hold the original id at selected positions.
    pub fn corrupt<R: Rng + ?Sized>(&self, tokens: &[u32], rng: &mut R) -> (Vec<u32>, Vec<i32>) {
        let mut inputs = tokens.to_vec();
        let mut labels = vec![IGNORE_INDEX; tokens.len()];
        self.corrupt_in_place(&mut inputs, &mut labels, rng);
        (inputs, labels)
    }

    fn corrupt_in_place<R: Rng + ?Sized>(&self, inputs: &mut [u32], labels: &mut [i32], rng: &mut R) {
        for (tok, label) in inputs.iter_mut().zip(labels.iter_mut()) {
            if self.specials.contains(*tok) {
                continue;
            }
            if rng.random::<f64>() >= self.rate {
                continue;
            }
            *label = *tok as i32;
            let u: f64 = rng.random();
            if u < self.scheme.mask {
                *tok = self.specials.mask;
            } else if u < self.scheme.mask + self.scheme.random {
                *tok = self.random_id(rng);
            }
        }
    }

    fn random_id<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        loop {
            let id = rng.random_range(0..self.vocab_size as u32);
            if !self.specials.contains(id) {
                return id;
            }
        }
    }

    /// Corrupts every non-padding token of a batch in place.
    pub fn corrupt_batch<R: Rng + ?Sized>(&self, batch: &mut PackedBatch, rng: &mut R) {
        self.corrupt_in_place(&mut batch.token_ids, &mut batch.mlm_labels, rng);
    }
}

/// Free-function form of [`Corruptor::corrupt`].
pub fn mlm_corrupt<R: Rng + ?Sized>(
    tokens: &[u32],
    rate: f64,
    scheme: MaskingScheme,
    specials: Specials,
    vocab_size: usize,
    rng: &mut R,
) -> Result<(Vec<u32>, Vec<i32>)> {
    Ok(Corruptor::new(rate, scheme, specials, vocab_size)?.corrupt(tokens, rng))
}

/// Source probabilities and length thresholds for the three document pools:
/// everything, documents longer than `thresholds[0]`, and longer than
/// `thresholds[1]` tokens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mixture {
    pub probs: [f64; 3],
    pub thresholds: [usize; 2],
}

impl Mixture {
    pub fn base_only() -> Self {
        Mixture {
            probs: [1.0, 0.0, 0.0],
            thresholds: [1024, 2048],
        }
    }

    /// 20% base, 40% long, 40% longer.
    pub fn long_context(thresholds: [usize; 2]) -> Self {
        Mixture {
            probs: [0.2, 0.4, 0.4],
            thresholds,
        }
    }

    pub fn source_name(&self, source: usize) -> String {
        match source {
            0 => "base".to_string(),
            s => format!("long{}", self.thresholds[s - 1]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|p| !(*p >= 0.0)) || (self.probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "mixture probabilities {:?} must be nonnegative and sum to 1",
                self.probs
            )));
        }
        Ok(())
    }
}

/// Draws documents by first picking a pool, then a uniform document in it.
pub struct LengthMixtureSampler<'c> {
    corpus: &'c [Vec<u32>],
    pools: [Vec<usize>; 3],
    mixture: Mixture,
}

impl<'c> LengthMixtureSampler<'c> {
    pub fn new(corpus: &'c [Vec<u32>], mixture: Mixture) -> Result<Self> {
        mixture.validate()?;
        let pool = |min: Option<usize>| -> Vec<usize> {
            corpus
                .iter()
                .enumerate()
                .filter(|(_, d)| min.is_none_or(|m| d.len() > m))
                .map(|(i, _)| i)
                .collect()
        };
        let pools = [
            pool(None),
            pool(Some(mixture.thresholds[0])),
            pool(Some(mixture.thresholds[1])),
        ];
        for (i, p) in pools.iter().enumerate() {
            if p.is_empty() && mixture.probs[i] > 0.0 {
                return Err(Error::EmptySource(mixture.source_name(i)));
            }
        }
        Ok(LengthMixtureSampler {
            corpus,
            pools,
            mixture,
        })
    }

    pub fn pool_sizes(&self) -> [usize; 3] {
        [self.pools[0].len(), self.pools[1].len(), self.pools[2].len()]
    }

    /// Returns (source index, document index).
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut source = 2;
        for (i, p) in self.mixture.probs.iter().enumerate() {
            acc += p;
            if u < acc && *p > 0.0 {
                source = i;
                break;
            }
        }
        // Rounding can leave u above the running sum; fall back to the last
        // pool with mass.
        if self.mixture.probs[source] == 0.0 {
            source = (0..3).rev().find(|&i| self.mixture.probs[i] > 0.0).unwrap_or(0);
        }
        let pool = &self.pools[source];
        (source, pool[rng.random_range(0..pool.len())])
    }

    pub fn doc(&self, idx: usize) -> &'c [u32] {
        &self.corpus[idx]
    }
}

/// Geometry of one training batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchShape {
    pub max_len: usize,
    /// Token capacity, padding included: rows = batch_tokens / max_len.
    pub batch_tokens: usize,
    pub mode: MaskMode,
}

impl BatchShape {
    pub fn rows(&self) -> usize {
        (self.batch_tokens / self.max_len).max(1)
    }
}

/// Samples documents until the batch capacity is used, lays them out, and
/// corrupts them. Returns the batch and the number of documents drawn.
pub fn sample_batch<R: Rng + ?Sized>(
    sampler: &LengthMixtureSampler,
    shape: BatchShape,
    corruptor: &Corruptor,
    rng: &mut R,
) -> Result<(PackedBatch, usize)> {
    let pad = corruptor.specials.pad;
    let mut drawn = 0;
    let rows = match shape.mode {
        MaskMode::Padded => (0..shape.rows())
            .map(|i| {
                drawn += 1;
                let (_, d) = sampler.draw(rng);
                padded_row(sampler.doc(d), i as u32, shape.max_len, pad)
            })
            .collect::<Vec<_>>(),
        mode => {
            let mut ff = FirstFit::new(shape.max_len, Some(shape.rows()));
            loop {
                let (_, d) = sampler.draw(rng);
                drawn += 1;
                if !ff.place(drawn as u32 - 1, sampler.doc(d)) {
                    break;
                }
                if ff.rows.len() == shape.rows() && ff.used.iter().all(|&u| u == shape.max_len) {
                    break;
                }
            }
            ff.into_rows(mode, pad)
        }
    };
    let mut batch = PackedBatch::concat(&rows)?;
    corruptor.corrupt_batch(&mut batch, rng);
    Ok((batch, drawn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{Specials, CLS, MASK, PAD, SEP, UNK};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn specials() -> Specials {
        Specials {
            pad: PAD,
            unk: UNK,
            cls: CLS,
            sep: SEP,
            mask: MASK,
        }
    }

    fn doc(len: usize, start: u32) -> Vec<u32> {
        (0..len as u32).map(|i| start + i).collect()
    }

    #[test]
    fn full_length_doc_is_identical_across_modes() {
        let docs = vec![doc(8, 10)];
        let outs: Vec<PackedBatch> = [MaskMode::Padded, MaskMode::PackedNaive, MaskMode::PackedBlockDiagonal]
            .iter()
            .map(|&m| pack_sequences(&docs, 8, m, PAD).remove(0))
            .collect();
        for o in &outs[1..] {
            assert_eq!(o.token_ids, outs[0].token_ids);
            assert_eq!(o.positions, outs[0].positions);
            assert_eq!(o.seq_ids, outs[0].seq_ids);
            assert_eq!(o.mlm_labels, outs[0].mlm_labels);
            assert_eq!(o.attention_mask().segments, outs[0].attention_mask().segments);
        }
    }

    #[test]
    fn greedy_first_fit_trace() {
        let docs = vec![doc(3, 10), doc(4, 20), doc(5, 30)];
        let rows = pack_sequences(&docs, 8, MaskMode::PackedBlockDiagonal, PAD);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].token_ids, vec![10, 11, 12, 20, 21, 22, 23]);
        assert_eq!(rows[0].positions, vec![0, 1, 2, 0, 1, 2, 3]);
        assert_eq!(rows[0].seq_ids, vec![0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(rows[1].token_ids, vec![30, 31, 32, 33, 34]);
        assert_eq!(rows[1].positions, vec![0, 1, 2, 3, 4]);
        assert_eq!(rows[0].attention_mask().segments, vec![(0, 3), (3, 4)]);
        let naive = pack_sequences(&docs, 8, MaskMode::PackedNaive, PAD);
        assert_eq!(naive[0].attention_mask().segments, vec![(0, 7)]);
    }

    #[test]
    fn padded_rows_and_truncation() {
        let rows = pack_sequences(&[doc(3, 10), doc(12, 40)], 5, MaskMode::Padded, PAD);
        assert_eq!(rows[0].token_ids, vec![10, 11, 12, PAD, PAD]);
        assert_eq!(rows[1].token_ids, vec![40, 41, 42, 43, 44]);
        let m = rows[0].attention_mask();
        assert_eq!(m.key_valid.unwrap(), vec![true, true, true, false, false]);
    }

    #[test]
    fn concat_keeps_documents_distinct() {
        let a = pack_sequences(&[doc(2, 10)], 4, MaskMode::PackedBlockDiagonal, PAD);
        let b = pack_sequences(&[doc(3, 20)], 4, MaskMode::PackedBlockDiagonal, PAD);
        let c = PackedBatch::concat(&[a[0].clone(), b[0].clone()]).unwrap();
        assert_eq!(c.seq_ids, vec![0, 0, 0, 0, 0]);
        assert_eq!(c.attention_mask().segments, vec![(0, 2), (2, 3)]);
        assert_eq!(c.row_starts, vec![0, 2]);
        assert_eq!(c.documents(), vec![vec![0, 1], vec![2, 3, 4]]);
        assert_eq!(c.max_seq_len(), 3);
    }

    #[test]
    fn corruption_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let toks: Vec<u32> = vec![CLS, 10, 11, 12, SEP, PAD];
        let (inp, lab) = mlm_corrupt(&toks, 0.0, MaskingScheme::BERT, specials(), 50, &mut rng).unwrap();
        assert_eq!(inp, toks);
        assert!(lab.iter().all(|&l| l == IGNORE_INDEX));
        let (inp, lab) = mlm_corrupt(&toks, 1.0, MaskingScheme::ALL_MASK, specials(), 50, &mut rng).unwrap();
        assert_eq!(inp, vec![CLS, MASK, MASK, MASK, SEP, PAD]);
        assert_eq!(lab, vec![IGNORE_INDEX, 10, 11, 12, IGNORE_INDEX, IGNORE_INDEX]);
        assert!(mlm_corrupt(&toks, 1.5, MaskingScheme::BERT, specials(), 50, &mut rng).is_err());
        let bad = MaskingScheme {
            mask: 0.5,
            random: 0.1,
            keep: 0.1,
        };
        assert!(mlm_corrupt(&toks, 0.5, bad, specials(), 50, &mut rng).is_err());
    }

    #[test]
    fn corruption_rate_is_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let toks: Vec<u32> = (0..10_000).map(|i| 10 + (i % 40)).collect();
        let (_, lab) = mlm_corrupt(&toks, 0.2, MaskingScheme::ALL_MASK, specials(), 50, &mut rng).unwrap();
        let selected = lab.iter().filter(|&&l| l != IGNORE_INDEX).count() as f64;
        let sd = (10_000.0f64 * 0.2 * 0.8).sqrt();
        assert!((selected - 2000.0).abs() <= 3.0 * sd, "{selected}");
    }

    #[test]
    fn bert_scheme_random_ids_are_not_special() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let toks: Vec<u32> = vec![7; 5000];
        let (inp, lab) = mlm_corrupt(&toks, 1.0, MaskingScheme::BERT, specials(), 9, &mut rng).unwrap();
        assert!(lab.iter().all(|&l| l == 7));
        let masked = inp.iter().filter(|&&t| t == MASK).count();
        assert!((3800..4200).contains(&masked), "{masked}");
        assert!(inp.iter().all(|&t| t == MASK || t >= 5));
    }

    #[test]
    fn sampler_pools_and_errors() {
        let corpus: Vec<Vec<u32>> = vec![doc(5, 10), doc(20, 10), doc(40, 10)];
        let mix = Mixture {
            probs: [0.0, 0.0, 1.0],
            thresholds: [10, 30],
        };
        let s = LengthMixtureSampler::new(&corpus, mix).unwrap();
        assert_eq!(s.pool_sizes(), [3, 2, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (src, d) = s.draw(&mut rng);
            assert_eq!(src, 2);
            assert!(corpus[d].len() > 30);
        }
        let short: Vec<Vec<u32>> = vec![doc(5, 10)];
        let err = LengthMixtureSampler::new(&short, mix).err().unwrap();
        assert_eq!(err.to_string(), "source `long30` has no documents");
    }

    #[test]
    fn sampled_batch_respects_capacity() {
        let corpus: Vec<Vec<u32>> = (0..20).map(|i| doc(3 + i % 7, 10)).collect();
        let s = LengthMixtureSampler::new(&corpus, Mixture::base_only()).unwrap();
        let c = Corruptor::new(0.2, MaskingScheme::ALL_MASK, specials(), 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for mode in [MaskMode::Padded, MaskMode::PackedNaive, MaskMode::PackedBlockDiagonal] {
            let shape = BatchShape {
                max_len: 16,
                batch_tokens: 64,
                mode,
            };
            let (b, drawn) = sample_batch(&s, shape, &c, &mut rng).unwrap();
            assert!(b.n_rows() <= 4 && drawn >= b.n_rows());
            for r in 0..b.n_rows() {
                assert!(b.row_range(r).len() <= 16);
            }
            if mode == MaskMode::Padded {
                assert_eq!(b.len(), 64);
            }
        }
    }
}
