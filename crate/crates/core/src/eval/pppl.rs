//! Pseudo-perplexity: mask each position in turn and score the true token.

use crate::autodiff::Tape;
use crate::data::{MaskMode, PackedBatch};
use crate::error::{Error, Result};
use crate::model::Encoder;
use crate::tensor::log_sum_exp;
use crate::tokenizer::Specials;

/// A model that predicts masked tokens.
pub trait MaskedLm {
    fn vocab_size(&self) -> usize;
    fn mask_id(&self) -> u32;
    /// Longest sequence the model accepts.
    fn max_len(&self) -> usize;
    /// Vocabulary logits at `positions[i]` of `seqs[i]`, for every `i`.
    fn masked_logits(&self, seqs: &[Vec<u32>], positions: &[usize]) -> Result<Vec<Vec<f32>>>;
}

/// An encoder with the mask id its vocabulary uses.
pub struct EncoderLm<'e> {
    pub encoder: &'e Encoder,
    pub mask_id: u32,
}

impl MaskedLm for EncoderLm<'_> {
    fn vocab_size(&self) -> usize {
        self.encoder.cfg.vocab_size
    }

    fn mask_id(&self) -> u32 {
        self.mask_id
    }

    fn max_len(&self) -> usize {
        self.encoder.cfg.position_limit()
    }

    fn masked_logits(&self, seqs: &[Vec<u32>], positions: &[usize]) -> Result<Vec<Vec<f32>>> {
        let batch = PackedBatch::from_sequences(seqs, MaskMode::PackedBlockDiagonal, u32::MAX);
        let rows: Vec<usize> = positions
            .iter()
            .enumerate()
            .map(|(i, &p)| batch.row_starts[i] + p)
            .collect();
        let mut tape = Tape::inference();
        let bound = self.encoder.bind(&mut tape);
        let h = self.encoder.forward(&mut tape, &bound, &(&batch).into())?;
        let logits = self.encoder.mlm_logits(&mut tape, &bound, h, Some(&rows))?;
        let t = tape.value(logits);
        Ok((0..rows.len()).map(|i| t.row(i).to_vec()).collect())
    }
}

/// Per-position losses of one sequence and their pseudo-perplexity.
#[derive(Clone, Debug, PartialEq)]
pub struct PpplRecord {
    pub length: usize,
    /// Cross-entropy of the true token at each scored position.
    pub losses: Vec<f64>,
    pub pppl: f64,
}

impl PpplRecord {
    fn from_losses(length: usize, losses: Vec<f64>) -> Self {
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        PpplRecord {
            length,
            losses,
            pppl: mean.exp(),
        }
    }
}

/// Masks each listed position on its own and returns the scored record.
/// Variants are run `group` at a time.
pub fn pseudo_perplexity_at<M: MaskedLm + ?Sized>(
    model: &M,
    tokens: &[u32],
    positions: &[usize],
    group: usize,
) -> Result<PpplRecord> {
    if tokens.is_empty() || positions.is_empty() {
        return Err(Error::invalid("pseudo-perplexity of an empty sequence"));
    }
    if tokens.len() > model.max_len() {
        return Err(Error::TooLong {
            len: tokens.len(),
            max: model.max_len(),
        });
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= tokens.len()) {
        return Err(Error::invalid(format!("position {p} outside a {}-token sequence", tokens.len())));
    }
    let mut losses = Vec::with_capacity(positions.len());
    for chunk in positions.chunks(group.max(1)) {
        let variants: Vec<Vec<u32>> = chunk
            .iter()
            .map(|&p| {
                let mut v = tokens.to_vec();
                v[p] = model.mask_id();
                v
            })
            .collect();
        let logits = model.masked_logits(&variants, chunk)?;
        for (row, &p) in logits.iter().zip(chunk) {
            let target = tokens[p] as usize;
            if target >= row.len() {
                return Err(Error::UnknownToken {
                    id: target as u32,
                    vocab: row.len(),
                });
            }
            let (max, lse) = log_sum_exp(row);
            losses.push(max + lse - row[target] as f64);
        }
    }
    Ok(PpplRecord::from_losses(tokens.len(), losses))
}

/// `exp(mean lᵢ)` with every position masked once.
pub fn pseudo_perplexity<M: MaskedLm + ?Sized>(model: &M, tokens: &[u32]) -> Result<f64> {
    let all: Vec<usize> = (0..tokens.len()).collect();
    Ok(pseudo_perplexity_at(model, tokens, &all, 32)?.pppl)
}

/// Aggregate over one length bin `(lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PpplBin {
    pub lo: usize,
    pub hi: usize,
    pub mean_pppl: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpplReport {
    pub records: Vec<PpplRecord>,
    pub bins: Vec<PpplBin>,
}

impl PpplReport {
    pub fn bin(&self, lo: usize, hi: usize) -> Option<&PpplBin> {
        self.bins.iter().find(|b| b.lo == lo && b.hi == hi)
    }

    /// `length_bin, mean_pppl, count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("length_bin,mean_pppl,count\n");
        for b in &self.bins {
            out.push_str(&format!("{}-{},{},{}\n", b.lo, b.hi, b.mean_pppl, b.count));
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("length\tpppl\n");
        for r in &self.records {
            out.push_str(&format!("{}\t{}\n", r.length, r.pppl));
        }
        out
    }
}

/// Doubling bin edges 64, 128, … up to the first edge covering `max_len`.
pub fn default_bins(max_len: usize) -> Vec<usize> {
    let mut edges = vec![64];
    while *edges.last().expect("nonempty") < max_len {
        edges.push(edges.last().expect("nonempty") * 2);
    }
    edges
}

/// Scores every sequence and averages pseudo-perplexity per length bin.
/// Bins are `(0, e₀], (e₀, e₁], …`; sequences longer than the last edge are
/// left out of the aggregates. Positions holding a special token are neither
/// masked nor scored when `specials` is given.
pub fn pppl_curve<M: MaskedLm + ?Sized>(
    model: &M,
    sample: &[Vec<u32>],
    edges: &[usize],
    specials: Option<Specials>,
    group: usize,
) -> Result<PpplReport> {
    if sample.is_empty() {
        return Err(Error::invalid("pseudo-perplexity curve over an empty sample"));
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("bin edges {edges:?} must increase")));
    }
    let mut records = Vec::with_capacity(sample.len());
    for seq in sample {
        let positions: Vec<usize> = (0..seq.len())
            .filter(|&i| specials.is_none_or(|s| !s.contains(seq[i])))
            .collect();
        records.push(pseudo_perplexity_at(model, seq, &positions, group)?);
    }
    let mut bins = Vec::new();
    let mut lo = 0;
    for &hi in edges {
        let vals: Vec<f64> = records
            .iter()
            .filter(|r| r.length > lo && r.length <= hi)
            .map(|r| r.pppl)
            .collect();
        if !vals.is_empty() {
            bins.push(PpplBin {
                lo,
                hi,
                mean_pppl: vals.iter().sum::<f64>() / vals.len() as f64,
                count: vals.len(),
            });
        }
        lo = hi;
    }
    Ok(PpplReport { records, bins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::MASK;

    struct Uniform(usize);

    impl MaskedLm for Uniform {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn mask_id(&self) -> u32 {
            MASK
        }
        fn max_len(&self) -> usize {
            16
        }
        fn masked_logits(&self, seqs: &[Vec<u32>], _: &[usize]) -> Result<Vec<Vec<f32>>> {
            Ok(vec![vec![0.0; self.0]; seqs.len()])
        }
    }

    /// Logit +1000 on the true token, which it reads from a copy of the input.
    struct Oracle(Vec<u32>);

    impl MaskedLm for Oracle {
        fn vocab_size(&self) -> usize {
            10
        }
        fn mask_id(&self) -> u32 {
            MASK
        }
        fn max_len(&self) -> usize {
            16
        }
        fn masked_logits(&self, seqs: &[Vec<u32>], pos: &[usize]) -> Result<Vec<Vec<f32>>> {
            Ok(seqs
                .iter()
                .zip(pos)
                .map(|(_, &p)| {
                    let mut row = vec![0.0; 10];
                    row[self.0[p] as usize] = 1000.0;
                    row
                })
                .collect())
        }
    }

    #[test]
    fn uniform_model_scores_vocab_size() {
        let p = pseudo_perplexity(&Uniform(30_000), &[7, 8, 9, 10]).unwrap();
        assert!((p - 30_000.0).abs() / 30_000.0 < 1e-9);
    }

    #[test]
    fn oracle_model_scores_one() {
        let seq = vec![5, 6, 7];
        let p = pseudo_perplexity(&Oracle(seq.clone()), &seq).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_long_is_an_error() {
        assert!(matches!(
            pseudo_perplexity(&Uniform(10), &[5; 17]),
            Err(Error::TooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn grouping_does_not_change_result() {
        let mut cfg = ModelConfig::toy(40);
        cfg.init_std = 0.2;
        let enc = Encoder::new(cfg, 9).unwrap();
        let lm = EncoderLm {
            encoder: &enc,
            mask_id: MASK,
        };
        let seq: Vec<u32> = (0..13).map(|i| 5 + (i * 7) % 35).collect();
        let all: Vec<usize> = (0..13).collect();
        let one = pseudo_perplexity_at(&lm, &seq, &all, 1).unwrap();
        let many = pseudo_perplexity_at(&lm, &seq, &all, 13).unwrap();
        let five = pseudo_perplexity_at(&lm, &seq, &all, 5).unwrap();
        for r in [&many, &five] {
            assert!((r.pppl - one.pppl).abs() / one.pppl < 1e-5);
        }
        let mean = one.losses.iter().sum::<f64>() / 13.0;
        assert!((mean.exp() - one.pppl).abs() <= 1e-9 * one.pppl);
        assert!(one.pppl >= 1.0);
    }

    #[test]
    fn curve_bins() {
        let sample = vec![vec![5; 3], vec![6; 10], vec![7; 12]];
        let r = pppl_curve(&Uniform(20), &sample, &[4, 8, 16], None, 4).unwrap();
        assert_eq!(r.records.len(), 3);
        assert_eq!(r.bins.len(), 2);
        assert_eq!(r.bin(8, 16).unwrap().count, 2);
        assert!(pppl_curve(&Uniform(20), &[], &[4], None, 4).is_err());
        let single = pppl_curve(&Uniform(20), &sample[..1], &[4], None, 4).unwrap();
        assert_eq!(single.bins[0].mean_pppl, single.records[0].pppl);
        assert_eq!(default_bins(256), vec![64, 128, 256]);
        assert!(r.to_csv().starts_with("length_bin,mean_pppl,count\n0-4,"));
    }
}
