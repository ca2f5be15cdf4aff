//! Inference throughput sweep over sequence lengths with batch doubling.

use std::fmt::Write as _;
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{MaskMode, PackedBatch};
use crate::error::{Error, Result};
use crate::model::{param_count, Encoder, ModelConfig};
use crate::tokenizer::NUM_SPECIAL;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub seq_lens: Vec<usize>,
    pub max_batch: usize,
    /// Timed forward passes per repeat.
    pub steps: u64,
    pub repeats: usize,
    /// Untimed forward passes before each batch size is measured.
    pub warmup: usize,
    /// Estimated working-set ceiling; larger batches count as out of memory.
    pub memory_budget: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seq_lens: vec![128, 256, 512, 1024, 2048, 4096],
            max_batch: 512,
            steps: 100,
            repeats: 3,
            warmup: 5,
            memory_budget: 2 << 30,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_lens.is_empty() || self.seq_lens.contains(&0) {
            return Err(Error::config("bench needs at least one positive sequence length"));
        }
        if self.steps == 0 || self.repeats == 0 || self.max_batch == 0 {
            return Err(Error::config("bench steps, repeats and max_batch must be positive"));
        }
        Ok(())
    }
}

/// `seq_len · batch · steps / wall_seconds`.
pub fn tokens_per_sec(seq_len: usize, batch: usize, steps: u64, wall_seconds: f64) -> f64 {
    (seq_len * batch) as f64 * steps as f64 / wall_seconds
}

/// Rough working set of one inference forward in bytes: parameters, a
/// dozen activation buffers per token and layer, and the attention scores.
pub fn estimate_bytes(cfg: &ModelConfig, batch: usize, seq_len: usize) -> usize {
    let tokens = batch * seq_len;
    let per_layer = tokens * (12 * cfg.d_model + 3 * cfg.ffn_width()) + 2 * batch * cfg.n_heads * seq_len * seq_len;
    4 * (param_count(cfg) + cfg.n_layers * per_layer + tokens * cfg.vocab_size.min(cfg.d_model))
}

/// Measurements of one batch size.
#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub batch: usize,
    pub wall_seconds: Vec<f64>,
    pub tokens_per_sec: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over repeats; zero for a single repeat.
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    /// Longer than the position scheme can address.
    Unsupported,
    /// Even batch size 1 is over the memory budget.
    OutOfMemory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub seq_len: usize,
    pub status: RowStatus,
    pub steps: u64,
    /// Every batch size measured, in doubling order.
    pub tried: Vec<Timing>,
    /// Index into `tried` of the highest mean throughput.
    pub best: Option<usize>,
}

impl BenchRow {
    pub fn best_timing(&self) -> Option<&Timing> {
        self.best.map(|i| &self.tried[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// `seq_len  status  batch  steps  tokens_per_sec_mean  tokens_per_sec_std  wall_seconds`;
    /// unsupported and out-of-memory rows show dashes.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("seq_len\tstatus\tbatch\tsteps\ttokens_per_sec_mean\ttokens_per_sec_std\twall_seconds\n");
        for r in &self.rows {
            match (r.status, r.best_timing()) {
                (RowStatus::Ok, Some(t)) => {
                    let walls: Vec<String> = t.wall_seconds.iter().map(|w| format!("{w:.6}")).collect();
                    let _ = writeln!(
                        s,
                        "{}\tok\t{}\t{}\t{:.1}\t{:.1}\t{}",
                        r.seq_len,
                        t.batch,
                        r.steps,
                        t.mean,
                        t.std,
                        walls.join(",")
                    );
                }
                (status, _) => {
                    let name = if status == RowStatus::Unsupported { "unsupported" } else { "oom" };
                    let _ = writeln!(s, "{}\t{name}\t-\t{}\t-\t-\t-", r.seq_len, r.steps);
                }
            }
        }
        s
    }
}

fn fits(cfg: &ModelConfig, batch: usize, seq_len: usize, budget: usize) -> bool {
    let need = estimate_bytes(cfg, batch, seq_len);
    need <= budget && Vec::<u8>::new().try_reserve_exact(need).is_ok()
}

/// For each sequence length, doubles the batch from 1 while it stays within
/// `max_batch` and the memory budget, timing `repeats × steps` inference
/// forwards after `warmup` untimed ones. Model construction is not timed.
pub fn throughput_bench(cfg: &ModelConfig, bc: &BenchConfig) -> Result<BenchReport> {
    bc.validate()?;
    let encoder = Encoder::new(cfg.clone(), bc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(bc.seed);
    let lo = NUM_SPECIAL.min(cfg.vocab_size as u32 - 1);
    let mut rows = Vec::new();
    for &seq_len in &bc.seq_lens {
        let mut row = BenchRow {
            seq_len,
            status: RowStatus::Ok,
            steps: bc.steps,
            tried: Vec::new(),
            best: None,
        };
        if seq_len > cfg.position_limit() {
            row.status = RowStatus::Unsupported;
            rows.push(row);
            continue;
        }
        let mut batch = 1;
        while batch <= bc.max_batch && fits(cfg, batch, seq_len, bc.memory_budget) {
            let seqs: Vec<Vec<u32>> = (0..batch)
                .map(|_| (0..seq_len).map(|_| rng.random_range(lo..cfg.vocab_size as u32)).collect())
                .collect();
            let input = PackedBatch::from_sequences(&seqs, MaskMode::Padded, 0);
            let inputs = (&input).into();
            for _ in 0..bc.warmup {
                encoder.hidden(&inputs)?;
            }
            let mut walls = Vec::with_capacity(bc.repeats);
            for _ in 0..bc.repeats {
                let start = Instant::now();
                for _ in 0..bc.steps {
                    std::hint::black_box(encoder.hidden(&inputs)?);
                }
                walls.push(start.elapsed().as_secs_f64());
            }
            let tps: Vec<f64> = walls.iter().map(|&w| tokens_per_sec(seq_len, batch, bc.steps, w)).collect();
            let mean = tps.iter().sum::<f64>() / tps.len() as f64;
            let std = if tps.len() > 1 {
                (tps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (tps.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            info!("seq_len {seq_len} batch {batch}: {mean:.0} ± {std:.0} tokens/s");
            row.tried.push(Timing {
                batch,
                wall_seconds: walls,
                tokens_per_sec: tps,
                mean,
                std,
            });
            batch *= 2;
        }
        if row.tried.is_empty() {
            row.status = RowStatus::OutOfMemory;
        } else {
            let mut best = 0;
            for (i, t) in row.tried.iter().enumerate() {
                if t.mean > row.tried[best].mean {
                    best = i;
                }
            }
            row.best = Some(best);
        }
        rows.push(row);
    }
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Positional;

    fn quick(seq_lens: Vec<usize>) -> BenchConfig {
        BenchConfig {
            seq_lens,
            max_batch: 4,
            steps: 2,
            repeats: 2,
            warmup: 1,
            memory_budget: 1 << 30,
            seed: 0,
        }
    }

    #[test]
    fn arithmetic() {
        assert_eq!(tokens_per_sec(512, 4, 100, 2.0), 102_400.0);
    }

    #[test]
    fn absolute_positions_give_unsupported_rows() {
        let mut cfg = ModelConfig::toy(64);
        cfg.positional = Positional::AbsoluteLearned;
        cfg.max_positions = 32;
        let rep = throughput_bench(&cfg, &quick(vec![16, 64])).unwrap();
        assert_eq!(rep.rows[0].status, RowStatus::Ok);
        assert_eq!(rep.rows[1].status, RowStatus::Unsupported);
        assert!(rep.to_tsv().contains("64\tunsupported\t-"));
    }

    #[test]
    fn doubling_and_recomputation() {
        let cfg = ModelConfig::toy(64);
        let rep = throughput_bench(&cfg, &quick(vec![8])).unwrap();
        let r = &rep.rows[0];
        assert_eq!(r.tried.iter().map(|t| t.batch).collect::<Vec<_>>(), vec![1, 2, 4]);
        for t in &r.tried {
            for (w, tps) in t.wall_seconds.iter().zip(&t.tokens_per_sec) {
                assert_eq!(tokens_per_sec(8, t.batch, 2, *w), *tps);
            }
        }
    }

    #[test]
    fn budget_stops_doubling() {
        let cfg = ModelConfig::toy(64);
        let mut bc = quick(vec![8]);
        bc.max_batch = 64;
        bc.memory_budget = estimate_bytes(&cfg, 2, 8);
        let rep = throughput_bench(&cfg, &bc).unwrap();
        assert_eq!(rep.rows[0].tried.len(), 2);
        bc.memory_budget = 1;
        let rep = throughput_bench(&cfg, &bc).unwrap();
        assert_eq!(rep.rows[0].status, RowStatus::OutOfMemory);
    }
}
