//! Contrastive fine-tuning of pooled sentence embeddings with InfoNCE over
//! in-batch, task-homogeneous negatives plus optional hard negatives.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{MaskMode, PackedBatch};
use crate::error::{Error, Result};
use crate::model::config::keyword_enum;
use crate::model::{Encoder, ParamKind};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::tokenizer::Tokenizer;

keyword_enum!(
    /// How query and document embeddings are compared.
    Similarity {
        Cosine => "cosine",
        Dot => "dot",
    }
);

/// One training record: query, its positive, and listed hard negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub task: String,
    pub instruction: String,
    pub query: String,
    pub positive: String,
    pub hard_negatives: Vec<String>,
}

/// Reads tab-separated `task, instruction, query, positive, negatives…` lines.
pub fn parse_pairs(text: &str) -> Result<Vec<PairExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 4 {
            return Err(Error::invalid(format!("pair line {}: expected at least 4 fields, got {}", i + 1, f.len())));
        }
        if f[2].trim().is_empty() || f[3].trim().is_empty() {
            return Err(Error::invalid(format!("pair line {}: empty query or positive", i + 1)));
        }
        out.push(PairExample {
            task: f[0].to_string(),
            instruction: f[1].to_string(),
            query: f[2].to_string(),
            positive: f[3].to_string(),
            hard_negatives: f[4..].iter().filter(|s| !s.is_empty()).map(|s| s.to_string()).collect(),
        });
    }
    Ok(out)
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text)
}

/// A pair example as token ids. The query side already carries the
/// instruction prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    pub task: String,
    pub query: Vec<u32>,
    pub positive: Vec<u32>,
    pub hard_negatives: Vec<Vec<u32>>,
}

/// Instruction ids, a SEP marker, then the text ids. Without an instruction
/// the text ids alone.
pub fn query_ids(tok: &Tokenizer, instruction: &str, text: &str) -> Vec<u32> {
    let text_ids = tok.encode(text);
    let inst = tok.encode(instruction);
    if inst.is_empty() {
        return text_ids;
    }
    let mut ids = inst;
    ids.push(tok.specials().sep);
    ids.extend(text_ids);
    ids
}

/// Tokenizes every example, truncating each side to `max_len`.
pub fn encode_pairs(tok: &Tokenizer, pairs: &[PairExample], max_len: usize) -> Result<Vec<EncodedPair>> {
    let cut = |mut v: Vec<u32>| {
        v.truncate(max_len);
        v
    };
    pairs
        .iter()
        .map(|p| {
            let e = EncodedPair {
                task: p.task.clone(),
                query: cut(query_ids(tok, &p.instruction, &p.query)),
                positive: cut(tok.encode(&p.positive)),
                hard_negatives: p.hard_negatives.iter().map(|h| cut(tok.encode(h))).collect(),
            };
            if e.query.is_empty() || e.positive.is_empty() || e.hard_negatives.iter().any(Vec::is_empty) {
                return Err(Error::invalid(format!("example `{}` tokenizes to nothing", p.query)));
            }
            Ok(e)
        })
        .collect()
}

/// Groups examples by task tag, in first-seen order.
pub fn group_by_task(pairs: Vec<EncodedPair>) -> Vec<(String, Vec<EncodedPair>)> {
    let mut groups: Vec<(String, Vec<EncodedPair>)> = Vec::new();
    for p in pairs {
        match groups.iter_mut().find(|(t, _)| *t == p.task) {
            Some((_, g)) => g.push(p),
            None => groups.push((p.task.clone(), vec![p])),
        }
    }
    groups
}

pub fn cosine_sim(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "cosine_sim",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
    let nu: f64 = u.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine similarity with a zero vector"));
    }
    Ok(dot / (nu * nv))
}

/// `πᵢ = nᵢ^α / Σⱼ nⱼ^α`.
pub fn dataset_mix_probs(sizes: &[usize], alpha: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::invalid("dataset sizes must be positive"));
    }
    // Scale by the largest size first so large α cannot overflow.
    let max = *sizes.iter().max().expect("nonempty") as f64;
    let w: Vec<f64> = sizes.iter().map(|&n| (n as f64 / max).powf(alpha)).collect();
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|x| x / total).collect())
}

/// `−log(e^{s⁺/τ} / (e^{s⁺/τ} + Σ e^{s⁻/τ}))`, evaluated max-shifted.
pub fn info_nce(sim_pos: f64, sim_negs: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    if sim_negs.is_empty() {
        return Err(Error::invalid("InfoNCE needs at least one negative"));
    }
    let pos = sim_pos / tau;
    let logits: Vec<f64> = std::iter::once(pos).chain(sim_negs.iter().map(|s| s / tau)).collect();
    let top = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
    let max = logits[top];
    // ln_1p keeps precision when one logit dominates.
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, l)| (l - max).exp())
        .sum();
    Ok(max - pos + rest.ln_1p())
}

/// Where a negative comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Negative {
    /// The positive of another in-batch example.
    InBatch(usize),
    /// Hard negative `k` of in-batch example `i` (always the query's own).
    Hard(usize, usize),
}

/// A task-homogeneous batch and each query's negative set.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    /// Indices into the pool.
    pub members: Vec<usize>,
    pub negatives: Vec<Vec<Negative>>,
}

/// Samples `batch_size` distinct examples of one task. Each query's
/// negatives are the other in-batch positives and its own hard negatives.
pub fn build_batch<R: Rng + ?Sized>(pool: &[EncodedPair], batch_size: usize, rng: &mut R) -> Result<ContrastiveBatch> {
    if batch_size == 0 || pool.len() < batch_size {
        return Err(Error::invalid(format!(
            "cannot draw {batch_size} examples from a pool of {}",
            pool.len()
        )));
    }
    let task = &pool[0].task;
    if let Some(p) = pool.iter().find(|p| &p.task != task) {
        return Err(Error::invalid(format!("mixed task tags `{task}` and `{}` in one pool", p.task)));
    }
    let members = sample(rng, pool.len(), batch_size).into_vec();
    let negatives = members
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let mut n: Vec<Negative> = (0..batch_size).filter(|&j| j != i).map(Negative::InBatch).collect();
            n.extend((0..pool[m].hard_negatives.len()).map(|k| Negative::Hard(i, k)));
            n
        })
        .collect();
    Ok(ContrastiveBatch { members, negatives })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub similarity: Similarity,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.07,
            alpha: 0.5,
            steps: 2000,
            batch_size: 64,
            lr: 2e-5,
            similarity: Similarity::Cosine,
            adam: AdamConfig::neobert(),
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::config("temperature must be positive and alpha nonnegative"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("contrastive batches need at least 2 examples"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        Ok(())
    }
}

/// Pooled embeddings of many sequences in one block-diagonal pass; returns the
/// tape variable of the `[n, d]` result.
fn pooled<'a>(
    encoder: &'a Encoder,
    tape: &mut Tape<'a>,
    bound: &crate::model::Bound,
    seqs: &[Vec<u32>],
    normalize: bool,
) -> Result<crate::autodiff::Var> {
    let batch = PackedBatch::from_sequences(seqs, MaskMode::PackedBlockDiagonal, u32::MAX);
    let h = encoder.forward(tape, bound, &(&batch).into())?;
    let p = tape.segment_mean(h, &batch.documents())?;
    if normalize {
        tape.l2_normalize_rows(p)
    } else {
        Ok(p)
    }
}

/// Mean InfoNCE of a batch and its parameter gradients (registry order).
pub fn contrastive_loss_and_grads(
    encoder: &Encoder,
    pool: &[EncodedPair],
    batch: &ContrastiveBatch,
    cfg: &ContrastiveConfig,
) -> Result<(f64, Vec<crate::tensor::Tensor>)> {
    let b = batch.members.len();
    let mut seqs: Vec<Vec<u32>> = batch.members.iter().map(|&m| pool[m].query.clone()).collect();
    seqs.extend(batch.members.iter().map(|&m| pool[m].positive.clone()));
    let mut hard_col = Vec::with_capacity(b);
    let mut col = b;
    for &m in &batch.members {
        hard_col.push(col);
        for h in &pool[m].hard_negatives {
            seqs.push(h.clone());
            col += 1;
        }
    }
    let n_docs = col;
    let mut allowed = vec![false; b * n_docs];
    for (i, negs) in batch.negatives.iter().enumerate() {
        allowed[i * n_docs + i] = true;
        for n in negs {
            let c = match *n {
                Negative::InBatch(j) => j,
                Negative::Hard(owner, k) => hard_col[owner] + k,
            };
            allowed[i * n_docs + c] = true;
        }
    }
    let mut tape = Tape::new();
    let bound = encoder.bind(&mut tape);
    let emb = pooled(encoder, &mut tape, &bound, &seqs, cfg.similarity == Similarity::Cosine)?;
    let q_rows: Vec<usize> = (0..b).collect();
    let d_rows: Vec<usize> = (b..b + n_docs).collect();
    let q = tape.gather_rows(emb, &q_rows)?;
    let d = tape.gather_rows(emb, &d_rows)?;
    let sims = tape.matmul_bt(q, d)?;
    let logits = tape.scale(sims, (1.0 / cfg.temperature) as f32);
    let targets: Vec<i32> = (0..b as i32).collect();
    let loss = tape.cross_entropy_masked(logits, &targets, -1, Some(allowed))?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    Ok((value, bound.collect(grads)))
}

/// Per-step record of a fine-tuning run.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveStep {
    pub step: u64,
    pub dataset: usize,
    pub loss: f64,
}

/// Runs `cfg.steps` updates. Each step picks a dataset by
/// [`dataset_mix_probs`], draws a task-homogeneous batch of
/// `min(batch_size, dataset size)` and applies one AdamW step at fixed lr.
pub fn finetune_contrastive(
    encoder: &mut Encoder,
    datasets: &[Vec<EncodedPair>],
    cfg: &ContrastiveConfig,
) -> Result<Vec<ContrastiveStep>> {
    cfg.validate()?;
    if datasets.is_empty() || datasets.iter().any(|d| d.len() < 2) {
        return Err(Error::invalid("every dataset needs at least 2 examples"));
    }
    let probs = dataset_mix_probs(&datasets.iter().map(Vec::len).collect::<Vec<_>>(), cfg.alpha)?;
    let shapes: Vec<&[usize]> = encoder.params.iter().map(|(_, t)| t.shape()).collect();
    let mut opt = Adam::new(cfg.adam, &shapes);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step);
        let ds = pick(&probs, rng.random::<f64>());
        let pool = &datasets[ds];
        let batch = build_batch(pool, cfg.batch_size.min(pool.len()), &mut rng)?;
        let (loss, mut grads) = contrastive_loss_and_grads(encoder, pool, &batch, cfg)?;
        if cfg.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, cfg.clip_norm)?;
        }
        let params = encoder.params.iter_mut().map(|(n, t)| (t, ParamKind::of(n).decays()));
        opt.step(params, &grads, cfg.lr)?;
        log.push(ContrastiveStep { step, dataset: ds, loss });
    }
    Ok(log)
}

/// Index whose cumulative probability first exceeds `u`.
pub fn pick(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Unit-normalized mean-pooled embedding of `instruction ⧺ SEP ⧺ text`
/// (or `text` alone for an empty instruction).
pub fn embed(encoder: &Encoder, tok: &Tokenizer, text: &str, instruction: &str) -> Result<Vec<f32>> {
    let ids = query_ids(tok, instruction, text);
    if ids.is_empty() {
        return Err(Error::invalid(format!("`{text}` is empty after tokenization")));
    }
    Ok(encoder.embed_sequences(&[ids])?.remove(0))
}
