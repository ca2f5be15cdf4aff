//! Sequence classification and regression fine-tunes with a linear head,
//! grid search and early stopping on a held-out split.

use std::collections::BTreeSet;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{MaskMode, PackedBatch};
use crate::error::{Error, Result};
use crate::model::config::keyword_enum;
use crate::model::{Bound, Encoder, ParamKind};
use crate::optim::{clip_grad_norm, Adam, AdamConfig, OptimizerKind};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

keyword_enum!(
    /// Which representation feeds the head.
    Pooling {
        Mean => "mean",
        Cls => "cls",
    }
);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classification { n_classes: usize },
    Regression,
}

/// One labeled row. `id` is unique across the train and dev splits.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledText {
    pub id: usize,
    pub tokens: Vec<u32>,
    /// Class index for classification, target value for regression.
    pub label: f32,
}

/// Reads `label<TAB>text` lines. Ids count up from `first_id`.
pub fn parse_labeled(text: &str, tok: &Tokenizer, max_len: usize, first_id: usize) -> Result<Vec<LabeledText>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| Error::invalid(format!("labeled line {}: expected `label<TAB>text`", i + 1)))?;
        let label: f32 = label
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("labeled line {}: bad label `{label}`", i + 1)))?;
        let mut tokens = tok.encode(body);
        tokens.truncate(max_len);
        if tokens.is_empty() {
            return Err(Error::invalid(format!("labeled line {}: empty text", i + 1)));
        }
        out.push(LabeledText {
            id: first_id + out.len(),
            tokens,
            label,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub weight_decays: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            lrs: vec![5e-6, 6e-6, 8e-6, 1e-5, 2e-5, 3e-5],
            batch_sizes: vec![2, 4, 8, 16, 32],
            weight_decays: vec![1e-2, 1e-5],
        }
    }
}

impl Grid {
    pub fn single(lr: f64, batch_size: usize, weight_decay: f64) -> Self {
        Grid {
            lrs: vec![lr],
            batch_sizes: vec![batch_size],
            weight_decays: vec![weight_decay],
        }
    }

    pub fn len(&self) -> usize {
        self.lrs.len() * self.batch_sizes.len() * self.weight_decays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every `(lr, batch, wd)` combination, lr outermost.
    pub fn points(&self) -> Vec<(f64, usize, f64)> {
        let mut out = Vec::with_capacity(self.len());
        for &lr in &self.lrs {
            for &b in &self.batch_sizes {
                for &wd in &self.weight_decays {
                    out.push((lr, b, wd));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifyConfig {
    pub grid: Grid,
    pub epochs: usize,
    /// Non-improving evaluations tolerated before stopping.
    pub patience: usize,
    pub pooling: Pooling,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            grid: Grid::default(),
            epochs: 10,
            patience: 15,
            pooling: Pooling::Mean,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub metric: f64,
}

/// Everything one grid point did.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub steps: u64,
    pub eval_every: u64,
    pub evals: Vec<EvalRecord>,
    pub best_metric: f64,
    pub stopped_early: bool,
    pub trained_rows: BTreeSet<usize>,
    pub evaluated_rows: BTreeSet<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifyReport {
    pub runs: Vec<RunLog>,
    /// Index of the winning run; ties go to the earlier grid point.
    pub best: usize,
}

impl ClassifyReport {
    pub fn best_run(&self) -> &RunLog {
        &self.runs[self.best]
    }

    pub fn best_metric(&self) -> f64 {
        self.best_run().best_metric
    }

    /// `lr  batch  wd  steps  evals  best_metric  stopped_early`, one row per run.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("lr\tbatch\tweight_decay\tsteps\tevals\tbest_metric\tstopped_early\n");
        for r in &self.runs {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\n",
                r.lr,
                r.batch_size,
                r.weight_decay,
                r.steps,
                r.evals.len(),
                r.best_metric,
                r.stopped_early
            ));
        }
        s
    }
}

/// Accuracy for classification, Pearson correlation for regression.
pub fn dev_metric(task: TaskKind, preds: &[f32], labels: &[f32]) -> f64 {
    match task {
        TaskKind::Classification { .. } => {
            preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
        }
        TaskKind::Regression => pearson(preds, labels),
    }
}

/// Sample correlation; zero when either side is constant.
pub fn pearson(x: &[f32], y: &[f32]) -> f64 {
    let n = x.len().min(y.len());
    if n == 0 {
        return 0.0;
    }
    let mx = x[..n].iter().map(|&a| a as f64).sum::<f64>() / n as f64;
    let my = y[..n].iter().map(|&a| a as f64).sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] as f64 - mx, y[i] as f64 - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

fn validate(task: TaskKind, train: &[LabeledText], dev: &[LabeledText], cfg: &ClassifyConfig) -> Result<()> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid("train and dev splits must be nonempty"));
    }
    if cfg.grid.is_empty() || cfg.grid.batch_sizes.contains(&0) || cfg.grid.lrs.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::config("grid needs positive learning rates and batch sizes"));
    }
    if cfg.epochs == 0 {
        return Err(Error::config("epochs must be positive"));
    }
    if let TaskKind::Classification { n_classes } = task {
        if let Some(r) = train
            .iter()
            .chain(dev)
            .find(|r| r.label < 0.0 || r.label.fract() != 0.0 || r.label as usize >= n_classes)
        {
            return Err(Error::invalid(format!("row {}: label {} is not a class below {n_classes}", r.id, r.label)));
        }
    }
    let distinct: BTreeSet<u32> = train.iter().map(|r| r.label.to_bits()).collect();
    if distinct.len() < 2 {
        return Err(Error::invalid("training set has a single label"));
    }
    let train_ids: BTreeSet<usize> = train.iter().map(|r| r.id).collect();
    if train_ids.len() != train.len() {
        return Err(Error::invalid("duplicate row ids in training set"));
    }
    if let Some(r) = dev.iter().find(|r| train_ids.contains(&r.id)) {
        return Err(Error::invalid(format!("row {} is in both train and dev", r.id)));
    }
    if let Some(r) = train.iter().chain(dev).find(|r| r.tokens.is_empty()) {
        return Err(Error::invalid(format!("row {} has no tokens", r.id)));
    }
    Ok(())
}

/// Encoder plus head. The head is `[d, outputs]` weights and `[outputs]` bias.
struct Classifier {
    encoder: Encoder,
    weight: Tensor,
    bias: Tensor,
    pooling: Pooling,
}

impl Classifier {
    fn logits<'a>(&'a self, tape: &mut Tape<'a>, rows: &[&LabeledText]) -> Result<(Bound, Var, Var, Var)> {
        let bound = self.encoder.bind(tape);
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let seqs: Vec<Vec<u32>> = rows.iter().map(|r| r.tokens.clone()).collect();
        let batch = PackedBatch::from_sequences(&seqs, MaskMode::PackedBlockDiagonal, u32::MAX);
        let h = self.encoder.forward(tape, &bound, &(&batch).into())?;
        let docs = batch.documents();
        let pooled = match self.pooling {
            Pooling::Mean => tape.segment_mean(h, &docs)?,
            Pooling::Cls => tape.gather_rows(h, &docs.iter().map(|d| d[0]).collect::<Vec<_>>())?,
        };
        let z = tape.matmul(pooled, w)?;
        let out = tape.add_row(z, b)?;
        Ok((bound, w, b, out))
    }

    fn predict(&self, task: TaskKind, rows: &[&LabeledText]) -> Result<Vec<f32>> {
        let mut preds = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(32) {
            let mut tape = Tape::inference();
            let (_, _, _, out) = self.logits(&mut tape, chunk)?;
            let t = tape.value(out);
            for i in 0..chunk.len() {
                let row = t.row(i);
                preds.push(match task {
                    TaskKind::Regression => row[0],
                    TaskKind::Classification { .. } => {
                        let mut best = 0;
                        for (j, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = j;
                            }
                        }
                        best as f32
                    }
                });
            }
        }
        Ok(preds)
    }
}

/// Fine-tunes a fresh copy of `encoder` with a linear head at every grid
/// point and keeps the best dev score. Evaluation runs every
/// `max(1, min(500, batches_per_epoch / 10))` steps and at the end of
/// training; a run stops once more than `patience` evaluations in a row fail
/// to beat its best.
pub fn classify_finetune(
    encoder: &Encoder,
    task: TaskKind,
    train: &[LabeledText],
    dev: &[LabeledText],
    cfg: &ClassifyConfig,
) -> Result<ClassifyReport> {
    validate(task, train, dev, cfg)?;
    let mut runs = Vec::new();
    for (k, (lr, batch_size, wd)) in cfg.grid.points().into_iter().enumerate() {
        let run = finetune_one(encoder, task, train, dev, cfg, lr, batch_size, wd, k as u64)?;
        info!(
            "grid point lr={lr} batch={batch_size} wd={wd}: best {:.4} after {} steps",
            run.best_metric, run.steps
        );
        runs.push(run);
    }
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.best_metric > runs[best].best_metric {
            best = i;
        }
    }
    Ok(ClassifyReport { runs, best })
}

#[allow(clippy::too_many_arguments)]
fn finetune_one(
    encoder: &Encoder,
    task: TaskKind,
    train: &[LabeledText],
    dev: &[LabeledText],
    cfg: &ClassifyConfig,
    lr: f64,
    batch_size: usize,
    weight_decay: f64,
    run: u64,
) -> Result<RunLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(run);
    let d = encoder.cfg.d_model;
    let outputs = match task {
        TaskKind::Classification { n_classes } => n_classes,
        TaskKind::Regression => 1,
    };
    let mut model = Classifier {
        encoder: encoder.clone(),
        weight: Tensor::randn(&[d, outputs], 0.02, &mut rng).with_grad(true),
        bias: Tensor::zeros(&[outputs]).with_grad(true),
        pooling: cfg.pooling,
    };
    let adam = AdamConfig {
        kind: OptimizerKind::AdamW,
        weight_decay,
        ..AdamConfig::neobert()
    };
    let mut shapes: Vec<&[usize]> = model.encoder.params.iter().map(|(_, t)| t.shape()).collect();
    shapes.push(model.weight.shape());
    shapes.push(model.bias.shape());
    let mut opt = Adam::new(adam, &shapes);

    let per_epoch = train.len().div_ceil(batch_size) as u64;
    let eval_every = (per_epoch / 10).clamp(1, 500);
    let total = per_epoch * cfg.epochs as u64;
    let dev_rows: Vec<&LabeledText> = dev.iter().collect();
    let dev_labels: Vec<f32> = dev.iter().map(|r| r.label).collect();
    let mut log = RunLog {
        lr,
        batch_size,
        weight_decay,
        steps: 0,
        eval_every,
        evals: Vec::new(),
        best_metric: f64::NEG_INFINITY,
        stopped_early: false,
        trained_rows: BTreeSet::new(),
        evaluated_rows: BTreeSet::new(),
    };
    let mut bad = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let rows: Vec<&LabeledText> = chunk.iter().map(|&i| &train[i]).collect();
            log.trained_rows.extend(rows.iter().map(|r| r.id));
            let mut grads = {
                let mut tape = Tape::new();
                let (bound, w, b, out) = model.logits(&mut tape, &rows)?;
                let loss = match task {
                    TaskKind::Classification { .. } => {
                        let targets: Vec<i32> = rows.iter().map(|r| r.label as i32).collect();
                        tape.cross_entropy(out, &targets, -1)?
                    }
                    TaskKind::Regression => {
                        let targets: Vec<f32> = rows.iter().map(|r| r.label).collect();
                        tape.mse(out, &targets)?
                    }
                };
                let mut g = tape.backward(loss)?;
                let gw = g.take(w).expect("head weight gradient");
                let gb = g.take(b).expect("head bias gradient");
                let mut all = bound.collect(g);
                all.push(gw);
                all.push(gb);
                all
            };
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(&mut grads, cfg.clip_norm)?;
            }
            // Linear decay to zero over the planned steps.
            let step_lr = lr * (1.0 - log.steps as f64 / total as f64);
            let Classifier {
                encoder, weight, bias, ..
            } = &mut model;
            let params = encoder
                .params
                .iter_mut()
                .map(|(n, t)| (t, ParamKind::of(n).decays()))
                .chain([(weight, true), (bias, false)]);
            opt.step(params, &grads, step_lr)?;
            log.steps += 1;
            if (log.steps.is_multiple_of(eval_every) || log.steps == total)
                && evaluate(&model, task, &dev_rows, &dev_labels, &mut log, &mut bad)? > cfg.patience
            {
                log.stopped_early = log.steps < total;
                break 'epochs;
            }
        }
    }
    Ok(log)
}

/// Scores the dev split, records it and returns the count of consecutive
/// non-improving evaluations.
fn evaluate(
    model: &Classifier,
    task: TaskKind,
    rows: &[&LabeledText],
    labels: &[f32],
    log: &mut RunLog,
    bad: &mut usize,
) -> Result<usize> {
    let preds = model.predict(task, rows)?;
    log.evaluated_rows.extend(rows.iter().map(|r| r.id));
    let metric = dev_metric(task, &preds, labels);
    log.evals.push(EvalRecord { step: log.steps, metric });
    if metric > log.best_metric {
        log.best_metric = metric;
        *bad = 0;
    } else {
        *bad += 1;
    }
    Ok(*bad)
}
