//! The M0→M9 ablation chain at toy scale: configurations, delta validation,
//! the leakage probe and the comparative driver.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{pack_sequences, Corruptor, MaskMode, MaskingScheme, Mixture, PackedBatch};
use crate::error::{Error, Result};
use crate::eval::classify::{classify_finetune, ClassifyConfig, Grid, LabeledText, TaskKind};
use crate::eval::pppl::{pseudo_perplexity_at, EncoderLm};
use crate::model::config::keyword_enum;
use crate::model::{param_count, Activation, Encoder, ModelConfig, NormKind, Positional};
use crate::optim::{OptimizerKind, SchedulerKind};
use crate::synthetic::{labeled_pattern_corpus, PatternSpec};
use crate::tokenizer::{Tokenizer, TokenizerMode};
use crate::train::{Stage, TrainPlan, Trainer};

keyword_enum!(
    /// Pretraining corpus of an ablation step. Narrow keeps half the
    /// topics and a quarter of the documents.
    Dataset {
        Narrow => "narrow",
        Broad => "broad",
    }
);

keyword_enum!(
    /// Field groups an ablation step may change.
    Field {
        Positional => "positional",
        Activation => "activation",
        Norm => "norm",
        Dataset => "dataset",
        Tokenizer => "tokenizer",
        Optimizer => "optimizer",
        Scheduler => "scheduler",
        Masking => "masking",
        Packing => "packing",
        ModelSize => "model-size",
        BatchSize => "batch-size",
        ContextLength => "context-length",
    }
);

impl Ord for Field {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

impl PartialOrd for Field {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Everything that defines one ablation model. The model's vocabulary size
/// follows the tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub name: String,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub dataset: Dataset,
    pub tokenizer: TokenizerMode,
    pub vocab_cap: usize,
    /// Parent in the chain; successors of M3 and M6 skip them.
    pub parent: Option<usize>,
    /// Field groups this step is allowed, and required, to change.
    pub delta: BTreeSet<Field>,
    /// Set when full-scale values are shrunk with their ratios preserved.
    pub scaled: bool,
}

/// Field groups that differ between two configurations, plus the names of
/// any differing fields outside every group.
pub fn config_diff(a: &AblationConfig, b: &AblationConfig) -> (BTreeSet<Field>, Vec<&'static str>) {
    let mut fields = BTreeSet::new();
    let mut other = Vec::new();
    let (ma, mb) = (&a.model, &b.model);
    let mut mark = |changed: bool, f: Field| {
        if changed {
            fields.insert(f);
        }
    };
    mark(ma.positional != mb.positional || ma.rope_scaling != mb.rope_scaling, Field::Positional);
    mark(ma.activation != mb.activation, Field::Activation);
    mark(ma.norm != mb.norm, Field::Norm);
    mark(
        (ma.n_layers, ma.d_model, ma.n_heads, ma.ffn_hidden) != (mb.n_layers, mb.d_model, mb.n_heads, mb.ffn_hidden),
        Field::ModelSize,
    );
    mark(a.dataset != b.dataset, Field::Dataset);
    mark((a.tokenizer, a.vocab_cap) != (b.tokenizer, b.vocab_cap), Field::Tokenizer);
    let (pa, pb) = (&a.plan, &b.plan);
    mark(pa.adam.kind != pb.adam.kind, Field::Optimizer);
    mark(pa.schedule.kind != pb.schedule.kind, Field::Scheduler);
    mark(pa.mask_rate != pb.mask_rate || pa.mask_scheme != pb.mask_scheme, Field::Masking);
    mark(pa.packing != pb.packing, Field::Packing);
    mark(pa.batch_tokens != pb.batch_tokens, Field::BatchSize);
    let lens = |p: &TrainPlan| p.stages.iter().map(|s| s.max_len).collect::<Vec<_>>();
    mark(lens(pa) != lens(pb), Field::ContextLength);

    let mut check = |changed: bool, name: &'static str| {
        if changed {
            other.push(name);
        }
    };
    check(ma.max_positions != mb.max_positions, "max_positions");
    check(ma.rope_theta != mb.rope_theta, "rope_theta");
    check(ma.norm_placement != mb.norm_placement, "norm_placement");
    check(ma.use_bias != mb.use_bias, "use_bias");
    check(ma.tie_mlm_head != mb.tie_mlm_head, "tie_mlm_head");
    check(ma.norm_eps != mb.norm_eps, "norm_eps");
    check(ma.init_std != mb.init_std, "init_std");
    let (sa, sb) = (&pa.schedule, &pb.schedule);
    check(sa.peak_lr != sb.peak_lr, "peak_lr");
    check(sa.warmup_steps != sb.warmup_steps, "warmup_steps");
    check(sa.decay_fraction != sb.decay_fraction, "decay_fraction");
    check(sa.floor_fraction != sb.floor_fraction, "floor_fraction");
    let (oa, ob) = (&pa.adam, &pb.adam);
    check((oa.beta1, oa.beta2, oa.eps) != (ob.beta1, ob.beta2, ob.eps), "adam_betas");
    check(oa.weight_decay != ob.weight_decay, "weight_decay");
    check(pa.clip_norm != pb.clip_norm, "clip_norm");
    check(pa.cycle != pb.cycle, "cycle");
    check(pa.seed != pb.seed, "seed");
    let steps = |p: &TrainPlan| p.stages.iter().map(|s| (s.steps, s.mixture)).collect::<Vec<_>>();
    check(steps(pa) != steps(pb), "stages");
    (fields, other)
}

/// Base geometry and training length of the toy chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyScale {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub batch_tokens: usize,
    pub max_len: usize,
    pub steps: u64,
    pub peak_lr: f64,
    /// Final-step batch and context growth; full scale is 2M/131k and 4096/512.
    pub batch_ratio: usize,
    pub context_ratio: usize,
    pub seed: u64,
}

impl Default for ToyScale {
    fn default() -> Self {
        ToyScale {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            batch_tokens: 512,
            max_len: 64,
            steps: 50,
            peak_lr: 3e-3,
            batch_ratio: 16,
            context_ratio: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub configs: Vec<AblationConfig>,
}

impl AblationSpec {
    /// M0 (BERT-like, Pre-LN) through M9 (NeoBERT) at toy proportions.
    pub fn toy(scale: ToyScale) -> Self {
        let model = ModelConfig {
            n_layers: scale.n_layers,
            d_model: scale.d_model,
            n_heads: scale.n_heads,
            vocab_size: 0,
            max_positions: (scale.max_len * scale.context_ratio).max(1024),
            positional: Positional::AbsoluteLearned,
            norm: NormKind::LayerNorm,
            activation: Activation::Gelu,
            ..ModelConfig::neobert()
        };
        let mut plan = TrainPlan::neobert();
        plan.schedule.kind = SchedulerKind::Linear;
        plan.schedule.peak_lr = scale.peak_lr;
        plan.schedule.warmup_steps = (scale.steps / 10).max(1);
        plan.adam.kind = OptimizerKind::Adam;
        plan.mask_rate = 0.15;
        plan.mask_scheme = MaskingScheme::BERT;
        plan.batch_tokens = scale.batch_tokens;
        plan.seed = scale.seed;
        plan.stages = vec![Stage {
            max_len: scale.max_len,
            steps: scale.steps,
            mixture: Mixture::base_only(),
        }];
        let m0 = AblationConfig {
            name: "M0".into(),
            model,
            plan,
            dataset: Dataset::Narrow,
            tokenizer: TokenizerMode::WhitespaceVocab,
            vocab_cap: 4096,
            parent: None,
            delta: BTreeSet::new(),
            scaled: false,
        };
        let mut configs = vec![m0];
        let mut step = |parent: usize, delta: &[Field], edit: &dyn Fn(&mut AblationConfig)| {
            let mut c = configs[parent].clone();
            c.name = format!("M{}", configs.len());
            c.parent = Some(parent);
            c.delta = delta.iter().copied().collect();
            c.scaled = false;
            edit(&mut c);
            configs.push(c);
        };
        step(0, &[Field::Positional, Field::Activation, Field::Norm], &|c| {
            c.model.positional = Positional::Rope;
            c.model.activation = Activation::Swiglu;
            c.model.norm = NormKind::RmsNorm;
        });
        step(1, &[Field::Dataset], &|c| c.dataset = Dataset::Broad);
        step(2, &[Field::Tokenizer], &|c| {
            c.tokenizer = TokenizerMode::CharFallback;
            c.vocab_cap = 64;
        });
        step(2, &[Field::Optimizer, Field::Scheduler], &|c| {
            c.plan.adam.kind = OptimizerKind::AdamW;
            c.plan.schedule.kind = SchedulerKind::Cosine;
        });
        step(4, &[Field::Masking], &|c| {
            c.plan.mask_rate = 0.2;
            c.plan.mask_scheme = MaskingScheme::ALL_MASK;
        });
        step(5, &[Field::Packing], &|c| c.plan.packing = MaskMode::PackedNaive);
        step(5, &[Field::ModelSize], &|c| {
            c.model.n_layers = scale.n_layers + scale.n_layers.div_ceil(2);
            c.model.d_model = 2 * scale.d_model;
        });
        // Deeper and narrower at about the same block parameter budget.
        step(7, &[Field::ModelSize], &|c| {
            c.model.n_layers *= 4;
            c.model.d_model = scale.d_model;
        });
        step(8, &[Field::BatchSize, Field::ContextLength], &|c| {
            c.plan.batch_tokens *= scale.batch_ratio;
            for s in &mut c.plan.stages {
                s.max_len *= scale.context_ratio;
            }
            c.scaled = true;
        });
        AblationSpec { configs }
    }

    /// Every step changes exactly its declared field groups relative to its
    /// parent, and nothing else.
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.configs.iter().enumerate() {
            let mut m = c.model.clone();
            m.vocab_size = m.vocab_size.max(8);
            m.validate()?;
            let Some(p) = c.parent else {
                continue;
            };
            if p >= i {
                return Err(Error::config(format!("{} must come after its parent", c.name)));
            }
            let (fields, other) = config_diff(&self.configs[p], c);
            if let Some(name) = other.first() {
                return Err(Error::config(format!(
                    "{} changes `{name}`, which is outside its declared delta",
                    c.name
                )));
            }
            if fields != c.delta {
                let show = |s: &BTreeSet<Field>| s.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(",");
                return Err(Error::config(format!(
                    "{} changes {{{}}} relative to {} but declares {{{}}}",
                    c.name,
                    show(&fields),
                    self.configs[p].name,
                    show(&c.delta)
                )));
            }
        }
        Ok(())
    }
}

/// Whether the output at some token of the first document moves when the
/// tokens of a co-packed, unrelated document change.
pub fn leakage_probe(encoder: &Encoder, mode: MaskMode, docs: &[Vec<u32>], seed: u64) -> Result<bool> {
    if docs.len() < 2 {
        return Err(Error::invalid("leakage probe needs at least two documents"));
    }
    let capacity: usize = docs.iter().map(Vec::len).sum();
    let run = |docs: &[Vec<u32>]| -> Result<(crate::tensor::Tensor, Vec<usize>)> {
        let batch = PackedBatch::concat(&pack_sequences(docs, capacity, mode, 0))?;
        let first: Vec<usize> = (0..batch.len()).filter(|&i| batch.seq_ids[i] == 0 && batch.token_ids[i] != 0).collect();
        Ok((encoder.hidden(&(&batch).into())?, first))
    };
    let (before, rows) = run(docs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut changed = docs.to_vec();
    let v = encoder.cfg.vocab_size as u32;
    for t in changed[1].iter_mut() {
        *t = (*t + 1 + rng.random_range(0..v - 1)) % v;
    }
    let (after, _) = run(&changed)?;
    Ok(rows
        .iter()
        .any(|&r| before.row(r).iter().zip(after.row(r)).any(|(a, b)| (a - b).abs() > 1e-6)))
}

/// The evaluation suite run on every ablation model.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub corpus_docs: usize,
    pub doc_max_len: usize,
    pub eval_docs: usize,
    /// Held-out documents are cut to this many tokens.
    pub eval_len: usize,
    pub pppl_docs: usize,
    pub classify_train: usize,
    pub classify_dev: usize,
    pub classify_epochs: usize,
    pub classify_lr: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            corpus_docs: 2000,
            doc_max_len: 128,
            eval_docs: 32,
            eval_len: 32,
            pppl_docs: 4,
            classify_train: 64,
            classify_dev: 32,
            classify_epochs: 3,
            classify_lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub parent: Option<String>,
    pub delta: Vec<Field>,
    pub params: usize,
    pub vocab_size: usize,
    /// Per-step training losses (`NaN` for skipped steps).
    pub losses: Vec<f64>,
    pub eval_loss: f64,
    pub pppl: f64,
    pub cls_acc: f64,
    pub leaks: bool,
    pub scaled: bool,
}

impl AblationRow {
    /// Mean of the last tenth of the training losses.
    pub fn final_train_loss(&self) -> f64 {
        let tail: Vec<f64> = self.losses.iter().rev().take((self.losses.len() / 10).max(1)).copied().collect();
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn rel(x: f64, base: f64) -> f64 {
    100.0 * (x - base) / base.abs()
}

impl AblationReport {
    /// One row per model with its metrics and relative change (%) against
    /// its parent.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "model\tparent\tdelta\tparams\tvocab\ttrain_loss\teval_loss\teval_loss_rel\tpppl\tpppl_rel\tcls_acc\tcls_acc_rel\tleaks\tnote\n",
        );
        for r in &self.rows {
            let parent = r.parent.as_ref().and_then(|p| self.rows.iter().find(|x| &x.name == p));
            let rel_or_dash = |f: &dyn Fn(&AblationRow) -> f64| match parent {
                Some(p) => format!("{:+.2}", rel(f(r), f(p))),
                None => "-".into(),
            };
            let delta = if r.delta.is_empty() {
                "-".to_string()
            } else {
                r.delta.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(",")
            };
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{}\t{:.3}\t{}\t{:.4}\t{}\t{}\t{}",
                r.name,
                r.parent.as_deref().unwrap_or("-"),
                delta,
                r.params,
                r.vocab_size,
                r.final_train_loss(),
                r.eval_loss,
                rel_or_dash(&|x| x.eval_loss),
                r.pppl,
                rel_or_dash(&|x| x.pppl),
                r.cls_acc,
                rel_or_dash(&|x| x.cls_acc),
                r.leaks,
                if r.scaled { "scaled" } else { "-" }
            );
        }
        s
    }
}

/// Word rendering of a generated document, CLS/SEP dropped.
fn words(doc: &[u32]) -> String {
    doc[1..doc.len() - 1].iter().map(|t| format!("w{t}")).collect::<Vec<_>>().join(" ")
}

fn broad_spec(suite: &SuiteConfig, n_docs: usize) -> PatternSpec {
    PatternSpec::toy(n_docs, suite.doc_max_len)
}

/// Training text of a dataset: the broad generator, or its first half of
/// topics with a quarter of the documents.
pub fn dataset_text(dataset: Dataset, suite: &SuiteConfig) -> Vec<String> {
    let docs = labeled_pattern_corpus(&broad_spec(suite, suite.corpus_docs), suite.seed);
    match dataset {
        Dataset::Broad => docs.iter().map(|(d, _)| words(d)).collect(),
        Dataset::Narrow => docs
            .iter()
            .filter(|(_, t)| *t < 2)
            .take(suite.corpus_docs / 4)
            .map(|(d, _)| words(d))
            .collect(),
    }
}

fn encode_doc(tok: &Tokenizer, text: &str, max_len: usize) -> Vec<u32> {
    let s = tok.specials();
    let mut ids = vec![s.cls];
    ids.extend(tok.encode(text).into_iter().take(max_len.saturating_sub(2)));
    ids.push(s.sep);
    ids
}

/// Held-out MLM loss with a fixed 15% all-MASK corruption.
pub fn heldout_mlm_loss(encoder: &Encoder, tok: &Tokenizer, docs: &[Vec<u32>], seed: u64) -> Result<f64> {
    let corruptor = Corruptor::new(0.15, MaskingScheme::ALL_MASK, tok.specials(), encoder.cfg.vocab_size)?;
    let max_len = docs.iter().map(Vec::len).max().unwrap_or(1);
    let mut batch = PackedBatch::concat(&pack_sequences(docs, max_len, MaskMode::Padded, tok.specials().pad))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corruptor.corrupt_batch(&mut batch, &mut rng);
    let mut tape = Tape::inference();
    let bound = encoder.bind(&mut tape);
    let loss = encoder.mlm_loss(&mut tape, &bound, &batch)?;
    Ok(tape.scalar(loss))
}

/// Trains one configuration and runs the suite on it.
pub fn run_config(cfg: &AblationConfig, suite: &SuiteConfig) -> Result<AblationRow> {
    let text = dataset_text(cfg.dataset, suite);
    let tok = Tokenizer::build(text.iter().map(String::as_str), cfg.vocab_cap, cfg.tokenizer)?;
    let corpus: Vec<Vec<u32>> = text.iter().map(|t| encode_doc(&tok, t, suite.doc_max_len)).collect();
    let mut model = cfg.model.clone();
    model.vocab_size = tok.vocab_size();
    let encoder = Encoder::new(model.clone(), cfg.plan.seed)?;
    let mut trainer = Trainer::new(encoder, cfg.plan.clone(), tok.specials())?;
    trainer.run(&corpus, None, &mut |_, _| Ok(()))?;
    let losses: Vec<f64> = trainer.history.iter().map(|h| h.loss.unwrap_or(f64::NAN)).collect();
    let encoder = trainer.encoder;

    // Held-out material always comes from the broad distribution.
    let n_held = suite.eval_docs + suite.classify_train + suite.classify_dev;
    let held = labeled_pattern_corpus(&broad_spec(suite, n_held), suite.seed.wrapping_add(1_000_003));
    let held: Vec<(Vec<u32>, usize)> = held
        .iter()
        .map(|(d, t)| (encode_doc(&tok, &words(d), suite.eval_len), *t))
        .collect();
    let eval_docs: Vec<Vec<u32>> = held[..suite.eval_docs].iter().map(|(d, _)| d.clone()).collect();
    let eval_loss = heldout_mlm_loss(&encoder, &tok, &eval_docs, suite.seed)?;

    let lm = EncoderLm {
        encoder: &encoder,
        mask_id: tok.specials().mask,
    };
    let mut pppl = 0.0;
    let n_pppl = suite.pppl_docs.min(eval_docs.len()).max(1);
    for d in eval_docs.iter().take(n_pppl) {
        let inner: Vec<usize> = (1..d.len() - 1).collect();
        pppl += pseudo_perplexity_at(&lm, d, &inner, 32)?.pppl;
    }
    pppl /= n_pppl as f64;

    let to_rows = |range: std::ops::Range<usize>| -> Vec<LabeledText> {
        held[range.clone()]
            .iter()
            .zip(range)
            .map(|((d, t), id)| LabeledText {
                id,
                tokens: d.clone(),
                label: *t as f32,
            })
            .collect()
    };
    let a = suite.eval_docs;
    let train = to_rows(a..a + suite.classify_train);
    let dev = to_rows(a + suite.classify_train..n_held);
    let ccfg = ClassifyConfig {
        grid: Grid::single(suite.classify_lr, 8, 0.01),
        epochs: suite.classify_epochs,
        seed: suite.seed,
        ..Default::default()
    };
    let topics = PatternSpec::toy(0, 0).topics;
    let cls_acc = classify_finetune(&encoder, TaskKind::Classification { n_classes: topics }, &train, &dev, &ccfg)?
        .best_metric();

    let probe_docs: Vec<Vec<u32>> = eval_docs.iter().take(4).cloned().collect();
    let leaks = leakage_probe(&encoder, cfg.plan.packing, &probe_docs, suite.seed)?;
    Ok(AblationRow {
        name: cfg.name.clone(),
        parent: None,
        delta: cfg.delta.iter().copied().collect(),
        params: param_count(&model),
        vocab_size: model.vocab_size,
        losses,
        eval_loss,
        pppl,
        cls_acc,
        leaks,
        scaled: cfg.scaled,
    })
}

/// Validates the chain, then trains and evaluates each configuration in
/// order with the same seed and data order.
pub fn run_ablation_matrix(spec: &AblationSpec, suite: &SuiteConfig) -> Result<AblationReport> {
    spec.validate()?;
    let mut rows = Vec::new();
    for c in &spec.configs {
        info!("ablation {}: training {} steps", c.name, c.plan.total_steps());
        let mut row = run_config(c, suite)?;
        row.parent = c.parent.map(|p| spec.configs[p].name.clone());
        rows.push(row);
    }
    Ok(AblationReport { rows })
}
