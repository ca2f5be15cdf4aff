//! Masked-language-model pretraining: plan, training step, staged loop and
//! resumable state.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::{join_list, KvDoc, SectionWriter};
use crate::data::{sample_batch, BatchShape, Corruptor, LengthMixtureSampler, MaskMode, MaskingScheme, Mixture, PackedBatch};
use crate::error::{Error, Result};
use crate::model::{Encoder, EncoderParams, ModelConfig, ParamKind};
use crate::optim::{clip_grad_norm, global_norm, lr_schedule, Adam, AdamConfig, Schedule, SchedulerKind};
use crate::tensor::Tensor;
use crate::tokenizer::{Specials, CLS, MASK, PAD, SEP, UNK};

/// One phase of pretraining at a fixed maximum length and data mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub max_len: usize,
    pub steps: u64,
    pub mixture: Mixture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub schedule: Schedule,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling; zero disables clipping.
    pub clip_norm: f64,
    /// Token capacity per batch, padding included.
    pub batch_tokens: usize,
    pub mask_rate: f64,
    pub mask_scheme: MaskingScheme,
    pub packing: MaskMode,
    /// Draw documents without an upper bound on reuse when true.
    pub cycle: bool,
    pub seed: u64,
    pub stages: Vec<Stage>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self::neobert()
    }
}

impl TrainPlan {
    /// 1M steps at length 1024, then 50k steps at 4096 on the 20/40/40 mix.
    pub fn neobert() -> Self {
        TrainPlan {
            schedule: Schedule {
                kind: SchedulerKind::Cosine,
                peak_lr: 6e-4,
                warmup_steps: 2000,
                decay_fraction: 0.9,
                floor_fraction: 0.1,
            },
            adam: AdamConfig::neobert(),
            clip_norm: 1.0,
            batch_tokens: 1 << 21,
            mask_rate: 0.2,
            mask_scheme: MaskingScheme::ALL_MASK,
            packing: MaskMode::Padded,
            cycle: true,
            seed: 0,
            stages: vec![
                Stage {
                    max_len: 1024,
                    steps: 1_000_000,
                    mixture: Mixture::base_only(),
                },
                Stage {
                    max_len: 4096,
                    steps: 50_000,
                    mixture: Mixture::long_context([1024, 2048]),
                },
            ],
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// The schedule spans the first stage; later stages sit at its floor.
    pub fn scheduled_steps(&self) -> u64 {
        self.stages.first().map_or(0, |s| s.steps)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_schedule(step, self.scheduled_steps(), &self.schedule)
    }

    /// Stage index and its first global step.
    pub fn stage_at(&self, step: u64) -> Option<(usize, u64)> {
        let mut start = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if step < start + s.steps {
                return Some((i, start));
            }
            start += s.steps;
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("training plan has no stages"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.max_len == 0 {
                return Err(Error::config(format!("stage.{}.max_len must be positive", i + 1)));
            }
            s.mixture.validate()?;
        }
        self.schedule.validate(self.scheduled_steps())?;
        if self.batch_tokens == 0 {
            return Err(Error::config("batch_tokens must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::config(format!("mask_rate {} outside [0, 1]", self.mask_rate)));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("clip_norm must be nonnegative"));
        }
        self.mask_scheme.validate()
    }

    /// Reads `[train]` and every `[stage.N]` section. Without stage sections
    /// the preset stages stay.
    pub fn from_doc(doc: &mut KvDoc) -> Result<Self> {
        let d = Self::neobert();
        let mut t = doc.take_section("train");
        let plan = TrainPlan {
            schedule: Schedule {
                kind: t.take("scheduler", d.schedule.kind)?,
                peak_lr: t.take("peak_lr", d.schedule.peak_lr)?,
                warmup_steps: t.take("warmup_steps", d.schedule.warmup_steps)?,
                decay_fraction: t.take("decay_fraction", d.schedule.decay_fraction)?,
                floor_fraction: t.take("floor_fraction", d.schedule.floor_fraction)?,
            },
            adam: AdamConfig {
                kind: t.take("optimizer", d.adam.kind)?,
                beta1: t.take("beta1", d.adam.beta1)?,
                beta2: t.take("beta2", d.adam.beta2)?,
                eps: t.take("eps", d.adam.eps)?,
                weight_decay: t.take("weight_decay", d.adam.weight_decay)?,
            },
            clip_norm: t.take("clip_norm", d.clip_norm)?,
            batch_tokens: t.take("batch_tokens", d.batch_tokens)?,
            mask_rate: t.take("mask_rate", d.mask_rate)?,
            mask_scheme: t.take("mask_scheme", d.mask_scheme)?,
            packing: t.take("packing", d.packing)?,
            cycle: t.take("cycle", d.cycle)?,
            seed: t.take("seed", d.seed)?,
            stages: Vec::new(),
        };
        t.finish()?;
        let mut stage_names: Vec<(usize, String)> = doc
            .section_names()
            .filter_map(|n| {
                let idx = n.strip_prefix("stage.")?;
                Some(idx.parse::<usize>().map(|i| (i, n.to_string())).unwrap_or((0, n.to_string())))
            })
            .collect();
        stage_names.sort();
        let mut stages = Vec::new();
        for (k, (i, name)) in stage_names.iter().enumerate() {
            if *i != k + 1 {
                return Err(Error::config(format!(
                    "stage sections must be numbered 1, 2, …; found [{name}]"
                )));
            }
            let mut s = doc.take_section(name);
            let probs: Vec<f64> = s.take_list("mixture", vec![1.0, 0.0, 0.0])?;
            let thresholds: Vec<usize> = s.take_list("thresholds", vec![1024, 2048])?;
            let (Ok(probs), Ok(thresholds)) = (<[f64; 3]>::try_from(probs), <[usize; 2]>::try_from(thresholds)) else {
                return Err(Error::config(format!(
                    "[{name}] mixture needs 3 probabilities and thresholds needs 2 lengths"
                )));
            };
            stages.push(Stage {
                max_len: s.take("max_len", 1024usize)?,
                steps: s.take("steps", 0u64)?,
                mixture: Mixture { probs, thresholds },
            });
            s.finish()?;
        }
        let plan = TrainPlan {
            stages: if stages.is_empty() { d.stages } else { stages },
            ..plan
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Writes `[train]` and `[stage.N]` sections that [`TrainPlan::from_doc`] reads back.
    pub fn write_doc(&self, doc: &mut KvDoc) {
        let rows = SectionWriter::new()
            .put("scheduler", self.schedule.kind)
            .put("peak_lr", self.schedule.peak_lr)
            .put("warmup_steps", self.schedule.warmup_steps)
            .put("decay_fraction", self.schedule.decay_fraction)
            .put("floor_fraction", self.schedule.floor_fraction)
            .put("optimizer", self.adam.kind)
            .put("beta1", self.adam.beta1)
            .put("beta2", self.adam.beta2)
            .put("eps", self.adam.eps)
            .put("weight_decay", self.adam.weight_decay)
            .put("clip_norm", self.clip_norm)
            .put("batch_tokens", self.batch_tokens)
            .put("mask_rate", self.mask_rate)
            .put("mask_scheme", self.mask_scheme)
            .put("packing", self.packing)
            .put("cycle", self.cycle)
            .put("seed", self.seed)
            .into_rows();
        doc.push_section("train", rows);
        for (i, s) in self.stages.iter().enumerate() {
            let rows = SectionWriter::new()
                .put("max_len", s.max_len)
                .put("steps", s.steps)
                .put("mixture", join_list(&s.mixture.probs))
                .put("thresholds", join_list(&s.mixture.thresholds))
                .into_rows();
            doc.push_section(&format!("stage.{}", i + 1), rows);
        }
    }
}

/// What happened at one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub stage: usize,
    pub lr: f64,
    /// `None` when the batch had no labeled position and was skipped.
    pub loss: Option<f64>,
    pub grad_norm: f64,
    pub tokens: usize,
    pub labeled: usize,
    pub max_seq_len: usize,
}

/// Encoder, optimizer and data position of a pretraining run.
pub struct Trainer {
    pub encoder: Encoder,
    pub plan: TrainPlan,
    pub opt: Adam,
    pub specials: Specials,
    /// Global step about to run.
    pub step: u64,
    pub docs_drawn: u64,
    pub history: Vec<StepRecord>,
}

fn default_specials() -> Specials {
    Specials {
        pad: PAD,
        unk: UNK,
        cls: CLS,
        sep: SEP,
        mask: MASK,
    }
}

impl Trainer {
    pub fn new(encoder: Encoder, plan: TrainPlan, specials: Specials) -> Result<Self> {
        plan.validate()?;
        encoder.cfg.validate()?;
        let shapes: Vec<&[usize]> = encoder.params.iter().map(|(_, t)| t.shape()).collect();
        let opt = Adam::new(plan.adam, &shapes);
        Ok(Trainer {
            encoder,
            plan,
            opt,
            specials,
            step: 0,
            docs_drawn: 0,
            history: Vec::new(),
        })
    }

    /// Randomness for global step `step`: independent of everything that
    /// happened before, so a resumed run sees the same batches.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.plan.seed);
        rng.set_stream(step);
        rng
    }

    fn corruptor(&self) -> Result<Corruptor> {
        Corruptor::new(
            self.plan.mask_rate,
            self.plan.mask_scheme,
            self.specials,
            self.encoder.cfg.vocab_size,
        )
    }

    /// Forward, masked cross-entropy, backward, clipping and one optimizer
    /// update. Returns `(loss, grad_norm)`, or `None` (with a warning and no
    /// update) when the batch has no labeled position.
    pub fn train_step(&mut self, batch: &PackedBatch, lr: f64) -> Result<Option<(f64, f64)>> {
        let (loss, mut grads) = {
            let mut tape = Tape::new();
            let bound = self.encoder.bind(&mut tape);
            let loss = match self.encoder.mlm_loss(&mut tape, &bound, batch) {
                Err(Error::EmptyLoss) => {
                    warn!("step {}: batch has no labeled positions, skipped", self.step);
                    return Ok(None);
                }
                other => other?,
            };
            let value = tape.scalar(loss);
            let grads = tape.backward(loss)?;
            (value, bound.collect(grads))
        };
        let norm = if self.plan.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, self.plan.clip_norm)?
        } else {
            global_norm(&grads)
        };
        let params = self
            .encoder
            .params
            .iter_mut()
            .map(|(name, t)| (t, ParamKind::of(name).decays()));
        self.opt.step(params, &grads, lr)?;
        Ok(Some((loss, norm)))
    }

    /// The batch global step `step` trains on.
    pub fn batch_for_step(&self, sampler: &LengthMixtureSampler, stage: &Stage, step: u64) -> Result<(PackedBatch, usize)> {
        let shape = BatchShape {
            max_len: stage.max_len,
            batch_tokens: self.plan.batch_tokens,
            mode: self.plan.packing,
        };
        let mut rng = self.step_rng(step);
        sample_batch(sampler, shape, &self.corruptor()?, &mut rng)
    }

    /// Trains from the current step through every remaining stage, or until
    /// global step `until`. `on_stage_end` runs after the last step of each
    /// stage.
    pub fn run(
        &mut self,
        corpus: &[Vec<u32>],
        until: Option<u64>,
        on_stage_end: &mut dyn FnMut(&Trainer, usize) -> Result<()>,
    ) -> Result<()> {
        let stop = until.unwrap_or(u64::MAX).min(self.plan.total_steps());
        while self.step < stop {
            let (si, start) = self.plan.stage_at(self.step).expect("step below total");
            let stage = self.plan.stages[si].clone();
            let sampler = LengthMixtureSampler::new(corpus, stage.mixture)?;
            let stage_end = (start + stage.steps).min(stop);
            while self.step < stage_end {
                let (batch, drawn) = self.batch_for_step(&sampler, &stage, self.step)?;
                self.docs_drawn += drawn as u64;
                if !self.plan.cycle && self.docs_drawn > corpus.len() as u64 {
                    return Err(Error::CorpusExhausted(corpus.len()));
                }
                let lr = self.plan.lr_at(self.step);
                let out = self.train_step(&batch, lr)?;
                self.history.push(StepRecord {
                    step: self.step,
                    stage: si,
                    lr,
                    loss: out.map(|o| o.0),
                    grad_norm: out.map_or(0.0, |o| o.1),
                    tokens: batch.len(),
                    labeled: batch.labeled_count(),
                    max_seq_len: batch.max_seq_len(),
                });
                self.step += 1;
            }
            if self.step == start + stage.steps {
                on_stage_end(self, si)?;
            }
        }
        Ok(())
    }

    /// Full resumable state: configuration, step counters, weights and
    /// optimizer moments.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut config = KvDoc::new();
        config.push_section("model", self.encoder.cfg.to_rows());
        self.plan.write_doc(&mut config);
        let s = self.specials;
        let state = SectionWriter::new()
            .put("step", self.step)
            .put("docs_drawn", self.docs_drawn)
            .put("opt_steps", self.opt.t)
            .put("specials", join_list(&[s.pad, s.unk, s.cls, s.sep, s.mask]))
            .into_rows();
        config.push_section("state", state);
        let mut tensors = indexmap::IndexMap::new();
        for (name, t) in self.encoder.params.iter() {
            tensors.insert(name.to_string(), t.clone().with_grad(false));
        }
        for (i, (name, _)) in self.encoder.params.iter().enumerate() {
            tensors.insert(format!("opt.m.{name}"), self.opt.m[i].clone());
            tensors.insert(format!("opt.v.{name}"), self.opt.v[i].clone());
        }
        Checkpoint { config, tensors }
    }

    /// Restores a trainer saved by [`Trainer::checkpoint`]. Sections other
    /// than model, train, stages and state are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut doc = ckpt.config.clone();
        let cfg = model_config_from(&mut doc)?;
        let plan = TrainPlan::from_doc(&mut doc)?;
        let mut state = doc.take_section("state");
        let step: u64 = state.take("step", 0)?;
        let docs_drawn: u64 = state.take("docs_drawn", 0)?;
        let opt_steps: u64 = state.take("opt_steps", 0)?;
        let sp: Vec<u32> = state.take_list("specials", vec![PAD, UNK, CLS, SEP, MASK])?;
        state.finish()?;
        let specials = match sp.as_slice() {
            &[pad, unk, cls, sep, mask] => Specials { pad, unk, cls, sep, mask },
            _ => return Err(Error::Checkpoint("state.specials needs five ids".into())),
        };
        let mut tensors = ckpt.tensors.clone();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, _) in crate::model::param_layout(&cfg) {
            let mut moment = |prefix: &str| {
                tensors
                    .shift_remove(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{prefix}{name}`")))
            };
            m.push(moment("opt.m.")?);
            v.push(moment("opt.v.")?);
        }
        let params = EncoderParams::from_tensors(&cfg, tensors)?;
        let mut trainer = Trainer::new(Encoder::from_params(cfg, params), plan, specials)?;
        for (i, (a, b)) in m.into_iter().zip(v).enumerate() {
            if a.shape() != trainer.opt.m[i].shape() || b.shape() != trainer.opt.v[i].shape() {
                return Err(Error::Checkpoint("optimizer moment shape mismatch".into()));
            }
            trainer.opt.m[i] = a;
            trainer.opt.v[i] = b;
        }
        trainer.opt.t = opt_steps;
        trainer.step = step;
        trainer.docs_drawn = docs_drawn;
        Ok(trainer)
    }
}

/// Parses the `[model]` section of a document.
pub fn model_config_from(doc: &mut KvDoc) -> Result<ModelConfig> {
    let mut sec = doc.take_section("model");
    let cfg = ModelConfig::from_section(&mut sec)?;
    sec.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads only the encoder from a checkpoint.
pub fn load_encoder(ckpt: &Checkpoint) -> Result<Encoder> {
    let mut doc = ckpt.config.clone();
    let cfg = model_config_from(&mut doc)?;
    let tensors = ckpt
        .tensors
        .iter()
        .filter(|(n, _)| !n.starts_with("opt."))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    Ok(Encoder::from_params(cfg.clone(), EncoderParams::from_tensors(&cfg, tensors)?))
}

/// Weights and `[model]` configuration only, readable by [`load_encoder`].
pub fn encoder_checkpoint(encoder: &Encoder) -> Checkpoint {
    let mut config = KvDoc::new();
    config.push_section("model", encoder.cfg.to_rows());
    let tensors = encoder
        .params
        .iter()
        .map(|(name, t)| (name.to_string(), t.clone().with_grad(false)))
        .collect();
    Checkpoint { config, tensors }
}

/// Runs every stage from scratch and returns the checkpoint emitted at the
/// end of each stage.
pub fn pretrain(encoder: Encoder, plan: TrainPlan, specials: Specials, corpus: &[Vec<u32>]) -> Result<(Trainer, Vec<Checkpoint>)> {
    let mut trainer = Trainer::new(encoder, plan, specials)?;
    let mut out = Vec::new();
    trainer.run(corpus, None, &mut |t, _| {
        out.push(t.checkpoint());
        Ok(())
    })?;
    Ok((trainer, out))
}

/// Specials of the built-in vocabularies.
pub fn builtin_specials() -> Specials {
    default_specials()
}

/// Gradients of the MLM loss for a batch, in registry order (no update).
pub fn mlm_gradients(encoder: &Encoder, batch: &PackedBatch) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = encoder.bind(&mut tape);
    let loss = encoder.mlm_loss(&mut tape, &bound, batch)?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    Ok((value, bound.collect(grads)))
}
