//! One function per subcommand.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use neobert::ablation::{run_ablation_matrix, AblationSpec, SuiteConfig, ToyScale};
use neobert::bench::{throughput_bench, BenchConfig};
use neobert::checkpoint::Checkpoint;
use neobert::contrastive::{
    encode_pairs, finetune_contrastive, group_by_task, load_pairs, query_ids, ContrastiveConfig, PairExample,
};
use neobert::eval::classify::{classify_finetune, parse_labeled, ClassifyConfig, Grid, LabeledText, TaskKind};
use neobert::eval::pppl::{default_bins, pppl_curve, EncoderLm};
use neobert::eval::retrieval_eval;
use neobert::model::{param_count, Encoder, ModelConfig};
use neobert::optim::AdamConfig;
use neobert::report::ReportSet;
use neobert::synthetic::{paired_pattern_task, topic_rows, PairSpec, PatternSpec};
use neobert::tokenizer::Tokenizer;
use neobert::train::{encoder_checkpoint, model_config_from, TrainPlan, Trainer};
use neobert::{Error, Result};

use crate::setup::{encode_doc, read_lines, text_source, tokenizer, trained_model};
use crate::Ctx;

fn finish(reports: &mut ReportSet, ctx: &Ctx, command: &str, start: Instant) -> Result<()> {
    reports.time("total", start.elapsed().as_secs_f64());
    let m = reports.write(&ctx.out, command, ctx.seed, &ctx.config_text)?;
    info!("{command}: wrote {} files to {}", m.files.len() + 2, ctx.out.display());
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `[model]` with the vocabulary size taken from the tokenizer unless set.
fn model_for(ctx: &mut Ctx, tok: &Tokenizer) -> Result<ModelConfig> {
    let explicit = ctx.doc.get("model", "vocab_size").is_some();
    let mut sec = ctx.doc.take_section("model");
    let mut cfg = ModelConfig::from_section(&mut sec)?;
    sec.finish()?;
    if !explicit {
        cfg.vocab_size = tok.vocab_size();
    } else if cfg.vocab_size < tok.vocab_size() {
        return Err(Error::config(format!(
            "model.vocab_size {} is smaller than the vocabulary ({})",
            cfg.vocab_size,
            tok.vocab_size()
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn pretrain(mut ctx: Ctx) -> Result<()> {
    let start = Instant::now();
    let mut data = ctx.doc.take_section("data");
    let texts = text_source(&mut data, "corpus")?;
    let tok = tokenizer(&mut data, &texts)?;
    data.finish()?;
    let mut pre = ctx.doc.take_section("pretrain");
    let resume: Option<PathBuf> = pre.take_opt("resume")?;
    pre.finish()?;
    let cfg = model_for(&mut ctx, &tok)?;
    let plan = TrainPlan::from_doc(&mut ctx.doc)?;
    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(&p)?)?;
            info!("resuming at step {} from {}", t.step, p.display());
            t
        }
        None => Trainer::new(Encoder::new(cfg, plan.seed)?, plan, tok.specials())?,
    };
    if tok.vocab_size() > trainer.encoder.cfg.vocab_size {
        return Err(Error::config("vocabulary is larger than the model's embedding table"));
    }
    let max_len = trainer.plan.stages.iter().map(|s| s.max_len).max().unwrap_or(1);
    let corpus: Vec<Vec<u32>> = texts.iter().map(|t| encode_doc(&tok, t, max_len)).collect();
    info!(
        "pretraining {} parameters on {} documents for {} steps",
        param_count(&trainer.encoder.cfg),
        corpus.len(),
        trainer.plan.total_steps()
    );
    ensure_dir(&ctx.out)?;
    let mut reports = ReportSet::new();
    let out = ctx.out.clone();
    let mut saved = Vec::new();
    trainer.run(&corpus, None, &mut |t, stage| {
        let name = format!("stage{}.nbkt", stage + 1);
        t.checkpoint().save(&out.join(&name))?;
        info!("stage {} done at step {}", stage + 1, t.step);
        saved.push(name);
        Ok(())
    })?;
    for name in &saved {
        reports.note_written(name);
    }
    let mut log = String::from("step\tstage\tlr\tloss\tgrad_norm\ttokens\tlabeled\tmax_seq_len\n");
    for h in &trainer.history {
        let loss = h.loss.map_or("-".to_string(), |l| l.to_string());
        let _ = writeln!(
            log,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            h.step,
            h.stage + 1,
            h.lr,
            loss,
            h.grad_norm,
            h.tokens,
            h.labeled,
            h.max_seq_len
        );
    }
    reports.add("train_log.tsv", log);
    let vocab_path = ctx.out.join("vocab.txt");
    tok.save_vocab(&vocab_path)?;
    reports.note_written("vocab.txt");
    finish(&mut reports, &ctx, "pretrain", start)
}

fn pair_source(sec: &mut neobert::config::Section) -> Result<Vec<PairExample>> {
    let files: Vec<PathBuf> = sec.take_list("pairs", Vec::new())?;
    let n: Option<usize> = sec.take_opt("synthetic_pairs")?;
    let seed: u64 = sec.take("synthetic_seed", 0)?;
    let hard: usize = sec.take("synthetic_hard_negatives", 0)?;
    match (files.is_empty(), n) {
        (false, None) => {
            let mut all = Vec::new();
            for f in &files {
                all.extend(load_pairs(f)?);
            }
            if all.is_empty() {
                return Err(Error::EmptySource(files[0].display().to_string()));
            }
            Ok(all)
        }
        (true, Some(n)) => Ok(paired_pattern_task(
            &PairSpec {
                hard_negatives: hard,
                ..PairSpec::toy(n)
            },
            seed,
        )),
        (false, Some(_)) => Err(Error::config(format!("[{}] sets both pairs and synthetic_pairs", sec.name()))),
        (true, None) => Err(Error::config(format!(
            "[{}] needs pairs = PATH[,PATH…] or synthetic_pairs = N",
            sec.name()
        ))),
    }
}

fn pair_texts(pairs: &[PairExample]) -> Vec<String> {
    let mut texts = Vec::new();
    for p in pairs {
        texts.push(p.instruction.clone());
        texts.push(p.query.clone());
        texts.push(p.positive.clone());
        texts.extend(p.hard_negatives.iter().cloned());
    }
    texts
}

pub fn finetune(mut ctx: Ctx) -> Result<()> {
    let start = Instant::now();
    let from_ckpt = ctx.doc.get("finetune", "checkpoint").is_some();
    let mut sec = ctx.doc.take_section("finetune");
    let pairs = pair_source(&mut sec)?;
    let max_len: usize = sec.take("max_len", 128)?;
    let d = ContrastiveConfig::default();
    let cfg = ContrastiveConfig {
        temperature: sec.take("temperature", d.temperature)?,
        alpha: sec.take("alpha", d.alpha)?,
        steps: sec.take("steps", d.steps)?,
        batch_size: sec.take("batch_size", d.batch_size)?,
        lr: sec.take("lr", d.lr)?,
        similarity: sec.take("similarity", d.similarity)?,
        adam: AdamConfig {
            weight_decay: sec.take("weight_decay", d.adam.weight_decay)?,
            ..d.adam
        },
        clip_norm: sec.take("clip_norm", d.clip_norm)?,
        seed: sec.take("seed", d.seed)?,
    };
    let (mut encoder, tok) = if from_ckpt {
        let (e, t, _) = trained_model(&mut sec)?;
        sec.finish()?;
        (e, t)
    } else {
        let tok = tokenizer(&mut sec, &pair_texts(&pairs))?;
        sec.finish()?;
        let model = model_for(&mut ctx, &tok)?;
        (Encoder::new(model, cfg.seed)?, tok)
    };
    let datasets: Vec<_> = group_by_task(encode_pairs(&tok, &pairs, max_len)?);
    let names: Vec<String> = datasets.iter().map(|(t, _)| t.clone()).collect();
    let pools: Vec<_> = datasets.into_iter().map(|(_, p)| p).collect();
    info!("contrastive fine-tuning on {} tasks for {} steps", pools.len(), cfg.steps);
    let log = finetune_contrastive(&mut encoder, &pools, &cfg)?;
    ensure_dir(&ctx.out)?;
    let mut reports = ReportSet::new();
    encoder_checkpoint(&encoder).save(&ctx.out.join("finetuned.nbkt"))?;
    reports.note_written("finetuned.nbkt");
    tok.save_vocab(&ctx.out.join("vocab.txt"))?;
    reports.note_written("vocab.txt");
    let mut tsv = String::from("step\ttask\tloss\n");
    for s in &log {
        let _ = writeln!(tsv, "{}\t{}\t{}", s.step, names[s.dataset], s.loss);
    }
    reports.add("finetune_log.tsv", tsv);
    finish(&mut reports, &ctx, "finetune", start)
}

fn embed_all(encoder: &Encoder, seqs: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(32) {
        out.extend(encoder.embed_sequences(chunk)?);
    }
    Ok(out)
}

pub fn eval_retrieval(mut ctx: Ctx) -> Result<()> {
    let start = Instant::now();
    let mut sec = ctx.doc.take_section("eval");
    let (encoder, tok, _) = trained_model(&mut sec)?;
    let pairs = pair_source(&mut sec)?;
    let max_len: usize = sec.take("max_len", 128)?;
    sec.finish()?;
    let cut = |mut v: Vec<u32>| {
        v.truncate(max_len);
        v
    };
    let queries: Vec<Vec<u32>> = pairs.iter().map(|p| cut(query_ids(&tok, &p.instruction, &p.query))).collect();
    let docs: Vec<Vec<u32>> = pairs.iter().map(|p| cut(tok.encode(&p.positive))).collect();
    if let Some(i) = queries.iter().chain(&docs).position(Vec::is_empty) {
        return Err(Error::invalid(format!("pair {} tokenizes to nothing", i % pairs.len())));
    }
    let gold: Vec<usize> = (0..pairs.len()).collect();
    let scores = retrieval_eval(&embed_all(&encoder, &queries)?, &embed_all(&encoder, &docs)?, &gold)?;
    println!("acc@1 {:.4}  MRR {:.4}  over {} queries", scores.acc_at_1, scores.mrr, pairs.len());
    let mut reports = ReportSet::new();
    reports.add(
        "retrieval.tsv",
        format!("queries\tacc_at_1\tmrr\n{}\t{}\t{}\n", pairs.len(), scores.acc_at_1, scores.mrr),
    );
    let mut ranks = String::from("query\trank\n");
    for (i, r) in scores.ranks.iter().enumerate() {
        let _ = writeln!(ranks, "{i}\t{r}");
    }
    reports.add("retrieval_ranks.tsv", ranks);
    finish(&mut reports, &ctx, "eval-retrieval", start)
}

pub fn eval_pppl(mut ctx: Ctx) -> Result<()> {
    let start = Instant::now();
    let mut sec = ctx.doc.take_section("eval");
    let (encoder, tok, _) = trained_model(&mut sec)?;
    let texts = text_source(&mut sec, "sample")?;
    let max_len: usize = sec.take("max_len", encoder.cfg.position_limit())?;
    let min_len: usize = sec.take("min_len", 0)?;
    let max_docs: Option<usize> = sec.take_opt("max_docs")?;
    let group: usize = sec.take("group", 32)?;
    let edges: Option<Vec<usize>> = match sec.take_list::<usize>("bins", Vec::new())? {
        v if v.is_empty() => None,
        v => Some(v),
    };
    sec.finish()?;
    let sample: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| encode_doc(&tok, t, max_len))
        .filter(|d| d.len() >= min_len)
        .take(max_docs.unwrap_or(usize::MAX))
        .collect();
    if sample.is_empty() {
        return Err(Error::invalid(format!("no sample sequence has at least {min_len} tokens")));
    }
    let edges = edges.unwrap_or_else(|| default_bins(sample.iter().map(Vec::len).max().unwrap_or(1)));
    let lm = EncoderLm {
        encoder: &encoder,
        mask_id: tok.specials().mask,
    };
    let report = pppl_curve(&lm, &sample, &edges, Some(tok.specials()), group.max(1))?;
    for b in &report.bins {
        println!("({}, {}]  mean pppl {:.4}  n={}", b.lo, b.hi, b.mean_pppl, b.count);
    }
    let mut reports = ReportSet::new();
    reports.add("pppl_records.tsv", report.to_tsv());
    reports.add("pppl_curve.csv", report.to_csv());
    finish(&mut reports, &ctx, "eval-pppl", start)
}

fn labeled_file(path: &Path, tok: &Tokenizer, max_len: usize, first_id: usize) -> Result<Vec<LabeledText>> {
    let text = read_lines(path)?.join("\n");
    let s = tok.specials();
    let mut rows = parse_labeled(&text, tok, max_len.saturating_sub(2), first_id)?;
    for r in &mut rows {
        r.tokens.insert(0, s.cls);
        r.tokens.push(s.sep);
    }
    Ok(rows)
}

pub fn eval_classify(mut ctx: Ctx) -> Result<()> {
    let start = Instant::now();
    let mut sec = ctx.doc.take_section("classify");
    let (encoder, tok, _) = trained_model(&mut sec)?;
    let max_len: usize = sec.take("max_len", 128)?;
    let train_path: Option<PathBuf> = sec.take_opt("train")?;
    let dev_path: Option<PathBuf> = sec.take_opt("dev")?;
    let n_train: Option<usize> = sec.take_opt("synthetic_train")?;
    let n_dev: usize = sec.take("synthetic_dev", 32)?;
    let syn_len: usize = sec.take("synthetic_max_len", 64)?;
    let syn_seed: u64 = sec.take("synthetic_seed", 0)?;
    let (train, dev) = match (train_path, dev_path, n_train) {
        (Some(t), Some(d), None) => {
            let train = labeled_file(&t, &tok, max_len, 0)?;
            let dev = labeled_file(&d, &tok, max_len, train.len())?;
            (train, dev)
        }
        (None, None, Some(n)) => {
            let rows = topic_rows(&PatternSpec::toy(n + n_dev, syn_len), syn_seed);
            let all: Vec<LabeledText> = rows
                .iter()
                .enumerate()
                .map(|(id, (topic, text))| LabeledText {
                    id,
                    tokens: encode_doc(&tok, text, max_len),
                    label: *topic as f32,
                })
                .collect();
            let (a, b) = all.split_at(n);
            (a.to_vec(), b.to_vec())
        }
        _ => {
            return Err(Error::config(
                "[classify] needs train = PATH and dev = PATH, or synthetic_train = N",
            ))
        }
    };
    let task_name: String = sec.take("task", "classification".to_string())?;
    let task = match task_name.as_str() {
        "classification" => {
            let seen = train.iter().chain(&dev).map(|r| r.label.max(0.0) as usize).max().unwrap_or(0) + 1;
            TaskKind::Classification {
                n_classes: sec.take("n_classes", seen)?,
            }
        }
        "regression" => TaskKind::Regression,
        other => {
            return Err(Error::config(format!(
                "classify.task = `{other}`: expected classification or regression"
            )))
        }
    };
    let d = ClassifyConfig::default();
    let cfg = ClassifyConfig {
        grid: Grid {
            lrs: sec.take_list("lrs", d.grid.lrs)?,
            batch_sizes: sec.take_list("batch_sizes", d.grid.batch_sizes)?,
            weight_decays: sec.take_list("weight_decays", d.grid.weight_decays)?,
        },
        epochs: sec.take("epochs", d.epochs)?,
        patience: sec.take("patience", d.patience)?,
        pooling: sec.take("pooling", d.pooling)?,
        clip_norm: sec.take("clip_norm", d.clip_norm)?,
        seed: sec.take("seed", d.seed)?,
    };
    sec.finish()?;
    info!("{} grid points, {} train / {} dev rows", cfg.grid.len(), train.len(), dev.len());
    let report = classify_finetune(&encoder, task, &train, &dev, &cfg)?;
    let best = report.best_run();
    println!(
        "best dev metric {:.4} at lr={} batch={} wd={}",
        best.best_metric, best.lr, best.batch_size, best.weight_decay
    );
    let mut reports = ReportSet::new();
    reports.add("classify.tsv", report.to_tsv());
    let mut evals = String::from("run\tstep\tmetric\n");
    let mut splits = String::from("run\ttrained_rows\tevaluated_rows\n");
    let ids = |s: &std::collections::BTreeSet<usize>| s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    for (i, r) in report.runs.iter().enumerate() {
        for e in &r.evals {
            let _ = writeln!(evals, "{i}\t{}\t{}", e.step, e.metric);
        }
        let _ = writeln!(splits, "{i}\t{}\t{}", ids(&r.trained_rows), ids(&r.evaluated_rows));
    }
    reports.add("classify_evals.tsv", evals);
    reports.add("classify_splits.tsv", splits);
    finish(&mut reports, &ctx, "eval-classify", start)
}

pub fn bench(mut ctx: Ctx) -> Result<()> {
    let start = Instant::now();
    let mut sec = ctx.doc.take_section("model");
    let model = ModelConfig::from_section(&mut sec)?;
    sec.finish()?;
    model.validate()?;
    let d = BenchConfig::default();
    let mut sec = ctx.doc.take_section("bench");
    let bc = BenchConfig {
        seq_lens: sec.take_list("seq_lens", d.seq_lens)?,
        max_batch: sec.take("max_batch", d.max_batch)?,
        steps: sec.take("steps", d.steps)?,
        repeats: sec.take("repeats", d.repeats)?,
        warmup: sec.take("warmup", d.warmup)?,
        memory_budget: sec.take("memory_budget_mb", d.memory_budget >> 20)? << 20,
        seed: sec.take("seed", d.seed)?,
    };
    sec.finish()?;
    let report = throughput_bench(&model, &bc)?;
    let tsv = report.to_tsv();
    print!("{tsv}");
    let mut reports = ReportSet::new();
    reports.add("bench.tsv", tsv);
    finish(&mut reports, &ctx, "bench", start)
}

pub fn ablate(mut ctx: Ctx) -> Result<()> {
    let start = Instant::now();
    let mut sec = ctx.doc.take_section("ablate");
    let ds = ToyScale::default();
    let scale = ToyScale {
        n_layers: sec.take("n_layers", ds.n_layers)?,
        d_model: sec.take("d_model", ds.d_model)?,
        n_heads: sec.take("n_heads", ds.n_heads)?,
        batch_tokens: sec.take("batch_tokens", ds.batch_tokens)?,
        max_len: sec.take("max_len", ds.max_len)?,
        steps: sec.take("steps", ds.steps)?,
        peak_lr: sec.take("peak_lr", ds.peak_lr)?,
        batch_ratio: sec.take("batch_ratio", ds.batch_ratio)?,
        context_ratio: sec.take("context_ratio", ds.context_ratio)?,
        seed: sec.take("seed", ds.seed)?,
    };
    let dq = SuiteConfig::default();
    let suite = SuiteConfig {
        corpus_docs: sec.take("corpus_docs", dq.corpus_docs)?,
        doc_max_len: sec.take("doc_max_len", dq.doc_max_len)?,
        eval_docs: sec.take("eval_docs", dq.eval_docs)?,
        eval_len: sec.take("eval_len", dq.eval_len)?,
        pppl_docs: sec.take("pppl_docs", dq.pppl_docs)?,
        classify_train: sec.take("classify_train", dq.classify_train)?,
        classify_dev: sec.take("classify_dev", dq.classify_dev)?,
        classify_epochs: sec.take("classify_epochs", dq.classify_epochs)?,
        classify_lr: sec.take("classify_lr", dq.classify_lr)?,
        seed: scale.seed,
    };
    let only: Vec<String> = sec.take_list("models", Vec::new())?;
    sec.finish()?;
    let mut spec = AblationSpec::toy(scale);
    spec.validate()?;
    if let Some(bad) = only.iter().find(|n| !spec.configs.iter().any(|c| &c.name == *n)) {
        return Err(Error::config(format!("ablate.models: no model named `{bad}`")));
    }
    if !only.is_empty() {
        // Keep parents resolvable by name while dropping unrequested runs.
        let keep: Vec<bool> = spec.configs.iter().map(|c| only.contains(&c.name)).collect();
        let names: Vec<String> = spec.configs.iter().map(|c| c.name.clone()).collect();
        let mut kept = Vec::new();
        for (c, k) in spec.configs.into_iter().zip(keep) {
            if k {
                kept.push(c);
            }
        }
        for c in &mut kept {
            c.parent = c.parent.and_then(|p| kept_index(&names[p], &only));
        }
        spec.configs = kept;
    }
    let report = run_ablation_matrix(&spec, &suite)?;
    let tsv = report.to_tsv();
    print!("{tsv}");
    let mut losses = String::from("model\tstep\tloss\n");
    for r in &report.rows {
        for (i, l) in r.losses.iter().enumerate() {
            let _ = writeln!(losses, "{}\t{i}\t{l}", r.name);
        }
    }
    let mut reports = ReportSet::new();
    reports.add("ablation.tsv", tsv);
    reports.add("ablation_losses.tsv", losses);
    finish(&mut reports, &ctx, "ablate", start)
}

/// Position of `name` among the requested models, in chain order.
fn kept_index(name: &str, only: &[String]) -> Option<usize> {
    let order = ["M0", "M1", "M2", "M3", "M4", "M5", "M6", "M7", "M8", "M9"];
    let kept: Vec<&str> = order.iter().copied().filter(|n| only.iter().any(|o| o == n)).collect();
    kept.iter().position(|n| *n == name)
}

pub fn inspect(path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    let mut doc = ckpt.config.clone();
    let cfg = model_config_from(&mut doc)?;
    print!("{}", ckpt.config.to_text());
    println!();
    println!("tensor\tshape\tnumel");
    let mut params = 0;
    let mut opt = 0;
    for (name, t) in &ckpt.tensors {
        let shape = t.shape().iter().map(|e| e.to_string()).collect::<Vec<_>>().join("x");
        println!("{name}\t{shape}\t{}", t.numel());
        if name.starts_with("opt.") {
            opt += 1;
        } else {
            params += t.numel();
        }
    }
    println!();
    println!("parameters\t{params}");
    println!("param_count\t{}", param_count(&cfg));
    println!("optimizer_tensors\t{opt}");
    Ok(())
}
