//! Command-line front end: argument parsing, config loading and dispatch.
//!
//! Every subcommand reads an optional config file, applies `--override`
//! flags and `--seed`, runs, and writes its reports plus `manifest.json`
//! and `timings.json` into `--out`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use neobert::config::KvDoc;
use neobert::{Error, Result};

mod commands;
mod setup;

#[derive(Parser, Debug)]
#[command(name = "neobert", version, about = "Train, fine-tune, evaluate and benchmark toy-to-base encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file with `[section]` headers and `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the run; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked-language-model pretraining over all configured stages.
    Pretrain(Common),
    /// Contrastive fine-tuning on query/positive pairs.
    Finetune(Common),
    /// Pseudo-perplexity by sequence-length bin.
    EvalPppl(Common),
    /// Accuracy@1 and MRR of query/document retrieval.
    EvalRetrieval(Common),
    /// Classification or regression fine-tune with grid search.
    EvalClassify(Common),
    /// Inference throughput sweep.
    Bench(Common),
    /// Toy-scale M0 to M9 ablation chain.
    Ablate(Common),
    /// Print a checkpoint's configuration and tensor shapes.
    InspectCkpt {
        path: PathBuf,
    },
}

/// Everything a subcommand needs.
pub(crate) struct Ctx {
    pub doc: KvDoc,
    /// Effective configuration, hashed into the manifest.
    pub config_text: String,
    pub seed: u64,
    pub out: PathBuf,
}

/// Sections a config file may contain; each subcommand reads its own.
const KNOWN_SECTIONS: &[&str] = &[
    "model", "data", "train", "pretrain", "finetune", "eval", "classify", "bench", "ablate",
];

fn load(common: &Common, seed_sections: &[&str]) -> Result<Ctx> {
    let mut doc = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            KvDoc::parse(&text)?
        }
        None => KvDoc::new(),
    };
    for o in &common.overrides {
        doc.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        for s in seed_sections {
            doc.set(s, "seed", seed.to_string());
        }
    }
    for name in doc.section_names() {
        let known = KNOWN_SECTIONS.contains(&name) || name.strip_prefix("stage.").is_some_and(|n| n.parse::<usize>().is_ok());
        if !known {
            return Err(Error::UnknownKey(name.to_string()));
        }
    }
    Ok(Ctx {
        config_text: doc.to_text(),
        doc,
        seed: common.seed.unwrap_or(0),
        out: common.out.clone(),
    })
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(c) => commands::pretrain(load(&c, &["train"])?),
        Command::Finetune(c) => commands::finetune(load(&c, &["finetune"])?),
        Command::EvalPppl(c) => commands::eval_pppl(load(&c, &["eval"])?),
        Command::EvalRetrieval(c) => commands::eval_retrieval(load(&c, &["eval"])?),
        Command::EvalClassify(c) => commands::eval_classify(load(&c, &["classify"])?),
        Command::Bench(c) => commands::bench(load(&c, &["bench"])?),
        Command::Ablate(c) => commands::ablate(load(&c, &["ablate"])?),
        Command::InspectCkpt { path } => commands::inspect(&path),
    }
}

/// Runs the CLI on `argv` (program name first). Exit codes: 0 success,
/// 1 bad input (flags, config keys, missing files), 2 failure while running.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
