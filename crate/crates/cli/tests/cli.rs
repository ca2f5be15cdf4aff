use std::fs;
use std::path::Path;

use neobert_cli::run;

const MODEL: &str = "[model]\nn_layers = 1\nd_model = 64\nn_heads = 4\nmax_positions = 128\n";

const PRETRAIN: &str = "[data]
synthetic_docs = 40
synthetic_max_len = 24
[train]
batch_tokens = 128
warmup_steps = 2
peak_lr = 1e-3
[stage.1]
max_len = 16
steps = 3
[stage.2]
max_len = 32
steps = 2
mixture = 0.2, 0.4, 0.4
thresholds = 8, 16
";

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("neobert").chain(args.iter().copied()))
}

fn pretrain_into(dir: &Path, out: &str, seed: &str) -> std::path::PathBuf {
    let cfg = write_config(dir, "pre.conf", &format!("{MODEL}{PRETRAIN}"));
    let out = dir.join(out);
    let code = cli(&["pretrain", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    out
}

#[test]
fn pretrain_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = pretrain_into(dir.path(), "a", "7");
    let b = pretrain_into(dir.path(), "b", "7");
    for f in ["stage1.nbkt", "stage2.nbkt", "train_log.tsv", "vocab.txt", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let manifest: String = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 7"));
    assert!(manifest.contains("stage2.nbkt"));
    assert!(a.join("timings.json").exists());
    let log = fs::read_to_string(a.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 5);

    let c = pretrain_into(dir.path(), "c", "8");
    assert_ne!(fs::read(a.join("stage2.nbkt")).unwrap(), fs::read(c.join("stage2.nbkt")).unwrap());
}

#[test]
fn inspect_and_downstream_commands() {
    let dir = tempfile::tempdir().unwrap();
    let pre = pretrain_into(dir.path(), "pre", "1");
    let ckpt = pre.join("stage2.nbkt");
    assert_eq!(cli(&["inspect-ckpt", ckpt.to_str().unwrap()]), 0);

    let ckpt_s = ckpt.display().to_string();
    let eval = write_config(
        dir.path(),
        "eval.conf",
        &format!("[eval]\ncheckpoint = {ckpt_s}\nsynthetic_docs = 6\nsynthetic_max_len = 20\nmax_len = 32\nbins = 0, 8, 16, 32\n"),
    );
    let out = dir.path().join("pppl");
    assert_eq!(cli(&["eval-pppl", "--config", &eval, "--out", out.to_str().unwrap()]), 0);
    let curve = fs::read_to_string(out.join("pppl_curve.csv")).unwrap();
    assert!(curve.lines().count() >= 2);

    let cls = write_config(
        dir.path(),
        "cls.conf",
        &format!(
            "[classify]\ncheckpoint = {ckpt_s}\nsynthetic_train = 16\nsynthetic_dev = 8\nsynthetic_max_len = 16\n\
             lrs = 1e-3\nbatch_sizes = 4\nweight_decays = 0.01\nepochs = 1\n"
        ),
    );
    let out = dir.path().join("cls");
    assert_eq!(cli(&["eval-classify", "--config", &cls, "--out", out.to_str().unwrap()]), 0);
    let splits = fs::read_to_string(out.join("classify_splits.tsv")).unwrap();
    assert_eq!(splits.lines().count(), 2);

    let ft = write_config(
        dir.path(),
        "ft.conf",
        &format!("[finetune]\ncheckpoint = {ckpt_s}\nsynthetic_pairs = 24\nsteps = 3\nbatch_size = 4\nlr = 1e-3\nmax_len = 32\n"),
    );
    let out = dir.path().join("ft");
    // Pair words are absent from the pretraining vocabulary, so they map to UNK; the run still works.
    assert_eq!(cli(&["finetune", "--config", &ft, "--out", out.to_str().unwrap()]), 0);
    let log = fs::read_to_string(out.join("finetune_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);

    let ret = write_config(
        dir.path(),
        "ret.conf",
        &format!(
            "[eval]\ncheckpoint = {}\nsynthetic_pairs = 10\nmax_len = 32\n",
            out.join("finetuned.nbkt").display()
        ),
    );
    let rout = dir.path().join("ret");
    assert_eq!(cli(&["eval-retrieval", "--config", &ret, "--out", rout.to_str().unwrap()]), 0);
    let tsv = fs::read_to_string(rout.join("retrieval.tsv")).unwrap();
    assert!(tsv.starts_with("queries\tacc_at_1\tmrr\n10\t"));
}

#[test]
fn finetune_from_scratch_builds_its_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "ft.conf",
        &format!("{MODEL}[finetune]\nsynthetic_pairs = 16\nsteps = 2\nbatch_size = 4\nlr = 1e-3\n"),
    );
    let out = dir.path().join("ft");
    assert_eq!(cli(&["finetune", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    assert!(out.join("finetuned.nbkt").exists());
}

#[test]
fn bench_marks_rows_beyond_absolute_positions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bench.conf",
        &format!(
            "{MODEL}positional = absolute\n[bench]\nseq_lens = 16, 256\nmax_batch = 2\nsteps = 1\nrepeats = 2\nwarmup = 0\n"
        ),
    );
    let out = dir.path().join("bench");
    assert_eq!(cli(&["bench", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    let tsv = fs::read_to_string(out.join("bench.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("16\t"));
    assert!(rows[1].contains('-'));
}

#[test]
fn ablate_subset_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "abl.conf",
        "[ablate]\nmodels = M0, M1\nsteps = 2\nmax_len = 16\nbatch_tokens = 64\ncorpus_docs = 40\ndoc_max_len = 24\n\
         eval_docs = 4\neval_len = 16\npppl_docs = 1\nclassify_train = 8\nclassify_dev = 4\nclassify_epochs = 1\n",
    );
    let out = dir.path().join("abl");
    assert_eq!(cli(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    let tsv = fs::read_to_string(out.join("ablation.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3);
}

#[test]
fn bad_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    assert_eq!(cli(&["pretrain", "--config", "/no/such/file.conf", "--out", out]), 1);
    assert_eq!(cli(&["pretrain", "--frobnicate"]), 1);
    let cfg = write_config(dir.path(), "typo.conf", &format!("{MODEL}d_modle = 64\n{PRETRAIN}"));
    assert_eq!(cli(&["pretrain", "--config", &cfg, "--out", out]), 1);
    let cfg = write_config(dir.path(), "sec.conf", "[modle]\nd_model = 64\n");
    assert_eq!(cli(&["pretrain", "--config", &cfg, "--out", out]), 1);
    assert_eq!(cli(&["eval-pppl", "--out", out]), 1);
    assert_eq!(cli(&["--help"]), 0);
}
