use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use statex::checkpoint::Checkpoint;
use tempfile::TempDir;

fn statex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_statex"))
        .args(args)
        .env("STATEX_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = statex(args);
    assert!(out.status.success(), "statex {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    statex(args).status.code().unwrap()
}

const TINY: [&str; 20] = [
    "--preset", "tiny", "--layers", "2", "--dim", "32", "--heads", "2", "--dk", "4", "--dv", "4", "--vocab", "24",
    "--ctx-len", "16", "--batch-tokens", "64", "--total-tokens", "640",
];

fn train(dir: &Path, extra: &[&str]) {
    let out = dir.to_string_lossy().into_owned();
    ok(&[&["train"], &TINY[..], &["--max-pairs", "4", "--vocab-kv", "8", "--out", &out], extra].concat());
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

#[test]
fn missing_corpus_exits_with_config_error() {
    let tmp = TempDir::new().unwrap();
    let run = path(&tmp, "run");
    let args = [&["train"], &TINY[..], &["--corpus", "/nonexistent/corpus.txt", "--out", &run]].concat();
    let out = statex(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus"));
}

#[test]
fn diverging_training_exits_with_numeric_error() {
    let tmp = TempDir::new().unwrap();
    let run = path(&tmp, "run");
    let args = [&["train"], &TINY[..], &["--max-pairs", "4", "--vocab-kv", "8", "--max-lr", "1e30", "--warmup-frac", "0", "--out", &run]].concat();
    let out = statex(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = path(&tmp, "run.toml");
    fs::write(&cfg, "[train]\nmax_lr = 1e-3\nlearning_rate = 1e-3\n").unwrap();
    assert_eq!(code(&["train", "--config", &cfg, "--out", &path(&tmp, "run")]), 2);
    fs::write(&cfg, "[train]\nmax_lr = 1e-3\n[tasks]\nname = \"mqar\"\n").unwrap();
    assert_eq!(code(&["train", "--config", &cfg, "--out", &path(&tmp, "run")]), 2);
}

#[test]
fn conflicting_family_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let args = ["train", "--preset", "tiny-gla", "--family", "mamba2", "--out", &path(&tmp, "run")];
    assert_eq!(code(&args), 2);
}

#[test]
fn train_echoes_the_resolved_config() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    train(&run, &["--seed", "11"]);
    let text = fs::read_to_string(run.join("config.toml")).unwrap();
    let v: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(v["train"]["seed"].as_integer(), Some(11));
    assert_eq!(v["train"]["ctx_len"].as_integer(), Some(16));
    assert_eq!(v["model"]["d_model"].as_integer(), Some(32));
    assert_eq!(v["model"]["family"].as_str(), Some("gla"));
    assert_eq!(v["task"]["max_pairs"].as_integer(), Some(4));
    assert!(run.join("model.ckpt").exists());
    let losses = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 10);
    // The echoed config reproduces the run.
    let again = tmp.path().join("again");
    let cfg = run.join("config.toml").to_string_lossy().into_owned();
    ok(&["train", "--config", &cfg, "--out", &again.to_string_lossy()]);
    assert_eq!(fs::read(run.join("loss.csv")).unwrap(), fs::read(again.join("loss.csv")).unwrap());
}

#[test]
fn compare_of_identical_runs_has_zero_deltas() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        train(dir, &[]);
        let ckpt = dir.join("model.ckpt").to_string_lossy().into_owned();
        let out = dir.to_string_lossy().into_owned();
        ok(&["eval", "--in", &ckpt, "--vocab-kv", "8", "--lengths", "16,32", "--samples", "4", "--out", &out]);
    }
    let csv_path = path(&tmp, "cmp.csv");
    let printed = ok(&["compare", &a.to_string_lossy(), &b.to_string_lossy(), "--out", &csv_path]);
    assert_eq!(printed, fs::read_to_string(&csv_path).unwrap());
    let mut lines = printed.lines();
    assert_eq!(lines.next(), Some("kind,key,a,b,delta"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.iter().filter(|r| r[0] == "accuracy").count(), 3);
    assert_eq!(rows.iter().filter(|r| r[0] == "loss").count(), 10);
    for r in &rows {
        assert_eq!(r.len(), 5);
        assert_eq!(r[2], r[3]);
        assert_eq!(r[4].parse::<f64>().unwrap(), 0.0);
    }
    assert_eq!(code(&["compare", &path(&tmp, "x"), &path(&tmp, "y")]), 1);
}

#[test]
fn eval_prints_one_row_per_length() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    train(&run, &[]);
    let ckpt = run.join("model.ckpt").to_string_lossy().into_owned();
    let table = ok(&["eval", "--in", &ckpt, "--vocab-kv", "8", "--lengths", "8,16,32", "--samples", "4"]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "mqar (exact-token-accuracy)");
    for (line, len) in lines[2..5].iter().zip(["8", "16", "32"]) {
        assert_eq!(line.split_whitespace().next(), Some(len));
    }
    assert!(lines[5].trim_start().starts_with("mean"));
    // Keys beyond the model vocabulary are refused before scoring.
    assert_eq!(code(&["eval", "--in", &ckpt, "--vocab-kv", "16", "--lengths", "32", "--samples", "2"]), 2);
    assert_eq!(code(&["eval", "--in", &path(&tmp, "none.ckpt")]), 2);
}

#[test]
fn inspect_lists_config_and_tensors() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    train(&run, &[]);
    let text = ok(&["inspect", &run.join("model.ckpt").to_string_lossy()]);
    assert!(text.contains("key_shift=true"), "{text}");
    assert!(text.contains("layers.1.gla.k_shift"));
    assert!(text.contains("embed"));
}

#[test]
fn expand_without_input_prints_accounting() {
    let text = ok(&["expand", "--preset", "paper-shape", "--family", "gla"]);
    assert!(text.contains("3/2"), "{text}");
    let tmp = TempDir::new().unwrap();
    let out = path(&tmp, "acct");
    let text = ok(&["expand", "--preset", "paper-shape", "--family", "mamba2", "--out", &out]);
    assert!(text.contains("5/4"), "{text}");
    assert_eq!(fs::read_to_string(tmp.path().join("acct/accounting.txt")).unwrap(), text);
}

#[test]
fn inherited_key_expansion_keeps_logits_and_scores() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    train(&run, &["--family", "mamba2"]);
    let ckpt = run.join("model.ckpt").to_string_lossy().into_owned();
    let wide = path(&tmp, "wide");
    ok(&["expand", "--in", &ckpt, "--m", "2", "--E", "4", "--reinit", "inherit", "--out", &wide]);
    let before = Checkpoint::load(run.join("model.ckpt")).unwrap();
    let after = Checkpoint::load(tmp.path().join("wide/model.ckpt")).unwrap();
    assert_eq!(after.config().layer_dims(0).d_key, 4 * before.config().layer_dims(0).d_key);
    let toks: Vec<u32> = (0..40).map(|i| (i * 7 % 24) as u32).collect();
    assert_eq!(before.model.forward(&toks).unwrap(), after.model.forward(&toks).unwrap());
    let eval = |ckpt: &str, out: &str| {
        ok(&["eval", "--in", ckpt, "--vocab-kv", "8", "--lengths", "16,32", "--samples", "8", "--out", out])
    };
    let wide_ckpt = format!("{wide}/model.ckpt");
    assert_eq!(eval(&ckpt, &path(&tmp, "e1")), eval(&wide_ckpt, &path(&tmp, "e2")));
}
