use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use statex::arch::Model;
use statex::checkpoint::{inspect, Checkpoint, Dtype, Metadata};
use statex::statex::{account, apply_statex};
use statex::tasks::{evaluate, gen_mqar, gen_passkey, EvalReport, Metric, MqarSource, TaskSample};
use statex::training::{
    build_batches, load_corpus, synthetic_corpus, train, CorpusSource, ExampleSource, LossLog,
};
use statex::{ModelConfig, Rng};

use crate::config::{Flags, RunConfig};
use crate::CliError;

pub const CHECKPOINT: &str = "model.ckpt";
pub const LOSS_CSV: &str = "loss.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const RESOLVED: &str = "config.toml";

fn out_dir(flags: &Flags) -> Result<PathBuf, CliError> {
    let dir = flags
        .out
        .clone()
        .ok_or_else(|| CliError::Config("out: an output directory is required".into()))?;
    fs::create_dir_all(&dir).map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn input(flags: &Flags) -> Result<Checkpoint, CliError> {
    let path = flags
        .input
        .as_ref()
        .ok_or_else(|| CliError::Config("in: an input checkpoint is required".into()))?;
    if !path.exists() {
        return Err(CliError::Config(format!("in: `{}` does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn model_config(rc: &RunConfig) -> Result<ModelConfig, CliError> {
    rc.model
        .clone()
        .ok_or_else(|| CliError::Config("model: give --preset, --family or a [model] section".into()))
}

/// The training stream named by the task settings.
fn source(rc: &RunConfig, config: &ModelConfig) -> Result<Box<dyn ExampleSource>, CliError> {
    let t = &rc.task;
    let ctx = rc.train.ctx_len;
    let chunks = |docs: Vec<Vec<u32>>| -> Result<Box<dyn ExampleSource>, CliError> {
        let chunks = build_batches(&docs, ctx, config.delimiter_token)?;
        Ok(Box::new(CorpusSource::new(chunks)?))
    };
    match t.name.as_str() {
        "mqar" => {
            if 4 * t.max_pairs > ctx {
                return Err(CliError::Config(format!(
                    "train.ctx_len: {ctx} is shorter than {} tokens needed for {} pairs",
                    4 * t.max_pairs,
                    t.max_pairs
                )));
            }
            let src = MqarSource::new(t.min_pairs, t.max_pairs, t.vocab_kv)
                .map_err(|e| CliError::Config(format!("task: {e}")))?;
            if src.vocab() > config.vocab {
                return Err(CliError::Config(format!(
                    "task.vocab_kv: {} needs vocab {}, model has {}",
                    t.vocab_kv,
                    src.vocab(),
                    config.vocab
                )));
            }
            Ok(Box::new(src))
        }
        "synthetic" => {
            let n_docs = (rc.train.total_tokens as usize / ctx).clamp(64, 4096);
            chunks(synthetic_corpus(n_docs, ctx, config.vocab, 4, rc.train.seed)?)
        }
        "corpus" => {
            let path = t
                .corpus
                .as_ref()
                .ok_or_else(|| CliError::Config("corpus: task `corpus` needs --corpus".into()))?;
            if !path.exists() {
                return Err(CliError::Config(format!("corpus: `{}` does not exist", path.display())));
            }
            chunks(load_corpus(path)?)
        }
        other => Err(CliError::Config(format!(
            "task: `{other}` is not a training task (mqar, synthetic, corpus)"
        ))),
    }
}

pub fn cmd_train(flags: &Flags) -> Result<(), CliError> {
    let mut rc = RunConfig::resolve(flags)?;
    if rc.task.corpus.is_some() && flags.task.is_none() {
        rc.task.name = "corpus".into();
    }
    let start = match &flags.input {
        Some(_) => {
            let ck = input(flags)?;
            rc.model = Some(ck.config().clone());
            ck
        }
        None => {
            let config = model_config(&rc)?;
            let model = Model::<f64>::init(config, rc.train.seed)?;
            Checkpoint::new(model, Metadata::default(), Dtype::F32)?
        }
    };
    let src = source(&rc, start.config())?;
    let dir = out_dir(flags)?;
    write(&dir.join(RESOLVED), &rc.to_toml())?;
    let total = rc.train.total_steps();
    let every = (total / 20).max(1);
    let (ck, log) = train(&start, src.as_ref(), &rc.train, "train", &mut |r| {
        if r.step % every == 0 || r.step + 1 == total {
            eprintln!("step {:>6}  tokens {:>10}  lr {:.3e}  loss {:.4}", r.step, r.tokens, r.lr, r.loss);
        }
    })?;
    write(&dir.join(LOSS_CSV), &log.to_csv())?;
    ck.save(dir.join(CHECKPOINT))?;
    Ok(())
}

pub fn cmd_expand(flags: &Flags) -> Result<(), CliError> {
    let mut rc = RunConfig::resolve(flags)?;
    let report = match &flags.input {
        Some(_) => {
            let ck = input(flags)?;
            let plan = rc.plan(ck.config().family);
            let (out, report) = apply_statex(&ck, &plan)?;
            rc.model = Some(ck.config().clone());
            let dir = out_dir(flags)?;
            out.save(dir.join(CHECKPOINT))?;
            report
        }
        None => {
            let config = model_config(&rc)?;
            account(&config, &rc.plan(config.family))?
        }
    };
    print!("{}", report.to_text());
    if flags.out.is_some() {
        let dir = out_dir(flags)?;
        write(&dir.join("accounting.txt"), &report.to_text())?;
        write(&dir.join("accounting.csv"), &report.to_csv())?;
        write(&dir.join(RESOLVED), &rc.to_toml())?;
    }
    Ok(())
}

fn eval_samples(rc: &RunConfig) -> Result<(Vec<TaskSample>, Metric), CliError> {
    let t = &rc.task;
    let mut samples = Vec::with_capacity(t.lengths.len() * t.samples);
    for &len in &t.lengths {
        // One stream per length, so adding a length leaves the others unchanged.
        let mut rng = Rng::new(rc.train.seed).indexed("eval", &[len as u64]);
        for _ in 0..t.samples {
            let s = match t.name.as_str() {
                "passkey" => gen_passkey(len, t.digits, t.filler, &mut rng),
                "mqar" => gen_mqar(len / 4, t.vocab_kv, len, &mut rng),
                other => {
                    return Err(CliError::Config(format!(
                        "task: `{other}` is not an evaluation task (passkey, mqar)"
                    )))
                }
            };
            samples.push(s.map_err(|e| CliError::Config(format!("task: {e}")))?);
        }
    }
    let metric = match t.name.as_str() {
        "passkey" => Metric::Contains,
        _ => Metric::ExactTokenAccuracy,
    };
    Ok((samples, metric))
}

pub fn cmd_eval(flags: &Flags) -> Result<(), CliError> {
    let mut rc = RunConfig::resolve(flags)?;
    let ck = input(flags)?;
    rc.model = Some(ck.config().clone());
    let (samples, metric) = eval_samples(&rc)?;
    if let Some(bad) = samples.iter().flat_map(|s| &s.prompt).find(|&&t| t as usize >= ck.config().vocab) {
        return Err(CliError::Config(format!(
            "task: token {bad} is outside the model vocab {}",
            ck.config().vocab
        )));
    }
    let report = evaluate(&ck.model, &rc.task.name, &samples, metric)?;
    print!("{}", report.to_table());
    if flags.out.is_some() {
        let dir = out_dir(flags)?;
        write(&dir.join(EVAL_CSV), &report.to_csv())?;
        write(&dir.join(RESOLVED), &rc.to_toml())?;
    }
    Ok(())
}

/// CSV of `kind,key,a,b,delta` rows, `delta = b - a`: accuracy per task
/// and length, then the loss gap per step.
pub fn compare(a: &Path, b: &Path) -> Result<String, CliError> {
    let mut out = String::from("kind,key,a,b,delta\n");
    let mut found = false;
    let both = |name: &str| a.join(name).exists() && b.join(name).exists();
    if both(EVAL_CSV) {
        found = true;
        let ra = EvalReport::from_csv(&read(&a.join(EVAL_CSV))?)?;
        let rb = EvalReport::from_csv(&read(&b.join(EVAL_CSV))?)?;
        let rows: BTreeMap<usize, f64> = rb.rows.iter().map(|r| (r.length, r.accuracy)).collect();
        for r in &ra.rows {
            if let Some(&y) = rows.get(&r.length) {
                let _ = writeln!(out, "accuracy,{}@{},{:.6},{:.6},{:.6}", ra.task, r.length, r.accuracy, y, y - r.accuracy);
            }
        }
        let (ma, mb) = (ra.mean(), rb.mean());
        let _ = writeln!(out, "accuracy,{}@mean,{ma:.6},{mb:.6},{:.6}", ra.task, mb - ma);
    }
    if both(LOSS_CSV) {
        found = true;
        let la = LossLog::from_csv(&read(&a.join(LOSS_CSV))?)?;
        let lb = LossLog::from_csv(&read(&b.join(LOSS_CSV))?)?;
        for (x, y) in la.records.iter().zip(&lb.records) {
            if x.step == y.step {
                let _ = writeln!(out, "loss,{},{:.6},{:.6},{:.6}", x.step, x.loss, y.loss, y.loss - x.loss);
            }
        }
    }
    if !found {
        return Err(CliError::Other(format!(
            "no {EVAL_CSV} or {LOSS_CSV} present in both `{}` and `{}`",
            a.display(),
            b.display()
        )));
    }
    Ok(out)
}

pub fn cmd_compare(a: &Path, b: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let csv = compare(a, b)?;
    print!("{csv}");
    if let Some(path) = out {
        write(path, &csv)?;
    }
    Ok(())
}

pub fn cmd_inspect(path: &Path) -> Result<(), CliError> {
    print!("{}", inspect(path)?);
    Ok(())
}

