use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TaskSample;
use crate::arch::{argmax, Model, Scan};
use crate::error::{Error, Result};
use crate::numerics::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Greedily decode `answer + 2` tokens after the prompt and score 1 when
    /// the answer occurs in them.
    Contains,
    /// Fraction of answer tokens predicted exactly under teacher forcing.
    ExactTokenAccuracy,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Contains => "contains",
            Metric::ExactTokenAccuracy => "exact-token-accuracy",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contains" => Ok(Metric::Contains),
            "exact-token-accuracy" | "accuracy" => Ok(Metric::ExactTokenAccuracy),
            _ => Err(Error::invalid(format!("unknown metric `{s}`"))),
        }
    }
}

/// Anything that predicts tokens: a model, or a test oracle.
pub trait Predictor: Sync {
    /// Greedy prediction for the token after each position of `tokens`.
    fn next_tokens(&self, tokens: &[u32]) -> Result<Vec<u32>>;
    /// Greedy continuation of `prompt` by `n` tokens.
    fn greedy(&self, prompt: &[u32], n: usize) -> Result<Vec<u32>>;
}

impl<T: Scalar> Predictor for Model<T> {
    fn next_tokens(&self, tokens: &[u32]) -> Result<Vec<u32>> {
        let logits = self.forward_scan(tokens, Scan::Chunked(64))?;
        Ok((0..tokens.len()).map(|i| argmax(logits.row(i))).collect())
    }

    fn greedy(&self, prompt: &[u32], n: usize) -> Result<Vec<u32>> {
        self.greedy_decode(prompt, n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub length: usize,
    pub n: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: Metric,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Unweighted mean over length buckets.
    pub fn mean(&self) -> f64 {
        self.rows.iter().map(|r| r.accuracy).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,metric,length,n,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{:.6}", self.task, self.metric.as_str(), r.length, r.n, r.accuracy);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("task,metric,length,n,accuracy") {
            return Err(Error::invalid("eval CSV lacks the `task,metric,length,n,accuracy` header"));
        }
        let mut task = String::new();
        let mut metric = Metric::ExactTokenAccuracy;
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::invalid(format!("eval CSV line `{line}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            task = f[0].to_string();
            metric = f[1].parse()?;
            rows.push(EvalRow {
                length: f[2].parse().map_err(|_| bad())?,
                n: f[3].parse().map_err(|_| bad())?,
                accuracy: f[4].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { task, metric, rows })
    }

    /// Aligned text table with one row per length and a mean row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} ({})", self.task, self.metric.as_str());
        let _ = writeln!(s, "{:>8}  {:>6}  {:>8}", "length", "n", "accuracy");
        for r in &self.rows {
            let _ = writeln!(s, "{:>8}  {:>6}  {:>7.2}%", r.length, r.n, 100.0 * r.accuracy);
        }
        let _ = writeln!(s, "{:>8}  {:>6}  {:>7.2}%", "mean", "", 100.0 * self.mean());
        s
    }
}

fn contains(haystack: &[u32], needle: &[u32]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

fn score(p: &dyn Predictor, s: &TaskSample, metric: Metric) -> Result<f64> {
    match metric {
        Metric::Contains => {
            let out = p.greedy(&s.prompt, s.answer.len() + 2)?;
            Ok(contains(&out, &s.answer) as u8 as f64)
        }
        Metric::ExactTokenAccuracy => {
            let (tokens, mask) = s.teacher_forced();
            let pred = p.next_tokens(&tokens[..tokens.len() - 1])?;
            let (mut hit, mut n) = (0usize, 0usize);
            for i in 1..tokens.len() {
                if mask[i] {
                    n += 1;
                    hit += (pred[i - 1] == tokens[i]) as usize;
                }
            }
            Ok(hit as f64 / n.max(1) as f64)
        }
    }
}

/// Scores every sample and averages per length bucket (`meta.ctx_len`).
pub fn evaluate<P: Predictor>(p: &P, task: &str, samples: &[TaskSample], metric: Metric) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let scores: Vec<f64> = samples
        .par_iter()
        .map(|s| score(p, s, metric))
        .collect::<Result<_>>()?;
    let mut buckets: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (s, v) in samples.iter().zip(scores) {
        let b = buckets.entry(s.meta.ctx_len).or_default();
        b.0 += 1;
        b.1 += v;
    }
    Ok(EvalReport {
        task: task.to_string(),
        metric,
        rows: buckets
            .into_iter()
            .map(|(length, (n, sum))| EvalRow {
                length,
                n,
                accuracy: sum / n as f64,
            })
            .collect(),
    })
}
