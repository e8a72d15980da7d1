use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub tokens: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Per-step training record with strictly increasing steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
}

impl LossLog {
    pub fn push(&mut self, r: LossRecord) {
        if let Some(last) = self.records.last() {
            assert!(r.step > last.step, "loss log steps must increase");
        }
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss over records `[start, end)`.
    pub fn mean_loss(&self, start: usize, end: usize) -> f64 {
        let s = &self.records[start.min(self.len())..end.min(self.len())];
        s.iter().map(|r| r.loss).sum::<f64>() / s.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,tokens,lr,loss\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{:e},{:.9}", r.step, r.tokens, r.lr, r.loss);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut log = LossLog::default();
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("step,tokens,lr,loss") {
            return Err(Error::invalid("loss CSV lacks the `step,tokens,lr,loss` header"));
        }
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let parse_err = || Error::invalid(format!("loss CSV line {}: `{line}`", i + 2));
            if f.len() != 4 {
                return Err(parse_err());
            }
            let rec = LossRecord {
                step: f[0].parse().map_err(|_| parse_err())?,
                tokens: f[1].parse().map_err(|_| parse_err())?,
                lr: f[2].parse().map_err(|_| parse_err())?,
                loss: f[3].parse().map_err(|_| parse_err())?,
            };
            if log.records.last().is_some_and(|l| l.step >= rec.step) {
                return Err(parse_err());
            }
            log.records.push(rec);
        }
        Ok(log)
    }
}
