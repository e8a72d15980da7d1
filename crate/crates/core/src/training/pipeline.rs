use std::fs;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::statex::{apply_statex, AccountingReport, ExpansionPlan};

use super::data::ExampleSource;
use super::log::LossLog;
use super::trainer::train;
use super::TrainConfig;

pub enum Stage<'a> {
    Train {
        name: String,
        cfg: TrainConfig,
        source: &'a dyn ExampleSource,
    },
    Expand(ExpansionPlan),
}

impl Stage<'_> {
    pub fn name(&self) -> &str {
        match self {
            Stage::Train { name, .. } => name,
            Stage::Expand(_) => "expand",
        }
    }
}

/// Checkpoint after every stage, plus the loss logs of training stages and
/// the reports of expansion stages.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub checkpoints: Vec<(String, Checkpoint)>,
    pub logs: Vec<(String, LossLog)>,
    pub reports: Vec<AccountingReport>,
}

impl Artifacts {
    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last().map(|(_, c)| c)
    }

    pub fn log(&self, stage: &str) -> Option<&LossLog> {
        self.logs.iter().find(|(n, _)| n == stage).map(|(_, l)| l)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs `stages` in order starting from `init`. With `out_dir`, each stage
/// persists `<name>.ckpt` and, where applicable, `<name>.loss.csv` or
/// `<name>.accounting.{txt,csv}`.
pub fn run_pipeline(init: &Checkpoint, stages: &[Stage<'_>], out_dir: Option<&Path>) -> Result<Artifacts> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut art = Artifacts::default();
    let mut current = init.clone();
    for stage in stages {
        let name = stage.name().to_string();
        match stage {
            Stage::Train { cfg, source, .. } => {
                let (ck, log) = train(&current, *source, cfg, &name, &mut |_| {})?;
                if let Some(dir) = out_dir {
                    write(&dir.join(format!("{name}.loss.csv")), &log.to_csv())?;
                }
                art.logs.push((name.clone(), log));
                current = ck;
            }
            Stage::Expand(plan) => {
                let (ck, report) = apply_statex(&current, plan)?;
                if let Some(dir) = out_dir {
                    write(&dir.join(format!("{name}.accounting.txt")), &report.to_text())?;
                    write(&dir.join(format!("{name}.accounting.csv")), &report.to_csv())?;
                }
                art.reports.push(report);
                current = ck;
            }
        }
        if let Some(dir) = out_dir {
            current.save(dir.join(format!("{name}.ckpt")))?;
        }
        art.checkpoints.push((name, current.clone()));
    }
    Ok(art)
}
