mod common;

use common::config;
use proptest::prelude::*;
use statex::arch::{Family, Model};
use statex::checkpoint::{Checkpoint, Dtype, Metadata};
use statex::statex::{ExpansionPlan, ReinitPolicy};
use statex::training::{
    build_batches, cosine_lr, parse_corpus, run_pipeline, synthetic_corpus, train, train_on_corpus, CorpusSource,
    Example, ExampleSource, LossLog, Stage, TrainConfig,
};
use statex::{Error, Result, Rng};

fn schedule(warmup_frac: f64) -> TrainConfig {
    TrainConfig { max_lr: 3e-4, min_lr: 0.0, warmup_frac, ..Default::default() }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1e-12)
}

fn checkpoint(family: Family, layers: usize, d: usize, vocab: usize, seed: u64) -> Checkpoint {
    let model = Model::<f64>::init(config(family, layers, d, 2, 4, 4, vocab), seed).unwrap();
    Checkpoint::new(model, Metadata::default(), Dtype::F32).unwrap()
}

fn cfg(ctx: usize, rows: usize, steps: u64, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        max_lr: lr,
        ctx_len: ctx,
        batch_tokens: rows * ctx,
        total_tokens: steps * (rows * ctx) as u64,
        seed,
        ..Default::default()
    }
}

#[test]
fn cosine_schedule_examples() {
    let c = schedule(0.05);
    assert!(close(cosine_lr(50, 1000, &c), 3e-4));
    assert!(close(cosine_lr(25, 1000, &c), 1.5e-4));
    assert!(close(cosine_lr(525, 1000, &c), 1.5e-4));
    assert_eq!(cosine_lr(1000, 1000, &c), 0.0);
    assert_eq!(cosine_lr(0, 1000, &c), 0.0);
}

proptest! {
    #[test]
    fn cosine_schedule_is_continuous_and_then_nonincreasing(total in 20usize..2000, frac in 0.0f64..0.5) {
        let c = schedule(frac);
        let warmup = (frac * total as f64).round() as usize;
        if warmup > 0 && warmup < total {
            // Both sides of the boundary approach max_lr.
            let before = cosine_lr(warmup - 1, total, &c);
            let after = cosine_lr(warmup + 1, total, &c);
            prop_assert!((3e-4 - before) <= 3e-4 / warmup as f64 + 1e-15);
            prop_assert!((3e-4 - after) <= 3e-4 * (std::f64::consts::PI / (total - warmup) as f64).powi(2));
            prop_assert!(close(cosine_lr(warmup, total, &c), 3e-4));
        }
        for s in warmup..total {
            prop_assert!(cosine_lr(s + 1, total, &c) <= cosine_lr(s, total, &c));
        }
        for s in 0..=total {
            let lr = cosine_lr(s, total, &c);
            prop_assert!((0.0..=3e-4).contains(&lr));
        }
    }

    #[test]
    fn batch_count_matches_counting_formula(lens in prop::collection::vec(0usize..40, 1..12), ctx in 2usize..17) {
        let docs: Vec<Vec<u32>> = lens.iter().enumerate().map(|(i, &n)| vec![i as u32 + 1; n]).collect();
        let chunks = build_batches(&docs, ctx, 0).unwrap();
        let total: usize = lens.iter().sum::<usize>() + lens.len() - 1;
        prop_assert_eq!(chunks.len() * ctx, total / ctx * ctx);
        prop_assert!(chunks.iter().all(|c| c.len() == ctx));
        // The concatenation is a prefix of the delimited stream.
        let mut stream = Vec::new();
        for (i, d) in docs.iter().enumerate() {
            if i > 0 { stream.push(0); }
            stream.extend_from_slice(d);
        }
        prop_assert_eq!(chunks.concat(), stream[..chunks.len() * ctx].to_vec());
    }
}

#[test]
fn build_batches_examples() {
    let (a, b, c, d) = (1, 2, 3, 9);
    assert_eq!(build_batches(&[vec![a, b], vec![c]], 2, d).unwrap(), vec![vec![a, b], vec![d, c]]);
    assert!(build_batches(&[vec![1, 2, 3]], 8, 0).unwrap().is_empty());
    assert!(build_batches(&[], 8, 0).is_err());
    assert!(CorpusSource::new(vec![]).is_err());
}

#[test]
fn corpus_files_parse_one_document_per_line() {
    assert_eq!(parse_corpus("1 2 3\n\n4 5\n").unwrap(), vec![vec![1, 2, 3], vec![4, 5]]);
    assert!(parse_corpus("1 x 3").is_err());
    let a = synthetic_corpus(4, 50, 16, 2, 1).unwrap();
    assert_eq!(a, synthetic_corpus(4, 50, 16, 2, 1).unwrap());
    assert!(a.iter().flatten().all(|&t| (1..16).contains(&t)));
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let ck = checkpoint(Family::Gla, 1, 16, 12, 1);
    let corpus = synthetic_corpus(8, 64, 12, 3, 2).unwrap();
    let c = TrainConfig { max_lr: 0.0, ..cfg(16, 2, 5, 0.0, 3) };
    let (out, log) = train_on_corpus(&ck, &corpus, &c, "lpt").unwrap();
    assert_eq!(log.len(), 5);
    assert_eq!(out.model.params, ck.model.params);
    let mut same = ck.clone();
    same.meta = out.meta.clone();
    assert_eq!(out.to_bytes().unwrap(), same.to_bytes().unwrap());
}

#[test]
fn memorizes_a_repeated_document() {
    let doc: Vec<u32> = (0..32).map(|i| 1 + (i * 7 % 23) as u32).collect();
    let corpus = vec![doc; 200];
    let ck = checkpoint(Family::Gla, 2, 32, 24, 4);
    let (_, log) = train_on_corpus(&ck, &corpus, &cfg(32, 4, 150, 1e-2, 5), "memorize").unwrap();
    let end = log.mean_loss(log.len() - 5, log.len());
    assert!(end < 0.1, "final loss {end}");
    assert!(log.records[0].loss > 2.5);
}

#[test]
fn same_seed_gives_identical_logs() {
    let corpus = synthetic_corpus(16, 64, 20, 3, 6).unwrap();
    for family in [Family::Gla, Family::Mamba2] {
        let ck = checkpoint(family, 2, 16, 20, 7);
        let c = cfg(16, 4, 6, 3e-3, 8);
        let (a, la) = train_on_corpus(&ck, &corpus, &c, "pretrain").unwrap();
        let (b, lb) = train_on_corpus(&ck, &corpus, &c, "pretrain").unwrap();
        assert_eq!(la.to_csv(), lb.to_csv());
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(LossLog::from_csv(&la.to_csv()).unwrap().len(), la.len());
        let (_, lc) = train_on_corpus(&ck, &corpus, &TrainConfig { seed: 9, ..c }, "pretrain").unwrap();
        assert_ne!(la.to_csv(), lc.to_csv());
    }
}

#[test]
fn structureless_tokens_are_not_learned() {
    let vocab = 32;
    let mut rng = Rng::new(10);
    let corpus: Vec<Vec<u32>> = (0..400).map(|_| (0..32).map(|_| rng.below(vocab) as u32).collect()).collect();
    let ck = checkpoint(Family::Gla, 2, 32, vocab, 11);
    let (_, log) = train_on_corpus(&ck, &corpus, &cfg(32, 8, 60, 3e-3, 12), "noise").unwrap();
    let ln_v = (vocab as f64).ln();
    let end = log.mean_loss(log.len() - 10, log.len());
    assert!((end - ln_v).abs() <= 0.05 * ln_v, "loss {end} vs ln V {ln_v}");
}

/// Serves `inner`'s examples but poisons every example from `from` on with
/// a token whose embedding is NaN.
struct Poisoned<'a> {
    inner: &'a CorpusSource,
    from: u64,
}

impl ExampleSource for Poisoned<'_> {
    fn example(&self, seed: u64, index: u64) -> Result<Example> {
        let mut e = self.inner.example(seed, index)?;
        if index >= self.from {
            e.tokens[3] = 0;
        }
        Ok(e)
    }
}

#[test]
fn non_finite_loss_reports_the_step() {
    let mut ck = checkpoint(Family::Gla, 1, 16, 12, 13);
    ck.model.params.get_mut("embed").unwrap().row_mut(0).fill(f64::NAN);
    let chunks = build_batches(&synthetic_corpus(8, 64, 12, 3, 14).unwrap(), 16, 0).unwrap();
    let inner = CorpusSource::new(chunks.into_iter().filter(|c| !c.contains(&0)).collect()).unwrap();
    let src = Poisoned { inner: &inner, from: 7 };
    let err = train(&ck, &src, &cfg(16, 2, 10, 1e-3, 15), "lpt", &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 3 }), "{err:?}");
}

#[test]
fn empty_corpus_is_an_error() {
    let ck = checkpoint(Family::Gla, 1, 16, 12, 16);
    assert!(train_on_corpus(&ck, &[], &cfg(16, 2, 2, 1e-3, 0), "lpt").is_err());
    assert!(train_on_corpus(&ck, &[vec![1, 2, 3]], &cfg(16, 2, 2, 1e-3, 0), "lpt").is_err());
}

#[test]
fn identity_expansion_pipeline_equals_plain_post_training() {
    let pre = synthetic_corpus(16, 64, 20, 3, 17).unwrap();
    let post = synthetic_corpus(16, 128, 20, 3, 18).unwrap();
    let pre = CorpusSource::new(build_batches(&pre, 16, 0).unwrap()).unwrap();
    let post = CorpusSource::new(build_batches(&post, 32, 0).unwrap()).unwrap();
    let ck = checkpoint(Family::Gla, 2, 16, 20, 19);
    let pre_cfg = cfg(16, 4, 4, 3e-3, 20);
    let post_cfg = cfg(32, 2, 4, 1e-3, 21);
    let identity = ExpansionPlan { m: 2, gla_merge_to: 2, reinit_policy: ReinitPolicy::Inherit, ..ExpansionPlan::default_for(Family::Gla) };
    let lpt = run_pipeline(
        &ck,
        &[
            Stage::Train { name: "pretrain".into(), cfg: pre_cfg.clone(), source: &pre },
            Stage::Train { name: "post".into(), cfg: post_cfg.clone(), source: &post },
        ],
        None,
    )
    .unwrap();
    let expanded = run_pipeline(
        &ck,
        &[
            Stage::Train { name: "pretrain".into(), cfg: pre_cfg.clone(), source: &pre },
            Stage::Expand(identity),
            Stage::Train { name: "post".into(), cfg: post_cfg.clone(), source: &post },
        ],
        None,
    )
    .unwrap();
    assert_eq!(lpt.last().unwrap().model, expanded.last().unwrap().model);
    assert_eq!(lpt.log("post"), expanded.log("post"));
    assert_eq!(expanded.reports[0].ratio_numer, expanded.reports[0].ratio_denom);

    let statex = run_pipeline(
        &ck,
        &[
            Stage::Train { name: "pretrain".into(), cfg: pre_cfg, source: &pre },
            Stage::Expand(ExpansionPlan { m: 1, ..ExpansionPlan::default_for(Family::Gla) }),
            Stage::Train { name: "post".into(), cfg: post_cfg, source: &post },
        ],
        None,
    )
    .unwrap();
    let seen = |a: &statex::training::Artifacts| a.last().unwrap().meta.tokens_seen;
    assert_eq!(seen(&lpt), seen(&statex));
    assert_eq!(seen(&lpt), 4 * 64 + 4 * 64);
    assert_ne!(lpt.last().unwrap().config(), statex.last().unwrap().config());
}

#[test]
fn pipeline_persists_each_stage() {
    let dir = tempfile::tempdir().unwrap();
    let src = CorpusSource::new(build_batches(&synthetic_corpus(8, 64, 20, 3, 22).unwrap(), 16, 0).unwrap()).unwrap();
    let ck = checkpoint(Family::Mamba2, 2, 16, 20, 23);
    let plan = ExpansionPlan { m: 1, ssm_e: 2, ..ExpansionPlan::default_for(Family::Mamba2) };
    let art = run_pipeline(
        &ck,
        &[
            Stage::Train { name: "pretrain".into(), cfg: cfg(16, 2, 2, 1e-3, 24), source: &src },
            Stage::Expand(plan),
            Stage::Train { name: "statex".into(), cfg: cfg(16, 2, 2, 1e-3, 25), source: &src },
        ],
        Some(dir.path()),
    )
    .unwrap();
    for f in ["pretrain.ckpt", "pretrain.loss.csv", "expand.ckpt", "expand.accounting.txt", "expand.accounting.csv", "statex.ckpt", "statex.loss.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back = Checkpoint::load(dir.path().join("statex.ckpt")).unwrap();
    assert_eq!(&back, art.last().unwrap());
    assert!(back.meta.accounting.is_some());
}
