mod common;

use common::config;
use proptest::prelude::*;
use regex::Regex;
use statex::arch::{Family, Model};
use statex::tasks::tokenizer::{decode, encode};
use statex::tasks::{
    evaluate, gen_mqar, gen_mqar_queries, gen_passkey, EvalReport, EvalRow, FillerStyle, Layout, Metric, MqarSource,
    Predictor, TaskSample,
};
use statex::training::ExampleSource;
use statex::{Result, Rng};

const STYLES: [FillerStyle; 2] = [FillerStyle::RepeatFiller, FillerStyle::DistractorFiller];

/// Answers MQAR queries by looking each key up in the preceding context.
struct Dictionary;

impl Predictor for Dictionary {
    fn next_tokens(&self, tokens: &[u32]) -> Result<Vec<u32>> {
        Ok((0..tokens.len())
            .map(|i| {
                (0..i)
                    .find(|&j| tokens[j] == tokens[i] && j + 1 < i)
                    .map_or(0, |j| tokens[j + 1])
            })
            .collect())
    }

    fn greedy(&self, _: &[u32], n: usize) -> Result<Vec<u32>> {
        Ok(vec![0; n])
    }
}

/// Reads the pass key back out of the prompt text.
struct Extractor;

impl Predictor for Extractor {
    fn next_tokens(&self, tokens: &[u32]) -> Result<Vec<u32>> {
        Ok(vec![0; tokens.len()])
    }

    fn greedy(&self, prompt: &[u32], _: usize) -> Result<Vec<u32>> {
        let text = decode(prompt);
        let pass = Regex::new(r"The pass key is (\d+)\. Remember it\.").unwrap();
        let word = Regex::new(r"special magic number for (\w+) mentioned").unwrap();
        let key = match word.captures(&text) {
            Some(w) => {
                let re = Regex::new(&format!(r"magic numbers for {} is: (\d+)\.", &w[1])).unwrap();
                re.captures(&text).unwrap()[1].to_string()
            }
            None => pass.captures(&text).unwrap()[1].to_string(),
        };
        Ok(encode(&format!(" {key}.")))
    }
}

/// Echoes the known answer of each sample.
struct Echo(Vec<TaskSample>);

impl Predictor for Echo {
    fn next_tokens(&self, tokens: &[u32]) -> Result<Vec<u32>> {
        let s = self.0.iter().find(|s| s.teacher_forced().0.starts_with(tokens)).unwrap();
        let full = s.teacher_forced().0;
        Ok(full[1..=tokens.len()].to_vec())
    }

    fn greedy(&self, prompt: &[u32], _: usize) -> Result<Vec<u32>> {
        Ok(self.0.iter().find(|s| s.prompt == prompt).unwrap().answer.clone())
    }
}

fn passkeys(n: usize, ctx: usize, digits: usize, style: FillerStyle, seed: u64) -> Vec<TaskSample> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| gen_passkey(ctx, digits, style, &mut rng).unwrap()).collect()
}

#[test]
fn five_digit_keys_are_five_digits() {
    let re = Regex::new(r"^[0-9]{5}$").unwrap();
    for style in STYLES {
        for s in passkeys(50, 512, 5, style, 1) {
            assert!(re.is_match(&decode(&s.answer)), "{:?}", decode(&s.answer));
            assert!(s.prompt.len() <= 512);
            assert_eq!(s.layout, Layout::Suffix);
        }
    }
}

#[test]
fn repeat_filler_uses_the_fixed_template() {
    let s = &passkeys(1, 512, 5, FillerStyle::RepeatFiller, 2)[0];
    let text = decode(&s.prompt);
    let key = decode(&s.answer);
    assert!(text.contains("The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again."));
    assert!(text.contains(&format!("The pass key is {key}. Remember it. {key} is the pass key.")));
    assert!(text.ends_with("What is the pass key? The pass key is"));
}

#[test]
fn distractor_filler_does_not_repeat_back_to_back() {
    for s in passkeys(20, 2048, 7, FillerStyle::DistractorFiller, 3) {
        let text = decode(&s.prompt);
        let sentences: Vec<&str> = text.split(". ").collect();
        assert!(sentences.windows(2).all(|w| w[0] != w[1]));
        assert!(text.starts_with("Some special magic numbers are hidden within the following text."));
    }
}

#[test]
fn generators_are_deterministic_per_seed() {
    for style in STYLES {
        assert_eq!(passkeys(5, 1024, 5, style, 4), passkeys(5, 1024, 5, style, 4));
        assert_ne!(passkeys(5, 1024, 5, style, 4), passkeys(5, 1024, 5, style, 5));
    }
    let mqar = |seed| gen_mqar(8, 32, 64, &mut Rng::new(seed)).unwrap();
    assert_eq!(mqar(6), mqar(6));
    assert_ne!(mqar(6), mqar(7));
}

#[test]
fn needle_depth_is_uniform_over_slots() {
    let samples = passkeys(1000, 1024, 5, FillerStyle::RepeatFiller, 8);
    let slots = samples[0].meta.slots.unwrap();
    assert!(slots >= 5);
    let mut counts = vec![0usize; slots];
    for s in &samples {
        assert_eq!(s.meta.slots, Some(slots));
        counts[s.meta.key_slot.unwrap()] += 1;
    }
    let expected = 1000.0 / slots as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of chi-square with up to 15 degrees of freedom.
    assert!(slots - 1 <= 15);
    assert!(chi2 < 37.7, "chi2 {chi2} over {slots} slots: {counts:?}");
}

#[test]
fn passkey_rejects_short_contexts_and_bad_digit_counts() {
    for style in STYLES {
        assert!(gen_passkey(40, 5, style, &mut Rng::new(0)).is_err());
    }
    assert!(gen_passkey(512, 0, FillerStyle::RepeatFiller, &mut Rng::new(0)).is_err());
    assert!(gen_passkey(512, 19, FillerStyle::RepeatFiller, &mut Rng::new(0)).is_err());
}

#[test]
fn regex_extractor_scores_one_on_passkeys() {
    for style in STYLES {
        let mut samples = passkeys(32, 512, 5, style, 9);
        samples.extend(passkeys(32, 1024, 7, style, 10));
        let r = evaluate(&Extractor, "passkey", &samples, Metric::Contains).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows.iter().all(|row| row.accuracy == 1.0), "{r:?}");
    }
}

#[test]
fn dictionary_oracle_scores_one_on_mqar() {
    let mut rng = Rng::new(11);
    let samples: Vec<_> = [4, 8, 16, 32]
        .iter()
        .flat_map(|&n| (0..20).map(|_| gen_mqar(n, 64, 4 * n, &mut rng).unwrap()).collect::<Vec<_>>())
        .collect();
    let r = evaluate(&Dictionary, "mqar", &samples, Metric::ExactTokenAccuracy).unwrap();
    assert_eq!(r.rows.len(), 4);
    assert!(r.rows.iter().all(|row| row.accuracy == 1.0), "{r:?}");
}

#[test]
fn echo_predictor_scores_one_on_both_metrics() {
    let mut rng = Rng::new(12);
    let samples: Vec<_> = (0..10).map(|_| gen_mqar(6, 32, 24, &mut rng).unwrap()).collect();
    let r = evaluate(&Echo(samples.clone()), "mqar", &samples, Metric::ExactTokenAccuracy).unwrap();
    assert_eq!(r.mean(), 1.0);
    let samples = passkeys(10, 256, 5, FillerStyle::RepeatFiller, 13);
    let r = evaluate(&Echo(samples.clone()), "passkey", &samples, Metric::Contains).unwrap();
    assert_eq!(r.mean(), 1.0);
}

#[test]
fn untrained_model_does_not_retrieve_passkeys() {
    let model = Model::<f64>::init(config(Family::Gla, 2, 32, 2, 8, 8, 128), 14).unwrap();
    let samples = passkeys(16, 256, 5, FillerStyle::RepeatFiller, 15);
    let r = evaluate(&model, "passkey", &samples, Metric::Contains).unwrap();
    assert_eq!(r.mean(), 0.0);
}

#[test]
fn mqar_rejects_overflow_and_too_few_keys() {
    let mut rng = Rng::new(0);
    assert!(gen_mqar(8, 32, 31, &mut rng).is_err());
    assert!(gen_mqar(8, 32, 32, &mut rng).is_ok());
    assert!(gen_mqar(40, 32, 160, &mut rng).is_err());
    assert!(gen_mqar(0, 32, 16, &mut rng).is_err());
    assert!(gen_mqar_queries(4, 5, 32, 64, &mut rng).is_err());
    assert!(MqarSource::new(4, 2, 32).is_err());
}

#[test]
fn mqar_source_masks_only_answers() {
    let src = MqarSource::new(2, 6, 16).unwrap();
    for i in 0..20 {
        let e = src.example(3, i).unwrap();
        let mask = e.mask.unwrap();
        let n = e.tokens.len() / 4;
        assert!((2..=6).contains(&n));
        assert_eq!(mask.iter().filter(|&&m| m).count(), n);
        assert!(e.tokens.iter().all(|&t| (t as usize) < src.vocab()));
        assert_eq!(src.example(3, i).unwrap().tokens, e.tokens);
    }
}

#[test]
fn eval_report_csv_round_trips() {
    let r = EvalReport {
        task: "passkey".into(),
        metric: Metric::Contains,
        rows: vec![
            EvalRow { length: 256, n: 256, accuracy: 0.5 },
            EvalRow { length: 512, n: 256, accuracy: 0.25 },
        ],
    };
    assert_eq!(EvalReport::from_csv(&r.to_csv()).unwrap(), r);
    assert!(EvalReport::from_csv("nope\n").is_err());
    assert!(r.to_table().contains("37.50%"));
}

proptest! {
    #[test]
    fn mqar_samples_are_well_formed(n in 1usize..24, extra in 0usize..8, seed in any::<u64>()) {
        let vkv = 24;
        let s = gen_mqar(n, vkv, 4 * n + extra, &mut Rng::new(seed)).unwrap();
        let Layout::Interleaved { context } = s.layout else { panic!("layout") };
        prop_assert_eq!(context, 2 * n);
        let keys: Vec<u32> = s.prompt[..context].iter().step_by(2).copied().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), n);
        prop_assert!(keys.iter().all(|&k| (1..=vkv as u32).contains(&k)));
        for (q, a) in s.prompt[context..].iter().zip(&s.answer) {
            let i = keys.iter().position(|k| k == q).unwrap();
            prop_assert_eq!(s.prompt[2 * i + 1], *a);
            prop_assert!((vkv as u32 + 1..=2 * vkv as u32).contains(a));
        }
        let (t, m) = s.teacher_forced();
        prop_assert_eq!(t.len(), 4 * n);
        prop_assert_eq!(m.iter().filter(|&&x| x).count(), n);
    }
}
