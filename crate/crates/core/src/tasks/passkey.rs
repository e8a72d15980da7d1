use serde::{Deserialize, Serialize};

use super::tokenizer::encode;
use super::{Layout, SampleMeta, TaskSample};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FillerStyle {
    /// One fixed filler passage repeated around a single pass key.
    RepeatFiller,
    /// Varied sentences with decoy word/number pairs around a keyed number.
    DistractorFiller,
}

impl std::str::FromStr for FillerStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "repeat" | "repeat-filler" => Ok(FillerStyle::RepeatFiller),
            "distractor" | "distractor-filler" => Ok(FillerStyle::DistractorFiller),
            _ => Err(Error::invalid(format!("unknown filler style `{s}`"))),
        }
    }
}

const REPEAT_FILLER: &str = "The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again. ";
const REPEAT_QUESTION: &str = "What is the pass key? The pass key is";

const DISTRACTOR_HEADER: &str = "Some special magic numbers are hidden within the following text. \
Make sure to memorize it. I will quiz you about the numbers afterwards. ";

const WORDS: [&str; 32] = [
    "apple", "basket", "candle", "desert", "engine", "falcon", "garden", "harbor", "island", "jacket", "kettle",
    "lantern", "meadow", "needle", "orchid", "pepper", "quartz", "river", "saddle", "timber", "umbrella", "violet",
    "walnut", "yellow", "zephyr", "anchor", "bridge", "copper", "dragon", "ember", "forest", "glacier",
];

const SUBJECTS: [&str; 12] = [
    "The founder", "A good startup", "Every investor", "The best programmer", "My friend", "The committee",
    "An early user", "The small team", "A careful writer", "The old company", "Each student", "The designer",
];
const VERBS: [&str; 12] = [
    "builds", "rewrites", "ignores", "studies", "questions", "admires", "funds", "sketches", "ships",
    "explains", "measures", "abandons",
];
const OBJECTS: [&str; 12] = [
    "the prototype", "a strange idea", "the essay", "every plan", "the old code", "a new market",
    "the first draft", "a hard problem", "the schedule", "the wrong metric", "a quiet habit", "the product",
];
const ENDINGS: [&str; 10] = [
    "before lunch", "without asking", "for years", "in the evening", "on purpose", "with great care",
    "after the launch", "every winter", "at the last minute", "despite the noise",
];

fn number(rng: &mut Rng, digits: usize) -> String {
    let lo = 10u64.pow(digits as u32 - 1);
    (lo + rng.next_u64() % (9 * lo)).to_string()
}

/// Passkey-retrieval prompt whose needle sits in a uniformly random filler
/// slot. The prompt ends with the answer prefix; the answer is the key's
/// digits.
pub fn gen_passkey(ctx_len: usize, digits: usize, style: FillerStyle, rng: &mut Rng) -> Result<TaskSample> {
    if !(1..=18).contains(&digits) {
        return Err(Error::invalid(format!("digits {digits} not in 1..=18")));
    }
    let key = number(rng, digits);
    let (head, needle, question, units) = match style {
        FillerStyle::RepeatFiller => {
            let needle = format!("The pass key is {key}. Remember it. {key} is the pass key. ");
            let budget = budget(ctx_len, &["", &needle, REPEAT_QUESTION])?;
            let n = budget / REPEAT_FILLER.len();
            (String::new(), needle, REPEAT_QUESTION.to_string(), vec![REPEAT_FILLER.to_string(); n])
        }
        FillerStyle::DistractorFiller => {
            let word = WORDS[rng.below(WORDS.len())];
            let needle = format!("One of the special magic numbers for {word} is: {key}. ");
            let question = format!(
                "What is the special magic number for {word} mentioned in the provided text? \
                 The special magic number for {word} mentioned in the provided text is"
            );
            let mut left = budget(ctx_len, &[DISTRACTOR_HEADER, &needle, &question])?;
            let mut units = Vec::new();
            let mut last = String::new();
            loop {
                let s = distractor_sentence(rng, word, &key, digits);
                if s == last {
                    continue;
                }
                if s.len() > left {
                    break;
                }
                left -= s.len();
                last.clone_from(&s);
                units.push(s);
            }
            (DISTRACTOR_HEADER.to_string(), needle, question, units)
        }
    };
    let slots = units.len() + 1;
    let slot = rng.below(slots);
    let mut text = head;
    for (i, u) in units.iter().enumerate() {
        if i == slot {
            text.push_str(&needle);
        }
        text.push_str(u);
    }
    if slot == units.len() {
        text.push_str(&needle);
    }
    text.push_str(&question);
    let prompt = encode(&text);
    debug_assert!(prompt.len() <= ctx_len);
    Ok(TaskSample {
        prompt,
        answer: encode(&key),
        layout: Layout::Suffix,
        meta: SampleMeta {
            ctx_len,
            n_pairs: None,
            key_slot: Some(slot),
            slots: Some(slots),
        },
    })
}

fn budget(ctx_len: usize, parts: &[&str]) -> Result<usize> {
    let fixed: usize = parts.iter().map(|p| p.len()).sum();
    ctx_len.checked_sub(fixed).ok_or_else(|| {
        Error::invalid(format!("ctx_len {ctx_len} is too small for the template ({fixed} characters)"))
    })
}

/// A varied filler sentence, or about one time in eight a decoy pair for a
/// different word and number.
fn distractor_sentence(rng: &mut Rng, word: &str, key: &str, digits: usize) -> String {
    if rng.below(8) == 0 {
        let decoy = loop {
            let w = WORDS[rng.below(WORDS.len())];
            if w != word {
                break w;
            }
        };
        let n = loop {
            let n = number(rng, digits);
            if n != key {
                break n;
            }
        };
        return format!("One of the special magic numbers for {decoy} is: {n}. ");
    }
    format!(
        "{} {} {} {}. ",
        SUBJECTS[rng.below(SUBJECTS.len())],
        VERBS[rng.below(VERBS.len())],
        OBJECTS[rng.below(OBJECTS.len())],
        ENDINGS[rng.below(ENDINGS.len())]
    )
}
