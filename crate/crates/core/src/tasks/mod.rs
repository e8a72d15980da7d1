//! Synthetic recall benchmarks: multi-query associative recall, passkey
//! retrieval with repeated or distractor filler, and their evaluation.

mod eval;
mod mqar;
mod passkey;
pub mod tokenizer;

pub use eval::{evaluate, EvalReport, EvalRow, Metric, Predictor};
pub use mqar::{gen_mqar, gen_mqar_queries, MqarSource};
pub use passkey::{gen_passkey, FillerStyle};

use serde::{Deserialize, Serialize};

/// How prompt and answer combine into one teacher-forced sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// The answer follows the whole prompt.
    Suffix,
    /// The first `context` prompt tokens are followed by query/answer
    /// pairs: `q1 a1 q2 a2 …`.
    Interleaved { context: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Length bucket the sample was generated for.
    pub ctx_len: usize,
    pub n_pairs: Option<usize>,
    /// Filler slot holding the needle, out of `slots`.
    pub key_slot: Option<usize>,
    pub slots: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    pub layout: Layout,
    pub meta: SampleMeta,
}

impl TaskSample {
    /// The full sequence a model sees under teacher forcing, and a mask
    /// marking the answer tokens.
    pub fn teacher_forced(&self) -> (Vec<u32>, Vec<bool>) {
        match self.layout {
            Layout::Suffix => {
                let mut t = self.prompt.clone();
                t.extend_from_slice(&self.answer);
                let mut m = vec![false; self.prompt.len()];
                m.resize(t.len(), true);
                (t, m)
            }
            Layout::Interleaved { context } => {
                let mut t = self.prompt[..context].to_vec();
                let mut m = vec![false; context];
                for (q, a) in self.prompt[context..].iter().zip(&self.answer) {
                    t.extend_from_slice(&[*q, *a]);
                    m.extend_from_slice(&[false, true]);
                }
                (t, m)
            }
        }
    }

    /// One JSON object per line with the decoded text where it is
    /// character-level.
    pub fn to_json_line(&self) -> String {
        let mut v = serde_json::to_value(self).expect("sample serializes");
        if self.layout == Layout::Suffix {
            v["prompt_text"] = tokenizer::decode(&self.prompt).into();
            v["answer_text"] = tokenizer::decode(&self.answer).into();
        }
        serde_json::to_string(&v).expect("value serializes")
    }
}
