//! Next-token training: learning-rate schedule, batch construction,
//! AdamW, the training loop and the pretrain → expand → post-train pipeline.

mod config;
mod data;
mod log;
mod optim;
mod pipeline;
mod schedule;
mod trainer;

pub use config::TrainConfig;
pub use data::{build_batches, load_corpus, parse_corpus, synthetic_corpus, CorpusSource, Example, ExampleSource};
pub use log::{LossLog, LossRecord};
pub use optim::{clip_grad_norm, AdamW};
pub use pipeline::{run_pipeline, Artifacts, Stage};
pub use schedule::cosine_lr;
pub use trainer::{train, train_on_corpus};
