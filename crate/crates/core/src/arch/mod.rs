//! GLA and Mamba2 language models: configuration, parameter schema,
//! recurrent and chunkwise forward passes, and hand-written backward passes.

mod block;
mod config;
mod ffn;
mod gla;
mod init;
mod model;
mod presets;
mod scan;
mod ssm;

pub use block::{BlockGrads, ParamMap, Scan, NORM_EPS};
pub use config::{
    block_prefix, mixer_block, param_name, DeltaActivation, Family, LayerDims, LayerOverride,
    ModelConfig,
};
pub use ffn::FfnBlock;
pub use gla::{GlaBlock, ALPHA_FLOOR, ALPHA_TEMPERATURE};
pub use init::{init_tensor, A_INIT_RANGE, DT_INIT_RANGE, INIT_STD};
pub use model::{argmax, validate_schema, LossGrads, Model};
pub use presets::{preset, PRESETS};
pub use scan::{gla_head_step, zero_heads, RecurrentState, CHECKPOINT_EVERY};
pub use ssm::Mamba2Block;
