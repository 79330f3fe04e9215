//! Latte Transformer backbone: the four spatio-temporal variants, both
//! conditioning schemes and checkpoint adaptation from an image model.

mod adapt;
mod config;
mod init;
mod model;

pub use adapt::adapt_image_checkpoint;
pub use config::{BlockKind, CondMode, LatteSize, ModelConfig, Variant, LN_EPS};
pub use init::{alloc_block, init_params, randomize};
pub use model::{denoiser_forward, AttnRecord, AttnRole, Denoiser};
