//! Desk-scale laboratory for studying format specialization in fine-tuning.
//!
//! A miniature encoder-decoder transformer is trained from scratch on
//! synthetic seq2seq tasks, then adapted with several strategies — standard
//! fine-tuning, prompt tuning, the two-stage prompt-then-model procedure,
//! and ablations — while diagnostics track how the output format of the
//! fine-tuned task takes over off-task behavior.

pub mod adapt;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adapt::{init_lora, init_prompt, Attach, LoraAdapter, LoraTarget, PromptInit, SoftPrompt};
pub use error::{Error, Result};
pub use model::forward::{forward_loss, forward_loss_multi, Batch, Trainable};
pub use model::{init_params, params_hash, ModelConfig, ModelParams, ParamGroup};
pub use optim::{AdamHyper, OptimizerState};
pub use rng::Rng;
pub use tape::{NodeId, Tape};
pub use tensor::{Precision, Tensor};
