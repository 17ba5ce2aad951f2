//! Neural core: autodiff tape, tokenizer, encoder, optimizer and checkpoints.

pub mod attention;
pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tokenizer;

pub use attention::{attention_line_summary, AttentionSummary};
pub use model::{ModelConfig, ModelError, ModelParams, Posterior};
pub use optim::{adam_step, AdamState, LrSchedule};
pub use tape::{Tape, Var};
pub use tokenizer::{detokenize, tokenize, TokenSeq};
