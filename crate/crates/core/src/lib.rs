//! Attention-with-intention conversation model.
//!
//! Three recurrent networks cooperate per dialogue turn: an encoder over the
//! user's words, a turn-level intention LSTM carried across turns, and a
//! decoder that attends over the user's words while generating the reply.
//! Everything runs on a small reverse-mode autodiff tape in `f64`.

pub mod autodiff;
pub mod cells;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use autodiff::{NodeId, Tape};
pub use corpus::{Dialogue, EncodedDialogue, TokenId, Vocab};
pub use error::{AwiError, Result};
pub use inference::{DecodeConfig, DecodeMode, Reply, Session};
pub use model::{AwiParams, DialogueState, ModelDims, StateCarry};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainState, Trainer};
