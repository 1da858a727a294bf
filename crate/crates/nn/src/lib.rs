//! Neural components of the captioning stack: a small reverse-mode autodiff
//! tape over `f64` matrices, transformer captioners (single-stream and
//! bi-modal), their training loop, and anchor-based proposal heads.

pub mod error;
pub mod layers;
pub mod params;
pub mod proposals;
pub mod tape;
pub mod train;
pub mod transformer;
pub mod vocab;

pub use error::NnError;
pub use params::{Adam, AdamConfig, Grads, ParamId, ParamSet};
pub use tape::{Graph, Var};
pub use train::{greedy_decode, train_captioner, CaptionSample, TrainConfig, TrainReport};
pub use transformer::{CaptionModel, Encoded, ModelInput, ModelKind, TransformerConfig};
pub use vocab::Vocabulary;
