//! Label-guided text classification.
//!
//! Documents are embedded with (optionally pretrained) word vectors,
//! contextualised by a bidirectional LSTM, and then read once per label:
//! every label owns a small matrix of prototype vectors, each token is scored
//! by its best cosine match against those prototypes, and the softmax of the
//! scores pools the contextual rows into a label-wise vector. The label-wise
//! vectors are concatenated and classified by a two-layer MLP.
//!
//! All backward passes are written by hand; [`training::gradient_check`]
//! verifies them against central differences.

pub mod classifier;
pub mod contextual;
pub mod datapipe;
pub mod embedding;
pub mod error;
pub mod label_attention;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use model::{ContextualSource, Example, Input, Model, ModelConfig};
pub use training::HyperParams;
