//! Sequence-aware variational document model (SAVAE) and its bag-of-words
//! ablation (NVDM): corpus preparation, training with hand-derived
//! gradients, inference of document representations, and evaluation by
//! retrieval, clustering, word neighborhoods and linear probing.

pub mod checkpoint;
pub mod corpus;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod training;

pub use corpus::{CorpusSplit, Document, Vocabulary};
pub use model::{ElboEstimate, ModelConfig, ModelMode, ModelParams, ParamGrads};
pub use numerics::{GaussianPosterior, Matrix, Rng};
