//! Weakly-supervised phrase grounding on precomputed detector outputs.
//!
//! Objects are represented by their label embedding plus learned projections
//! of attribute embeddings and detector features; phrases by attention-pooled
//! word embeddings. A contrastive objective over image-caption pairs trains
//! the projections and word embeddings without phrase-box supervision.

pub mod bbox;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod training;

pub use bbox::BBox;
pub use corpus::{
    load_dataset, tokenize, CaptionRecord, Dataset, EmbeddingTable, FeatureStore, ImageRecord, ObjectRecord,
    PhraseRecord,
};
pub use error::{Error, Result};
pub use eval::{AreaConvention, EvalReport, MethodScore};
pub use inference::{Method, Prediction};
pub use model::{FeatureFlags, ModelParams, Pooling};
pub use numerics::{Mat, Rng};
pub use synth::SynthConfig;
pub use training::{Checkpoint, TrainConfig};
