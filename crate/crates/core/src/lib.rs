//! Ordered super-feature sets for image retrieval.
//!
//! A convolutional encoder produces local features per scale; an iterative
//! attention module refines learned templates against them into an ordered
//! set of super-features. Training combines a contrastive loss on matched
//! super-features with an attention decorrelation loss, and retrieval uses a
//! binary aggregated selective match kernel over an inverted file.

pub mod asmk;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod lit;
pub mod loss;
pub mod matching;
pub mod model;
pub mod objective;
pub mod params;
pub mod pipeline;
pub mod retrieval;
pub mod trainer;
pub mod whitening;

pub use asmk::{AsmkIndex, Codebook, KernelParams};
pub use config::RunConfig;
pub use dataset::{Corpus, DatasetConfig, SyntheticDataset};
pub use encoder::{ConvEncoder, EncoderConfig, ImageTensor, LocalFeatureSet};
pub use error::{Error, Result};
pub use lit::{AttentionMatrix, LitConfig, SuperFeatureSet, TemplateBank, UpdateRule};
pub use loss::{LossBreakdown, LossConfig, LossToggles};
pub use matching::{MatchConstraints, MatchSet, RatioDirection};
pub use model::Model;
pub use retrieval::AsmkConfig;
pub use trainer::{TrainConfig, TrainSetup};
pub use whitening::WhiteningTransform;
