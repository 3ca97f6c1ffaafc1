//! Determined multi-label learning.
//!
//! Each training instance carries a single determined label: a class drawn
//! uniformly from the label space together with a yes/no answer. This crate
//! provides determined-label generation, the risk-consistent estimator built
//! on the closed-form expected BCE over label sets, similarity-based prompt
//! prototypes, a cosine-prototype model with analytic gradients, an AdamW
//! training loop, ranking metrics and brute-force oracles for the identities
//! the estimator relies on.

pub mod dataset;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod prompt;
pub mod risk;
pub mod rng;
pub mod trainer;

pub use dataset::{
    compute_stats, generate_determined, Dataset, DatasetStats, Determination, DeterminedDataset,
    DeterminedInstance, FullDataset, LabelVocabulary, MultiLabelInstance,
};
pub use error::{Error, Result};
pub use metrics::{MetricsReport, ScoreMatrix};
pub use model::{Gradients, ModelParams};
pub use objective::{Example, LossMode, Objective};
pub use prompt::{
    EmbeddingProvider, FileProvider, PromptState, PromptTemplate, SimilarLabelIndex,
    SyntheticProvider,
};
pub use risk::{RiskConfig, SoftLabels, Weighting};
pub use trainer::{train, TrainConfig, TrainHistory, TrainOutput};
