//! Hierarchy-aware classification in a frozen embedding space.
//!
//! * [`taxonomy`]: multi-level label trees with parent, sibling and path queries.
//! * [`embedspace`]: cosine logits against class embeddings and a low-rank
//!   adapter on the image-feature path.
//! * [`losses`]: cross-entropy, sibling-smoothed cross-entropy, tree-path KL
//!   divergence and their weighted combination, with analytic gradients.
//! * [`metrics`]: per-level accuracy, wAP, TICE and full-path accuracy.
//! * [`trainer`]: synthetic data, AdamW/SGD training, λ grid search and ablations.

pub mod data;
pub mod embedspace;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod taxonomy;
pub mod trainer;

pub use data::{Dataset, Samples};
pub use embedspace::{AdapterGrad, AdapterState, ClassEmbeddings, EmbeddingMatrix, HierLogits, Matrix};
pub use error::{Error, Result};
pub use losses::{Epsilon, LossConfig, LossWeights, SmoothingTable, TpKlMode};
pub use metrics::{EvalReport, PredictionSet};
pub use taxonomy::{LabelPath, Taxonomy};
pub use trainer::{RunRecord, SynthSpec, TrainConfig};
