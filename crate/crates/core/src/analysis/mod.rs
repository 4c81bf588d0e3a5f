//! Evaluations over a trained model: radial distribution of embeddings,
//! subtype × nucleus-class assignment heatmap, and the nucleus-type probe.

pub mod embed;
pub mod heatmap;
pub mod kfold;
pub mod metrics;
pub mod probe;
pub mod radial;
pub mod svg;

pub use embed::{embed_dataset, EmbeddingRecord, Embeddings, ViewTag};
pub use heatmap::{assignment_heatmap, HeatmapTable};
pub use kfold::stratified_kfold;
pub use metrics::{ConfusionMatrix, Metrics};
pub use probe::{probe_train_eval, NucleusDataset, ProbeConfig, ProbeReport};
pub use radial::{nucleus_share_by_quintile, radial_histogram, RadialHistogram};
