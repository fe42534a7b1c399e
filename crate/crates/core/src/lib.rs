//! Cropland mapping from per-pixel geospatial embeddings.
//!
//! The crate stores embedding rasters in a compact checksummed tile format,
//! generates synthetic scenes with known land cover, clusters embeddings for
//! a sanity check, trains a random forest on labeled points, turns its crop
//! probabilities into a binary map and scores that map against held-out
//! points.

pub mod assess;
pub mod cluster;
pub mod config;
pub mod estimate;
pub mod forest;
pub mod geometry;
pub mod mapping;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tilestore;

pub use assess::{build_confusion, compare_maps, compute_metrics, ConfusionMatrix, MetricsReport};
pub use cluster::{fit_kmeans, KMeansModel};
pub use config::Config;
pub use forest::{oob_score, train_forest, ForestModel, Hyperparams, TrainingSet};
pub use geometry::{GeoTransform, Roi};
pub use mapping::{classify_map, render, threshold_map, Palette};
pub use synth::{generate_scene, sample_labels, LabeledPoint, SceneSpec, Subset};
pub use tilestore::{bytes_per_pixel, ClassMap, Dtype, EmbeddingTile, QuantizationParams};
