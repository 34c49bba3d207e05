//! Object-centric image similarity by foreground feature averaging (FFA), and
//! a harness that scores any similarity metric by group retrieval, K-means
//! clustering, oddity detection and re-identification late fusion.
//!
//! The numeric kernels ([`metrics`], [`ssim`], [`eval`], [`reid`]) are pure
//! functions. Deep features and foreground mattes come from exported ONNX
//! graphs through [`inference`], optionally memoized by [`cache`].

pub mod cache;
pub mod catalog;
pub mod config;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod inference;
pub mod matrix;
pub mod metrics;
pub mod pipeline;
pub mod reid;
pub mod runner;
pub mod ssim;
#[cfg(feature = "testkit")]
pub mod testkit;

pub use catalog::{load_catalog, load_manifest, Catalog, Condition, ImageRef, Lighting};
pub use error::{Error, Result};
pub use eval::{EvalGroup, Protocol};
pub use imaging::{preprocess, ImageTensor, INPUT_SIZE};
pub use inference::{BackboneSpec, ForegroundMask, OnnxBackbone, OnnxSegmenter, PatchFeatureGrid};
pub use matrix::{load_distance_matrix, DistanceMatrix, Matrix};
pub use metrics::{cosine, Embedding, EmbeddingSource, PatchMask, SimilarityMatrix};

/// Toolkit version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
