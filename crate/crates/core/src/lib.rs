//! Probes for information loss across the connector of a vision-language model.
//!
//! The toolkit compares the vision encoder's patch embeddings (pre-projection)
//! with the connector's outputs (post-projection) in four ways:
//!
//! * [`geometry`]: exact k-NN overlap between the two spaces and zero-shot
//!   retrieval Recall@k.
//! * [`recon`]: trainable reconstruction models mapping post-projection
//!   sequences back to the pre-projection patch grid, with per-patch loss maps.
//! * [`procrustes`]: PCA followed by an orthogonal Procrustes fit as a linear
//!   alignment baseline.
//! * [`analysis`]: Spearman correlation of per-sample losses with external
//!   task scores, quartile comparisons and mask-conditioned patch splits.
//!
//! Embeddings travel in the `EMBD` container defined in [`embstore`].

pub mod analysis;
pub mod embstore;
pub mod error;
pub mod geometry;
pub mod heatmap;
pub mod linalg;
pub mod pnm;
pub mod procrustes;
pub mod recon;
pub mod report;
pub mod synth;

pub use error::{Error, Result};

/// Version string embedded in every emitted report.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
