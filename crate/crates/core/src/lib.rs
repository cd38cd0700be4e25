//! Cross-graph modal contrastive learning for two-modality patient
//! classification.
//!
//! Each modality (image-derived features and clinical meta-features) gets
//! its own K-nearest-neighbour patient graph and graph encoder. The two
//! encoder outputs are gated, projected into a shared sigmoid space, and
//! trained jointly with two cross-entropy heads, a mask-driven contrastive
//! objective over the patient similarity matrix, and a diagonal regulariser.
//!
//! The crate is layered bottom-up:
//!
//! - [`diffcore`]: dense `f64` tensors, a reverse-mode tape, optimizers and
//!   a finite-difference gradient checker.
//! - [`graphs`]: KNN graph construction, self-loops, GCN normalisation.
//! - [`encoders`]: affine feature encoder, GAT and GCN layers, gating MLP.
//! - [`fusion`]: concatenation, gating, branch projection, shared space,
//!   similarity matrix, KL alignment.
//! - [`losses`]: contrastive masks and scores, cross-entropy heads,
//!   diagonal loss, the combined objective.
//! - [`data`]: cohort ingestion, synthetic cohorts, stratified splits.
//! - [`trainkit`]: configuration, the model, training, metrics, ablations
//!   and file exports.

pub mod data;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod graphs;
pub mod losses;
pub mod trainkit;

pub use error::{Error, Result};
