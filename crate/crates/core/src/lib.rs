//! Three-modal survival prediction from prototype tokens.
//!
//! Pathology-report segment embeddings, whole-slide patch embeddings and
//! gene-expression profiles are each compressed into a fixed set of
//! prototype tokens, fused with block attention and scored by a risk head
//! trained on the Cox partial likelihood.
//!
//! Module map:
//! - [`numerics`], [`tape`], [`params`]: matrices, differentiable kernels
//!   and reverse-mode differentiation.
//! - [`text_proto`], [`histo_proto`], [`pathway_proto`]: per-modality
//!   prototype construction.
//! - [`fusion`]: block attention over the concatenated token sequence.
//! - [`model`], [`survival`], [`checkpoint`]: the full network, Cox loss,
//!   training loop and checkpoint container.
//! - [`eval`]: concordance, Kaplan-Meier, log-rank, attention summaries.
//! - [`data`]: file formats, synthetic cohorts and fold splitting.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod histo_proto;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pathway_proto;
pub mod rng;
pub mod survival;
pub mod tape;
pub mod text_proto;

pub use error::{Error, Result};
pub use fusion::{FusionMode, Modality, ModalitySet};
pub use model::{Model, ModelParams, ModelSpec, Sample};
pub use numerics::{BinaryMask, Matrix};
pub use survival::{SurvivalRecord, TrainConfig};
