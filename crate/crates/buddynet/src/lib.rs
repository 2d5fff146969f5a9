//! Buddy-network metric learning at desk scale.
//!
//! Two vision-transformer blocks train jointly: a *master* fed global and
//! local crops and an *assistant* fed global crops. Each learns under its own
//! angular-margin classification head, and together through a KL-divergence
//! loss between their embedding distributions, with the master as the
//! reference. After every epoch the master absorbs the assistant by a convex
//! weight transfer θ_m ← λ·θ_m + (1−λ)·θ_a. Retrieval embeds the original
//! image plus all crops through the trained master, concatenates, and
//! searches by cosine similarity, optionally with average query expansion,
//! heat-kernel re-ranking, or precomputed offline diffusion.
//!
//! Everything is f64 on a reverse-mode tape with a finite-difference oracle
//! ([`grad_check`]), seeded end to end, with bit-exact file formats.
//!
//! Start with the runnable examples (`cargo run --release --example
//! train_desk`) or the `buddynet` binary for the file-based pipeline.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod crop;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod loss;
pub mod pipeline;
pub mod postproc;
pub mod retrieval;
pub mod rng;
pub mod train;
pub mod util;

pub use autodiff::{grad_check, Graph, Tensor, TensorId};
pub use backbone::{BackboneConfig, BlockParams};
pub use error::{Error, Result};
pub use retrieval::{RankedList, RetrievalIndex};
pub use train::TrainingConfig;
