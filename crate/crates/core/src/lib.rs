//! Groupwise direct preference optimization for a rectified-flow trajectory
//! generator.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense matrices, the conditional MLP, low-rank adapters,
//!   reverse-mode gradients and finite-difference checking.
//! - [`physics`]: exact simulators for a handful of action categories, pool
//!   corruption operators and the closed-form physics scorer.
//! - [`pipeline`]: richness filtering, category histograms, difficulty
//!   estimation and difficulty-weighted budget sampling.
//! - [`flow`]: the rectified-flow model (interpolation, flow-matching loss,
//!   pretraining, Euler sampling, checkpoints).
//! - [`gdpo`]: preference groups, physics-guided reward weights, the groupwise
//!   objective with the adapter-switch reference, the training loop and the
//!   bound-chain verifiers.
//! - [`io`]: the line-delimited dataset format and atomic file writes.

pub mod error;
pub mod flow;
pub mod gdpo;
pub mod io;
pub mod numerics;
pub mod physics;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
pub use flow::{FlowModel, FlowDims, Normalizer};
pub use gdpo::{DpoHyper, PgrWeights, PreferenceGroup, RewardSchedule};
pub use numerics::{DenseMatrix, LoraAdapter, MlpParams};
pub use physics::{
    ActionCategory, CategoryKind, Condition, PhysicsScore, PoolRecord, Trajectory, WorldConfig,
};
