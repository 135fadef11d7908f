//! Training and evaluation toolkit for online (causal) per-frame sequence
//! classifiers that learn from offline teachers which are allowed to look at
//! future frames.
//!
//! The pieces, bottom up:
//!
//! * [`tensor`], [`ops`], [`graph`], [`adam`], [`gradcheck`] — dense f64
//!   kernels with hand-written backward passes, a small eager graph that
//!   composes them, the optimizer, and a finite-difference checker.
//! * [`receptive`] — interval arithmetic for stacked offset convolutions.
//! * [`model`], [`checkpoint`] — the two-branch causal student, the offset
//!   teacher family, parameter initialization, and the binary checkpoint
//!   format.
//! * [`loss`] — classification, softened-logit matching, auxiliary feature
//!   matching with receptive-field alignment, and the joint objective.
//! * [`train`] — single-model training, joint distillation stages, and
//!   multi-stage distillation paths.
//! * [`metrics`] — per-frame AP / calibrated AP / portion-wise evaluation.
//! * [`synth`], [`oracle`] — seeded synthetic benchmark generator and the
//!   exact windowed Bayes posterior that bounds every model trained on it.
//! * [`stream`] — constant-memory per-frame inference sessions.
//! * [`anticipate`] — the feature-prediction baseline.
//! * [`experiments`] — multi-seed benchmark driver used by the CLI and the
//!   acceptance suite.
//!
//! Everything is deterministic given the seeds it is handed; the `parallel`
//! feature (on by default) fans independent work units out with rayon without
//! changing any produced value.

pub mod adam;
pub mod anticipate;
pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod oracle;
pub mod par;
pub mod receptive;
pub mod seeds;
pub mod stream;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
