//! Audio-visual gaze and head-pose estimation at desk scale.
//!
//! The crate covers the full weak-supervision pipeline:
//!
//! - [`audio`] — log mel-filterbank speech front-end (pre-emphasis, framing,
//!   triangular mel filters, corpus normalization) plus WAV and feature-file I/O.
//! - [`geometry`] — pose/gaze representations, the cosine gaze loss, the MSE
//!   head-pose loss, angular metrics and frontal subset masks.
//! - [`data`] — dataset manifests, 7-frame chunk selection with the
//!   pose-stability filter, audio alignment and pseudo-label providers.
//! - [`model`] — the cascaded audio-visual network (per-frame visual encoder,
//!   bidirectional temporal encoder, audio encoder, fusion, cascaded heads)
//!   with modality masking and checkpoint I/O.
//! - [`training`] — seeded joint training on pseudo-labels with modality
//!   dropout, gradient clipping and resumable checkpoints.
//! - [`evaluation`] — frozen-backbone linear probing, weighted k-NN, angular
//!   error metrics with frontal subsets, and the ablation grid.
//! - [`synthworld`] — a synthetic audio-visual world with known ground truth,
//!   used as a stand-in teacher and for closed-loop verification.

pub mod audio;
#[cfg(feature = "testutil")]
pub mod testutil;
pub mod seeding;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod synthworld;
pub mod training;

pub use error::{Error, Result};
