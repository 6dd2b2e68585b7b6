//! Temporal segmentation of microvascular 4D two-photon movies.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`volume`] — 4D movie data model, the V4D container, normalization and
//!   the temporal/axial pre- and post-processing steps.
//! * [`autodiff`] — a dense-tensor reverse-mode differentiation engine with
//!   exactly the operator set the model and losses need.
//! * [`morphology`] — the nine-element structuring set and the differentiable
//!   morphological layers (MaskPool, SI, IS, erosion, dilation, open), plus
//!   exact classical binary oracles.
//! * [`skeleton`] — the differentiable iterative 3D skeletonization layer and
//!   its classical binary counterpart.
//! * [`losses`] — the active-contour compound loss and the skeleton-anchored
//!   temporal loss.
//! * [`model`] — the 3D encoder/decoder segmentation network at configurable
//!   desk scale.
//! * [`pipeline`] — two-stage training (static anchor, then per-frame
//!   temporal), movie inference, checkpoints.
//! * [`phantom`] — synthetic photon-sparse vessel movies with ground truth.
//! * [`analysis`] — per-depth traces, Pearson correlation structure,
//!   zero-phase low-pass filtering, vasoactivity onset detection, and
//!   diameter measurements.

pub mod analysis;
pub mod autodiff;
pub mod losses;
pub mod model;
pub mod morphology;
pub mod phantom;
pub mod pipeline;
pub mod plots;
pub mod skeleton;
pub mod volume;

/// Guard added to denominators and log arguments throughout the crate.
pub const EPS: f64 = 1e-8;
