//! Object-centric video anomaly detection and anticipation by
//! forward-backward frame prediction with scene-conditioned VAEs.
//!
//! The pipeline is object-centric: a tracker (external) provides per-frame
//! bounding boxes, and the model operates on square crops around each track.
//! A forward U-Net predicts several future crops in one shot; a backward
//! U-Net re-predicts an already observed crop from (predicted) future crops
//! plus recent observed ones. Prediction error on the observed frame stands
//! in for the error of the unobservable future, which is what makes
//! anticipation possible. Conditional VAEs at the two deepest U-Net levels
//! condition features on a frozen scene encoding so that events normal in
//! one scene can still score as anomalous in another.
//!
//! Crate layout:
//! - [`corpus`]: on-disk dataset format, clip windows, object crops
//! - [`labels`]: anticipation label algebra and score/label alignment
//! - [`nn`]: minimal f64 tape autograd (conv / linear / vae ops) and Adam
//! - [`model`]: the forward/backward predictors and the scene encoder
//! - [`losses`]: prediction + KL objectives
//! - [`scoring`]: per-frame anomaly scores (detection and anticipation)
//! - [`eval`]: concatenated frame-level ROC/AUC, reports, plots
//! - [`synthgen`]: deterministic synthetic benchmark generator
//! - [`pipeline`]: config, training loop, checkpoints, CLI entry points

pub mod corpus;
pub mod eval;
pub mod fsaudit;
pub mod hash;
pub mod labels;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod raster;
pub mod rng;
pub mod scoring;
pub mod synthgen;

mod error;

pub use error::{Error, Result};
