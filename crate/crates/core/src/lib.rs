//! Weakly-supervised stress estimation from wearable time series.
//!
//! The pipeline turns multimodal wearable streams (ECG, physical activity,
//! sleep) into axis-free visual instances, embeds each instance with a
//! gated dual-encoder, groups embeddings into patient-horizon bags under a
//! leakage-free temporal alignment, and regresses perceived-stress scores
//! with attention-based multi-instance learning. Evaluation is
//! leave-one-subject-out with pooled and per-fold metrics, plus modality
//! ablations. A seeded synthetic cohort with a planted stress signal makes
//! the whole path testable end to end.

pub mod bags;
pub mod cohortsim;
pub mod config;
pub mod ecg;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod mil;
pub mod pipeline;
pub mod raster;
pub mod seed;
pub mod weekly;

pub use error::{Error, Result};
