//! Explainable surgical skill scoring from tracked hand and tool motion.
//!
//! The pipeline turns per-frame detections into a 150-channel feature matrix and 19 global
//! motion statistics, scores a session with a dilated temporal convolution network,
//! attention pooling and a fusion MLP, and explains each score through the attention map
//! and Shapley attributions over the global statistics.

#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod error;
pub mod explain;
pub mod frame;
pub mod globals;
pub mod model;
pub mod params;
pub mod session;
pub mod synth;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{prepare_session, PreparedSession, Prediction, SkillModel};
pub use session::{load_sessions, Dataset, LoadOptions, SessionRecording};
