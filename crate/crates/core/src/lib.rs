//! Text-guided multi-source sound localization.
//!
//! The pipeline takes frozen patch tokens from audio, visual and text
//! encoders, detects which vocabulary classes are present, conditions each
//! modality on every detected class, aligns the conditioned streams and
//! produces one localization heatmap per sounding source.

pub mod avc_block;
pub mod conditioner;
pub mod encoder_hub;
pub mod error;
pub mod eval;
pub mod instance_detector;
pub mod io;
pub mod localization;
pub mod metrics_eval;
pub mod mixture_data;
pub mod model;
pub mod ops;
pub mod scalar;
pub mod seeding;
pub mod text_guidance;
pub mod train;

pub use error::{Result, TvslError};
pub use scalar::Scalar;

/// Single-precision model, the default for command-line runs.
pub type TvslModel32 = model::TvslModel<f32>;
/// Double-precision model, used for gradient checks and reference runs.
pub type TvslModel64 = model::TvslModel<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Checkpoint32 = train::Checkpoint<f32>;
pub type Checkpoint64 = train::Checkpoint<f64>;
