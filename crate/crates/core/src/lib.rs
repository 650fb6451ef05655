//! Multi-label recognition toolkit for classroom recordings.
//!
//! The crate covers both sides of a classroom-analysis pipeline:
//!
//! * [`labelspace`] — activity and discourse label catalogs with
//!   pairing/exclusion constraints;
//! * [`corpus`] — annotation/transcript ingestion (canonical line-delimited
//!   records and ELAN EAF), lesson-independent splitting, and synthetic
//!   corpus generation for desk-scale end-to-end runs;
//! * [`windowing`] — temporal clip windows with uniform frame sampling and
//!   context-augmented transcript inputs;
//! * [`losses`] — positive-class weighting plus weighted BCE, focal, and
//!   asymmetric losses with analytic gradients;
//! * [`heads`] — cosine-similarity, attentive-probe, and linear heads over
//!   pluggable frozen encoders, with a shared AdamW training loop;
//! * [`calibration`] — per-label decision thresholds, F1 metrics, reports;
//! * [`promptkit`] — prompt rendering and robust parsing of model responses.

pub mod calibration;
pub mod corpus;
pub mod error;
pub mod heads;
pub mod labelspace;
pub mod losses;
pub mod promptkit;
pub mod windowing;

pub use error::{Error, Result};
pub use labelspace::{LabelDef, LabelSpace, Violation};

/// Toolkit version embedded in persisted artifacts.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
