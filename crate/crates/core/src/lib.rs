//! Tolerance-based calibration toolkit for continuous-score measurements.
//!
//! A measurement pipeline that scores items on a bounded 0-100 scale is
//! *tolerance-correct* on an item when its prediction lands within ±epsilon
//! points of the reference value. This crate treats that binary outcome as
//! the event a confidence score should predict, and provides:
//!
//! - [`metrics`]: reliability binning, tolerance-ECE, Brier score, and a
//!   Spearman measurement-health check.
//! - [`proxies`]: confidence scores derived from raw model evidence
//!   (resampling windows, token log-probabilities, self-consistency logits).
//! - [`calibrators`]: post-hoc confidence remappers (Platt, beta, isotonic,
//!   temperature) with a resolution-collapse diagnostic.
//! - [`distill`]: soft-label construction and a small linear student trained
//!   against teacher confidences with a KL objective.
//! - [`regress`]: daily stance aggregation, confidence filtering, and OLS,
//!   plus a synthetic demonstration of filter-induced attenuation.
//! - [`synth`]: seeded generators for datasets with known miscalibration.
//! - [`elicit`]: a blocking HTTP client for scoring texts through a
//!   chat-completions endpoint.
//!
//! Datasets are plain collections of [`dataset::MeasurementRecord`] values
//! and move between modules by value; nothing here is tied to a particular
//! storage layer beyond the JSONL/CSV loaders in [`dataset`].

pub mod calibrators;
pub mod dataset;
pub mod distill;
pub mod elicit;
pub mod error;
pub mod metrics;
pub mod proxies;
pub mod regress;
pub mod synth;

#[doc(hidden)]
pub mod testutil;

pub use dataset::{Dataset, MeasurementRecord, ToleranceConfig};
pub use error::{Error, Result};
