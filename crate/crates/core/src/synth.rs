//! Seeded synthetic-data generators with known miscalibration.
//!
//! Each generator draws confidences uniformly, then makes the record
//! tolerance-correct with a probability given by a miscalibration map g:
//! correct records get y_pred inside [y_true−ε, y_true+ε], incorrect ones
//! strictly outside (clamped to the 0-100 scale). Because g is known
//! exactly, generated datasets act as ground-truth oracles for the metric
//! and calibrator modules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, MeasurementRecord};
use crate::error::{Error, Result};

/// Confidence support is kept off the {0,1} endpoints so logit transforms
/// stay finite in downstream calibrator tests.
pub const CONFIDENCE_LO: f64 = 0.01;
pub const CONFIDENCE_HI: f64 = 0.99;

/// Maps confidence c to the true probability of tolerance-correctness g(c).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MiscalibrationProfile {
    /// g(c) = c: perfectly calibrated.
    Identity,
    /// g(c) = c^gamma with gamma > 1: accuracy below stated confidence.
    OverconfidentPower { gamma: f64 },
    /// g(c) = c^gamma with gamma in (0,1): accuracy above stated confidence.
    UnderconfidentPower { gamma: f64 },
    /// g(c) = p: correctness independent of confidence.
    BaseRate { p: f64 },
}

impl MiscalibrationProfile {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MiscalibrationProfile::Identity => Ok(()),
            MiscalibrationProfile::OverconfidentPower { gamma } => {
                if gamma.is_finite() && gamma > 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidProfile(format!(
                        "overconfident_power requires gamma > 1, got {gamma}"
                    )))
                }
            }
            MiscalibrationProfile::UnderconfidentPower { gamma } => {
                if gamma.is_finite() && gamma > 0.0 && gamma < 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidProfile(format!(
                        "underconfident_power requires gamma in (0,1), got {gamma}"
                    )))
                }
            }
            MiscalibrationProfile::BaseRate { p } => {
                if p.is_finite() && (0.0..=1.0).contains(&p) {
                    Ok(())
                } else {
                    Err(Error::InvalidProfile(format!(
                        "base_rate requires p in [0,1], got {p}"
                    )))
                }
            }
        }
    }

    /// g(c), the probability that a record with confidence c is correct.
    pub fn correctness_probability(&self, confidence: f64) -> f64 {
        match *self {
            MiscalibrationProfile::Identity => confidence,
            MiscalibrationProfile::OverconfidentPower { gamma }
            | MiscalibrationProfile::UnderconfidentPower { gamma } => confidence.powf(gamma),
            MiscalibrationProfile::BaseRate { p } => p,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MiscalibrationProfile::Identity => "identity",
            MiscalibrationProfile::OverconfidentPower { .. } => "overconfident_power",
            MiscalibrationProfile::UnderconfidentPower { .. } => "underconfident_power",
            MiscalibrationProfile::BaseRate { .. } => "base_rate",
        }
    }
}

/// Generates a dataset under a named miscalibration profile.
pub fn generate(
    profile: &MiscalibrationProfile,
    n: usize,
    epsilon: f64,
    seed: u64,
) -> Result<Dataset> {
    profile.validate()?;
    generate_with(profile.name(), |c| profile.correctness_probability(c), n, epsilon, seed)
}

/// Generates a dataset with an arbitrary correctness map g(confidence).
///
/// Draws conf ~ U(0.01, 0.99) and y_true ~ U(0, 100); with probability
/// g(conf) places y_pred inside the tolerance interval, otherwise strictly
/// outside it. Deterministic for a fixed seed.
pub fn generate_with(
    name: &str,
    g: impl Fn(f64) -> f64,
    n: usize,
    epsilon: f64,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    if !epsilon.is_finite() || epsilon <= 0.0 || epsilon > 100.0 {
        return Err(Error::InvalidInput(format!(
            "epsilon must be in (0, 100], got {epsilon}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let confidence = rng.random_range(CONFIDENCE_LO..CONFIDENCE_HI);
        let y_true = rng.random_range(0.0..100.0);
        let p = g(confidence);
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidProfile(format!(
                "correctness map returned {p} at confidence {confidence}; must lie in [0,1]"
            )));
        }
        let correct = rng.random_bool(p);
        let y_pred = if correct {
            let lo = (y_true - epsilon).max(0.0);
            let hi = (y_true + epsilon).min(100.0);
            rng.random_range(lo..=hi)
        } else {
            draw_outside_tolerance(&mut rng, y_true, epsilon)?
        };
        records.push(MeasurementRecord::new(
            format!("{name}-{i:06}"),
            y_true,
            y_pred,
            confidence,
        ));
    }
    Dataset::new(name, records)
}

/// Uniform draw from [0, y_true−ε) ∪ (y_true+ε, 100], i.e. the admissible
/// out-of-tolerance region. Rejection-guarded so a boundary-rounding draw
/// can never slip inside the tolerance interval.
fn draw_outside_tolerance(rng: &mut ChaCha8Rng, y_true: f64, epsilon: f64) -> Result<f64> {
    let left_width = (y_true - epsilon).max(0.0);
    let right_width = (100.0 - y_true - epsilon).max(0.0);
    let total = left_width + right_width;
    if total <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "epsilon {epsilon} leaves no out-of-tolerance region around y_true {y_true}"
        )));
    }
    for _ in 0..64 {
        let u = rng.random_range(0.0..total);
        let candidate = if u < left_width {
            u
        } else {
            y_true + epsilon + (u - left_width)
        };
        if (candidate - y_true).abs() > epsilon {
            return Ok(candidate);
        }
    }
    // Vanishingly unlikely fallback: the far scale end is always outside
    // tolerance whenever the corresponding side has positive width.
    Ok(if left_width >= right_width { 0.0 } else { 100.0 })
}
