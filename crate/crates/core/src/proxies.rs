//! Confidence proxies built from raw model evidence.
//!
//! Beyond directly elicited ("verbal") confidence, three proxies derive a
//! confidence score from the evidence fields a record may carry:
//!
//! - resampling: density of repeated scores inside a 2ε window,
//! - logit geometric mean: mean per-token generation probability,
//! - P-true: softmax of true-vs-false self-judgment logits.

use crate::dataset::{Dataset, ToleranceConfig};
use crate::error::{Error, Result};

/// Which evidence source produced a confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxyMethod {
    /// Self-reported confidence; `attach_proxy` is the identity.
    Verbal,
    /// Max-density window over resampled scores.
    Resampling,
    /// Geometric mean of per-token generation probabilities.
    LogitGeom,
    /// Softmax-normalized probability of the "True" judgment token.
    PTrue,
}

impl ProxyMethod {
    pub fn name(self) -> &'static str {
        match self {
            ProxyMethod::Verbal => "verbal",
            ProxyMethod::Resampling => "resampling",
            ProxyMethod::LogitGeom => "logit_geom",
            ProxyMethod::PTrue => "p_true",
        }
    }
}

/// A proxy's score estimate together with its confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyOutput {
    pub measurement: f64,
    pub confidence: f64,
    pub method: ProxyMethod,
}

/// Finds the densest tolerance window over resampled scores.
///
/// Candidate windows are [s, s+2ε] anchored at each sorted sample value; the
/// window holding the most samples wins, ties broken toward the smallest
/// anchor. Confidence is the in-window fraction and the measurement is the
/// mean of the in-window samples.
pub fn resampling_confidence(samples: &[f64], epsilon: f64) -> Result<ProxyOutput> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("resampling requires at least one sample".into()));
    }
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("samples contain a non-finite value".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);

    let width = 2.0 * epsilon;
    let mut best_start = 0;
    let mut best_end = 0; // exclusive
    for start in 0..sorted.len() {
        let hi = sorted[start] + width;
        // Samples are sorted, so the window [s, s+2ε] is a contiguous run.
        let end = sorted.partition_point(|&v| v <= hi);
        if end - start > best_end - best_start {
            best_start = start;
            best_end = end;
        }
    }
    let in_window = &sorted[best_start..best_end];
    let confidence = in_window.len() as f64 / sorted.len() as f64;
    let measurement = in_window.iter().sum::<f64>() / in_window.len() as f64;
    Ok(ProxyOutput {
        measurement,
        confidence,
        method: ProxyMethod::Resampling,
    })
}

/// exp(mean of ln p), computed in log space to avoid underflow on long
/// token sequences.
pub fn logit_geometric_mean(token_probs: &[f64]) -> Result<f64> {
    if token_probs.is_empty() {
        return Err(Error::EmptyInput(
            "geometric mean requires at least one token probability".into(),
        ));
    }
    let mut log_sum = 0.0;
    for &p in token_probs {
        if !p.is_finite() || p <= 0.0 || p > 1.0 {
            return Err(Error::InvalidDistribution(format!(
                "token probability {p} outside (0, 1]"
            )));
        }
        log_sum += p.ln();
    }
    Ok((log_sum / token_probs.len() as f64).exp())
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Probability assigned to "True" by a softmax over the two judgment
/// logits: 1 / (1 + exp(logit_false − logit_true)). Stable for large
/// magnitude differences.
pub fn p_true_confidence(logit_true: f64, logit_false: f64) -> Result<f64> {
    if !logit_true.is_finite() || !logit_false.is_finite() {
        return Err(Error::InvalidInput(format!(
            "logits must be finite, got true={logit_true}, false={logit_false}"
        )));
    }
    Ok(stable_sigmoid(logit_true - logit_false))
}

fn missing_evidence(kind: &str, ids: Vec<&str>) -> Error {
    const SHOWN: usize = 8;
    let mut sample = ids.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        sample.push_str(", ...");
    }
    Error::MissingEvidence {
        kind: kind.to_string(),
        count: ids.len(),
        sample,
    }
}

/// Rebuilds a dataset with confidence (and, for resampling, y_pred) replaced
/// by the chosen proxy. Every record must carry the evidence the method
/// needs; offenders are reported by id before any work is done.
pub fn attach_proxy(dataset: &Dataset, method: ProxyMethod, cfg: &ToleranceConfig) -> Result<Dataset> {
    cfg.validate()?;
    if method == ProxyMethod::Verbal {
        return Ok(dataset.clone());
    }

    let lacks: Vec<&str> = dataset
        .iter()
        .filter(|r| match method {
            ProxyMethod::Verbal => false,
            ProxyMethod::Resampling => r.samples.is_none(),
            ProxyMethod::LogitGeom => r.token_probs.is_none(),
            ProxyMethod::PTrue => r.logit_true.is_none() || r.logit_false.is_none(),
        })
        .map(|r| r.id.as_str())
        .collect();
    if !lacks.is_empty() {
        let kind = match method {
            ProxyMethod::Verbal => unreachable!(),
            ProxyMethod::Resampling => "samples",
            ProxyMethod::LogitGeom => "token_probs",
            ProxyMethod::PTrue => "logit_true/logit_false",
        };
        return Err(missing_evidence(kind, lacks));
    }

    let mut records = Vec::with_capacity(dataset.len());
    for record in dataset.iter() {
        let mut out = record.clone();
        match method {
            ProxyMethod::Verbal => {}
            ProxyMethod::Resampling => {
                let proxy =
                    resampling_confidence(record.samples.as_deref().unwrap(), cfg.epsilon)?;
                out.confidence = proxy.confidence;
                out.y_pred = proxy.measurement;
            }
            ProxyMethod::LogitGeom => {
                out.confidence = logit_geometric_mean(record.token_probs.as_deref().unwrap())?;
            }
            ProxyMethod::PTrue => {
                out.confidence =
                    p_true_confidence(record.logit_true.unwrap(), record.logit_false.unwrap())?;
            }
        }
        records.push(out);
    }
    Ok(Dataset::from_validated(dataset.name(), records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::MeasurementRecord;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identical_samples_give_full_confidence() {
        let out = resampling_confidence(&[42.0; 5], 10.0).unwrap();
        assert_eq!(out.confidence, 1.0);
        assert_eq!(out.measurement, 42.0);
    }

    #[test]
    fn tie_break_prefers_leftmost_anchor() {
        let out = resampling_confidence(&[0.0, 100.0], 10.0).unwrap();
        assert_eq!(out.confidence, 0.5);
        assert_eq!(out.measurement, 0.0);
    }

    #[test]
    fn window_captures_dense_cluster() {
        let out = resampling_confidence(&[40.0, 42.0, 44.0, 90.0], 5.0).unwrap();
        assert_eq!(out.confidence, 0.75);
        assert_abs_diff_eq!(out.measurement, 42.0, epsilon = 1e-12);
    }

    #[test]
    fn window_is_inclusive_at_both_ends() {
        // [30, 50] with ε=10: window anchored at 30 spans [30, 50].
        let out = resampling_confidence(&[30.0, 50.0], 10.0).unwrap();
        assert_eq!(out.confidence, 1.0);
        assert_eq!(out.measurement, 40.0);
    }

    #[test]
    fn geometric_mean_examples() {
        assert_eq!(logit_geometric_mean(&[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(logit_geometric_mean(&[0.5]).unwrap(), 0.5);
        let value = logit_geometric_mean(&[0.9, 0.4, 0.6]).unwrap();
        assert_abs_diff_eq!(value, 0.216f64.powf(1.0 / 3.0), epsilon = 1e-12);
        assert_abs_diff_eq!(value, 0.6, epsilon = 1e-9);
    }

    #[test]
    fn geometric_mean_rejects_zero_probability() {
        assert!(matches!(
            logit_geometric_mean(&[0.5, 0.0]),
            Err(Error::InvalidDistribution(_))
        ));
        assert!(matches!(
            logit_geometric_mean(&[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn p_true_examples() {
        assert_eq!(p_true_confidence(2.0, 2.0).unwrap(), 0.5);
        let value = p_true_confidence(3.0f64.ln(), 0.0).unwrap();
        assert_abs_diff_eq!(value, 0.75, epsilon = 1e-12);
        // Large gaps saturate without overflow.
        assert_eq!(p_true_confidence(100.0, 0.0).unwrap(), 1.0);
        assert_eq!(p_true_confidence(0.0, 1000.0).unwrap(), 0.0);
        assert!(p_true_confidence(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn attach_verbal_is_identity() {
        let ds = Dataset::new(
            "verbal",
            vec![MeasurementRecord::new("a", 50.0, 55.0, 0.9)],
        )
        .unwrap();
        let out = attach_proxy(&ds, ProxyMethod::Verbal, &ToleranceConfig::default()).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn attach_resampling_replaces_confidence_and_score() {
        let record = MeasurementRecord {
            samples: Some(vec![40.0, 42.0, 44.0, 90.0]),
            ..MeasurementRecord::new("a", 45.0, 70.0, 0.2)
        };
        let ds = Dataset::new("resample", vec![record]).unwrap();
        let cfg = ToleranceConfig::new(5.0, 10).unwrap();
        let out = attach_proxy(&ds, ProxyMethod::Resampling, &cfg).unwrap();
        let r = &out.records()[0];
        assert_eq!(r.confidence, 0.75);
        assert_abs_diff_eq!(r.y_pred, 42.0, epsilon = 1e-12);
        assert_eq!(r.y_true, 45.0);
        // Evidence is preserved for reproducibility.
        assert!(r.samples.is_some());
    }

    #[test]
    fn attach_reports_missing_evidence_ids() {
        let ds = Dataset::new(
            "missing",
            vec![
                MeasurementRecord {
                    token_probs: Some(vec![0.5]),
                    ..MeasurementRecord::new("has", 50.0, 55.0, 0.9)
                },
                MeasurementRecord::new("lacks-1", 50.0, 55.0, 0.9),
                MeasurementRecord::new("lacks-2", 50.0, 55.0, 0.9),
            ],
        )
        .unwrap();
        let err =
            attach_proxy(&ds, ProxyMethod::LogitGeom, &ToleranceConfig::default()).unwrap_err();
        match &err {
            Error::MissingEvidence { count, sample, .. } => {
                assert_eq!(*count, 2);
                assert!(sample.contains("lacks-1") && sample.contains("lacks-2"));
            }
            other => panic!("expected missing-evidence error, got {other}"),
        }
    }

    #[test]
    fn attach_p_true_uses_both_logits() {
        let record = MeasurementRecord {
            logit_true: Some(1.0),
            logit_false: Some(-1.0),
            ..MeasurementRecord::new("a", 50.0, 55.0, 0.9)
        };
        let ds = Dataset::new("ptrue", vec![record]).unwrap();
        let out = attach_proxy(&ds, ProxyMethod::PTrue, &ToleranceConfig::default()).unwrap();
        assert_abs_diff_eq!(
            out.records()[0].confidence,
            1.0 / (1.0 + (-2.0f64).exp()),
            epsilon = 1e-15
        );
    }
}
