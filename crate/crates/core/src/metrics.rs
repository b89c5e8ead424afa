//! Tolerance-based calibration metrics and reliability-diagram bins.
//!
//! All metrics reduce the continuous measurement problem to a binary one: a
//! record is tolerance-correct when |y_pred − y_true| ≤ ε. Confidence is
//! then audited against that outcome with:
//!
//! - [`t_ece`]: binned expected gap |accuracy − mean confidence|,
//! - [`brier`]: mean squared error between confidence and the 0/1 outcome,
//! - [`mh_spearman`]: rank correlation between model and reference scores
//!   (a measurement-health check, independent of confidence).

use serde::{Deserialize, Serialize};

use crate::dataset::{tolerance_correct, Dataset, ToleranceConfig};
use crate::error::{Error, Result};

/// One equal-width confidence bin of a reliability diagram.
///
/// Bins are left-open, right-closed: bin m covers ((m−1)/M, m/M], except the
/// first bin which also includes confidence 0. Empty bins keep `count = 0`
/// and report no mean confidence or accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub tolerance_accuracy: Option<f64>,
}

/// Bundle of every calibration metric computed on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub t_ece: f64,
    pub brier: f64,
    /// Spearman correlation between y_pred and y_true; `None` when undefined
    /// (fewer than two records, or a constant score list).
    pub mh: Option<f64>,
    pub n: usize,
    pub bins: Vec<ReliabilityBin>,
}

/// 0-based bin index for a confidence under M equal-width right-closed bins.
///
/// The tentative index ceil(c·M) is corrected against the exact bin edges
/// k/M so that membership agrees bit-for-bit with the bounds reported in
/// [`ReliabilityBin`], even when c·M rounds across an edge.
fn bin_index(confidence: f64, num_bins: usize) -> usize {
    let m = num_bins as f64;
    let mut idx = (confidence * m).ceil() as usize;
    idx = idx.clamp(1, num_bins);
    while idx > 1 && confidence <= (idx as f64 - 1.0) / m {
        idx -= 1;
    }
    while idx < num_bins && confidence > idx as f64 / m {
        idx += 1;
    }
    idx - 1
}

/// Partitions a dataset into M equal-width confidence bins and computes the
/// per-bin mean confidence and tolerance accuracy.
pub fn reliability_bins(dataset: &Dataset, cfg: &ToleranceConfig) -> Result<Vec<ReliabilityBin>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput(
            "reliability_bins requires a non-empty dataset".into(),
        ));
    }
    let m = cfg.num_bins;
    let mut counts = vec![0usize; m];
    let mut conf_sums = vec![0.0f64; m];
    let mut correct_sums = vec![0.0f64; m];
    for record in dataset.iter() {
        let outcome = tolerance_correct(record.y_pred, record.y_true, cfg.epsilon)?;
        let idx = bin_index(record.confidence, m);
        counts[idx] += 1;
        conf_sums[idx] += record.confidence;
        correct_sums[idx] += outcome.indicator();
    }
    let bins = (0..m)
        .map(|i| {
            let count = counts[i];
            ReliabilityBin {
                lower: i as f64 / m as f64,
                upper: (i + 1) as f64 / m as f64,
                count,
                mean_confidence: (count > 0).then(|| conf_sums[i] / count as f64),
                tolerance_accuracy: (count > 0).then(|| correct_sums[i] / count as f64),
            }
        })
        .collect();
    Ok(bins)
}

fn ece_from_bins(bins: &[ReliabilityBin], n: usize) -> f64 {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| {
            let weight = b.count as f64 / n as f64;
            let gap = (b.tolerance_accuracy.unwrap() - b.mean_confidence.unwrap()).abs();
            weight * gap
        })
        .sum()
}

/// Tolerance-based expected calibration error:
/// Σ_m (|B_m|/n)·|acc_ε(B_m) − conf(B_m)| over non-empty bins.
pub fn t_ece(dataset: &Dataset, cfg: &ToleranceConfig) -> Result<f64> {
    let bins = reliability_bins(dataset, cfg)?;
    Ok(ece_from_bins(&bins, dataset.len()))
}

/// Mean squared error between confidence and the binary tolerance outcome.
pub fn brier(dataset: &Dataset, cfg: &ToleranceConfig) -> Result<f64> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("brier requires a non-empty dataset".into()));
    }
    let mut sum = 0.0;
    for record in dataset.iter() {
        let o = tolerance_correct(record.y_pred, record.y_true, cfg.epsilon)?.indicator();
        let err = record.confidence - o;
        sum += err * err;
    }
    Ok(sum / dataset.len() as f64)
}

/// Average (fractional) ranks, 1-based; ties share the mean of their span.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation between two score lists.
///
/// Ties receive average ranks and the result is the Pearson correlation of
/// those ranks; on tie-free inputs this equals 1 − 6Σd²/(n(n²−1)).
pub fn mh_spearman(y_pred: &[f64], y_true: &[f64]) -> Result<f64> {
    if y_pred.len() != y_true.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} scores vs {} references",
            y_pred.len(),
            y_true.len()
        )));
    }
    if y_pred.len() < 2 {
        return Err(Error::InvalidInput(
            "spearman requires at least 2 observations".into(),
        ));
    }
    for (name, list) in [("y_pred", y_pred), ("y_true", y_true)] {
        if list.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{name} contains a non-finite value"
            )));
        }
    }
    let ranks_pred = average_ranks(y_pred);
    let ranks_true = average_ranks(y_true);

    let n = ranks_pred.len() as f64;
    let mean_p: f64 = ranks_pred.iter().sum::<f64>() / n;
    let mean_t: f64 = ranks_true.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_t = 0.0;
    for (&rp, &rt) in ranks_pred.iter().zip(&ranks_true) {
        let dp = rp - mean_p;
        let dt = rt - mean_t;
        cov += dp * dt;
        var_p += dp * dp;
        var_t += dt * dt;
    }
    if var_p <= 0.0 || var_t <= 0.0 {
        let side = if var_p <= 0.0 { "y_pred" } else { "y_true" };
        return Err(Error::UndefinedCorrelation(format!(
            "{side} is constant; rank correlation is undefined"
        )));
    }
    Ok((cov / (var_p * var_t).sqrt()).clamp(-1.0, 1.0))
}

/// Computes every metric on the same dataset and tolerance settings.
pub fn metric_report(dataset: &Dataset, cfg: &ToleranceConfig) -> Result<MetricReport> {
    let bins = reliability_bins(dataset, cfg)?;
    let n = dataset.len();
    let t_ece = ece_from_bins(&bins, n);
    let brier = brier(dataset, cfg)?;
    let y_pred: Vec<f64> = dataset.iter().map(|r| r.y_pred).collect();
    let y_true: Vec<f64> = dataset.iter().map(|r| r.y_true).collect();
    // The only failures possible on a validated dataset are "too few
    // records" and "constant list"; both mean the correlation is
    // unavailable rather than the report being unproducible.
    let mh = mh_spearman(&y_pred, &y_true).ok();
    Ok(MetricReport {
        t_ece,
        brier,
        mh,
        n,
        bins,
    })
}
