//! Confidence filtering, stance aggregation, and the attenuation experiment.
//!
//! The question under study: what happens to a downstream regression when
//! low-confidence measurements are dropped first? Sentence-level scores are
//! aggregated into a per-day hawkish-minus-dovish stance, the stance is
//! regressed on a daily covariate, and the same regression is run three
//! ways — on the true scores, on the noisy measured scores, and on the
//! measured scores after a confidence filter. Because confidence is highest
//! exactly where the score is least informative (near the neutral midpoint),
//! the filter selectively keeps weak-signal sentences and shrinks the slope
//! toward zero instead of cleaning the data.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};

use crate::dataset::{Dataset, MeasurementRecord};
use crate::error::{Error, Result};

/// Ordinary least squares fit of y on a single regressor x.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionResult {
    /// Slope estimate.
    pub beta: f64,
    pub intercept: f64,
    /// Standard error of the slope; zero on a perfect fit.
    pub se_beta: f64,
    /// beta / se_beta. Non-finite (serialized as null) when se_beta is zero.
    pub t_stat: f64,
    pub r_squared: f64,
    pub n: usize,
}

/// Keeps only records with confidence at or above `threshold` (unit scale),
/// preserving order.
pub fn confidence_filter(dataset: &Dataset, threshold: f64) -> Result<Dataset> {
    if !threshold.is_finite() || !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidInput(format!(
            "confidence threshold {threshold} outside [0, 1]"
        )));
    }
    let kept: Vec<MeasurementRecord> = dataset
        .iter()
        .filter(|r| r.confidence >= threshold)
        .cloned()
        .collect();
    Ok(Dataset::from_validated(
        format!("{}-filtered", dataset.name()),
        kept,
    ))
}

/// Net hawkish share of one day's sentences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DailyStance {
    pub group_key: String,
    /// (hawkish − dovish) / total, in [−1, 1].
    pub stance: f64,
    pub n_sentences: usize,
}

/// Aggregates sentence scores into per-day stances, sorted by group key.
///
/// A sentence is hawkish when y_pred > 50 and dovish when y_pred < 50;
/// scores of exactly 50 count toward the denominator only. Every record
/// must carry a group key.
pub fn daily_stance(dataset: &Dataset) -> Result<Vec<DailyStance>> {
    let mut groups: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for record in dataset.iter() {
        let key = record.group_key.as_deref().ok_or_else(|| {
            Error::InvalidInput(format!(
                "record {:?} has no group_key; stance aggregation needs one per record",
                record.id
            ))
        })?;
        let entry = groups.entry(key).or_default();
        if record.y_pred > 50.0 {
            entry.0 += 1;
        } else if record.y_pred < 50.0 {
            entry.1 += 1;
        }
        entry.2 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|(key, (hawkish, dovish, total))| DailyStance {
            group_key: key.to_string(),
            stance: (hawkish as f64 - dovish as f64) / total as f64,
            n_sentences: total,
        })
        .collect())
}

/// Simple-regression OLS with the usual closed form. Needs n ≥ 3 (one
/// residual degree of freedom) and non-constant x.
pub fn ols(x: &[f64], y: &[f64]) -> Result<RegressionResult> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "{} x values vs {} y values",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "regression needs at least 3 points, got {n}"
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("regression inputs contain a non-finite value".into()));
    }
    let nf = n as f64;
    let x_mean = x.iter().sum::<f64>() / nf;
    let y_mean = y.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - x_mean) * (xi - x_mean);
        sxy += (xi - x_mean) * (yi - y_mean);
        syy += (yi - y_mean) * (yi - y_mean);
    }
    if sxx <= 0.0 {
        return Err(Error::DegenerateRegressor(
            "regressor is constant; slope is undefined".into(),
        ));
    }
    let beta = sxy / sxx;
    let intercept = y_mean - beta * x_mean;
    let ssr: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let e = yi - (intercept + beta * xi);
            e * e
        })
        .sum();
    let r_squared = if syy > 0.0 {
        (1.0 - ssr / syy).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let se_beta = (ssr / (nf - 2.0)).max(0.0).sqrt() / sxx.sqrt();
    Ok(RegressionResult {
        beta,
        intercept,
        se_beta,
        t_stat: beta / se_beta,
        r_squared,
        n,
    })
}

/// Generator settings for the attenuation experiment. Defaults put the
/// confidence peak on neutral sentences so a confidence filter is also a
/// signal filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttenuationConfig {
    /// Points of daily stance shift per unit of covariate.
    pub stance_slope: f64,
    /// Spread of sentence-level true scores around the day mean.
    pub sentence_sd: f64,
    /// Measurement noise added to each sentence's score.
    pub noise_sd: f64,
    /// Confidence at a perfectly neutral measured score.
    pub conf_peak: f64,
    /// Confidence lost per unit of |y_pred − 50| / 50.
    pub conf_slope: f64,
    /// Jitter on the confidence itself.
    pub conf_noise_sd: f64,
}

impl Default for AttenuationConfig {
    fn default() -> Self {
        AttenuationConfig {
            stance_slope: 12.0,
            sentence_sd: 12.0,
            noise_sd: 18.0,
            conf_peak: 0.97,
            conf_slope: 0.85,
            conf_noise_sd: 0.05,
        }
    }
}

impl AttenuationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("stance_slope", self.stance_slope),
            ("conf_peak", self.conf_peak),
        ] {
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if self.conf_peak > 1.0 {
            return Err(Error::InvalidInput(format!(
                "conf_peak must be at most 1, got {}",
                self.conf_peak
            )));
        }
        for (name, value) in [
            ("sentence_sd", self.sentence_sd),
            ("noise_sd", self.noise_sd),
            ("conf_slope", self.conf_slope),
            ("conf_noise_sd", self.conf_noise_sd),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "{name} must be non-negative and finite, got {value}"
                )));
            }
        }
        Ok(())
    }
}

/// Draws the synthetic panel: per day a standard-normal covariate shifts the
/// day's mean score, sentences scatter around it, measurements add noise,
/// and confidence peaks where the measured score is neutral. Returns the
/// sentence records (group-keyed by day) and the per-day covariate.
pub fn simulate_attenuation(
    cfg: &AttenuationConfig,
    seed: u64,
    n_days: usize,
    sentences_per_day: usize,
) -> Result<(Vec<MeasurementRecord>, Vec<(String, f64)>)> {
    cfg.validate()?;
    if n_days == 0 || sentences_per_day == 0 {
        return Err(Error::InvalidInput(
            "n_days and sentences_per_day must be positive".into(),
        ));
    }
    let sentence_noise = Normal::new(0.0, cfg.sentence_sd)
        .map_err(|e| Error::InvalidInput(format!("sentence_sd: {e}")))?;
    let measurement_noise = Normal::new(0.0, cfg.noise_sd)
        .map_err(|e| Error::InvalidInput(format!("noise_sd: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_days * sentences_per_day);
    let mut covariate = Vec::with_capacity(n_days);
    for day in 1..=n_days {
        let key = format!("day-{day:04}");
        let x: f64 = StandardNormal.sample(&mut rng);
        let day_mean = 50.0 + cfg.stance_slope * x;
        covariate.push((key.clone(), x));
        for s in 0..sentences_per_day {
            let y_true = (day_mean + sentence_noise.sample(&mut rng)).clamp(0.0, 100.0);
            let y_pred = (y_true + measurement_noise.sample(&mut rng)).clamp(0.0, 100.0);
            let jitter: f64 = StandardNormal.sample(&mut rng);
            let confidence = (cfg.conf_peak - cfg.conf_slope * (y_pred - 50.0).abs() / 50.0
                + cfg.conf_noise_sd * jitter)
                .clamp(0.01, 0.99);
            let mut record =
                MeasurementRecord::new(format!("{key}-s{s:03}"), y_true, y_pred, confidence);
            record.group_key = Some(key.clone());
            records.push(record);
        }
    }
    Ok((records, covariate))
}

/// Matches daily stances to covariate values by group key. Returns the
/// paired (x, stance) columns plus any keys present on one side only.
pub fn join_stance_covariate(
    stances: &[DailyStance],
    covariate: &[(String, f64)],
) -> (Vec<f64>, Vec<f64>, Vec<String>) {
    let by_key: HashMap<&str, f64> = covariate
        .iter()
        .map(|(key, value)| (key.as_str(), *value))
        .collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut unmatched = Vec::new();
    for stance in stances {
        match by_key.get(stance.group_key.as_str()) {
            Some(&value) => {
                x.push(value);
                y.push(stance.stance);
            }
            None => unmatched.push(stance.group_key.clone()),
        }
    }
    let stance_keys: HashMap<&str, ()> = stances
        .iter()
        .map(|s| (s.group_key.as_str(), ()))
        .collect();
    for (key, _) in covariate {
        if !stance_keys.contains_key(key.as_str()) {
            unmatched.push(key.clone());
        }
    }
    (x, y, unmatched)
}

/// The three regressions of one attenuation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttenuationReport {
    /// Stance built from true scores — the slope the filter should recover.
    pub truth: RegressionResult,
    /// Stance from noisy measured scores, no filter.
    pub unfiltered: RegressionResult,
    /// Stance from measured scores after the confidence filter.
    pub filtered: RegressionResult,
    pub filter_threshold: f64,
    pub days_total: usize,
    /// Days that still have at least one sentence after filtering.
    pub days_after_filter: usize,
}

/// Runs the full experiment: simulate, aggregate three ways, regress.
///
/// Fails with an insufficient-data error when fewer than 3 days survive the
/// confidence filter.
pub fn attenuation_experiment(
    cfg: &AttenuationConfig,
    seed: u64,
    n_days: usize,
    sentences_per_day: usize,
    filter_threshold: f64,
) -> Result<AttenuationReport> {
    let (records, covariate) = simulate_attenuation(cfg, seed, n_days, sentences_per_day)?;

    let true_records: Vec<MeasurementRecord> = records
        .iter()
        .map(|r| {
            let mut t = r.clone();
            t.y_pred = t.y_true;
            t
        })
        .collect();
    let truth_set = Dataset::from_validated("attenuation-truth", true_records);
    let measured = Dataset::from_validated("attenuation", records);

    let regress = |dataset: &Dataset| -> Result<(RegressionResult, usize)> {
        let stances = daily_stance(dataset)?;
        let (x, y, _) = join_stance_covariate(&stances, &covariate);
        Ok((ols(&x, &y)?, stances.len()))
    };

    let (truth, _) = regress(&truth_set)?;
    let (unfiltered, _) = regress(&measured)?;
    let surviving = confidence_filter(&measured, filter_threshold)?;
    let filtered_stances = daily_stance(&surviving)?;
    if filtered_stances.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "only {} day(s) retain sentences at confidence threshold {filter_threshold}; need 3",
            filtered_stances.len()
        )));
    }
    let (x, y, _) = join_stance_covariate(&filtered_stances, &covariate);
    let filtered = ols(&x, &y)?;

    Ok(AttenuationReport {
        truth,
        unfiltered,
        filtered,
        filter_threshold,
        days_total: n_days,
        days_after_filter: filtered_stances.len(),
    })
}

/// Reads a `group_key,value` covariate CSV.
pub fn load_covariate(path: &Path) -> Result<Vec<(String, f64)>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(1, e.to_string()))?;
    {
        let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?;
        let expected = ["group_key", "value"];
        if headers.len() != 2
            || headers.iter().map(str::trim).ne(expected.iter().copied())
        {
            return Err(parse_err(
                1,
                format!("expected header \"group_key,value\", got {headers:?}"),
            ));
        }
    }
    let mut seen: HashMap<String, u64> = HashMap::new();
    let mut out = Vec::new();
    for row in reader.records() {
        let row =
            row.map_err(|e| parse_err(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let key = row
            .get(0)
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err(line, "empty group_key cell".into()))?;
        let value: f64 = row
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| parse_err(line, format!("value is not a finite number: {:?}", row.get(1))))?;
        if let Some(first) = seen.insert(key.clone(), line) {
            return Err(Error::DuplicateId {
                id: key,
                context: format!("covariate rows at lines {first} and {line}"),
            });
        }
        out.push((key, value));
    }
    Ok(out)
}

/// Writes a covariate as `group_key,value` CSV.
pub fn save_covariate(path: &Path, covariate: &[(String, f64)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "group_key,value")?;
    for (key, value) in covariate {
        writeln!(out, "{key},{value}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn record(id: &str, y_pred: f64, confidence: f64, day: &str) -> MeasurementRecord {
        let mut r = MeasurementRecord::new(id, 50.0, y_pred, confidence);
        r.group_key = Some(day.to_string());
        r
    }

    #[test]
    fn ols_matches_hand_computed_fit() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 4.0, 5.0, 4.0, 5.0];
        let fit = ols(&x, &y).unwrap();
        assert_abs_diff_eq!(fit.beta, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 2.2, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.se_beta, 0.282842712474619, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.t_stat, 2.1213203435596424, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r_squared, 0.6, epsilon = 1e-12);
        assert_eq!(fit.n, 5);
    }

    #[test]
    fn ols_perfect_fit_has_zero_se() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|&v| 2.0 * v + 1.0).collect();
        let fit = ols(&x, &y).unwrap();
        assert_abs_diff_eq!(fit.beta, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.se_beta, 0.0, epsilon = 1e-9);
        assert!(!fit.t_stat.is_finite());
        // Non-finite t serializes as null rather than breaking the JSON.
        let json = serde_json::to_value(&fit).unwrap();
        assert!(json["t_stat"].is_null());
    }

    #[test]
    fn ols_rejects_degenerate_inputs() {
        assert!(matches!(
            ols(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::DegenerateRegressor(_))
        ));
        assert!(matches!(
            ols(&[1.0, 2.0], &[1.0, 2.0]),
            Err(Error::InsufficientData(_))
        ));
        let flat = ols(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap();
        assert_eq!(flat.beta, 0.0);
        assert_eq!(flat.r_squared, 0.0);
    }

    #[test]
    fn stance_counts_midpoint_in_denominator_only() {
        let dataset = Dataset::new(
            "s",
            vec![
                record("a", 80.0, 0.9, "day-0002"),
                record("b", 20.0, 0.9, "day-0002"),
                record("c", 50.0, 0.9, "day-0002"),
                record("d", 80.0, 0.9, "day-0001"),
                record("e", 70.0, 0.9, "day-0001"),
            ],
        )
        .unwrap();
        let stances = daily_stance(&dataset).unwrap();
        assert_eq!(stances.len(), 2);
        // Sorted by key.
        assert_eq!(stances[0].group_key, "day-0001");
        assert_eq!(stances[0].stance, 1.0);
        assert_eq!(stances[1].group_key, "day-0002");
        assert_eq!(stances[1].stance, 0.0);
        assert_eq!(stances[1].n_sentences, 3);
    }

    #[test]
    fn stance_requires_group_keys() {
        let dataset = Dataset::new(
            "s",
            vec![MeasurementRecord::new("orphan", 50.0, 60.0, 0.5)],
        )
        .unwrap();
        let err = daily_stance(&dataset).unwrap_err();
        assert!(err.to_string().contains("orphan"), "{err}");
    }

    #[test]
    fn filter_keeps_order_and_respects_threshold() {
        let dataset = Dataset::new(
            "f",
            vec![
                record("a", 60.0, 0.95, "d1"),
                record("b", 60.0, 0.50, "d1"),
                record("c", 60.0, 0.90, "d1"),
            ],
        )
        .unwrap();
        let kept = confidence_filter(&dataset, 0.9).unwrap();
        let ids: Vec<&str> = kept.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);
        assert_eq!(confidence_filter(&dataset, 0.0).unwrap().len(), 3);
        assert!(confidence_filter(&dataset, 1.5).is_err());
    }

    #[test]
    fn simulation_is_deterministic_and_keyed_by_day() {
        let cfg = AttenuationConfig::default();
        let (a, cov_a) = simulate_attenuation(&cfg, 11, 5, 4).unwrap();
        let (b, cov_b) = simulate_attenuation(&cfg, 11, 5, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(cov_a, cov_b);
        assert_eq!(a.len(), 20);
        assert_eq!(cov_a.len(), 5);
        assert_eq!(a[0].id, "day-0001-s000");
        assert_eq!(a[0].group_key.as_deref(), Some("day-0001"));
        assert_eq!(a[19].id, "day-0005-s003");
        assert!(a.iter().all(|r| (0.01..=0.99).contains(&r.confidence)));
        let (c, _) = simulate_attenuation(&cfg, 12, 5, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn join_reports_unmatched_keys() {
        let stances = vec![
            DailyStance {
                group_key: "day-0001".into(),
                stance: 0.5,
                n_sentences: 4,
            },
            DailyStance {
                group_key: "day-0009".into(),
                stance: -0.5,
                n_sentences: 4,
            },
        ];
        let covariate = vec![("day-0001".to_string(), 1.25), ("day-0002".to_string(), -0.5)];
        let (x, y, unmatched) = join_stance_covariate(&stances, &covariate);
        assert_eq!(x, [1.25]);
        assert_eq!(y, [0.5]);
        assert_eq!(unmatched, ["day-0009", "day-0002"]);
    }

    #[test]
    fn experiment_runs_end_to_end() {
        let report = attenuation_experiment(&AttenuationConfig::default(), 7, 60, 24, 0.9).unwrap();
        assert_eq!(report.days_total, 60);
        assert!(report.days_after_filter >= 3);
        assert!(report.truth.beta > 0.0);
        assert_eq!(report.unfiltered.n, 60);
        assert!(report.filtered.n <= report.unfiltered.n);
    }

    #[test]
    fn experiment_fails_cleanly_when_filter_removes_everything() {
        // Confidence is clamped to at most 0.99, so a 0.995 threshold
        // removes every sentence.
        let err = attenuation_experiment(&AttenuationConfig::default(), 7, 10, 8, 0.995)
            .unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)), "{err}");
    }

    #[test]
    fn covariate_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cov.csv");
        let rows = vec![("day-0001".to_string(), -1.5), ("day-0002".to_string(), 0.25)];
        save_covariate(&path, &rows).unwrap();
        assert_eq!(load_covariate(&path).unwrap(), rows);
    }

    #[test]
    fn covariate_csv_rejects_duplicates_and_bad_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cov.csv");
        std::fs::write(&path, "group_key,value\nd1,1.0\nd1,2.0\n").unwrap();
        assert!(matches!(
            load_covariate(&path),
            Err(Error::DuplicateId { .. })
        ));
        std::fs::write(&path, "day,value\nd1,1.0\n").unwrap();
        assert!(matches!(load_covariate(&path), Err(Error::Parse { .. })));
    }
}
