//! Domain types, validation, and dataset file I/O.
//!
//! A [`MeasurementRecord`] is one scored instance: the reference score
//! `y_true`, the model's score `y_pred`, a confidence on `[0,1]`, and
//! optional raw evidence used by the confidence proxies. Records travel in
//! [`Dataset`]s, which enforce unique ids and per-field ranges at
//! construction so every downstream module can assume valid inputs.
//!
//! Files are either JSONL (one object per line) or CSV (same field names as
//! the header row; array fields are semicolon-joined inside one cell).
//! Confidence can be stored on the unit scale or as a 0-100 percentage;
//! loading and saving take an explicit [`ConfidenceScale`] so both round-trip
//! losslessly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance and binning parameters shared by the metric and calibration
/// routines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceConfig {
    /// Half-width of the acceptance interval, in score units.
    pub epsilon: f64,
    /// Number of equal-width confidence bins (M).
    pub num_bins: usize,
    /// Upper bound of the score scale. Fixed at 100 for this toolkit.
    pub scale_max: f64,
}

impl ToleranceConfig {
    /// Standard 0-100 scale with the given tolerance and bin count.
    pub fn new(epsilon: f64, num_bins: usize) -> Result<Self> {
        let cfg = ToleranceConfig {
            epsilon,
            num_bins,
            scale_max: 100.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 || self.epsilon > self.scale_max {
            return Err(Error::InvalidInput(format!(
                "epsilon must be in (0, {}], got {}",
                self.scale_max, self.epsilon
            )));
        }
        if self.num_bins == 0 {
            return Err(Error::InvalidInput("num_bins must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for ToleranceConfig {
    /// ε = 10 score points, 10 bins, 0-100 scale.
    fn default() -> Self {
        ToleranceConfig {
            epsilon: 10.0,
            num_bins: 10,
            scale_max: 100.0,
        }
    }
}

/// One scored instance with optional raw confidence evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementRecord {
    pub id: String,
    /// Reference ("human") score on [0, 100].
    pub y_true: f64,
    /// Model score on [0, 100].
    pub y_pred: f64,
    /// Confidence that `y_pred` is tolerance-correct, on [0, 1].
    pub confidence: f64,
    /// Resampled scores backing the resampling proxy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<f64>>,
    /// Per-token generation probabilities, each in (0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_probs: Option<Vec<f64>>,
    /// Logit of the "True" token in a self-judgment pass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit_true: Option<f64>,
    /// Logit of the "False" token in a self-judgment pass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit_false: Option<f64>,
    /// Aggregation key, e.g. the document date for daily stance pooling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_key: Option<String>,
}

impl MeasurementRecord {
    /// Minimal record with no optional evidence.
    pub fn new(id: impl Into<String>, y_true: f64, y_pred: f64, confidence: f64) -> Self {
        MeasurementRecord {
            id: id.into(),
            y_true,
            y_pred,
            confidence,
            samples: None,
            token_probs: None,
            logit_true: None,
            logit_false: None,
            group_key: None,
        }
    }

    /// Checks every declared range. Out-of-range values are rejected, not
    /// clamped: upstream parsing bugs should surface here, not vanish.
    pub fn validate(&self, scale_max: f64) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidInput("record id must be non-empty".into()));
        }
        for (field, value) in [("y_true", self.y_true), ("y_pred", self.y_pred)] {
            if !value.is_finite() || value < 0.0 || value > scale_max {
                return Err(Error::InvalidInput(format!(
                    "record {:?}: {} = {} outside [0, {}]",
                    self.id, field, value, scale_max
                )));
            }
        }
        if !self.confidence.is_finite() || !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidInput(format!(
                "record {:?}: confidence = {} outside [0, 1]",
                self.id, self.confidence
            )));
        }
        if let Some(samples) = &self.samples {
            if samples.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "record {:?}: samples present but empty",
                    self.id
                )));
            }
            for &s in samples {
                if !s.is_finite() || s < 0.0 || s > scale_max {
                    return Err(Error::InvalidInput(format!(
                        "record {:?}: sample {} outside [0, {}]",
                        self.id, s, scale_max
                    )));
                }
            }
        }
        if let Some(probs) = &self.token_probs {
            if probs.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "record {:?}: token_probs present but empty",
                    self.id
                )));
            }
            for &p in probs {
                if !p.is_finite() || p <= 0.0 || p > 1.0 {
                    return Err(Error::InvalidInput(format!(
                        "record {:?}: token probability {} outside (0, 1]",
                        self.id, p
                    )));
                }
            }
        }
        for (field, value) in [("logit_true", self.logit_true), ("logit_false", self.logit_false)]
        {
            if let Some(v) = value {
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "record {:?}: {} must be finite",
                        self.id, field
                    )));
                }
            }
        }
        if let Some(key) = &self.group_key {
            if key.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "record {:?}: group_key present but empty",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Binary tolerance-correctness outcome for one record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrectnessOutcome(bool);

impl CorrectnessOutcome {
    pub fn correct(self) -> bool {
        self.0
    }

    /// The outcome as the 0/1 indicator used in Brier and accuracy sums.
    pub fn indicator(self) -> f64 {
        if self.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Whether a prediction lands within ±epsilon of the reference value.
/// The boundary |y_pred − y_true| = epsilon counts as correct.
pub fn tolerance_correct(y_pred: f64, y_true: f64, epsilon: f64) -> Result<CorrectnessOutcome> {
    if !y_pred.is_finite() || !y_true.is_finite() {
        return Err(Error::InvalidInput(format!(
            "tolerance_correct requires finite scores, got y_pred={y_pred}, y_true={y_true}"
        )));
    }
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    Ok(CorrectnessOutcome((y_pred - y_true).abs() <= epsilon))
}

/// An ordered, validated collection of records with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    records: Vec<MeasurementRecord>,
}

impl Dataset {
    /// Validates every record and enforces id uniqueness.
    pub fn new(name: impl Into<String>, records: Vec<MeasurementRecord>) -> Result<Self> {
        let name = name.into();
        let mut seen: HashMap<&str, usize> = HashMap::with_capacity(records.len());
        for (i, record) in records.iter().enumerate() {
            record.validate(100.0)?;
            if let Some(first) = seen.insert(record.id.as_str(), i) {
                return Err(Error::DuplicateId {
                    id: record.id.clone(),
                    context: format!(" (records {first} and {i})"),
                });
            }
        }
        Ok(Dataset { name, records })
    }

    /// Constructs without re-validating. For internal use where records are
    /// derived from an already-validated dataset and validity is structural.
    pub(crate) fn from_validated(name: impl Into<String>, records: Vec<MeasurementRecord>) -> Self {
        let ds = Dataset {
            name: name.into(),
            records,
        };
        debug_assert!(ds.records.iter().all(|r| r.validate(100.0).is_ok()));
        ds
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn records(&self) -> &[MeasurementRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, MeasurementRecord> {
        self.records.iter()
    }

    pub fn into_records(self) -> Vec<MeasurementRecord> {
        self.records
    }
}

/// On-disk dataset encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

impl DatasetFormat {
    /// Guesses the format from a file extension (`.csv` → CSV, else JSONL).
    pub fn from_path(path: &Path) -> DatasetFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Jsonl,
        }
    }
}

/// How confidence is stored in a file: already on [0,1], or as 0-100.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfidenceScale {
    Unit,
    Percent,
}

impl ConfidenceScale {
    fn to_unit(self, raw: f64) -> f64 {
        match self {
            ConfidenceScale::Unit => raw,
            ConfidenceScale::Percent => raw / 100.0,
        }
    }

    fn from_unit(self, unit: f64) -> f64 {
        match self {
            ConfidenceScale::Unit => unit,
            ConfidenceScale::Percent => unit * 100.0,
        }
    }

    fn range_label(self) -> &'static str {
        match self {
            ConfidenceScale::Unit => "[0, 1]",
            ConfidenceScale::Percent => "[0, 100]",
        }
    }

    fn max(self) -> f64 {
        match self {
            ConfidenceScale::Unit => 1.0,
            ConfidenceScale::Percent => 100.0,
        }
    }
}

const CSV_COLUMNS: [&str; 9] = [
    "id",
    "y_true",
    "y_pred",
    "confidence",
    "samples",
    "token_probs",
    "logit_true",
    "logit_false",
    "group_key",
];

/// Loads and validates a dataset. Every parse or validation failure names
/// the file and 1-based line it came from.
pub fn load_dataset(path: &Path, format: DatasetFormat, scale: ConfidenceScale) -> Result<Dataset> {
    let records = match format {
        DatasetFormat::Jsonl => load_jsonl(path, scale)?,
        DatasetFormat::Csv => load_csv(path, scale)?,
    };
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    Ok(Dataset { name, records })
}

/// Writes a dataset in the given format, converting confidence back to the
/// requested scale.
pub fn save_dataset(
    dataset: &Dataset,
    path: &Path,
    format: DatasetFormat,
    scale: ConfidenceScale,
) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    match format {
        DatasetFormat::Jsonl => {
            for record in dataset.iter() {
                let mut scaled = record.clone();
                scaled.confidence = scale.from_unit(record.confidence);
                let line = serde_json::to_string(&scaled)
                    .map_err(|e| Error::InvalidInput(format!("serialize failed: {e}")))?;
                out.write_all(line.as_bytes())?;
                out.write_all(b"\n")?;
            }
        }
        DatasetFormat::Csv => {
            out.write_all(CSV_COLUMNS.join(",").as_bytes())?;
            out.write_all(b"\n")?;
            for record in dataset.iter() {
                let mut line = String::new();
                let _ = write!(
                    line,
                    "{},{},{},{}",
                    csv_escape(&record.id),
                    record.y_true,
                    record.y_pred,
                    scale.from_unit(record.confidence)
                );
                line.push(',');
                line.push_str(&join_array(&record.samples));
                line.push(',');
                line.push_str(&join_array(&record.token_probs));
                line.push(',');
                if let Some(v) = record.logit_true {
                    let _ = write!(line, "{v}");
                }
                line.push(',');
                if let Some(v) = record.logit_false {
                    let _ = write!(line, "{v}");
                }
                line.push(',');
                if let Some(k) = &record.group_key {
                    line.push_str(&csv_escape(k));
                }
                out.write_all(line.as_bytes())?;
                out.write_all(b"\n")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn join_array(values: &Option<Vec<f64>>) -> String {
    match values {
        None => String::new(),
        Some(vs) => vs
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";"),
    }
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Applies scale conversion and validation to a freshly parsed record.
fn finish_record(
    mut record: MeasurementRecord,
    scale: ConfidenceScale,
    path: &Path,
    line: u64,
    seen: &mut HashMap<String, u64>,
) -> Result<MeasurementRecord> {
    let raw = record.confidence;
    if !raw.is_finite() || raw < 0.0 || raw > scale.max() {
        return Err(parse_err(
            path,
            line,
            format!("confidence = {raw} outside {}", scale.range_label()),
        ));
    }
    record.confidence = scale.to_unit(raw);
    record
        .validate(100.0)
        .map_err(|e| parse_err(path, line, e.to_string()))?;
    if let Some(first) = seen.insert(record.id.clone(), line) {
        return Err(parse_err(
            path,
            line,
            format!("duplicate id {:?} (first seen at line {first})", record.id),
        ));
    }
    Ok(record)
}

fn load_jsonl(path: &Path, scale: ConfidenceScale) -> Result<Vec<MeasurementRecord>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MeasurementRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, line_no, e.to_string()))?;
        records.push(finish_record(record, scale, path, line_no, &mut seen)?);
    }
    Ok(records)
}

fn load_csv(path: &Path, scale: ConfidenceScale) -> Result<Vec<MeasurementRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;

    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let mut column_of: HashMap<&str, usize> = HashMap::new();
    for (i, header) in headers.iter().enumerate() {
        let header = header.trim();
        if !CSV_COLUMNS.contains(&header) {
            return Err(parse_err(path, 1, format!("unknown column {header:?}")));
        }
        if column_of.insert(header, i).is_some() {
            return Err(parse_err(path, 1, format!("repeated column {header:?}")));
        }
    }
    for required in ["id", "y_true", "y_pred", "confidence"] {
        if !column_of.contains_key(required) {
            return Err(parse_err(
                path,
                1,
                format!("missing required column {required:?}"),
            ));
        }
    }

    let cell = |row: &csv::StringRecord, name: &str| -> Option<String> {
        column_of
            .get(name)
            .and_then(|&i| row.get(i))
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
    };

    let mut records = Vec::new();
    let mut seen = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);

        let scalar = |name: &str| -> Result<f64> {
            let text = cell(&row, name)
                .ok_or_else(|| parse_err(path, line, format!("empty {name} cell")))?;
            text.parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("{name} is not a number: {text:?}")))
        };
        let array = |name: &str| -> Result<Option<Vec<f64>>> {
            match cell(&row, name) {
                None => Ok(None),
                Some(text) => text
                    .split(';')
                    .map(|piece| {
                        let piece = piece.trim();
                        piece.parse::<f64>().map_err(|_| {
                            parse_err(path, line, format!("{name} entry is not a number: {piece:?}"))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()
                    .map(Some),
            }
        };
        let optional_scalar = |name: &str| -> Result<Option<f64>> {
            match cell(&row, name) {
                None => Ok(None),
                Some(text) => text
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| parse_err(path, line, format!("{name} is not a number: {text:?}"))),
            }
        };

        let record = MeasurementRecord {
            id: cell(&row, "id")
                .ok_or_else(|| parse_err(path, line, "empty id cell".to_string()))?,
            y_true: scalar("y_true")?,
            y_pred: scalar("y_pred")?,
            confidence: scalar("confidence")?,
            samples: array("samples")?,
            token_probs: array("token_probs")?,
            logit_true: optional_scalar("logit_true")?,
            logit_false: optional_scalar("logit_false")?,
            group_key: cell(&row, "group_key"),
        };
        records.push(finish_record(record, scale, path, line, &mut seen)?);
    }
    Ok(records)
}
