//! Soft-label targets and a linear multinomial student.
//!
//! A teacher measurement (y_pred, confidence) becomes a K-class probability
//! vector: the class containing y_pred receives the confidence, every other
//! class an equal share of the remainder. A linear softmax student is then
//! trained on caller-supplied feature vectors with a KL soft-label loss and
//! evaluated with the same tolerance metrics as the teacher, treating the
//! predicted class's bin center as the student's score and its argmax
//! probability as the student's confidence.
//!
//! The student is deliberately minimal — the value under test is the target
//! construction and loss, not the encoder. Callers with a trained text
//! encoder can feed its embeddings straight in as features.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, MeasurementRecord, ToleranceConfig};
use crate::error::{Error, Result};
use crate::metrics::{metric_report, MetricReport};

/// Class count used for FOMC-style data: the eleven round scores 0,10,...,100.
pub const FOMC_CLASS_COUNT: usize = 11;
/// Class count used everywhere else: ten equal-width bins.
pub const DEFAULT_CLASS_COUNT: usize = 10;

/// Picks the class count from a dataset name: names containing "fomc"
/// (case-insensitive) use the 11-point grid, everything else 10 bins.
pub fn class_count_for(dataset_name: &str) -> usize {
    if dataset_name.to_ascii_lowercase().contains("fomc") {
        FOMC_CLASS_COUNT
    } else {
        DEFAULT_CLASS_COUNT
    }
}

/// Maps a 0-100 score to its class index.
///
/// k = 11 follows the FOMC convention of round-value classes: round(y/10)
/// with halves rounding up. Any other k uses equal-width bins:
/// clamp(floor(y·k/100), 0, k−1).
pub fn score_to_class(y: f64, k: usize) -> Result<usize> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("class count must be >= 2, got {k}")));
    }
    if !y.is_finite() || !(0.0..=100.0).contains(&y) {
        return Err(Error::InvalidInput(format!("score {y} outside [0, 100]")));
    }
    let class = if k == FOMC_CLASS_COUNT {
        (y / 10.0).round() as usize
    } else {
        ((y * k as f64 / 100.0).floor() as usize).min(k - 1)
    };
    Ok(class)
}

/// The score a class index stands for: its grid value for k = 11, the bin
/// center otherwise.
pub fn class_center(class: usize, k: usize) -> f64 {
    if k == FOMC_CLASS_COUNT {
        10.0 * class as f64
    } else {
        (class as f64 + 0.5) * 100.0 / k as f64
    }
}

/// A K-class probability vector used as a distillation target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTarget {
    probs: Vec<f64>,
}

impl SoftTarget {
    /// Wraps an existing probability vector, validating it sums to one.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidInput(
                "soft target needs at least 2 classes".into(),
            ));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "target probability {p} is negative or non-finite"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!(
                "target probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(SoftTarget { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }
}

/// Builds the soft target for one teacher measurement: the class of y_pred
/// receives the teacher's confidence, the other k−1 classes split the rest
/// equally.
pub fn soft_target(y_pred: f64, confidence: f64, k: usize) -> Result<SoftTarget> {
    if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
        return Err(Error::InvalidInput(format!(
            "confidence {confidence} outside [0, 1]"
        )));
    }
    let class = score_to_class(y_pred, k)?;
    let share = (1.0 - confidence) / (k - 1) as f64;
    let mut probs = vec![share; k];
    probs[class] = confidence;
    Ok(SoftTarget { probs })
}

/// KL divergence Σ t·ln(t/s) from a soft target to student probabilities,
/// with the 0·ln 0 = 0 convention on zero target entries.
pub fn kl_soft_loss(student_probs: &[f64], target: &SoftTarget) -> Result<f64> {
    if student_probs.len() != target.k() {
        return Err(Error::InvalidInput(format!(
            "student has {} classes, target has {}",
            student_probs.len(),
            target.k()
        )));
    }
    let mut loss = 0.0;
    for (&s, &t) in student_probs.iter().zip(target.probs()) {
        if !s.is_finite() || s <= 0.0 {
            return Err(Error::InvalidDistribution(format!(
                "student probability {s} is not strictly positive"
            )));
        }
        if t > 0.0 {
            loss += t * (t / s).ln();
        }
    }
    Ok(loss)
}

/// Gradient-descent settings for the student. `learning_rate` defaults to
/// 2e−3 — the transformer recipe's 2e−5 scaled up two orders of magnitude
/// for a linear model trained from zero weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Softmax temperature applied during training.
    pub temperature: f64,
    /// Per-batch L2 gradient clip.
    pub grad_clip: f64,
    /// Fraction of records used for training in `distill_pipeline`.
    pub split_fraction: f64,
    /// Seed for shuffling and the train/eval split.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 2e-3,
            batch_size: 16,
            temperature: 1.0,
            grad_clip: 1.0,
            split_fraction: 0.8,
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput(
                "epochs and batch_size must be positive".into(),
            ));
        }
        for (name, value) in [
            ("learning_rate", self.learning_rate),
            ("temperature", self.temperature),
            ("grad_clip", self.grad_clip),
        ] {
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if !self.split_fraction.is_finite()
            || self.split_fraction <= 0.0
            || self.split_fraction >= 1.0
        {
            return Err(Error::InvalidInput(format!(
                "split_fraction must lie strictly inside (0, 1), got {}",
                self.split_fraction
            )));
        }
        Ok(())
    }
}

/// Linear multinomial student: logits = weights · [x; 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    pub k: usize,
    pub d: usize,
    /// Row-major K × (d+1) matrix; the last column is the bias.
    pub weights: Vec<f64>,
}

impl StudentModel {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.d == 0 {
            return Err(Error::InvalidInput(format!(
                "student needs k >= 2 and d >= 1, got k={}, d={}",
                self.k, self.d
            )));
        }
        if self.weights.len() != self.k * (self.d + 1) {
            return Err(Error::InvalidInput(format!(
                "weight matrix has {} entries, expected {}",
                self.weights.len(),
                self.k * (self.d + 1)
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("weights contain a non-finite entry".into()));
        }
        Ok(())
    }

    fn logits(&self, features: &[f64]) -> Vec<f64> {
        let cols = self.d + 1;
        (0..self.k)
            .map(|j| {
                let row = &self.weights[j * cols..(j + 1) * cols];
                let mut z = row[self.d]; // bias
                for (w, x) in row[..self.d].iter().zip(features) {
                    z += w * x;
                }
                z
            })
            .collect()
    }
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z / temperature));
    let exps: Vec<f64> = logits.iter().map(|&z| (z / temperature - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn check_training_inputs(
    model_k: usize,
    model_d: usize,
    features: &[Vec<f64>],
    targets: &[SoftTarget],
) -> Result<()> {
    if features.len() != targets.len() {
        return Err(Error::InvalidInput(format!(
            "{} feature rows vs {} targets",
            features.len(),
            targets.len()
        )));
    }
    for row in features {
        if row.len() != model_d {
            return Err(Error::InvalidInput(format!(
                "feature row has {} entries, expected {model_d}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("features contain a non-finite value".into()));
        }
    }
    for target in targets {
        if target.k() != model_k {
            return Err(Error::InvalidInput(format!(
                "target has {} classes, expected {model_k}",
                target.k()
            )));
        }
    }
    Ok(())
}

/// Mean KL soft-label loss of a student over a batch.
pub fn mean_kl_loss(
    model: &StudentModel,
    features: &[Vec<f64>],
    targets: &[SoftTarget],
    temperature: f64,
) -> Result<f64> {
    model.validate()?;
    check_training_inputs(model.k, model.d, features, targets)?;
    if features.is_empty() {
        return Err(Error::EmptyInput("loss over an empty batch".into()));
    }
    let mut total = 0.0;
    for (x, target) in features.iter().zip(targets) {
        let probs = softmax(&model.logits(x), temperature);
        total += kl_soft_loss(&probs, target)?;
    }
    Ok(total / features.len() as f64)
}

/// Analytic gradient of [`mean_kl_loss`] with respect to the weight matrix,
/// row-major K × (d+1): mean over the batch of ((softmax − target)/τ) ⊗ [x; 1].
pub fn mean_kl_gradient(
    model: &StudentModel,
    features: &[Vec<f64>],
    targets: &[SoftTarget],
    temperature: f64,
) -> Result<Vec<f64>> {
    model.validate()?;
    check_training_inputs(model.k, model.d, features, targets)?;
    if features.is_empty() {
        return Err(Error::EmptyInput("gradient over an empty batch".into()));
    }
    let cols = model.d + 1;
    let mut grad = vec![0.0; model.k * cols];
    let scale = 1.0 / (features.len() as f64 * temperature);
    for (x, target) in features.iter().zip(targets) {
        let probs = softmax(&model.logits(x), temperature);
        for j in 0..model.k {
            let delta = (probs[j] - target.probs()[j]) * scale;
            let row = &mut grad[j * cols..(j + 1) * cols];
            for (g, &v) in row[..model.d].iter_mut().zip(x) {
                *g += delta * v;
            }
            row[model.d] += delta;
        }
    }
    Ok(grad)
}

/// Trains the student by seeded minibatch gradient descent on the mean KL
/// loss, clipping each batch gradient to `grad_clip` in L2 norm. Returns the
/// final-epoch model; runs are bit-reproducible for a fixed config.
pub fn train_student(
    features: &[Vec<f64>],
    targets: &[SoftTarget],
    cfg: &TrainConfig,
) -> Result<StudentModel> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    if features.len() < cfg.batch_size {
        return Err(Error::InvalidInput(format!(
            "{} training rows is fewer than batch_size {}",
            features.len(),
            cfg.batch_size
        )));
    }
    let d = features[0].len();
    if d == 0 {
        return Err(Error::InvalidInput("feature rows are empty".into()));
    }
    let k = targets
        .first()
        .map(SoftTarget::k)
        .ok_or_else(|| Error::EmptyInput("no targets".into()))?;
    let mut model = StudentModel {
        k,
        d,
        weights: vec![0.0; k * (d + 1)],
    };
    check_training_inputs(k, d, features, targets)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut batch_x: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);
    let mut batch_t: Vec<SoftTarget> = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch_x.clear();
            batch_t.clear();
            for &i in chunk {
                batch_x.push(features[i].clone());
                batch_t.push(targets[i].clone());
            }
            let mut grad = mean_kl_gradient(&model, &batch_x, &batch_t, cfg.temperature)?;
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let scale = cfg.grad_clip / norm;
                for g in &mut grad {
                    *g *= scale;
                }
            }
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= cfg.learning_rate * g;
            }
        }
    }
    Ok(model)
}

/// A student's output for one feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentPrediction {
    /// Bin center of the argmax class, on the 0-100 scale.
    pub y_pred: f64,
    /// Probability of the argmax class.
    pub confidence: f64,
    pub probs: Vec<f64>,
}

/// Runs the student on one feature vector (inference temperature 1).
pub fn student_predict(model: &StudentModel, features: &[f64]) -> Result<StudentPrediction> {
    model.validate()?;
    if features.len() != model.d {
        return Err(Error::InvalidInput(format!(
            "feature vector has {} entries, expected {}",
            features.len(),
            model.d
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("features contain a non-finite value".into()));
    }
    let probs = softmax(&model.logits(features), 1.0);
    // Ties resolve to the lowest class index.
    let mut best = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = j;
        }
    }
    Ok(StudentPrediction {
        y_pred: class_center(best, model.k),
        confidence: probs[best],
        probs,
    })
}

/// Teacher-vs-student evaluation deltas (student − teacher; negative means
/// the student improved on the teacher).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillDelta {
    pub t_ece: f64,
    pub brier: f64,
}

/// Paired metric reports from one distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub k: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub teacher: MetricReport,
    pub student: MetricReport,
    pub delta: DistillDelta,
    /// The trained student, available to callers but kept out of the JSON
    /// report (serialize it separately to persist the model).
    #[serde(skip)]
    pub model: Option<StudentModel>,
}

/// Full distillation round-trip: seeded split, soft targets from the
/// teacher's (y_pred, confidence), student training, and tolerance metrics
/// for both teacher and student on the held-out split.
pub fn distill_pipeline(
    dataset: &Dataset,
    features: &[Vec<f64>],
    k: usize,
    cfg: &TrainConfig,
    tol: &ToleranceConfig,
) -> Result<DistillReport> {
    cfg.validate()?;
    tol.validate()?;
    if dataset.len() != features.len() {
        return Err(Error::InvalidInput(format!(
            "{} records vs {} feature rows; they must align by index",
            dataset.len(),
            features.len()
        )));
    }
    if dataset.len() < 2 {
        return Err(Error::InsufficientData(
            "distillation needs at least 2 records to split".into(),
        ));
    }

    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let n_train = ((n as f64 * cfg.split_fraction).floor() as usize).clamp(1, n - 1);
    let (train_idx, eval_idx) = order.split_at(n_train);

    let records = dataset.records();
    let mut train_features = Vec::with_capacity(train_idx.len());
    let mut train_targets = Vec::with_capacity(train_idx.len());
    for &i in train_idx {
        train_features.push(features[i].clone());
        train_targets.push(soft_target(records[i].y_pred, records[i].confidence, k)?);
    }
    let model = train_student(&train_features, &train_targets, cfg)?;

    let teacher_eval: Vec<MeasurementRecord> =
        eval_idx.iter().map(|&i| records[i].clone()).collect();
    let mut student_eval = Vec::with_capacity(eval_idx.len());
    for &i in eval_idx {
        let prediction = student_predict(&model, &features[i])?;
        let mut record = records[i].clone();
        record.y_pred = prediction.y_pred;
        record.confidence = prediction.confidence;
        student_eval.push(record);
    }

    let teacher = metric_report(&Dataset::from_validated("teacher-eval", teacher_eval), tol)?;
    let student = metric_report(&Dataset::from_validated("student-eval", student_eval), tol)?;
    let delta = DistillDelta {
        t_ece: student.t_ece - teacher.t_ece,
        brier: student.brier - teacher.brier,
    };
    Ok(DistillReport {
        k,
        n_train: train_idx.len(),
        n_eval: eval_idx.len(),
        teacher,
        student,
        delta,
        model: Some(model),
    })
}

/// One row of an external feature matrix.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct FeatureRow {
    pub id: String,
    #[serde(rename = "features")]
    pub values: Vec<f64>,
}

/// Loads a feature matrix from CSV (`id` column + one column per feature)
/// or JSONL (`{"id": ..., "features": [...]}`), chosen by file extension.
pub fn load_features(path: &Path) -> Result<Vec<FeatureRow>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut rows = Vec::new();
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| parse_err(1, e.to_string()))?;
        let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?;
        if headers.get(0).map(str::trim) != Some("id") {
            return Err(parse_err(1, "first CSV column must be \"id\"".into()));
        }
        for row in reader.records() {
            let row = row.map_err(|e| {
                parse_err(e.position().map(|p| p.line()).unwrap_or(0), e.to_string())
            })?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let id = row
                .get(0)
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| parse_err(line, "empty id cell".into()))?;
            let values = row
                .iter()
                .skip(1)
                .map(|cell| {
                    cell.trim().parse::<f64>().map_err(|_| {
                        parse_err(line, format!("feature is not a number: {cell:?}"))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(FeatureRow { id, values });
        }
    } else {
        let reader = BufReader::new(File::open(path)?);
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: FeatureRow = serde_json::from_str(&line)
                .map_err(|e| parse_err(idx as u64 + 1, e.to_string()))?;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Orders feature rows to match a dataset's records by id. Every record
/// must have a row; extra rows are ignored.
pub fn align_features(dataset: &Dataset, rows: &[FeatureRow]) -> Result<Vec<Vec<f64>>> {
    let by_id: HashMap<&str, &FeatureRow> =
        rows.iter().map(|r| (r.id.as_str(), r)).collect();
    let missing: Vec<&str> = dataset
        .iter()
        .filter(|r| !by_id.contains_key(r.id.as_str()))
        .map(|r| r.id.as_str())
        .collect();
    if !missing.is_empty() {
        let shown = missing.iter().take(8).cloned().collect::<Vec<_>>().join(", ");
        return Err(Error::InvalidInput(format!(
            "{} record(s) have no feature row; first ids: {shown}",
            missing.len()
        )));
    }
    let width = by_id[dataset.records()[0].id.as_str()].values.len();
    let mut out = Vec::with_capacity(dataset.len());
    for record in dataset.iter() {
        let row = by_id[record.id.as_str()];
        if row.values.len() != width {
            return Err(Error::InvalidInput(format!(
                "feature row {:?} has {} entries, expected {width}",
                row.id,
                row.values.len()
            )));
        }
        out.push(row.values.clone());
    }
    Ok(out)
}
