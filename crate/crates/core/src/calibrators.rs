//! Post-hoc confidence calibrators and the resolution-collapse diagnostic.
//!
//! Four remappers from raw to calibrated confidence are supported:
//!
//! - Platt: sigmoid(A·logit(c) + B), maximum-likelihood A, B;
//! - beta: sigmoid(a·ln c − b·ln(1−c) + c₀) with a, b ≥ 0;
//! - isotonic: pool-adjacent-violators least-squares fit, applied by linear
//!   interpolation between knots;
//! - temperature: sigmoid(logit(c)/T), T ≥ likelihood-optimal by
//!   golden-section search.
//!
//! All parametric fits work on logit-transformed confidences clipped away
//! from {0,1} by [`CLIP_DELTA`] and maximize the Bernoulli log-likelihood of
//! the binary tolerance outcome. [`compare_calibrators`] fits everything on
//! a training split, evaluates on a held-out split, and flags resolution
//! collapse – calibrated confidences squeezed into a band near the base
//! rate, which minimizes calibration error while destroying the score's
//! discriminative spread.

use serde::{Deserialize, Serialize};

use crate::dataset::{tolerance_correct, Dataset, ToleranceConfig};
use crate::error::{Error, Result};
use crate::metrics;

/// Confidences are clipped into [δ, 1−δ] before logit transforms.
pub const CLIP_DELTA: f64 = 1e-6;

/// Parametric fits stop once the (projected) likelihood-gradient norm falls
/// below this.
pub const GRADIENT_TOLERANCE: f64 = 1e-8;

/// Golden-section search on ln T terminates at this interval width.
pub const TEMPERATURE_LN_TOLERANCE: f64 = 1e-6;

const MAX_NEWTON_ITERS: usize = 500;
const TEMPERATURE_LN_RANGE: (f64, f64) = (-5.0, 5.0);

/// Calibrated spread below this while the original spread exceeds
/// [`COLLAPSE_ORIGINAL_SPREAD_MIN`] is reported as resolution collapse.
pub const COLLAPSE_SPREAD_MAX: f64 = 0.05;
pub const COLLAPSE_ORIGINAL_SPREAD_MIN: f64 = 0.15;

/// One step of an isotonic fit: raw confidence (block centroid) and the
/// calibrated value assigned to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub confidence: f64,
    pub calibrated: f64,
}

/// A fitted confidence remapper, serializable for reuse across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibratorModel {
    Platt { a: f64, b: f64 },
    Beta { a: f64, b: f64, c: f64 },
    Isotonic { knots: Vec<Knot> },
    Temperature { t: f64 },
}

impl CalibratorModel {
    pub fn kind(&self) -> &'static str {
        match self {
            CalibratorModel::Platt { .. } => "platt",
            CalibratorModel::Beta { .. } => "beta",
            CalibratorModel::Isotonic { .. } => "isotonic",
            CalibratorModel::Temperature { .. } => "temperature",
        }
    }

    /// Structural invariants, mainly for models deserialized from files.
    pub fn validate(&self) -> Result<()> {
        match self {
            CalibratorModel::Platt { a, b } => {
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::InvalidInput("platt parameters must be finite".into()));
                }
            }
            CalibratorModel::Beta { a, b, c } => {
                if !a.is_finite() || !b.is_finite() || !c.is_finite() {
                    return Err(Error::InvalidInput("beta parameters must be finite".into()));
                }
                if *a < 0.0 || *b < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "beta requires a, b >= 0, got a={a}, b={b}"
                    )));
                }
            }
            CalibratorModel::Isotonic { knots } => {
                if knots.is_empty() {
                    return Err(Error::InvalidInput("isotonic model has no knots".into()));
                }
                for pair in knots.windows(2) {
                    if pair[1].confidence <= pair[0].confidence {
                        return Err(Error::InvalidInput(
                            "isotonic knots must be strictly increasing in confidence".into(),
                        ));
                    }
                    if pair[1].calibrated < pair[0].calibrated {
                        return Err(Error::InvalidInput(
                            "isotonic knot values must be nondecreasing".into(),
                        ));
                    }
                }
                for knot in knots {
                    if !knot.confidence.is_finite()
                        || !(0.0..=1.0).contains(&knot.calibrated)
                    {
                        return Err(Error::InvalidInput("isotonic knot out of range".into()));
                    }
                }
            }
            CalibratorModel::Temperature { t } => {
                if !t.is_finite() || *t <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "temperature must be positive and finite, got {t}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn clip(confidence: f64) -> f64 {
    confidence.clamp(CLIP_DELTA, 1.0 - CLIP_DELTA)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean Bernoulli negative log-likelihood of confidence against the
/// tolerance outcome, with confidences clipped so the value stays finite.
pub fn bernoulli_nll(dataset: &Dataset, cfg: &ToleranceConfig) -> Result<f64> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("nll requires a non-empty dataset".into()));
    }
    let mut sum = 0.0;
    for record in dataset.iter() {
        let o = tolerance_correct(record.y_pred, record.y_true, cfg.epsilon)?.correct();
        let c = clip(record.confidence);
        sum -= if o { c.ln() } else { (1.0 - c).ln() };
    }
    Ok(sum / dataset.len() as f64)
}

/// (confidence, outcome) pairs with the two-class precondition shared by the
/// parametric fitters.
fn training_pairs(train: &Dataset, cfg: &ToleranceConfig) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("calibrator training set is empty".into()));
    }
    let mut pairs = Vec::with_capacity(train.len());
    for record in train.iter() {
        let o = tolerance_correct(record.y_pred, record.y_true, cfg.epsilon)?.indicator();
        pairs.push((record.confidence, o));
    }
    Ok(pairs)
}

fn require_two_classes(pairs: &[(f64, f64)]) -> Result<()> {
    let correct = pairs.iter().filter(|(_, o)| *o > 0.5).count();
    if correct == 0 || correct == pairs.len() {
        return Err(Error::DegenerateFit(format!(
            "all {} training outcomes are {}; both classes are required",
            pairs.len(),
            if correct == 0 { "incorrect" } else { "correct" }
        )));
    }
    Ok(())
}

/// Solves a k×k row-major linear system by Gaussian elimination with
/// partial pivoting. Returns `None` when the matrix is numerically singular.
fn solve_linear(a: &mut [f64], b: &mut [f64], k: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..k {
        let mut pivot = col;
        for row in col + 1..k {
            if a[row * k + col].abs() > a[pivot * k + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * k + col].abs() < scale * 1e-14 {
            return None;
        }
        if pivot != col {
            for cc in 0..k {
                a.swap(pivot * k + cc, col * k + cc);
            }
            b.swap(pivot, col);
        }
        for row in col + 1..k {
            let factor = a[row * k + col] / a[col * k + col];
            if factor == 0.0 {
                continue;
            }
            for cc in col..k {
                a[row * k + cc] -= factor * a[col * k + cc];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; k];
    for col in (0..k).rev() {
        let mut v = b[col];
        for cc in col + 1..k {
            v -= a[col * k + cc] * x[cc];
        }
        x[col] = v / a[col * k + col];
    }
    Some(x)
}

fn log_likelihood(design: &[Vec<f64>], outcomes: &[f64], theta: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (x, &o) in design.iter().zip(outcomes) {
        let z: f64 = theta.iter().zip(x).map(|(t, v)| t * v).sum();
        ll -= if o > 0.5 { softplus(-z) } else { softplus(z) };
    }
    ll
}

/// Newton ascent on the Bernoulli log-likelihood of sigmoid(θ·x), with
/// optional nonnegativity constraints enforced by projection after each
/// step. Converges when the projected gradient norm drops below
/// [`GRADIENT_TOLERANCE`]; on problems without a finite optimum (e.g.
/// separable data) it returns the best iterate reached.
fn fit_logistic(
    design: &[Vec<f64>],
    outcomes: &[f64],
    init: &[f64],
    nonneg: &[bool],
) -> Result<Vec<f64>> {
    let d = init.len();
    let mut theta: Vec<f64> = init
        .iter()
        .zip(nonneg)
        .map(|(&t, &nn)| if nn && t < 0.0 { 0.0 } else { t })
        .collect();
    let mut ll = log_likelihood(design, outcomes, &theta);

    for _ in 0..MAX_NEWTON_ITERS {
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d]; // negated Hessian: Σ w x xᵀ, PSD
        for (x, &o) in design.iter().zip(outcomes) {
            let z: f64 = theta.iter().zip(x).map(|(t, v)| t * v).sum();
            let p = sigmoid(z);
            let w = (p * (1.0 - p)).max(1e-12);
            for i in 0..d {
                grad[i] += (o - p) * x[i];
                for j in 0..=i {
                    hess[i * d + j] += w * x[i] * x[j];
                }
            }
        }
        for i in 0..d {
            for j in i + 1..d {
                hess[i * d + j] = hess[j * d + i];
            }
        }

        // A coordinate pinned at zero whose gradient points outward is
        // excluded from this iteration's Newton system.
        let active: Vec<bool> = (0..d)
            .map(|i| nonneg[i] && theta[i] <= 0.0 && grad[i] < 0.0)
            .collect();
        let projected_norm = (0..d)
            .filter(|&i| !active[i])
            .map(|i| grad[i] * grad[i])
            .sum::<f64>()
            .sqrt();
        if projected_norm < GRADIENT_TOLERANCE {
            return Ok(theta);
        }

        let free: Vec<usize> = (0..d).filter(|&i| !active[i]).collect();
        let k = free.len();
        let mut reduced = vec![0.0; k * k];
        let mut rhs = vec![0.0; k];
        for (ri, &i) in free.iter().enumerate() {
            rhs[ri] = grad[i];
            for (rj, &j) in free.iter().enumerate() {
                reduced[ri * k + rj] = hess[i * d + j];
            }
        }
        let step = {
            let mut a = reduced.clone();
            let mut b = rhs.clone();
            solve_linear(&mut a, &mut b, k).or_else(|| {
                // Rank-deficient design (e.g. constant confidence): ridge.
                let trace: f64 = (0..k).map(|i| reduced[i * k + i]).sum();
                let ridge = (trace / k as f64).max(1.0) * 1e-8;
                let mut a = reduced.clone();
                let mut b = rhs.clone();
                for i in 0..k {
                    a[i * k + i] += ridge;
                }
                solve_linear(&mut a, &mut b, k)
            })
        };
        let Some(step) = step else {
            return Err(Error::DegenerateFit(
                "likelihood normal equations are singular".into(),
            ));
        };

        // Backtracking keeps Newton monotone far from the optimum.
        let mut improved = false;
        let mut scale = 1.0;
        for _ in 0..60 {
            let mut candidate = theta.clone();
            for (ri, &i) in free.iter().enumerate() {
                candidate[i] += scale * step[ri];
            }
            for i in 0..d {
                if nonneg[i] && candidate[i] < 0.0 {
                    candidate[i] = 0.0;
                }
            }
            let candidate_ll = log_likelihood(design, outcomes, &candidate);
            if candidate_ll >= ll - 1e-12 * (1.0 + ll.abs()) {
                improved = candidate_ll > ll;
                theta = candidate;
                ll = candidate_ll;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            break; // numerical optimum: no step improves the likelihood
        }
    }
    Ok(theta)
}

/// Fits sigmoid(A·logit(clip(conf)) + B) by maximum likelihood.
pub fn fit_platt(train: &Dataset, cfg: &ToleranceConfig) -> Result<CalibratorModel> {
    let pairs = training_pairs(train, cfg)?;
    require_two_classes(&pairs)?;
    let design: Vec<Vec<f64>> = pairs.iter().map(|(c, _)| vec![logit(clip(*c)), 1.0]).collect();
    let outcomes: Vec<f64> = pairs.iter().map(|(_, o)| *o).collect();
    let theta = fit_logistic(&design, &outcomes, &[1.0, 0.0], &[false, false])?;
    Ok(CalibratorModel::Platt {
        a: theta[0],
        b: theta[1],
    })
}

/// Fits sigmoid(a·ln c − b·ln(1−c) + c₀) with a, b ≥ 0 by projected maximum
/// likelihood on clipped confidences.
pub fn fit_beta(train: &Dataset, cfg: &ToleranceConfig) -> Result<CalibratorModel> {
    let pairs = training_pairs(train, cfg)?;
    require_two_classes(&pairs)?;
    let design: Vec<Vec<f64>> = pairs
        .iter()
        .map(|(conf, _)| {
            let c = clip(*conf);
            vec![c.ln(), -(1.0 - c).ln(), 1.0]
        })
        .collect();
    let outcomes: Vec<f64> = pairs.iter().map(|(_, o)| *o).collect();
    let theta = fit_logistic(&design, &outcomes, &[1.0, 1.0, 0.0], &[true, true, false])?;
    Ok(CalibratorModel::Beta {
        a: theta[0],
        b: theta[1],
        c: theta[2],
    })
}

struct PavaBlock {
    weight: f64,
    value: f64,
    confidence: f64,
    count: usize,
}

/// Stack-based pool-adjacent-violators: merges while the previous block
/// strictly violates monotonicity. Equal adjacent values stay separate so
/// violator-free inputs pass through unchanged.
fn pava_merge(blocks: Vec<PavaBlock>) -> Vec<PavaBlock> {
    let mut stack: Vec<PavaBlock> = Vec::with_capacity(blocks.len());
    for block in blocks {
        stack.push(block);
        while stack.len() >= 2 && stack[stack.len() - 2].value > stack[stack.len() - 1].value {
            let top = stack.pop().unwrap();
            let prev = stack.last_mut().unwrap();
            let weight = prev.weight + top.weight;
            prev.value = (prev.value * prev.weight + top.value * top.weight) / weight;
            prev.confidence =
                (prev.confidence * prev.weight + top.confidence * top.weight) / weight;
            prev.weight = weight;
            prev.count += top.count;
        }
    }
    stack
}

/// Exact L2 projection of a sequence onto the nondecreasing cone
/// (unweighted PAVA). Returns the fitted value at every input position.
pub fn monotone_projection(values: &[f64]) -> Vec<f64> {
    let blocks = values
        .iter()
        .enumerate()
        .map(|(i, &v)| PavaBlock {
            weight: 1.0,
            value: v,
            confidence: i as f64,
            count: 1,
        })
        .collect();
    let mut fitted = Vec::with_capacity(values.len());
    for block in pava_merge(blocks) {
        fitted.extend(std::iter::repeat(block.value).take(block.count));
    }
    fitted
}

/// Isotonic least-squares fit of outcome on confidence via
/// pool-adjacent-violators. Records sharing a confidence are pre-pooled;
/// each output knot is a pooled block's (weighted mean confidence, value).
pub fn fit_isotonic(train: &Dataset, cfg: &ToleranceConfig) -> Result<CalibratorModel> {
    let mut pairs = training_pairs(train, cfg)?;
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Pre-pool ties so blocks start from distinct confidences.
    let mut pooled: Vec<PavaBlock> = Vec::new();
    for (confidence, outcome) in pairs {
        match pooled.last_mut() {
            Some(last) if last.confidence == confidence => {
                last.value = (last.value * last.weight + outcome) / (last.weight + 1.0);
                last.weight += 1.0;
                last.count += 1;
            }
            _ => pooled.push(PavaBlock {
                weight: 1.0,
                value: outcome,
                confidence,
                count: 1,
            }),
        }
    }

    let knots = pava_merge(pooled)
        .into_iter()
        .map(|b| Knot {
            confidence: b.confidence,
            calibrated: b.value.clamp(0.0, 1.0),
        })
        .collect();
    Ok(CalibratorModel::Isotonic { knots })
}

/// Fits sigmoid(logit(clip(conf))/T) by golden-section search for the
/// likelihood-optimal T over ln T ∈ [−5, 5].
pub fn fit_temperature(train: &Dataset, cfg: &ToleranceConfig) -> Result<CalibratorModel> {
    let pairs = training_pairs(train, cfg)?;
    require_two_classes(&pairs)?;
    let zs: Vec<f64> = pairs.iter().map(|(c, _)| logit(clip(*c))).collect();
    let outcomes: Vec<f64> = pairs.iter().map(|(_, o)| *o).collect();

    let nll = |ln_t: f64| -> f64 {
        let t = ln_t.exp();
        let mut sum = 0.0;
        for (&z, &o) in zs.iter().zip(&outcomes) {
            let scaled = z / t;
            sum += if o > 0.5 {
                softplus(-scaled)
            } else {
                softplus(scaled)
            };
        }
        sum / zs.len() as f64
    };

    let golden = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = TEMPERATURE_LN_RANGE;
    let mut c = hi - golden * (hi - lo);
    let mut d = lo + golden * (hi - lo);
    let mut fc = nll(c);
    let mut fd = nll(d);
    while hi - lo > TEMPERATURE_LN_TOLERANCE {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - golden * (hi - lo);
            fc = nll(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + golden * (hi - lo);
            fd = nll(d);
        }
    }
    Ok(CalibratorModel::Temperature {
        t: ((lo + hi) / 2.0).exp(),
    })
}

fn interpolate_knots(knots: &[Knot], confidence: f64) -> f64 {
    let first = &knots[0];
    let last = &knots[knots.len() - 1];
    if confidence <= first.confidence {
        return first.calibrated;
    }
    if confidence >= last.confidence {
        return last.calibrated;
    }
    let hi = knots.partition_point(|k| k.confidence < confidence);
    let left = &knots[hi - 1];
    let right = &knots[hi];
    let t = (confidence - left.confidence) / (right.confidence - left.confidence);
    left.calibrated + t * (right.calibrated - left.calibrated)
}

/// Applies a fitted model, replacing each record's confidence with its
/// calibrated value. Scores and evidence fields are untouched.
pub fn apply(model: &CalibratorModel, dataset: &Dataset) -> Dataset {
    let records = dataset
        .iter()
        .map(|record| {
            let mut out = record.clone();
            out.confidence = match model {
                CalibratorModel::Platt { a, b } => sigmoid(a * logit(clip(record.confidence)) + b),
                CalibratorModel::Beta { a, b, c } => {
                    let conf = clip(record.confidence);
                    sigmoid(a * conf.ln() - b * (1.0 - conf).ln() + c)
                }
                CalibratorModel::Isotonic { knots } => {
                    if knots.is_empty() {
                        record.confidence
                    } else {
                        interpolate_knots(knots, record.confidence)
                    }
                }
                CalibratorModel::Temperature { t } => sigmoid(logit(clip(record.confidence)) / t),
            };
            out
        })
        .collect();
    Dataset::from_validated(dataset.name(), records)
}

/// Population standard deviation of the dataset's confidences.
pub fn confidence_spread(dataset: &Dataset) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    let n = dataset.len() as f64;
    let mean = dataset.iter().map(|r| r.confidence).sum::<f64>() / n;
    let var = dataset
        .iter()
        .map(|r| (r.confidence - mean).powi(2))
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// One row of a calibrator comparison: metrics on the evaluation split, or
/// the fit error that prevented them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEvaluation {
    pub method: String,
    pub t_ece: Option<f64>,
    pub brier: Option<f64>,
    pub nll: Option<f64>,
    pub spread: Option<f64>,
    /// Resolution-collapse flag; `None` for the uncalibrated row.
    pub collapsed: Option<bool>,
    pub error: Option<String>,
    /// The fitted model, available to callers that want to persist it.
    #[serde(skip)]
    pub model: Option<CalibratorModel>,
}

/// Uncalibrated baseline plus one row per calibrator, evaluated on a
/// held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationComparison {
    pub entries: Vec<MethodEvaluation>,
}

impl CalibrationComparison {
    pub fn entry(&self, method: &str) -> Option<&MethodEvaluation> {
        self.entries.iter().find(|e| e.method == method)
    }
}

/// Fits all four calibrators on `train` and evaluates everything on `test`.
/// Individual fit failures are recorded in their row without aborting the
/// other methods.
pub fn compare_calibrators(
    train: &Dataset,
    test: &Dataset,
    cfg: &ToleranceConfig,
) -> Result<CalibrationComparison> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyInput(
            "calibrator comparison requires non-empty train and test datasets".into(),
        ));
    }

    let original_spread = confidence_spread(test);
    let mut entries = vec![MethodEvaluation {
        method: "original".into(),
        t_ece: Some(metrics::t_ece(test, cfg)?),
        brier: Some(metrics::brier(test, cfg)?),
        nll: Some(bernoulli_nll(test, cfg)?),
        spread: Some(original_spread),
        collapsed: None,
        error: None,
        model: None,
    }];

    type Fitter = fn(&Dataset, &ToleranceConfig) -> Result<CalibratorModel>;
    let fitters: [(&str, Fitter); 4] = [
        ("platt", fit_platt),
        ("beta", fit_beta),
        ("isotonic", fit_isotonic),
        ("temperature", fit_temperature),
    ];

    for (name, fitter) in fitters {
        let entry = match fitter(train, cfg) {
            Ok(model) => {
                let calibrated = apply(&model, test);
                let spread = confidence_spread(&calibrated);
                MethodEvaluation {
                    method: name.into(),
                    t_ece: Some(metrics::t_ece(&calibrated, cfg)?),
                    brier: Some(metrics::brier(&calibrated, cfg)?),
                    nll: Some(bernoulli_nll(&calibrated, cfg)?),
                    spread: Some(spread),
                    collapsed: Some(
                        spread < COLLAPSE_SPREAD_MAX
                            && original_spread > COLLAPSE_ORIGINAL_SPREAD_MIN,
                    ),
                    error: None,
                    model: Some(model),
                }
            }
            Err(err) => MethodEvaluation {
                method: name.into(),
                t_ece: None,
                brier: None,
                nll: None,
                spread: None,
                collapsed: None,
                error: Some(err.to_string()),
                model: None,
            },
        };
        entries.push(entry);
    }

    Ok(CalibrationComparison { entries })
}
