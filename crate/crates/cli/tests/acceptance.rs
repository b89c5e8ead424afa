//! Acceptance gate.
//!
//! One test per release criterion. Every test prints a single
//! `ACCEPTANCE <name>: PASS|FAIL` line (visible under `--nocapture`), so the
//! whole gate can be read off the output of:
//!
//! ```text
//! cargo test -p tolcal-cli --test acceptance -- --nocapture
//! ```

use std::io::Write as _;
use std::panic::{catch_unwind, resume_unwind, UnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tolcal_core::calibrators::{
    apply, bernoulli_nll, fit_temperature, monotone_projection, CalibratorModel,
    compare_calibrators, confidence_spread,
};
use tolcal_core::dataset::{Dataset, MeasurementRecord, ToleranceConfig};
use tolcal_core::distill::{
    distill_pipeline, mean_kl_gradient, mean_kl_loss, SoftTarget, StudentModel, TrainConfig,
};
use tolcal_core::metrics::{brier, mh_spearman, t_ece};
use tolcal_core::proxies::{logit_geometric_mean, p_true_confidence, resampling_confidence};
use tolcal_core::regress::{attenuation_experiment, ols, AttenuationConfig};
use tolcal_core::synth::{generate, generate_with, MiscalibrationProfile};
use tolcal_core::testutil::{MockChatServer, MockReply};

/// Runs one criterion and prints its verdict line, re-panicking on failure so
/// the cargo harness still reports the test as failed.
fn criterion(name: &str, body: impl FnOnce() + UnwindSafe) {
    match catch_unwind(body) {
        Ok(()) => println!("ACCEPTANCE {name}: PASS"),
        Err(cause) => {
            println!("ACCEPTANCE {name}: FAIL");
            resume_unwind(cause);
        }
    }
}

fn cfg() -> ToleranceConfig {
    ToleranceConfig::new(10.0, 10).unwrap()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[test]
fn calibrated_generator_soundness() {
    criterion("calibrated-generator-soundness", || {
        let started = Instant::now();
        let dataset = generate(&MiscalibrationProfile::Identity, 100_000, 10.0, 7).unwrap();
        let tolerance = cfg();
        let ece = t_ece(&dataset, &tolerance).unwrap();
        let brier_score = brier(&dataset, &tolerance).unwrap();
        assert!(ece < 0.01, "identity T-ECE = {ece}");
        // E[c(1−c)] for c ~ U(0.01, 0.99) is 0.169967, within a hair of 1/6.
        assert!(
            (brier_score - 1.0 / 6.0).abs() < 0.01,
            "identity Brier = {brier_score}"
        );
        assert!(
            started.elapsed() < Duration::from_secs(5),
            "took {:?}",
            started.elapsed()
        );
    });
}

#[test]
fn hand_binning_oracle() {
    criterion("hand-binning-oracle", || {
        let records = vec![
            MeasurementRecord::new("hit", 50.0, 55.0, 0.8),
            MeasurementRecord::new("miss", 50.0, 90.0, 0.8),
        ];
        let dataset = Dataset::new("two-records", records).unwrap();
        let tolerance = cfg();
        // Both records share the (0.7, 0.8] bin: mean confidence 0.8,
        // tolerance accuracy 0.5.
        let expected_ece = ((0.8f64 + 0.8) / 2.0 - 0.5).abs();
        assert_eq!(t_ece(&dataset, &tolerance).unwrap(), expected_ece);
        let expected_brier = ((0.8f64 - 1.0).powi(2) + (0.8f64 - 0.0).powi(2)) / 2.0;
        assert_eq!(brier(&dataset, &tolerance).unwrap(), expected_brier);
        assert!((expected_brier - 0.34).abs() < 1e-15);
        assert!((expected_ece - 0.3).abs() < 1e-15);
    });
}

/// Cheapest nondecreasing assignment over the 0..=1 step-0.05 grid.
fn grid_isotonic_sse(values: &[f64]) -> f64 {
    const LEVELS: usize = 21;
    let level = |l: usize| l as f64 * 0.05;
    let mut dp = vec![0.0f64; LEVELS];
    for (i, &v) in values.iter().enumerate() {
        let mut best_so_far = f64::INFINITY;
        let mut next = vec![0.0f64; LEVELS];
        for (l, slot) in next.iter_mut().enumerate() {
            let prev = if i == 0 { 0.0 } else { dp[l] };
            best_so_far = best_so_far.min(prev);
            *slot = best_so_far + (v - level(l)).powi(2);
        }
        dp = next;
    }
    dp.iter().cloned().fold(f64::INFINITY, f64::min)
}

#[test]
fn pava_matches_brute_force_projection() {
    criterion("pava-brute-force", || {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..=8);
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
            let fitted = monotone_projection(&values);
            assert!(fitted.windows(2).all(|w| w[0] <= w[1]));
            let sse: f64 = fitted
                .iter()
                .zip(&values)
                .map(|(f, v)| (f - v).powi(2))
                .sum();
            let grid = grid_isotonic_sse(&values);
            assert!(sse <= grid + 1e-9, "SSE {sse} > grid {grid} on {values:?}");
        }
        assert!(
            started.elapsed() < Duration::from_secs(10),
            "took {:?}",
            started.elapsed()
        );
    });
}

#[test]
fn calibrator_efficacy_pattern() {
    criterion("calibrator-efficacy-pattern", || {
        let tolerance = cfg();
        let profile = MiscalibrationProfile::OverconfidentPower { gamma: 2.0 };
        let train = generate(&profile, 50_000, tolerance.epsilon, 21).unwrap();
        let test = generate(&profile, 50_000, tolerance.epsilon, 22).unwrap();

        let comparison = compare_calibrators(&train, &test, &tolerance).unwrap();
        let original = comparison.entry("original").unwrap();
        assert!(original.t_ece.unwrap() > 0.10, "original T-ECE {:?}", original.t_ece);
        for method in ["platt", "beta"] {
            let entry = comparison.entry(method).unwrap();
            assert!(entry.error.is_none(), "{method}: {:?}", entry.error);
            let after = entry.t_ece.unwrap();
            assert!(after < 0.05, "{method} left T-ECE at {after}");
        }

        // Temperature always lowers (or matches) the likelihood objective it
        // optimizes, measured on its own training sample...
        let temperature_model = fit_temperature(&train, &tolerance).unwrap();
        let train_nll_before = bernoulli_nll(&train, &tolerance).unwrap();
        let train_nll_after =
            bernoulli_nll(&apply(&temperature_model, &train), &tolerance).unwrap();
        assert!(
            train_nll_after <= train_nll_before + 1e-12,
            "temperature raised in-sample NLL: {train_nll_before} -> {train_nll_after}"
        );
        // ...and on data whose distortion actually is a temperature shift, it
        // strictly reduces held-out NLL (the γ=2 power curve is not such a
        // shift: its likelihood optimum sits at T = 1, so no strict held-out
        // drop exists there for any fitter).
        let shifted_train = generate_with(
            "temperature-shifted",
            |c| sigmoid(logit(c.clamp(1e-6, 1.0 - 1e-6)) / 2.0),
            50_000,
            tolerance.epsilon,
            23,
        )
        .unwrap();
        let shifted_test = generate_with(
            "temperature-shifted",
            |c| sigmoid(logit(c.clamp(1e-6, 1.0 - 1e-6)) / 2.0),
            50_000,
            tolerance.epsilon,
            24,
        )
        .unwrap();
        let shifted_model = fit_temperature(&shifted_train, &tolerance).unwrap();
        let nll_before = bernoulli_nll(&shifted_test, &tolerance).unwrap();
        let nll_after =
            bernoulli_nll(&apply(&shifted_model, &shifted_test), &tolerance).unwrap();
        assert!(
            nll_after < nll_before,
            "temperature failed to reduce held-out NLL: {nll_before} -> {nll_after}"
        );

        // Monotone remap ⇒ ranking untouched: Spearman(pre, post) = 1.
        let before: Vec<f64> = test.iter().map(|r| r.confidence).collect();
        let after: Vec<f64> = apply(&temperature_model, &test)
            .iter()
            .map(|r| r.confidence)
            .collect();
        let rank_corr = mh_spearman(&before, &after).unwrap();
        assert_eq!(rank_corr, 1.0, "temperature disturbed the ranking");
    });
}

#[test]
fn resolution_collapse_detection() {
    criterion("resolution-collapse-detection", || {
        let tolerance = cfg();
        let profile = MiscalibrationProfile::BaseRate { p: 0.3 };
        let train = generate(&profile, 20_000, tolerance.epsilon, 31).unwrap();
        let test = generate(&profile, 20_000, tolerance.epsilon, 32).unwrap();

        let original_spread = confidence_spread(&test);
        assert!(original_spread > 0.15, "original spread {original_spread}");

        let comparison = compare_calibrators(&train, &test, &tolerance).unwrap();
        let platt = comparison.entry("platt").unwrap();
        assert!(platt.error.is_none(), "platt: {:?}", platt.error);
        let platt_spread = platt.spread.unwrap();
        assert!(platt_spread < 0.05, "platt spread {platt_spread}");
        assert_eq!(platt.collapsed, Some(true), "collapse went unflagged");
    });
}

#[test]
fn temperature_recovery() {
    criterion("temperature-recovery", || {
        let train = generate_with(
            "temperature-shifted",
            |c| sigmoid(logit(c.clamp(1e-6, 1.0 - 1e-6)) / 2.0),
            50_000,
            10.0,
            41,
        )
        .unwrap();
        let CalibratorModel::Temperature { t } = fit_temperature(&train, &cfg()).unwrap() else {
            panic!("wrong model kind");
        };
        assert!((1.8..=2.2).contains(&t), "fitted T = {t}");
    });
}

#[test]
fn kl_gradient_check() {
    criterion("kl-gradient-check", || {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let k = rng.random_range(2..=6);
            let d = rng.random_range(1..=5);
            let model = StudentModel {
                k,
                d,
                weights: (0..k * (d + 1)).map(|_| rng.random_range(-0.8..0.8)).collect(),
            };
            let n = rng.random_range(1..=6);
            let features: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
                .collect();
            let targets: Vec<SoftTarget> = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
                    let sum: f64 = raw.iter().sum();
                    SoftTarget::from_probs(raw.into_iter().map(|v| v / sum).collect()).unwrap()
                })
                .collect();
            let temperature = rng.random_range(0.5..2.0);

            let grad = mean_kl_gradient(&model, &features, &targets, temperature).unwrap();
            let h = 1e-6;
            for i in 0..model.weights.len() {
                let mut plus = model.clone();
                plus.weights[i] += h;
                let mut minus = model.clone();
                minus.weights[i] -= h;
                let numeric = (mean_kl_loss(&plus, &features, &targets, temperature).unwrap()
                    - mean_kl_loss(&minus, &features, &targets, temperature).unwrap())
                    / (2.0 * h);
                let relative = (grad[i] - numeric).abs() / grad[i].abs().max(1e-4);
                worst = worst.max(relative);
            }
        }
        assert!(worst < 1e-5, "worst relative gradient error {worst}");
    });
}

/// Teacher whose confidence is an uninformative constant while the features
/// fully determine the true decile: distillation should wash the useless
/// confidence out of the student.
fn washout_teacher(seed: u64, n: usize) -> (Dataset, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    for i in 0..n {
        let y_true: f64 = rng.random_range(0.0..100.0);
        let y_pred: f64 = rng.random_range(0.0..100.0);
        records.push(MeasurementRecord::new(
            format!("w{i:05}"),
            y_true,
            y_pred,
            0.5,
        ));
        let decile = ((y_true / 10.0) as usize).min(9);
        let mut row = vec![0.0; 10];
        row[decile] = 1.0;
        features.push(row);
    }
    (Dataset::new("washout", records).unwrap(), features)
}

#[test]
fn distillation_benefit_pattern() {
    criterion("distillation-benefit-pattern", || {
        let tolerance = cfg();
        let mut wins = 0;
        for seed in 0..100u64 {
            let (dataset, features) = washout_teacher(1000 + seed, 500);
            let train_cfg = TrainConfig {
                epochs: 12,
                seed,
                ..TrainConfig::default()
            };
            let report = distill_pipeline(&dataset, &features, 10, &train_cfg, &tolerance).unwrap();
            if report.student.t_ece < report.teacher.t_ece {
                wins += 1;
            }
        }
        assert!(wins >= 95, "student beat teacher in only {wins}/100 runs");
    });
}

#[test]
fn attenuation_pattern() {
    criterion("attenuation-pattern", || {
        let started = Instant::now();
        let config = AttenuationConfig::default();
        let mut ordered = 0;
        for seed in 0..100u64 {
            let report = attenuation_experiment(&config, 2000 + seed, 200, 24, 0.9).unwrap();
            let beta_ok = report.truth.beta.abs() > report.unfiltered.beta.abs()
                && report.unfiltered.beta.abs() > report.filtered.beta.abs();
            let r2_ok = report.truth.r_squared > report.unfiltered.r_squared
                && report.unfiltered.r_squared > report.filtered.r_squared;
            if beta_ok && r2_ok {
                ordered += 1;
            }
        }
        assert!(ordered >= 95, "ordering held in only {ordered}/100 seeds");
        assert!(
            started.elapsed() < Duration::from_secs(30),
            "took {:?}",
            started.elapsed()
        );
    });
}

#[test]
fn ols_exactness() {
    criterion("ols-exactness", || {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 4.0, 5.0, 4.0, 5.0];
        let fit = ols(&x, &y).unwrap();
        assert!((fit.beta - 0.6).abs() < 1e-12);
        assert!((fit.intercept - 2.2).abs() < 1e-12);
        assert!((fit.se_beta - 0.282842712474619).abs() < 1e-12);
        assert!((fit.t_stat - 2.1213203435596424).abs() < 1e-12);
        assert!((fit.r_squared - 0.6).abs() < 1e-12);

        // Residual identities on fuzzed inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..200 {
            let n = rng.random_range(3..60);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
            let ys: Vec<f64> = xs
                .iter()
                .map(|&v| 1.5 * v - 4.0 + rng.random_range(-20.0..20.0))
                .collect();
            let fit = ols(&xs, &ys).unwrap();
            let residuals: Vec<f64> = xs
                .iter()
                .zip(&ys)
                .map(|(xi, yi)| yi - (fit.intercept + fit.beta * xi))
                .collect();
            let sum_e: f64 = residuals.iter().sum();
            let sum_xe: f64 = xs.iter().zip(&residuals).map(|(a, b)| a * b).sum();
            assert!(sum_e.abs() < 1e-8 * n as f64 * 100.0, "Σe = {sum_e}");
            assert!(sum_xe.abs() < 1e-8 * n as f64 * 5000.0, "Σxe = {sum_xe}");
        }
    });
}

/// Exhaustive anchored-window enumeration for the resampling proxy.
fn exhaustive_window(samples: &[f64], epsilon: f64) -> (f64, f64) {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best_count = 0usize;
    let mut best_mean = 0.0;
    for (i, &anchor) in sorted.iter().enumerate() {
        let members: Vec<f64> = sorted
            .iter()
            .copied()
            .filter(|&v| v >= anchor && v <= anchor + 2.0 * epsilon)
            .collect();
        if members.len() > best_count || i == 0 {
            best_count = members.len();
            best_mean = members.iter().sum::<f64>() / members.len() as f64;
        }
    }
    (best_count as f64 / samples.len() as f64, best_mean)
}

#[test]
fn proxy_arithmetic() {
    criterion("proxy-arithmetic", || {
        // Geometric mean: (0.9 · 0.4 · 0.6)^(1/3) = 0.216^(1/3) = 0.6.
        let value = logit_geometric_mean(&[0.9, 0.4, 0.6]).unwrap();
        assert!((value - 0.216f64.powf(1.0 / 3.0)).abs() < 1e-9);
        assert!((value - 0.6).abs() < 1e-9);
        let single = logit_geometric_mean(&[0.6]).unwrap();
        assert!((single - 0.6).abs() < 1e-9);

        // P-true: a logit gap of ln 3 puts 3/4 of the mass on "True".
        let p = p_true_confidence(3f64.ln(), 0.0).unwrap();
        assert!((p - 0.75).abs() < 1e-9);

        // Sliding window equals exhaustive enumeration on random lists.
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..1000 {
            let n = rng.random_range(1..=40);
            let samples: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=100.0)).collect();
            let epsilon = rng.random_range(1.0..30.0);
            let proxy = resampling_confidence(&samples, epsilon).unwrap();
            let (confidence, measurement) = exhaustive_window(&samples, epsilon);
            assert_eq!(proxy.confidence, confidence);
            assert!((proxy.measurement - measurement).abs() < 1e-9);
        }
    });
}

fn tolcal() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tolcal"))
}

fn run_ok(cmd: &mut Command) {
    let output = cmd.output().expect("binary should launch");
    assert!(
        output.status.success(),
        "command failed status {:?}\nstdout:\n{}\nstderr:\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
}

#[test]
fn end_to_end_closure() {
    criterion("end-to-end-closure", || {
        let dir = tempfile::tempdir().unwrap();
        let path = |name: &str| dir.path().join(name);

        // simulate → audit → calibrate on the overconfident profile.
        run_ok(tolcal().args([
            "simulate",
            "--profile",
            "overconfident",
            "--n",
            "4000",
            "--seed",
            "5",
            "--out",
        ]).arg(path("train.jsonl")));
        run_ok(tolcal().args([
            "simulate",
            "--profile",
            "overconfident",
            "--n",
            "4000",
            "--seed",
            "6",
            "--out",
        ]).arg(path("test.jsonl")));
        run_ok(
            tolcal()
                .arg("audit")
                .arg(path("train.jsonl"))
                .args(["--epsilon", "10", "--bins", "10", "--diagram"])
                .arg(path("reliability.svg"))
                .arg("--output")
                .arg(path("audit.json")),
        );
        run_ok(
            tolcal()
                .arg("calibrate")
                .arg("--train")
                .arg(path("train.jsonl"))
                .arg("--test")
                .arg(path("test.jsonl"))
                .arg("--model-dir")
                .arg(path("models"))
                .arg("--output")
                .arg(path("comparison.json")),
        );
        let comparison = std::fs::read_to_string(path("comparison.json")).unwrap();
        assert!(comparison.contains("\"platt\""));
        assert!(path("models").join("platt.json").exists());
        assert!(path("reliability.svg").exists());

        // simulate --profile attenuation → regress.
        run_ok(
            tolcal()
                .args(["simulate", "--profile", "attenuation", "--days", "80", "--seed", "9"])
                .arg("--covariate-out")
                .arg(path("covariate.csv"))
                .arg("--out")
                .arg(path("sentences.jsonl")),
        );
        run_ok(
            tolcal()
                .arg("regress")
                .arg(path("sentences.jsonl"))
                .arg("--covariate")
                .arg(path("covariate.csv"))
                .args(["--threshold", "90"])
                .arg("--output")
                .arg(path("regression.json")),
        );
        let regression = std::fs::read_to_string(path("regression.json")).unwrap();
        assert!(regression.contains("\"unfiltered\""));
        assert!(regression.contains("\"filtered\""));

        // elicit against a local mock server, then audit what came back.
        let replies: Vec<MockReply> = (0..6)
            .map(|i| {
                MockReply::Content(tolcal_core::elicit::response_json(
                    "formality",
                    40 + 5 * i,
                    Some(70),
                ))
            })
            .collect();
        let fallback = MockReply::Content(tolcal_core::elicit::response_json(
            "formality",
            50,
            Some(70),
        ));
        let server = MockChatServer::start(replies, fallback);

        let texts = path("texts.jsonl");
        {
            let mut f = std::fs::File::create(&texts).unwrap();
            for i in 0..6 {
                writeln!(
                    f,
                    "{{\"id\":\"t{i}\",\"text\":\"sample text {i}\",\"y_true\":{}}}",
                    40 + 5 * i
                )
                .unwrap();
            }
        }
        run_ok(
            tolcal()
                .arg("elicit")
                .arg(&texts)
                .args([
                    "--attribute",
                    "formality",
                    "--definition",
                    "use of formal register",
                    "--endpoint",
                ])
                .arg(server.url())
                .args(["--model", "mock-model", "--key-env", "TOLCAL_ACCEPT_KEY"])
                .args(["--concurrency", "1"])
                .arg("--out")
                .arg(path("elicited.jsonl"))
                .env("TOLCAL_ACCEPT_KEY", "sk-acceptance-000"),
        );
        run_ok(
            tolcal()
                .arg("audit")
                .arg(path("elicited.jsonl"))
                .args(["--epsilon", "10", "--bins", "10"]),
        );
        assert!(server.hits() >= 6);
    });
}
