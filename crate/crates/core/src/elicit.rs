//! HTTP elicitation of (score, confidence) measurements.
//!
//! Sends rating prompts to a chat-completions-style endpoint and parses the
//! model's JSON reply into [`MeasurementRecord`]s. Two modes: `Verbal` asks
//! the model for its own accuracy estimate alongside the rating; `Resampling`
//! gathers several independent ratings per text and derives confidence from
//! their spread via the resampling proxy.
//!
//! The API key is read from the environment variable named in the config at
//! call time. It is sent only in the Authorization header — never logged,
//! never stored on any type here, never serialized.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::dataset::{Dataset, MeasurementRecord};
use crate::error::{Error, Result};
use crate::proxies::resampling_confidence;

/// Connection settings and sampling parameters for elicitation.
#[derive(Debug, Clone, PartialEq)]
pub struct ElicitConfig {
    pub endpoint_url: String,
    /// Name of the environment variable holding the API key. Only the name
    /// is ever stored or printed.
    pub api_key_env_var: String,
    pub model_name: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Retries per request on transient failures (0 = a single attempt).
    pub retries: u32,
    /// Ratings gathered per text in resampling mode.
    pub resamples: usize,
    /// Maximum in-flight requests.
    pub concurrency: usize,
    /// Base backoff; attempt k sleeps `backoff_ms << k`.
    pub backoff_ms: u64,
}

impl ElicitConfig {
    /// Config with the documented sampling defaults: temperature 1.0,
    /// top_p 1.0, max_tokens 4096, 3 retries, 20 resamples, 4-way
    /// concurrency, 250 ms base backoff.
    pub fn new(
        endpoint_url: impl Into<String>,
        api_key_env_var: impl Into<String>,
        model_name: impl Into<String>,
    ) -> Self {
        ElicitConfig {
            endpoint_url: endpoint_url.into(),
            api_key_env_var: api_key_env_var.into(),
            model_name: model_name.into(),
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: 4096,
            retries: 3,
            resamples: 20,
            concurrency: 4,
            backoff_ms: 250,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("endpoint_url", &self.endpoint_url),
            ("api_key_env_var", &self.api_key_env_var),
            ("model_name", &self.model_name),
        ] {
            if value.trim().is_empty() {
                return Err(Error::InvalidInput(format!("{name} must not be empty")));
            }
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::InvalidInput(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        if !self.top_p.is_finite() || self.top_p <= 0.0 || self.top_p > 1.0 {
            return Err(Error::InvalidInput(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidInput("max_tokens must be positive".into()));
        }
        if self.resamples == 0 {
            return Err(Error::InvalidInput("resamples must be at least 1".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::InvalidInput("concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

/// The attribute being measured: its JSON key, its definition shown to the
/// model, and the tolerance interpolated into the rating instructions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstructPrompt {
    attribute_name: String,
    definition_text: String,
    tolerance: f64,
}

impl ConstructPrompt {
    pub fn new(
        attribute_name: impl Into<String>,
        definition_text: impl Into<String>,
        tolerance: f64,
    ) -> Result<Self> {
        let attribute_name = attribute_name.into();
        let definition_text = definition_text.into();
        if attribute_name.trim().is_empty() || definition_text.trim().is_empty() {
            return Err(Error::InvalidInput(
                "attribute name and definition must not be empty".into(),
            ));
        }
        if !tolerance.is_finite() || tolerance <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "tolerance must be positive and finite, got {tolerance}"
            )));
        }
        Ok(ConstructPrompt {
            attribute_name,
            definition_text,
            tolerance,
        })
    }

    pub fn attribute_name(&self) -> &str {
        &self.attribute_name
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }
}

/// Renders the rating prompt for one text. With `with_confidence` the
/// prompt also asks for an `accuracy_estimate`: the probability (0-100)
/// that the rating lands within ±tolerance points of the true value.
pub fn build_prompt(text: &str, construct: &ConstructPrompt, with_confidence: bool) -> String {
    let attribute = &construct.attribute_name;
    let tolerance = construct.tolerance;
    let mut attributes = format!("{attribute}: {}", construct.definition_text);
    let mut skeleton = format!("  \"{attribute}\": rating");
    if with_confidence {
        attributes.push_str(&format!(
            "\naccuracy_estimate: What is the probability (0-100) that your prediction is \
             within ±{tolerance} points of the true value?"
        ));
        skeleton.push_str(",\n  \"accuracy_estimate\": rating");
    }
    format!(
        "{text}\n\
         Your task: for each attribute below, rate how strongly the provided content manifests it.\n\
         \n\
         BEGIN ATTRIBUTES\n\
         {attributes}\n\
         END ATTRIBUTES\n\
         \n\
         BEGIN RATING SCALE\n\
         Use integers 0-100 (inclusive). low = absent, high = extreme, mid = moderate.\n\
         Use the full range and every increment, do not round to 5s/10s.\n\
         Extremes are rare, use near 0 only if truly absent and near 100 only if overwhelming.\n\
         Use moderate intermediates (e.g., 19, 67, 32) to account for nuance where applicable.\n\
         Aim for the rating that serves as the optimal center for a ±{tolerance} point tolerance \
         interval, ensuring the highest probability of capturing the true intensity.\n\
         END RATING SCALE\n\
         \n\
         Method (per attribute) pick one exact integer. Stick to provided scale. Double check \
         before choosing extremes. Interpret gradations as absent → faint → moderate → abundant \
         → extreme. Don't overlook subtlety, don't default to extremes. Consider full spectrum, \
         including intermediate gradations. High accuracy/precision is critical, it needs deep, \
         holistic analysis of content.\n\
         \n\
         Rules:\n\
         - Judge each attribute independently and separately from each other\n\
         - Absolutely no indirect inference from other attributes or cross attribute leakage\n\
         - Only measure the direct signal of each attribute alone in the content, NOT what is \
         implied by other attributes, CRUCIAL each attribute measured independently on its own \
         direct, specifically relevant signal\n\
         \n\
         Output JSON only, in following format:\n\
         {{\n\
         {skeleton}\n\
         }}"
    )
}

/// Builds the reply JSON the parser expects — the inverse of
/// [`parse_response`] for integer scores and estimates.
pub fn response_json(attribute: &str, score: i64, accuracy_estimate: Option<i64>) -> String {
    let mut map = serde_json::Map::new();
    map.insert(attribute.to_string(), json!(score));
    if let Some(estimate) = accuracy_estimate {
        map.insert("accuracy_estimate".to_string(), json!(estimate));
    }
    Value::Object(map).to_string()
}

fn response_error(message: impl Into<String>, body: &str) -> Error {
    Error::ResponseFormat {
        message: message.into(),
        body: body.to_string(),
    }
}

fn numeric_field(map: &serde_json::Map<String, Value>, key: &str, body: &str) -> Result<f64> {
    let value = map
        .get(key)
        .ok_or_else(|| response_error(format!("reply has no {key:?} key"), body))?;
    let number = value
        .as_f64()
        .ok_or_else(|| response_error(format!("{key:?} is not a number: {value}"), body))?;
    if !number.is_finite() || !(0.0..=100.0).contains(&number) {
        return Err(response_error(
            format!("{key:?} value {number} outside [0, 100]"),
            body,
        ));
    }
    Ok(number)
}

/// Extracts the rating (and, when flagged, the accuracy estimate mapped to
/// [0, 1]) from a model reply. Takes the first parseable JSON object in the
/// body, so surrounding prose and code fences are tolerated.
pub fn parse_response(
    body: &str,
    attribute: &str,
    with_confidence: bool,
) -> Result<(f64, Option<f64>)> {
    let object = body
        .char_indices()
        .filter(|&(_, c)| c == '{')
        .find_map(|(start, _)| {
            match serde_json::Deserializer::from_str(&body[start..])
                .into_iter::<Value>()
                .next()
            {
                Some(Ok(Value::Object(map))) => Some(map),
                _ => None,
            }
        })
        .ok_or_else(|| response_error("no JSON object in reply", body))?;
    let score = numeric_field(&object, attribute, body)?;
    let confidence = if with_confidence {
        Some(numeric_field(&object, "accuracy_estimate", body)? / 100.0)
    } else {
        None
    };
    Ok((score, confidence))
}

/// One text to measure. `y_true` is the reference value the resulting
/// record is scored against.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ElicitInput {
    pub id: String,
    pub text: String,
    pub y_true: f64,
}

/// Reads elicitation inputs from JSONL lines of `{"id", "text", "y_true"}`.
pub fn load_inputs(path: &std::path::Path) -> Result<Vec<ElicitInput>> {
    use std::io::BufRead;
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut inputs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let input: ElicitInput = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx as u64 + 1,
            message: e.to_string(),
        })?;
        inputs.push(input);
    }
    Ok(inputs)
}

/// How confidence is obtained for each text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElicitMode {
    /// One request per text; the model reports its own accuracy estimate.
    Verbal,
    /// `resamples` rating-only requests per text; confidence comes from the
    /// spread of the samples, which are kept on the record.
    Resampling,
}

/// A text that could not be measured after all retries.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ElicitFailure {
    pub id: String,
    pub error: String,
}

/// Batch result: measured records plus per-id failures. Every input ends up
/// in exactly one of the two.
#[derive(Debug)]
pub struct ElicitOutcome {
    pub dataset: Dataset,
    pub failures: Vec<ElicitFailure>,
    /// Total retry sleeps performed across the batch.
    pub total_retries: u64,
}

fn transient_status(status: u16) -> bool {
    status == 408 || status == 429 || (500..600).contains(&status)
}

struct Session<'a> {
    client: reqwest::blocking::Client,
    cfg: &'a ElicitConfig,
    key: String,
    abort: AtomicBool,
    retries_used: AtomicU64,
}

impl Session<'_> {
    /// One request with retries and exponential backoff. Auth failures set
    /// the abort flag so other workers stop picking up new work.
    fn request(&self, prompt: &str) -> Result<String> {
        let payload = json!({
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "top_p": self.cfg.top_p,
            "max_tokens": self.cfg.max_tokens,
        });
        let mut attempt = 0u32;
        loop {
            let outcome = self.attempt_once(&payload);
            match outcome {
                Ok(content) => return Ok(content),
                Err(err) => {
                    let retryable = match &err {
                        Error::Auth(_) => {
                            self.abort.store(true, Ordering::SeqCst);
                            return Err(err);
                        }
                        Error::Http(_) | Error::ResponseFormat { .. } => true,
                        _ => false,
                    };
                    if !retryable || attempt >= self.cfg.retries || self.abort.load(Ordering::SeqCst)
                    {
                        return Err(err);
                    }
                    let sleep = self.cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                    std::thread::sleep(Duration::from_millis(sleep));
                    self.retries_used.fetch_add(1, Ordering::Relaxed);
                    attempt += 1;
                }
            }
        }
    }

    fn attempt_once(&self, payload: &Value) -> Result<String> {
        let response = self
            .client
            .post(&self.cfg.endpoint_url)
            .bearer_auth(&self.key)
            .json(payload)
            .send()
            .map_err(|e| Error::Http(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 401 || status == 403 {
            return Err(Error::Auth(format!(
                "endpoint rejected the key from ${} (HTTP {status})",
                self.cfg.api_key_env_var
            )));
        }
        let body = response.text().map_err(|e| Error::Http(e.to_string()))?;
        if transient_status(status) {
            return Err(Error::Http(format!("HTTP {status}: {body}")));
        }
        if !(200..300).contains(&status) {
            return Err(response_error(format!("HTTP {status}"), &body));
        }
        let value: Value = serde_json::from_str(&body)
            .map_err(|e| response_error(format!("reply is not JSON: {e}"), &body))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| response_error("reply has no choices[0].message.content", &body))
    }
}

fn measure_one(
    session: &Session<'_>,
    input: &ElicitInput,
    construct: &ConstructPrompt,
    mode: ElicitMode,
) -> Result<MeasurementRecord> {
    let mut record = match mode {
        ElicitMode::Verbal => {
            let prompt = build_prompt(&input.text, construct, true);
            let content = session.request(&prompt)?;
            let (score, confidence) =
                parse_response(&content, construct.attribute_name(), true)?;
            let confidence =
                confidence.expect("parse_response always yields confidence when flagged");
            MeasurementRecord::new(&input.id, input.y_true, score, confidence)
        }
        ElicitMode::Resampling => {
            let prompt = build_prompt(&input.text, construct, false);
            let mut samples = Vec::with_capacity(session.cfg.resamples);
            for _ in 0..session.cfg.resamples {
                let content = session.request(&prompt)?;
                let (score, _) = parse_response(&content, construct.attribute_name(), false)?;
                samples.push(score);
            }
            let proxy = resampling_confidence(&samples, construct.tolerance())?;
            let mut record =
                MeasurementRecord::new(&input.id, input.y_true, proxy.measurement, proxy.confidence);
            record.samples = Some(samples);
            record
        }
    };
    record.validate(100.0)?;
    record.id = input.id.clone();
    Ok(record)
}

/// Measures every input against the endpoint, with bounded concurrency.
/// Records come back in input order; texts that fail after all retries are
/// reported in `failures` instead of aborting the batch — except auth
/// failures, which abort immediately.
pub fn elicit_dataset(
    inputs: &[ElicitInput],
    construct: &ConstructPrompt,
    cfg: &ElicitConfig,
    mode: ElicitMode,
) -> Result<ElicitOutcome> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::EmptyInput("no texts to elicit".into()));
    }
    let key = std::env::var(&cfg.api_key_env_var).map_err(|_| {
        Error::Auth(format!(
            "environment variable {} is not set",
            cfg.api_key_env_var
        ))
    })?;
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(120))
        .build()
        .map_err(|e| Error::Http(e.to_string()))?;
    let session = Session {
        client,
        cfg,
        key,
        abort: AtomicBool::new(false),
        retries_used: AtomicU64::new(0),
    };

    let cursor = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<MeasurementRecord>>>> =
        Mutex::new((0..inputs.len()).map(|_| None).collect());
    let workers = cfg.concurrency.min(inputs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= inputs.len() || session.abort.load(Ordering::SeqCst) {
                    break;
                }
                let outcome = measure_one(&session, &inputs[i], construct, mode);
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });

    let results = results.into_inner().unwrap();
    if session.abort.load(Ordering::SeqCst) {
        let message = results
            .into_iter()
            .flatten()
            .find_map(|r| match r {
                Err(Error::Auth(message)) => Some(message),
                _ => None,
            })
            .unwrap_or_else(|| "authentication failed".to_string());
        return Err(Error::Auth(message));
    }

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (input, outcome) in inputs.iter().zip(results) {
        match outcome {
            Some(Ok(record)) => records.push(record),
            Some(Err(err)) => failures.push(ElicitFailure {
                id: input.id.clone(),
                error: err.to_string(),
            }),
            None => failures.push(ElicitFailure {
                id: input.id.clone(),
                error: "not attempted".to_string(),
            }),
        }
    }
    let dataset = Dataset::new("elicited", records)?;
    Ok(ElicitOutcome {
        dataset,
        failures,
        total_retries: session.retries_used.load(Ordering::Relaxed),
    })
}
