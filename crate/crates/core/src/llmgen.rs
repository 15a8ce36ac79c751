//! Feedback generation: chat-completion providers, retrying single generations, a resumable
//! checkpointed batch runner, and a deterministic mock provider for offline runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{FeedbackDocument, FeedbackItem, FeedbackKey, Variant};
use crate::promptgen::split_prompt;

/// File inside a checkpoint directory that records failed jobs.
pub const FAILURE_LOG: &str = "failures.jsonl";

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("server error {status}: {body}")]
    Server { status: u16, body: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request rejected: {0}")]
    Fatal(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProviderError::Transport(_)
                | ProviderError::RateLimited { .. }
                | ProviderError::Server { .. }
        )
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("provider config: {0}")]
    Config(String),
    #[error("fatal provider error for job {key}: {source}")]
    Fatal {
        key: FeedbackKey,
        #[source]
        source: ProviderError,
    },
    #[error("corrupt checkpoint {path}:{line}: {message}")]
    CorruptCheckpoint {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate job {0}")]
    DuplicateJob(FeedbackKey),
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn default_endpoint() -> String {
    "https://api.openai.com/v1/chat/completions".into()
}
fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_temperature() -> f64 {
    1.0
}
fn default_concurrency() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}
fn default_max_tokens() -> u32 {
    4096
}
fn default_true() -> bool {
    true
}
fn default_backoff_base() -> u64 {
    500
}
fn default_backoff_max() -> u64 {
    30_000
}
fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    /// `mock`, or any label for an OpenAI-compatible endpoint (`openai`, `groq`, ...).
    pub provider_id: String,
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
    pub model_id: String,
    /// Name of the environment variable holding the API key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_concurrency")]
    pub max_concurrent: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Send the instruction block as a system message and the quoted material as the user turn.
    #[serde(default = "default_true")]
    pub instruction_as_system: bool,
    #[serde(default = "default_backoff_base")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_max")]
    pub backoff_max_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub mock: Option<MockSettings>,
}

impl ProviderConfig {
    pub fn mock(model_id: &str, settings: MockSettings) -> Self {
        ProviderConfig {
            provider_id: "mock".into(),
            endpoint: String::new(),
            model_id: model_id.into(),
            api_key_env: String::new(),
            temperature: default_temperature(),
            max_concurrent: default_concurrency(),
            max_retries: default_retries(),
            max_tokens: default_max_tokens(),
            instruction_as_system: true,
            backoff_base_ms: 0,
            backoff_max_ms: 0,
            timeout_secs: default_timeout(),
            mock: Some(settings),
        }
    }

    pub fn from_toml(src: &str) -> Result<Self, LlmError> {
        let cfg: ProviderConfig =
            toml::from_str(src).map_err(|e| LlmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let src = fs::read_to_string(path)
            .map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&src)
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.max_concurrent == 0 {
            return Err(LlmError::Config("max_concurrent must be at least 1".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(LlmError::Config("model_id is empty".into()));
        }
        if self.provider_id == "mock" && self.mock.is_none() {
            return Err(LlmError::Config(
                "mock provider needs a [mock] table".into(),
            ));
        }
        Ok(())
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.backoff_max_ms);
        Duration::from_millis(ms)
    }

    /// Builds the provider this config describes.
    pub fn build_provider(&self) -> Result<Box<dyn Provider>, LlmError> {
        self.validate()?;
        if self.provider_id == "mock" {
            let settings = self.mock.clone().expect("validated");
            Ok(Box::new(MockProvider::new(&self.model_id, settings)?))
        } else {
            Ok(Box::new(ChatCompletionProvider::from_env(self)?))
        }
    }
}

/// A chat model that turns a prompt into a raw text response.
pub trait Provider: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String, ProviderError>;
}

impl<P: Provider + ?Sized> Provider for &P {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        (**self).complete(prompt)
    }
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        (**self).complete(prompt)
    }
}

/// OpenAI-style `/chat/completions` client.
pub struct ChatCompletionProvider {
    agent: ureq::Agent,
    endpoint: String,
    model_id: String,
    api_key: String,
    temperature: f64,
    max_tokens: u32,
    instruction_as_system: bool,
}

impl ChatCompletionProvider {
    pub fn from_env(config: &ProviderConfig) -> Result<Self, LlmError> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            LlmError::Config(format!(
                "environment variable {} is not set",
                config.api_key_env
            ))
        })?;
        Ok(Self::with_key(config, api_key))
    }

    pub fn with_key(config: &ProviderConfig, api_key: String) -> Self {
        let agent = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .http_status_as_error(false)
                .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
                .build(),
        );
        ChatCompletionProvider {
            agent,
            endpoint: config.endpoint.clone(),
            model_id: config.model_id.clone(),
            api_key,
            temperature: config.temperature,
            max_tokens: config.max_tokens,
            instruction_as_system: config.instruction_as_system,
        }
    }

    fn request_body(&self, prompt: &str) -> Value {
        let messages = match (self.instruction_as_system, split_prompt(prompt)) {
            (true, (system, user)) if !user.is_empty() => json!([
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ]),
            _ => json!([{"role": "user", "content": prompt}]),
        };
        json!({
            "model": self.model_id,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
    }
}

impl Provider for ChatCompletionProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(self.request_body(prompt))
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .map(Duration::from_secs_f64);
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(ProviderError::Auth(body)),
            429 => return Err(ProviderError::RateLimited { retry_after }),
            500..=599 => return Err(ProviderError::Server { status, body }),
            _ => return Err(ProviderError::Fatal(format!("HTTP {status}: {body}"))),
        }
        let parsed: Value = serde_json::from_str(&body)
            .map_err(|e| ProviderError::Transport(format!("invalid response envelope: {e}")))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Transport("response has no message content".into()))
    }
}

/// Conditional reweighting: applied when the prompt contains `when_contains`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub when_contains: String,
    pub boost: BTreeMap<String, f64>,
}

fn default_items() -> (usize, usize) {
    (3, 6)
}
fn default_words() -> (usize, usize) {
    (8, 14)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSettings {
    pub seed: u64,
    /// Multiplicative weights applied to every response.
    #[serde(default)]
    pub bias_profile: BTreeMap<String, f64>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Inclusive range of feedback items per response.
    #[serde(default = "default_items")]
    pub items: (usize, usize),
    /// Inclusive range of words per comment.
    #[serde(default = "default_words")]
    pub words: (usize, usize),
    /// Base vocabulary with weights; the built-in list when absent.
    #[serde(default)]
    pub vocabulary: Option<Vec<(String, f64)>>,
}

impl MockSettings {
    pub fn new(seed: u64) -> Self {
        MockSettings {
            seed,
            bias_profile: BTreeMap::new(),
            rules: Vec::new(),
            items: default_items(),
            words: default_words(),
            vocabulary: None,
        }
    }
}

/// Built-in mock vocabulary in descending frequency order.
pub const MOCK_VOCABULARY: &[&str] = &[
    "the",
    "to",
    "and",
    "your",
    "this",
    "a",
    "of",
    "you",
    "is",
    "in",
    "that",
    "it",
    "for",
    "be",
    "can",
    "more",
    "on",
    "with",
    "as",
    "are",
    "about",
    "how",
    "consider",
    "sentence",
    "point",
    "argument",
    "example",
    "idea",
    "could",
    "would",
    "try",
    "evidence",
    "reader",
    "claim",
    "make",
    "good",
    "specific",
    "explain",
    "support",
    "clear",
    "detail",
    "paragraph",
    "great",
    "strong",
    "add",
    "reason",
    "words",
    "adding",
    "use",
    "why",
    "essay",
    "help",
    "writing",
    "think",
    "here",
    "start",
    "nice",
    "work",
    "show",
    "better",
    "really",
    "also",
    "statement",
    "focus",
    "provide",
    "include",
    "might",
    "should",
    "using",
    "instead",
    "check",
    "spelling",
    "grammar",
    "correct",
    "error",
    "unclear",
    "vague",
    "remember",
    "please",
    "proofread",
    "structure",
    "conclusion",
    "introduction",
    "transition",
    "connect",
    "expand",
    "strengthen",
    "enhance",
    "further",
    "potential",
    "compelling",
    "effectively",
    "depth",
    "emphasize",
    "tone",
    "discuss",
    "demonstrate",
    "nuanced",
    "exploring",
    "expanding",
    "impact",
    "formal",
    "language",
    "word",
    "vocabulary",
    "english",
    "understand",
    "sound",
    "verb",
    "apostrophe",
    "contraction",
    "tense",
    "plural",
    "mistake",
    "form",
    "clearer",
    "let's",
    "we",
    "easier",
    "shorter",
    "simpler",
    "follow",
    "careful",
    "catch",
    "long",
    "rephrasing",
    "revising",
    "feel",
    "abrupt",
    "analysis",
    "seems",
    "directly",
    "address",
    "benefit",
    "counterargument",
    "reasoning",
    "perspective",
    "experience",
    "community",
    "culture",
    "family",
    "identity",
    "voice",
    "story",
    "personal",
    "background",
    "leader",
    "social",
    "systemic",
    "peer",
    "respectful",
    "mindful",
    "polished",
    "academic",
    "excited",
    "love",
    "awesome",
    "keep",
    "going",
    "effort",
    "proud",
    "improve",
    "practice",
    "revise",
    "organize",
    "logical",
    "precise",
    "concise",
    "audience",
    "purpose",
    "position",
    "opinion",
    "fact",
    "source",
    "article",
    "quote",
    "cite",
    "summarize",
    "clarify",
    "elaborate",
    "develop",
    "rephrase",
    "strengthening",
    "compelling",
    "thoughtful",
    "insightful",
    "interesting",
    "engaging",
];

fn default_vocabulary() -> Vec<(String, f64)> {
    let mut seen = BTreeSet::new();
    MOCK_VOCABULARY
        .iter()
        .filter(|w| seen.insert(**w))
        .enumerate()
        .map(|(rank, w)| (w.to_string(), 1.0 / (rank as f64 + 10.0)))
        .collect()
}

/// Emits well-formed feedback JSON whose comment words are sampled from a weighted
/// vocabulary. Output depends only on `(seed, prompt)`.
#[derive(Debug, Clone)]
pub struct MockProvider {
    model_id: String,
    settings: MockSettings,
    words: Vec<String>,
    base: Vec<f64>,
    position: HashMap<String, usize>,
}

impl MockProvider {
    pub fn new(model_id: &str, settings: MockSettings) -> Result<Self, LlmError> {
        let weights_ok = |m: &BTreeMap<String, f64>| m.values().all(|w| w.is_finite() && *w > 0.0);
        if !weights_ok(&settings.bias_profile)
            || !settings.rules.iter().all(|r| weights_ok(&r.boost))
        {
            return Err(LlmError::Config("mock weights must be positive".into()));
        }
        let (imin, imax) = settings.items;
        let (wmin, wmax) = settings.words;
        if imin == 0 || imin > imax || wmin == 0 || wmin > wmax {
            return Err(LlmError::Config(
                "mock item/word ranges must be non-empty".into(),
            ));
        }
        let vocab = settings
            .vocabulary
            .clone()
            .unwrap_or_else(default_vocabulary);
        if vocab.is_empty() || vocab.iter().any(|(_, w)| !(w.is_finite() && *w > 0.0)) {
            return Err(LlmError::Config(
                "mock vocabulary weights must be positive".into(),
            ));
        }
        let mut words: Vec<String> = Vec::with_capacity(vocab.len());
        let mut base: Vec<f64> = Vec::with_capacity(vocab.len());
        let mut position = HashMap::new();
        for (w, weight) in vocab {
            if position.contains_key(&w) {
                continue;
            }
            position.insert(w.clone(), words.len());
            words.push(w);
            base.push(weight);
        }
        // Profile words absent from the vocabulary enter at the median base weight.
        let mut sorted = base.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let extra: BTreeSet<&String> = settings
            .bias_profile
            .keys()
            .chain(settings.rules.iter().flat_map(|r| r.boost.keys()))
            .filter(|w| !position.contains_key(*w))
            .collect();
        for w in extra {
            position.insert(w.clone(), words.len());
            words.push(w.clone());
            base.push(median);
        }
        Ok(MockProvider {
            model_id: model_id.into(),
            settings,
            words,
            base,
            position,
        })
    }

    /// Sampling weights in effect for a prompt.
    pub fn weights_for(&self, prompt: &str) -> Vec<f64> {
        let mut w = self.base.clone();
        let active = std::iter::once(&self.settings.bias_profile).chain(
            self.settings
                .rules
                .iter()
                .filter(|r| prompt.contains(&r.when_contains))
                .map(|r| &r.boost),
        );
        for profile in active {
            for (word, factor) in profile {
                w[self.position[word]] *= factor;
            }
        }
        w
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.words
    }

    fn rng_for(&self, prompt: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.settings.seed.to_le_bytes());
        h.update(self.model_id.as_bytes());
        h.update([0u8]);
        h.update(prompt.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

fn essay_words(prompt: &str) -> Vec<&str> {
    let body = prompt
        .rsplit_once("\"\"\"")
        .and_then(|(head, _)| head.rsplit_once("\"\"\""))
        .map_or(prompt, |(_, essay)| essay);
    body.split_whitespace().collect()
}

impl Provider for MockProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let mut rng = self.rng_for(prompt);
        let dist = WeightedIndex::new(self.weights_for(prompt))
            .map_err(|e| ProviderError::Fatal(e.to_string()))?;
        let essay = essay_words(prompt);
        let n_items = rng.random_range(self.settings.items.0..=self.settings.items.1);
        let mut items = Vec::with_capacity(n_items);
        for _ in 0..n_items {
            let excerpt = if essay.is_empty() {
                String::new()
            } else {
                let start = rng.random_range(0..essay.len());
                let end = (start + 6).min(essay.len());
                essay[start..end].join(" ")
            };
            let n_words = rng.random_range(self.settings.words.0..=self.settings.words.1);
            let mut comment = String::new();
            for k in 0..n_words {
                let w = &self.words[dist.sample(&mut rng)];
                if k == 0 {
                    let mut cs = w.chars();
                    if let Some(c) = cs.next() {
                        comment.extend(c.to_uppercase());
                        comment.push_str(cs.as_str());
                    }
                } else {
                    comment.push(' ');
                    comment.push_str(w);
                }
            }
            comment.push('.');
            items.push(json!({"excerpt": excerpt, "comment": comment}));
        }
        Ok(Value::Array(items).to_string())
    }
}

/// A mock provider with the built-in vocabulary reweighted by `bias_profile`.
pub fn mock_provider(
    bias_profile: BTreeMap<String, f64>,
    seed: u64,
) -> Result<MockProvider, LlmError> {
    let mut settings = MockSettings::new(seed);
    settings.bias_profile = bias_profile;
    MockProvider::new("mock", settings)
}

/// Counts requests and tracks the in-flight high-water mark; can simulate an interruption
/// by failing fatally once a request budget is spent.
pub struct RecordingProvider<P> {
    inner: P,
    requests: AtomicUsize,
    in_flight: AtomicUsize,
    high_water: AtomicUsize,
    fail_after: Option<usize>,
    delay: Duration,
}

impl<P: Provider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        RecordingProvider {
            inner,
            requests: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            high_water: AtomicUsize::new(0),
            fail_after: None,
            delay: Duration::ZERO,
        }
    }

    /// Requests beyond the first `n` fail with an authentication error.
    pub fn fail_after(mut self, n: usize) -> Self {
        self.fail_after = Some(n);
        self
    }

    /// Holds each request open for `d`, so overlapping requests become observable.
    pub fn with_delay(mut self, d: Duration) -> Self {
        self.delay = d;
        self
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }
}

impl<P: Provider> Provider for RecordingProvider<P> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let n = self.requests.fetch_add(1, Ordering::SeqCst);
        if self.fail_after.is_some_and(|limit| n >= limit) {
            return Err(ProviderError::Auth("simulated interruption".into()));
        }
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.high_water.fetch_max(now, Ordering::SeqCst);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let out = self.inner.complete(prompt);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationJob {
    pub essay_id: String,
    pub attribute: String,
    pub variant: Variant,
    pub model_id: String,
    pub prompt: String,
    /// Student name for name-only prompts.
    pub name: Option<String>,
    pub status: JobStatus,
}

impl GenerationJob {
    pub fn new(
        essay_id: &str,
        attribute: &str,
        variant: Variant,
        model_id: &str,
        prompt: String,
    ) -> Self {
        GenerationJob {
            essay_id: essay_id.into(),
            attribute: attribute.into(),
            variant,
            model_id: model_id.into(),
            prompt,
            name: None,
            status: JobStatus::Pending,
        }
    }

    pub fn key(&self) -> FeedbackKey {
        FeedbackKey {
            essay_id: self.essay_id.clone(),
            attribute: self.attribute.clone(),
            variant: self.variant,
            model_id: self.model_id.clone(),
        }
    }

    /// Moves a pending job to a terminal state. Terminal states never change.
    pub fn resolve(&mut self, status: JobStatus) -> bool {
        if self.status == JobStatus::Pending && status != JobStatus::Pending {
            self.status = status;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedJob {
    pub essay_id: String,
    pub attribute: String,
    pub variant: Variant,
    pub model_id: String,
    pub raw_response: String,
    pub reason: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JobOutcome {
    Done(FeedbackDocument),
    Failed(FailedJob),
}

/// Pulls a JSON array of `{excerpt, comment}` objects out of a model response: the whole body
/// first, then the largest bracketed substring that parses. Returns the items and the number of
/// elements dropped for lacking a comment.
pub fn extract_items(raw: &str) -> Result<(Vec<FeedbackItem>, usize), String> {
    if let Ok(v) = serde_json::from_str::<Value>(raw.trim()) {
        let arr = match v {
            Value::Array(a) => Some(a),
            Value::Object(mut o) => {
                let arrays: Vec<String> = o
                    .iter()
                    .filter(|(_, v)| v.is_array())
                    .map(|(k, _)| k.clone())
                    .collect();
                match arrays.as_slice() {
                    [only] => o.remove(only).and_then(|v| match v {
                        Value::Array(a) => Some(a),
                        _ => None,
                    }),
                    _ => None,
                }
            }
            _ => None,
        };
        if let Some(arr) = arr {
            return items_from_array(arr);
        }
    }
    const MAX_CANDIDATES: usize = 64;
    let starts: Vec<usize> = raw
        .match_indices('[')
        .map(|(i, _)| i)
        .take(MAX_CANDIDATES)
        .collect();
    let ends: Vec<usize> = raw
        .rmatch_indices(']')
        .map(|(i, _)| i)
        .take(MAX_CANDIDATES)
        .collect();
    let mut spans: Vec<(usize, usize)> = starts
        .iter()
        .flat_map(|&s| ends.iter().filter(move |&&e| e > s).map(move |&e| (s, e)))
        .collect();
    spans.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));
    for (s, e) in spans {
        if let Ok(Value::Array(arr)) = serde_json::from_str::<Value>(&raw[s..=e]) {
            if let Ok(found) = items_from_array(arr) {
                return Ok(found);
            }
        }
    }
    Err("no JSON array of feedback items found".into())
}

fn items_from_array(arr: Vec<Value>) -> Result<(Vec<FeedbackItem>, usize), String> {
    let total = arr.len();
    let items: Vec<FeedbackItem> = arr
        .into_iter()
        .filter_map(|v| {
            let comment = v.get("comment")?.as_str()?.trim().to_string();
            if comment.is_empty() {
                return None;
            }
            let excerpt = v
                .get("excerpt")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            Some(FeedbackItem { excerpt, comment })
        })
        .collect();
    if total > 0 && items.is_empty() {
        return Err("array elements lack comment fields".into());
    }
    Ok((items.clone(), total - items.len()))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Generates one document, retrying transport errors, rate limits and unparseable responses up
/// to `max_retries` times. Authentication and other non-retryable errors are returned as `Err`.
pub fn generate_feedback(
    job: &GenerationJob,
    provider: &dyn Provider,
    config: &ProviderConfig,
) -> Result<JobOutcome, LlmError> {
    let mut attempt: u32 = 0;
    let mut last_raw = String::new();
    loop {
        let reason = match provider.complete(&job.prompt) {
            Ok(raw) => match extract_items(&raw) {
                Ok((items, dropped)) => {
                    let mut meta = BTreeMap::new();
                    meta.insert("timestamp_unix".into(), json!(unix_now()));
                    meta.insert("provider_id".into(), json!(config.provider_id));
                    meta.insert("temperature".into(), json!(config.temperature));
                    meta.insert("max_tokens".into(), json!(config.max_tokens));
                    meta.insert("retries".into(), json!(attempt));
                    if let Some(name) = &job.name {
                        meta.insert("name".into(), json!(name));
                    }
                    if items.is_empty() {
                        log::warn!("{}: empty feedback array", job.key());
                        meta.insert("warning".into(), json!("empty_response"));
                    }
                    if dropped > 0 {
                        meta.insert("dropped_items".into(), json!(dropped));
                    }
                    return Ok(JobOutcome::Done(FeedbackDocument {
                        essay_id: job.essay_id.clone(),
                        attribute: job.attribute.clone(),
                        variant: job.variant,
                        model_id: job.model_id.clone(),
                        items,
                        raw_response: raw,
                        generation_meta: meta,
                    }));
                }
                Err(e) => {
                    last_raw = raw;
                    format!("unparseable response: {e}")
                }
            },
            Err(e) if e.is_retryable() => {
                if attempt < config.max_retries {
                    let wait = match &e {
                        ProviderError::RateLimited {
                            retry_after: Some(d),
                        } => (*d).min(Duration::from_millis(config.backoff_max_ms)),
                        _ => config.backoff(attempt),
                    };
                    log::debug!("{}: {e}; retrying in {wait:?}", job.key());
                    std::thread::sleep(wait);
                }
                e.to_string()
            }
            Err(source) => {
                return Err(LlmError::Fatal {
                    key: job.key(),
                    source,
                })
            }
        };
        if attempt >= config.max_retries {
            log::warn!(
                "{}: failed after {} attempt(s): {reason}",
                job.key(),
                attempt + 1
            );
            return Ok(JobOutcome::Failed(FailedJob {
                essay_id: job.essay_id.clone(),
                attribute: job.attribute.clone(),
                variant: job.variant,
                model_id: job.model_id.clone(),
                raw_response: last_raw,
                reason,
                attempts: attempt + 1,
            }));
        }
        attempt += 1;
    }
}

fn sanitize(part: &str) -> String {
    part.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Checkpoint file for one (model, attribute, variant) cell.
pub fn checkpoint_file(dir: &Path, model_id: &str, attribute: &str, variant: Variant) -> PathBuf {
    dir.join(format!(
        "{}__{}__{}.jsonl",
        sanitize(model_id),
        sanitize(attribute),
        variant
    ))
}

/// Reads every completed document in a checkpoint directory.
pub fn read_checkpoints(dir: &Path) -> Result<BTreeMap<FeedbackKey, FeedbackDocument>, LlmError> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| LlmError::Io { path, source }
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "jsonl")
                && p.file_name().is_some_and(|n| n != FAILURE_LOG)
        })
        .collect();
    files.sort();
    for path in files {
        let reader = BufReader::new(File::open(&path).map_err(io(&path))?);
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: FeedbackDocument =
                serde_json::from_str(&line).map_err(|e| LlmError::CorruptCheckpoint {
                    path: path.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            out.insert(doc.key(), doc);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct BatchOutcome {
    /// Documents for the requested jobs, sorted by key.
    pub documents: Vec<FeedbackDocument>,
    pub failed: Vec<FailedJob>,
    /// Jobs answered from the checkpoint without a request.
    pub resumed: usize,
}

struct CheckpointWriter {
    dir: PathBuf,
    files: HashMap<PathBuf, File>,
}

impl CheckpointWriter {
    fn append<T: Serialize>(&mut self, path: PathBuf, row: &T) -> Result<(), LlmError> {
        let file = match self.files.entry(path.clone()) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => e.insert(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|source| LlmError::Io {
                        path: path.clone(),
                        source,
                    })?,
            ),
        };
        let line = serde_json::to_string(row).expect("rows serialize");
        writeln!(file, "{line}")
            .and_then(|_| file.flush())
            .map_err(|source| LlmError::Io { path, source })
    }

    fn done(&mut self, doc: &FeedbackDocument) -> Result<(), LlmError> {
        let path = checkpoint_file(&self.dir, &doc.model_id, &doc.attribute, doc.variant);
        self.append(path, doc)
    }

    fn failed(&mut self, f: &FailedJob) -> Result<(), LlmError> {
        let path = self.dir.join(FAILURE_LOG);
        self.append(path, f)
    }
}

/// Resolves every job, skipping those already in `checkpoint_dir`. Completed documents are
/// appended to the checkpoint as they arrive through a single writer; at most
/// `config.max_concurrent` requests are in flight. A fatal provider error stops new requests,
/// keeps what was persisted, and is returned.
pub fn run_batch(
    jobs: &mut [GenerationJob],
    provider: &dyn Provider,
    config: &ProviderConfig,
    checkpoint_dir: &Path,
) -> Result<BatchOutcome, LlmError> {
    config.validate()?;
    fs::create_dir_all(checkpoint_dir).map_err(|source| LlmError::Io {
        path: checkpoint_dir.to_path_buf(),
        source,
    })?;
    let mut seen = BTreeSet::new();
    for j in jobs.iter() {
        if !seen.insert(j.key()) {
            return Err(LlmError::DuplicateJob(j.key()));
        }
    }
    let existing = read_checkpoints(checkpoint_dir)?;
    let mut documents: Vec<FeedbackDocument> = Vec::new();
    let mut pending: Vec<usize> = Vec::new();
    for (i, job) in jobs.iter_mut().enumerate() {
        match existing.get(&job.key()) {
            Some(doc) => {
                documents.push(doc.clone());
                job.resolve(JobStatus::Done);
            }
            None => pending.push(i),
        }
    }
    let resumed = documents.len();
    if resumed > 0 {
        log::info!("resuming: {resumed} job(s) already checkpointed");
    }

    let mut writer = CheckpointWriter {
        dir: checkpoint_dir.to_path_buf(),
        files: HashMap::new(),
    };
    let mut failed = Vec::new();
    let mut fatal: Option<LlmError> = None;
    let mut write_error: Option<LlmError> = None;
    let mut statuses: Vec<(usize, JobStatus)> = Vec::new();
    {
        let jobs_ro: &[GenerationJob] = jobs;
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let (tx, rx) = mpsc::channel::<(usize, Result<JobOutcome, LlmError>)>();
        let workers = config.max_concurrent.min(pending.len());
        let pending = &pending;
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let tx = tx.clone();
                let (next, stop) = (&next, &stop);
                scope.spawn(move || loop {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&idx) = pending.get(k) else { break };
                    let outcome = generate_feedback(&jobs_ro[idx], provider, config);
                    if outcome.is_err() {
                        stop.store(true, Ordering::SeqCst);
                    }
                    if tx.send((idx, outcome)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for (idx, outcome) in rx.iter() {
                match outcome {
                    Ok(JobOutcome::Done(doc)) => {
                        if let Err(e) = writer.done(&doc) {
                            stop.store(true, Ordering::SeqCst);
                            write_error.get_or_insert(e);
                            continue;
                        }
                        statuses.push((idx, JobStatus::Done));
                        documents.push(doc);
                    }
                    Ok(JobOutcome::Failed(f)) => {
                        if let Err(e) = writer.failed(&f) {
                            stop.store(true, Ordering::SeqCst);
                            write_error.get_or_insert(e);
                            continue;
                        }
                        statuses.push((idx, JobStatus::Failed));
                        failed.push(f);
                    }
                    Err(e) => {
                        fatal.get_or_insert(e);
                    }
                }
            }
        });
    }
    for (idx, status) in statuses {
        jobs[idx].resolve(status);
    }
    if let Some(e) = write_error.or(fatal) {
        return Err(e);
    }
    if !failed.is_empty() {
        log::warn!(
            "{} job(s) failed and are excluded from the corpus",
            failed.len()
        );
    }
    documents.sort_by_key(FeedbackDocument::key);
    failed.sort_by(|a, b| {
        (&a.essay_id, &a.attribute, a.variant, &a.model_id).cmp(&(
            &b.essay_id,
            &b.attribute,
            b.variant,
            &b.model_id,
        ))
    });
    Ok(BatchOutcome {
        documents,
        failed,
        resumed,
    })
}
