//! Text generation backends: a chat-completions HTTP client, a scripted mock
//! for offline runs, bounded-concurrency batching, and an append-only
//! response cache for resumable experiments.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::prompt::{AssembledPrompt, TemplateMode};

pub const ENV_ENDPOINT: &str = "CONOTE_ENDPOINT";
pub const ENV_API_KEY: &str = "CONOTE_API_KEY";
pub const ENV_ORGANIZATION: &str = "CONOTE_ORGANIZATION";

pub const DEFAULT_MAX_TOKENS_CON: u32 = 512;
pub const DEFAULT_MAX_TOKENS_STANDARD: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: AssembledPrompt,
    pub max_new_tokens: u32,
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
    pub model_name: String,
}

impl GenerationRequest {
    /// Greedy request with the token budget for the prompt's mode.
    pub fn new(prompt: AssembledPrompt, model_name: impl Into<String>) -> Self {
        let max_new_tokens = match prompt.mode {
            TemplateMode::Standard => DEFAULT_MAX_TOKENS_STANDARD,
            TemplateMode::Con | TemplateMode::NoteCollection => DEFAULT_MAX_TOKENS_CON,
        };
        Self {
            prompt,
            max_new_tokens,
            temperature: 0.0,
            stop_sequences: Vec::new(),
            model_name: model_name.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens < 1 {
            return Err(Error::InvalidInput("max_new_tokens must be ≥ 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidInput("temperature must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn params_digest(&self) -> String {
        let canonical = json!({
            "max_new_tokens": self.max_new_tokens,
            "temperature": self.temperature,
            "stop_sequences": self.stop_sequences,
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    /// Present iff `finish_reason` is not `Error`.
    pub text: Option<String>,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    pub backend_id: String,
    /// Requests sent, including retries. Zero for cache hits.
    #[serde(default)]
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl GenerationResponse {
    pub fn success(
        text: String,
        finish_reason: FinishReason,
        backend_id: &str,
        latency_ms: u64,
    ) -> Self {
        debug_assert_ne!(finish_reason, FinishReason::Error);
        Self {
            text: Some(text),
            finish_reason,
            latency_ms,
            backend_id: backend_id.to_owned(),
            attempts: 1,
            error: None,
        }
    }

    pub fn failure(message: String, backend_id: &str, latency_ms: u64, attempts: u32) -> Self {
        Self {
            text: None,
            finish_reason: FinishReason::Error,
            latency_ms,
            backend_id: backend_id.to_owned(),
            attempts,
            error: Some(message),
        }
    }

    pub fn is_error(&self) -> bool {
        self.finish_reason == FinishReason::Error
    }
}

/// A text generator. `Err` is reserved for non-retryable failures; retry
/// exhaustion is reported as a response with `FinishReason::Error`.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse> {
        (**self).generate(req)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse> {
        (**self).generate(req)
    }
}

// --- HTTP chat-completions backend ---

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Full chat-completions URL, e.g. `https://api.openai.com/v1/chat/completions`.
    pub endpoint: String,
    pub api_key: String,
    pub organization: Option<String>,
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            organization: None,
            max_attempts: 5,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(30),
            timeout: Duration::from_secs(120),
        }
    }

    /// Reads the endpoint, key and optional organization from the environment.
    /// `endpoint_override` takes precedence over the endpoint variable.
    pub fn from_env(endpoint_override: Option<&str>) -> Result<Self> {
        let endpoint = match endpoint_override {
            Some(e) => e.to_owned(),
            None => std::env::var(ENV_ENDPOINT)
                .map_err(|_| Error::Config(format!("{ENV_ENDPOINT} is not set")))?,
        };
        let api_key = std::env::var(ENV_API_KEY)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| {
                Error::Config(format!("missing credential: {ENV_API_KEY} is not set"))
            })?;
        let mut cfg = Self::new(endpoint, api_key);
        cfg.organization = std::env::var(ENV_ORGANIZATION)
            .ok()
            .filter(|o| !o.is_empty());
        Ok(cfg)
    }

    /// Delay before retry number `retry` (1-based): `initial · 2^(retry-1)`, capped.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.saturating_sub(1));
        self.initial_backoff
            .saturating_mul(factor)
            .min(self.max_backoff)
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    id: String,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

fn is_retryable_status(status: u16) -> bool {
    matches!(status, 408 | 409 | 425 | 429 | 500 | 502 | 503 | 504)
}

fn excerpt(body: &str) -> String {
    const LIMIT: usize = 500;
    match body.char_indices().nth(LIMIT) {
        Some((i, _)) => format!("{}…", &body[..i]),
        None => body.to_owned(),
    }
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        if config.api_key.is_empty() {
            return Err(Error::Config("missing credential: empty API key".into()));
        }
        if config.max_attempts < 1 {
            return Err(Error::Config("max_attempts must be ≥ 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Config(format!("building HTTP client: {e}")))?;
        let id = format!("http:{}", config.endpoint);
        Ok(Self { config, client, id })
    }

    fn body(req: &GenerationRequest) -> serde_json::Value {
        let mut body = json!({
            "model": req.model_name,
            "messages": [{"role": "user", "content": req.prompt.text}],
            "temperature": req.temperature,
            "max_tokens": req.max_new_tokens,
        });
        if !req.stop_sequences.is_empty() {
            body["stop"] = json!(req.stop_sequences);
        }
        body
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse> {
        req.validate()?;
        let body = Self::body(req);
        let started = Instant::now();
        let mut last_failure = String::new();
        for attempt in 1..=self.config.max_attempts {
            if attempt > 1 {
                let delay = self.config.backoff(attempt - 1);
                tracing::warn!(
                    attempt,
                    delay_ms = delay.as_millis() as u64,
                    question_id = %req.prompt.question_id,
                    "retrying after transient failure: {last_failure}"
                );
                std::thread::sleep(delay);
            }
            let mut builder = self
                .client
                .post(&self.config.endpoint)
                .bearer_auth(&self.config.api_key)
                .json(&body);
            if let Some(org) = &self.config.organization {
                builder = builder.header("OpenAI-Organization", org);
            }
            let resp = match builder.send() {
                Ok(r) => r,
                Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => {
                    last_failure = e.to_string();
                    continue;
                }
                Err(e) => return Err(Error::Transport(e.to_string())),
            };
            let status = resp.status().as_u16();
            let text = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
            if is_retryable_status(status) {
                last_failure = format!("HTTP {status}");
                continue;
            }
            if !(200..300).contains(&status) {
                return Err(Error::Http {
                    status,
                    body: excerpt(&text),
                });
            }
            let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| Error::Http {
                status,
                body: format!("unexpected response body ({e}): {}", excerpt(&text)),
            })?;
            let choice = parsed
                .choices
                .into_iter()
                .next()
                .ok_or_else(|| Error::Http {
                    status,
                    body: "response has no choices".into(),
                })?;
            let finish = match choice.finish_reason.as_deref() {
                Some("length") => FinishReason::Length,
                _ => FinishReason::Stop,
            };
            let mut out = GenerationResponse::success(
                choice.message.content.unwrap_or_default(),
                finish,
                &self.id,
                started.elapsed().as_millis() as u64,
            );
            out.attempts = attempt;
            return Ok(out);
        }
        Ok(GenerationResponse::failure(
            format!(
                "gave up after {} attempts: {last_failure}",
                self.config.max_attempts
            ),
            &self.id,
            started.elapsed().as_millis() as u64,
            self.config.max_attempts,
        ))
    }
}

// --- scripted mock ---

type Predicate = Box<dyn Fn(&str) -> bool + Send + Sync>;
type Responder = Box<dyn Fn(&str) -> String + Send + Sync>;

/// One `(predicate, response)` pair of a scripted mock.
pub struct Rule {
    matches: Predicate,
    respond: Responder,
}

impl Rule {
    pub fn new(
        matches: impl Fn(&str) -> bool + Send + Sync + 'static,
        respond: impl Fn(&str) -> String + Send + Sync + 'static,
    ) -> Self {
        Self {
            matches: Box::new(matches),
            respond: Box::new(respond),
        }
    }

    pub fn fixed(matches: impl Fn(&str) -> bool + Send + Sync + 'static, text: &str) -> Self {
        let text = text.to_owned();
        Self::new(matches, move |_| text.clone())
    }

    /// A total rule, matching every prompt.
    pub fn always(respond: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        Self::new(|_| true, respond)
    }
}

/// Deterministic backend answering with the first rule whose predicate
/// accepts the prompt text.
pub struct ScriptedMock {
    rules: Vec<Rule>,
    calls: AtomicUsize,
    id: String,
}

impl ScriptedMock {
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

pub fn scripted_mock(rules: Vec<Rule>) -> Result<ScriptedMock> {
    if rules.is_empty() {
        return Err(Error::InvalidInput(
            "scripted mock needs at least one rule".into(),
        ));
    }
    Ok(ScriptedMock {
        rules,
        calls: AtomicUsize::new(0),
        id: "mock".into(),
    })
}

impl Backend for ScriptedMock {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = &req.prompt.text;
        let rule = self
            .rules
            .iter()
            .find(|r| (r.matches)(prompt))
            .ok_or(Error::NoMatchingRule)?;
        let mut text = (rule.respond)(prompt);
        for stop in &req.stop_sequences {
            if let Some(i) = text.find(stop.as_str()) {
                text.truncate(i);
            }
        }
        Ok(GenerationResponse::success(
            text,
            FinishReason::Stop,
            &self.id,
            0,
        ))
    }
}

// --- batching ---

/// Runs every request with at most `max_in_flight` outstanding at once.
/// Results are positionally aligned with `reqs`; failures stay in place.
pub fn generate_batch<B: Backend + ?Sized>(
    backend: &B,
    reqs: &[GenerationRequest],
    max_in_flight: usize,
) -> Vec<Result<GenerationResponse>> {
    let workers = max_in_flight.max(1).min(reqs.len());
    if workers <= 1 {
        return reqs.iter().map(|r| backend.generate(r)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<GenerationResponse>>>> =
        reqs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(req) = reqs.get(i) else { break };
                let out = backend.generate(req);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock")
                .expect("every slot filled")
        })
        .collect()
}

// --- response cache ---

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CachedResponse {
    text: String,
    finish_reason: FinishReason,
    backend_id: String,
    latency_ms: u64,
}

/// One line of the cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model_name: String,
    pub content_hash: String,
    pub params_digest: String,
    pub question_id: String,
    pub mode: TemplateMode,
    response: CachedResponse,
    pub timestamp: u64,
    /// SHA-256 over the entry serialized with an empty digest.
    pub digest: String,
}

impl CacheEntry {
    fn compute_digest(&self) -> String {
        let mut unsigned = self.clone();
        unsigned.digest.clear();
        let bytes = serde_json::to_vec(&unsigned).expect("cache entry serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn to_response(&self) -> GenerationResponse {
        GenerationResponse {
            text: Some(self.response.text.clone()),
            finish_reason: self.response.finish_reason,
            latency_ms: self.response.latency_ms,
            backend_id: self.response.backend_id.clone(),
            attempts: 0,
            error: None,
        }
    }
}

pub fn cache_key(req: &GenerationRequest) -> String {
    let mut h = Sha256::new();
    for part in [
        req.prompt.content_hash.as_str(),
        req.model_name.as_str(),
        req.params_digest().as_str(),
    ] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Append-only on-disk cache of successful generations.
pub struct ResponseCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, CacheEntry>>,
    writer: Mutex<File>,
}

impl ResponseCache {
    /// Opens (creating if needed) a cache file, verifying every entry.
    /// Any unreadable or tampered line is a corruption error.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let corrupt = |line: usize, message: String| Error::CacheCorrupted {
                path: path.clone(),
                line,
                message,
            };
            let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if !raw.is_empty() && !raw.ends_with(b"\n") {
                let line = raw.iter().filter(|&&b| b == b'\n').count() + 1;
                return Err(corrupt(line, "truncated final entry".into()));
            }
            let text = String::from_utf8(raw).map_err(|e| corrupt(0, e.to_string()))?;
            for (idx, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry =
                    serde_json::from_str(line).map_err(|e| corrupt(idx + 1, e.to_string()))?;
                if entry.compute_digest() != entry.digest {
                    return Err(corrupt(idx + 1, "entry digest mismatch".into()));
                }
                entries.entry(entry.key.clone()).or_insert(entry);
            }
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            writer: Mutex::new(writer),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, req: &GenerationRequest) -> Option<GenerationResponse> {
        self.entries
            .read()
            .expect("cache lock")
            .get(&cache_key(req))
            .map(CacheEntry::to_response)
    }

    /// Persists a successful response. Errors are never cached.
    pub fn insert(&self, req: &GenerationRequest, resp: &GenerationResponse) -> Result<()> {
        let Some(text) = resp.text.clone().filter(|_| !resp.is_error()) else {
            return Ok(());
        };
        let key = cache_key(req);
        let mut writer = self.writer.lock().expect("cache writer lock");
        if self.entries.read().expect("cache lock").contains_key(&key) {
            return Ok(());
        }
        let mut entry = CacheEntry {
            key: key.clone(),
            model_name: req.model_name.clone(),
            content_hash: req.prompt.content_hash.clone(),
            params_digest: req.params_digest(),
            question_id: req.prompt.question_id.clone(),
            mode: req.prompt.mode,
            response: CachedResponse {
                text,
                finish_reason: resp.finish_reason,
                backend_id: resp.backend_id.clone(),
                latency_ms: resp.latency_ms,
            },
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            digest: String::new(),
        };
        entry.digest = entry.compute_digest();
        jsonl::append(&mut *writer, &self.path, &entry)?;
        self.entries.write().expect("cache lock").insert(key, entry);
        Ok(())
    }
}

/// Serves `req` from the cache, or generates and persists it before returning.
pub fn with_cache<B: Backend + ?Sized>(
    cache: &ResponseCache,
    backend: &B,
    req: &GenerationRequest,
) -> Result<GenerationResponse> {
    if let Some(hit) = cache.get(req) {
        return Ok(hit);
    }
    let resp = backend.generate(req)?;
    cache.insert(req, &resp)?;
    Ok(resp)
}

/// A backend wrapper that routes every call through [`with_cache`].
pub struct CachedBackend<'a, B: ?Sized> {
    cache: &'a ResponseCache,
    inner: &'a B,
}

impl<'a, B: Backend + ?Sized> CachedBackend<'a, B> {
    pub fn new(cache: &'a ResponseCache, inner: &'a B) -> Self {
        Self { cache, inner }
    }
}

impl<B: Backend + ?Sized> Backend for CachedBackend<'_, B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse> {
        with_cache(self.cache, self.inner, req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Question;
    use crate::prompt::render_standard;
    use std::sync::atomic::AtomicUsize;

    fn req(question: &str, model: &str) -> GenerationRequest {
        let q = Question {
            id: question.into(),
            text: question.into(),
            gold_answers: vec!["x".into()],
        };
        GenerationRequest::new(render_standard(&q, &[]), model)
    }

    fn echo_last_line() -> ScriptedMock {
        scripted_mock(vec![Rule::always(|p| {
            p.lines().last().unwrap_or("").to_owned()
        })])
        .unwrap()
    }

    #[test]
    fn defaults_are_greedy_with_mode_budgets() {
        let r = req("q", "m");
        assert_eq!(r.temperature, 0.0);
        assert_eq!(r.max_new_tokens, DEFAULT_MAX_TOKENS_STANDARD);
    }

    #[test]
    fn mock_echo_and_determinism() {
        let mock = echo_last_line();
        let a = mock.generate(&req("who", "m")).unwrap();
        let b = mock.generate(&req("who", "m")).unwrap();
        assert_eq!(a.text.as_deref(), Some("Answer:"));
        assert_eq!(a.text, b.text);
        assert_eq!(mock.call_count(), 2);
    }

    #[test]
    fn mock_first_rule_wins_and_counts_calls() {
        let mock = scripted_mock(vec![
            Rule::fixed(|p| p.contains("Question"), "first"),
            Rule::fixed(|p| p.contains("Question"), "second"),
            Rule::fixed(|_| true, "fallback"),
        ])
        .unwrap();
        for _ in 0..5 {
            assert_eq!(
                mock.generate(&req("q", "m")).unwrap().text.as_deref(),
                Some("first")
            );
        }
        assert_eq!(mock.call_count(), 5);
    }

    #[test]
    fn mock_without_match_errors() {
        let mock = scripted_mock(vec![Rule::fixed(|_| false, "never")]).unwrap();
        assert!(matches!(
            mock.generate(&req("q", "m")),
            Err(Error::NoMatchingRule)
        ));
        assert!(scripted_mock(vec![]).is_err());
    }

    #[test]
    fn zero_token_budget_rejected() {
        let mut r = req("q", "m");
        r.max_new_tokens = 0;
        assert!(echo_last_line().generate(&r).is_err());
    }

    struct Gauge {
        current: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Backend for Gauge {
        fn id(&self) -> &str {
            "gauge"
        }

        fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.current.fetch_sub(1, Ordering::SeqCst);
            if req.prompt.question_id == "q3" {
                return Err(Error::Transport("boom".into()));
            }
            Ok(GenerationResponse::success(
                req.prompt.question_id.clone(),
                FinishReason::Stop,
                "gauge",
                0,
            ))
        }
    }

    #[test]
    fn batch_is_aligned_bounded_and_embeds_errors() {
        let gauge = Gauge {
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        };
        let reqs: Vec<_> = (0..10).map(|i| req(&format!("q{i}"), "m")).collect();
        let out = generate_batch(&gauge, &reqs, 3);
        assert_eq!(out.len(), 10);
        for (i, r) in out.iter().enumerate() {
            if i == 3 {
                assert!(r.is_err());
            } else {
                assert_eq!(
                    r.as_ref().unwrap().text.as_deref(),
                    Some(format!("q{i}").as_str())
                );
            }
        }
        assert!(gauge.peak.load(Ordering::SeqCst) <= 3);
        assert!(generate_batch(&gauge, &[], 3).is_empty());
    }

    #[test]
    fn cache_hit_skips_backend() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path().join("cache.jsonl")).unwrap();
        let mock = echo_last_line();
        let r = req("q", "m");
        let first = with_cache(&cache, &mock, &r).unwrap();
        let second = with_cache(&cache, &mock, &r).unwrap();
        assert_eq!(mock.call_count(), 1);
        assert_eq!(first.text, second.text);

        with_cache(&cache, &mock, &req("q", "other-model")).unwrap();
        assert_eq!(cache.len(), 2);

        // Reopening serves from disk.
        drop(cache);
        let cache = ResponseCache::open(dir.path().join("cache.jsonl")).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(with_cache(&cache, &mock, &r).unwrap().text, first.text);
        assert_eq!(mock.call_count(), 2);
    }

    #[test]
    fn truncated_cache_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let cache = ResponseCache::open(&path).unwrap();
            with_cache(&cache, &echo_last_line(), &req("a", "m")).unwrap();
            with_cache(&cache, &echo_last_line(), &req("b", "m")).unwrap();
        }
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 20]).unwrap();
        assert!(matches!(
            ResponseCache::open(&path),
            Err(Error::CacheCorrupted { line: 2, .. })
        ));
    }

    #[test]
    fn tampered_cache_entry_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let cache = ResponseCache::open(&path).unwrap();
            with_cache(&cache, &echo_last_line(), &req("a", "m")).unwrap();
        }
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("Answer:", "Answer?");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            ResponseCache::open(&path),
            Err(Error::CacheCorrupted { line: 1, .. })
        ));
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let mut cfg = HttpConfig::new("http://x", "k");
        cfg.initial_backoff = Duration::from_millis(100);
        cfg.max_backoff = Duration::from_millis(350);
        assert_eq!(cfg.backoff(1), Duration::from_millis(100));
        assert_eq!(cfg.backoff(2), Duration::from_millis(200));
        assert_eq!(cfg.backoff(3), Duration::from_millis(350));
    }

    #[test]
    fn missing_credential_is_config_error() {
        assert!(matches!(
            HttpBackend::new(HttpConfig::new("http://x", "")),
            Err(Error::Config(_))
        ));
    }
}
