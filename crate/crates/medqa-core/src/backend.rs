//! LLM provider abstraction with a deterministic record/replay cache.
//!
//! Every completion is keyed by (model id, prompt text, decoding params);
//! the cache persists as an append-only JSONL log with an in-memory index,
//! so batch runs survive crashes and replay byte-identically offline.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompting::RenderedPrompt;

/// Decoding hyperparameters shared by all systems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: 0.1,
            top_p: 0.8,
            top_k: 40,
        }
    }
}

impl DecodingParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidParams(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidParams(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.top_k == 0 {
            return Err(BackendError::InvalidParams("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// One completion call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub prompt: RenderedPrompt,
    pub params: DecodingParams,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("replay cache miss for key {0}")]
    CacheMiss(String),
    #[error("provider error {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("invalid decoding params: {0}")]
    InvalidParams(String),
    #[error("cache io at {path}: {source}")]
    CacheIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no API key configured (set {0})")]
    MissingCredentials(&'static str),
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Content hash of a prompt's final text.
pub fn prompt_hash(final_text: &str) -> String {
    sha256_hex(final_text.as_bytes())
}

/// Cache key from already-hashed parts. Float params are keyed by their
/// IEEE bit patterns so keys are stable across platforms.
pub fn cache_key_parts(model_id: &str, prompt_hash: &str, params: &DecodingParams) -> String {
    let material = format!(
        "{model_id}\u{1f}{prompt_hash}\u{1f}{:016x}\u{1f}{:016x}\u{1f}{}",
        params.temperature.to_bits(),
        params.top_p.to_bits(),
        params.top_k
    );
    sha256_hex(material.as_bytes())
}

/// Stable content-addressed key for a completion request.
pub fn cache_key(req: &CompletionRequest) -> String {
    cache_key_parts(
        &req.model_id,
        &prompt_hash(&req.prompt.final_text),
        &req.params,
    )
}

/// One recorded completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model_id: String,
    pub params: DecodingParams,
    pub prompt_hash: String,
    pub response: String,
    pub timestamp: u64,
}

impl CacheEntry {
    pub fn from_request(req: &CompletionRequest, response: String) -> Self {
        let prompt_hash = prompt_hash(&req.prompt.final_text);
        CacheEntry {
            key: cache_key_parts(&req.model_id, &prompt_hash, &req.params),
            model_id: req.model_id.clone(),
            params: req.params,
            prompt_hash,
            response,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    /// Whether the stored key matches its own fields.
    pub fn key_is_consistent(&self) -> bool {
        self.key == cache_key_parts(&self.model_id, &self.prompt_hash, &self.params)
    }
}

/// What [`ReplayCache::open`] found on disk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheLoadReport {
    pub entries: usize,
    /// Corrupt trailing records dropped (the file is truncated to the last
    /// good record).
    pub truncated: usize,
}

struct CacheState {
    index: HashMap<String, String>,
    writer: Option<BufWriter<File>>,
}

/// Append-only JSONL record log with an in-memory index.
pub struct ReplayCache {
    path: PathBuf,
    state: Mutex<CacheState>,
}

impl ReplayCache {
    /// Open (or create lazily) the cache at `path`. Corrupt trailing
    /// records are dropped and the file truncated to the last good byte.
    pub fn open(path: &Path) -> Result<(Self, CacheLoadReport), BackendError> {
        let io_err = |source| BackendError::CacheIo {
            path: path.to_path_buf(),
            source,
        };
        let mut index = HashMap::new();
        let mut report = CacheLoadReport::default();
        if path.exists() {
            let mut file = File::open(path).map_err(io_err)?;
            let mut text = String::new();
            file.read_to_string(&mut text).map_err(io_err)?;
            let mut good_end = 0usize;
            for line in text.split_inclusive('\n') {
                let record = line.trim_end_matches('\n').trim_end_matches('\r');
                if record.is_empty() {
                    good_end += line.len();
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(record) {
                    Ok(entry) => {
                        index.entry(entry.key).or_insert(entry.response);
                        report.entries += 1;
                        good_end += line.len();
                    }
                    Err(_) => {
                        report.truncated = text[good_end..]
                            .lines()
                            .filter(|l| !l.trim().is_empty())
                            .count();
                        break;
                    }
                }
            }
            if good_end < text.len() {
                let file = OpenOptions::new().write(true).open(path).map_err(io_err)?;
                file.set_len(good_end as u64).map_err(io_err)?;
            } else if !text.is_empty() && !text.ends_with('\n') {
                // a kept unterminated final record: close the line so a
                // later append starts a fresh record
                let mut file = OpenOptions::new().append(true).open(path).map_err(io_err)?;
                file.write_all(b"\n").map_err(io_err)?;
            }
        }
        Ok((
            ReplayCache {
                path: path.to_path_buf(),
                state: Mutex::new(CacheState {
                    index,
                    writer: None,
                }),
            },
            report,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.state.lock().unwrap().index.get(key).cloned()
    }

    /// Append an entry unless its key is already present. Returns whether
    /// the entry was written, so a key never gains a second record.
    pub fn insert(&self, entry: CacheEntry) -> Result<bool, BackendError> {
        let io_err = |source| BackendError::CacheIo {
            path: self.path.clone(),
            source,
        };
        let mut state = self.state.lock().unwrap();
        if state.index.contains_key(&entry.key) {
            return Ok(false);
        }
        if state.writer.is_none() {
            if let Some(parent) = self.path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(io_err)?;
                }
            }
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(io_err)?;
            file.seek(SeekFrom::End(0)).map_err(io_err)?;
            state.writer = Some(BufWriter::new(file));
        }
        let line = serde_json::to_string(&entry).expect("cache entry serializes");
        let writer = state.writer.as_mut().unwrap();
        writer.write_all(line.as_bytes()).map_err(io_err)?;
        writer.write_all(b"\n").map_err(io_err)?;
        writer.flush().map_err(io_err)?;
        state.index.insert(entry.key, entry.response);
        Ok(true)
    }

    /// Re-read the log and check each record's key against its fields.
    /// Returns (total records, inconsistent records).
    pub fn verify(&self) -> Result<(usize, usize), BackendError> {
        let io_err = |source| BackendError::CacheIo {
            path: self.path.clone(),
            source,
        };
        if !self.path.exists() {
            return Ok((0, 0));
        }
        let text = std::fs::read_to_string(&self.path).map_err(io_err)?;
        let mut total = 0;
        let mut bad = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            total += 1;
            match serde_json::from_str::<CacheEntry>(line) {
                Ok(entry) if entry.key_is_consistent() => {}
                _ => bad += 1,
            }
        }
        Ok((total, bad))
    }
}

/// Execution mode for the completion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Live,
    Record,
    Replay,
    ReplayStrict,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "live" => Some(Mode::Live),
            "record" => Some(Mode::Record),
            "replay" => Some(Mode::Replay),
            "replay-strict" => Some(Mode::ReplayStrict),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Live => "live",
            Mode::Record => "record",
            Mode::Replay => "replay",
            Mode::ReplayStrict => "replay-strict",
        }
    }

    pub fn needs_provider(self) -> bool {
        matches!(self, Mode::Live | Mode::Record)
    }

    pub fn is_replay(self) -> bool {
        matches!(self, Mode::Replay | Mode::ReplayStrict)
    }
}

/// A completion provider. Implementations must be safe to call from
/// multiple worker threads.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError>;
}

/// Adapt a plain function into a [`CompletionBackend`]; handy for scripted
/// providers in tests and for custom integrations.
pub struct FnBackend<F>(pub F);

impl<F> CompletionBackend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        (self.0)(req)
    }
}

/// Mode-aware completion layer: serves from the cache, records provider
/// responses, or fails on replay misses.
pub struct Completer {
    mode: Mode,
    cache: Option<ReplayCache>,
    provider: Option<Box<dyn CompletionBackend>>,
}

impl Completer {
    pub fn new(
        mode: Mode,
        cache: Option<ReplayCache>,
        provider: Option<Box<dyn CompletionBackend>>,
    ) -> Self {
        Completer {
            mode,
            cache,
            provider,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn provider_call(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        self.provider
            .as_ref()
            .expect("provider configured for live/record mode")
            .complete(req)
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        req.params.validate()?;
        let key = cache_key(req);
        match self.mode {
            Mode::Live => self.provider_call(req),
            Mode::Record => {
                let cache = self.cache.as_ref().expect("record mode has a cache");
                if let Some(hit) = cache.get(&key) {
                    return Ok(hit);
                }
                let response = self.provider_call(req)?;
                cache.insert(CacheEntry::from_request(req, response.clone()))?;
                Ok(response)
            }
            Mode::Replay | Mode::ReplayStrict => {
                let cache = self.cache.as_ref().expect("replay mode has a cache");
                cache.get(&key).ok_or(BackendError::CacheMiss(key))
            }
        }
    }
}

impl CompletionBackend for Completer {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        Completer::complete(self, req)
    }
}

pub const API_KEY_ENV: &str = "MEDQA_API_KEY";
pub const CACHE_ENV: &str = "MEDQA_CACHE";
pub const API_BASE_ENV: &str = "MEDQA_API_BASE";
pub const DEFAULT_MODEL: &str = "gemini-2.5-flash";
const DEFAULT_API_BASE: &str = "https://generativelanguage.googleapis.com/v1beta";

/// Live HTTPS provider speaking the generateContent protocol, with bounded
/// retries and exponential backoff on transient failures.
pub struct HttpBackend {
    base_url: String,
    api_key: String,
    max_retries: u32,
    backoff: Duration,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// Build from the environment: key from `MEDQA_API_KEY`, endpoint from
    /// `MEDQA_API_BASE` when set.
    pub fn from_env() -> Result<Self, BackendError> {
        let api_key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or(BackendError::MissingCredentials(API_KEY_ENV))?;
        let base_url =
            std::env::var(API_BASE_ENV).unwrap_or_else(|_| DEFAULT_API_BASE.to_string());
        Ok(Self::new(base_url, api_key))
    }

    pub fn new(base_url: String, api_key: String) -> Self {
        HttpBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            max_retries: 3,
            backoff: Duration::from_millis(250),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(120))
                .build(),
        }
    }

    pub fn with_retry(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    fn endpoint(&self, model_id: &str) -> String {
        format!(
            "{}/models/{}:generateContent?key={}",
            self.base_url, model_id, self.api_key
        )
    }

    fn request_body(req: &CompletionRequest) -> serde_json::Value {
        serde_json::json!({
            "contents": [{ "parts": [{ "text": req.prompt.final_text }] }],
            "generationConfig": {
                "temperature": req.params.temperature,
                "topP": req.params.top_p,
                "topK": req.params.top_k,
            },
        })
    }

    fn extract_text(body: &serde_json::Value) -> Option<String> {
        let parts = body
            .get("candidates")?
            .get(0)?
            .get("content")?
            .get("parts")?
            .as_array()?;
        let text: String = parts
            .iter()
            .filter_map(|p| p.get("text").and_then(|t| t.as_str()))
            .collect();
        Some(text)
    }

    fn call_once(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let response = self
            .agent
            .post(&self.endpoint(&req.model_id))
            .set("content-type", "application/json")
            .send_string(&Self::request_body(req).to_string());
        match response {
            Ok(resp) => {
                let body: serde_json::Value =
                    resp.into_json().map_err(|e| BackendError::Provider {
                        status: 200,
                        body: format!("unreadable response body: {e}"),
                    })?;
                Self::extract_text(&body).ok_or_else(|| BackendError::Provider {
                    status: 200,
                    body: format!("no candidate text in response: {body}"),
                })
            }
            Err(ureq::Error::Status(status, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                Err(BackendError::Provider { status, body })
            }
            Err(ureq::Error::Transport(t)) => Err(BackendError::Timeout(t.to_string())),
        }
    }

    fn is_transient(error: &BackendError) -> bool {
        match error {
            BackendError::Timeout(_) => true,
            BackendError::Provider { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.call_once(req) {
                Ok(text) => return Ok(text),
                Err(e) if Self::is_transient(&e) && attempt < self.max_retries => {
                    attempt += 1;
                    std::thread::sleep(delay);
                    delay *= 2;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
