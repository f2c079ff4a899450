//! LLM-aided tag parsing.
//!
//! A caption is rendered into the instruction prompt, sent to an
//! OpenAI-compatible chat-completions endpoint (or replayed from a fixture
//! file), and the reply is validated into a [`TagList`].
//!
//! Validation rules for a single label: trim, lowercase, then require
//! `[a-z0-9]` with hyphens/underscores allowed only between other
//! characters. Whitespace or any other punctuation rejects the label.
//! Duplicates are dropped silently, keeping the first occurrence.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::CaptionRecord;
use crate::error::{Error, Result};

/// Hard upper bound on tags kept per record.
pub const MAX_TAGS: usize = 16;

/// Tag counts the prompt asks for; anything outside only raises a warning.
pub const EXPECTED_TAG_RANGE: std::ops::RangeInclusive<usize> = 5..=10;

/// Environment variable holding the bearer token for live endpoints.
pub const API_KEY_ENV: &str = "UTS_PARSER_API_KEY";

/// Sentinel endpoint value selecting fixture replay.
pub const FIXTURE_ENDPOINT: &str = "fixture";

const BUILTIN_TEMPLATE: &str = include_str!("../assets/parser_prompt.txt");
const PLACEHOLDER: &str = "{caption}";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagListError {
    #[error("tag list is empty")]
    Empty,
    #[error("tag list has {0} tags, at most {MAX_TAGS} allowed")]
    TooMany(usize),
    #[error("invalid tag {0:?}")]
    InvalidTag(String),
    #[error("duplicate tag {0:?}")]
    Duplicate(String),
}

/// Validated, normalized candidate tags for one record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TagList(Vec<String>);

impl TagList {
    /// Strict constructor: every tag must already be normalized.
    pub fn new(tags: Vec<String>) -> Result<Self, TagListError> {
        if tags.is_empty() {
            return Err(TagListError::Empty);
        }
        if tags.len() > MAX_TAGS {
            return Err(TagListError::TooMany(tags.len()));
        }
        let mut seen = std::collections::HashSet::with_capacity(tags.len());
        for tag in &tags {
            if !is_valid_tag(tag) {
                return Err(TagListError::InvalidTag(tag.clone()));
            }
            if !seen.insert(tag.as_str()) {
                return Err(TagListError::Duplicate(tag.clone()));
            }
        }
        Ok(Self(tags))
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.0.iter().any(|t| t == tag)
    }
}

impl TryFrom<Vec<String>> for TagList {
    type Error = TagListError;

    fn try_from(tags: Vec<String>) -> Result<Self, TagListError> {
        TagList::new(tags)
    }
}

impl From<TagList> for Vec<String> {
    fn from(t: TagList) -> Self {
        t.0
    }
}

pub fn is_valid_tag(tag: &str) -> bool {
    let bytes = tag.as_bytes();
    let inner = |b: &u8| matches!(b, b'a'..=b'z' | b'0'..=b'9');
    match (bytes.first(), bytes.last()) {
        (Some(first), Some(last)) => {
            inner(first)
                && inner(last)
                && bytes
                    .iter()
                    .all(|b| inner(b) || *b == b'-' || *b == b'_')
        }
        _ => false,
    }
}

/// Trims and lowercases a raw label; `None` if the result is not a valid tag.
pub fn normalize_label(raw: &str) -> Option<String> {
    let tag = raw.trim().to_lowercase();
    is_valid_tag(&tag).then_some(tag)
}

/// Renders a tag list as the JSON reply the prompt asks for.
pub fn serialize_tags(tags: &TagList) -> String {
    json!({ "labels": tags.as_slice() }).to_string()
}

// ---------------------------------------------------------------------------
// Prompt
// ---------------------------------------------------------------------------

/// Instruction prompt with a single `{caption}` slot. The template text uses
/// format-string escapes: `{{` and `}}` render as literal braces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    /// Template shipped in `assets/parser_prompt.txt`.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TEMPLATE).expect("bundled prompt template is well-formed")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Template(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim_end().to_owned();
        let mut slots = 0;
        let mut rest = text.as_str();
        while !rest.is_empty() {
            if let Some(r) = rest.strip_prefix("{{").or_else(|| rest.strip_prefix("}}")) {
                rest = r;
            } else if let Some(r) = rest.strip_prefix(PLACEHOLDER) {
                slots += 1;
                rest = r;
            } else if rest.starts_with('{') || rest.starts_with('}') {
                return Err(Error::Template(
                    "unescaped brace outside the {caption} placeholder".into(),
                ));
            } else {
                let skip = rest.chars().next().map_or(1, char::len_utf8);
                rest = &rest[skip..];
            }
        }
        if slots != 1 {
            return Err(Error::Template(format!(
                "expected exactly one {PLACEHOLDER} placeholder, found {slots}"
            )));
        }
        Ok(Self { text })
    }

    /// Single left-to-right pass, so braces inside the caption are copied
    /// verbatim and never re-expanded.
    pub fn render(&self, caption: &str) -> Result<String> {
        if caption.trim().is_empty() {
            return Err(Error::InvalidInput("caption is empty".into()));
        }
        let mut out = String::with_capacity(self.text.len() + caption.len());
        let mut rest = self.text.as_str();
        while !rest.is_empty() {
            if let Some(r) = rest.strip_prefix("{{") {
                out.push('{');
                rest = r;
            } else if let Some(r) = rest.strip_prefix("}}") {
                out.push('}');
                rest = r;
            } else if let Some(r) = rest.strip_prefix(PLACEHOLDER) {
                out.push_str(caption);
                rest = r;
            } else {
                let ch = rest.chars().next().unwrap();
                out.push(ch);
                rest = &rest[ch.len_utf8()..];
            }
        }
        Ok(out)
    }
}

/// Builds the parser prompt for one caption using the bundled template.
pub fn build_prompt(caption: &str) -> Result<String> {
    PromptTemplate::builtin().render(caption)
}

// ---------------------------------------------------------------------------
// Response validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResponseError {
    #[error("response is not valid JSON: {0}")]
    InvalidJson(String),
    #[error("response has no \"labels\" list")]
    MissingLabels,
    #[error("no label survived validation ({} rejected)", rejected.len())]
    EmptyAfterValidation { rejected: Vec<String> },
}

impl ResponseError {
    pub fn kind(&self) -> FailureKind {
        match self {
            ResponseError::InvalidJson(_) => FailureKind::InvalidJson,
            ResponseError::MissingLabels => FailureKind::MissingLabels,
            ResponseError::EmptyAfterValidation { .. } => FailureKind::EmptyAfterValidation,
        }
    }
}

/// Successful parse of one reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTags {
    pub tags: TagList,
    /// Labels dropped by validation, as they appeared in the reply.
    pub rejected: Vec<String>,
    pub warnings: Vec<String>,
}

fn strip_fences(raw: &str) -> &str {
    let text = raw.trim();
    let Some(body) = text.strip_prefix("```") else {
        return text;
    };
    let body = body.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
    let body = body.trim_end();
    body.strip_suffix("```").unwrap_or(body).trim()
}

/// Validates one LLM reply into a tag list.
pub fn parse_response(raw: &str) -> Result<ParsedTags, ResponseError> {
    let body = strip_fences(raw);
    if body.is_empty() {
        return Err(ResponseError::InvalidJson("empty response".into()));
    }
    let value: Value =
        serde_json::from_str(body).map_err(|e| ResponseError::InvalidJson(e.to_string()))?;
    let labels = value
        .get("labels")
        .and_then(Value::as_array)
        .ok_or(ResponseError::MissingLabels)?;

    let mut kept: Vec<String> = Vec::new();
    let mut rejected = Vec::new();
    for label in labels {
        match label.as_str().and_then(normalize_label) {
            Some(tag) => {
                if !kept.contains(&tag) {
                    kept.push(tag);
                }
            }
            None => rejected.push(match label {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            }),
        }
    }

    let mut warnings = Vec::new();
    if kept.is_empty() {
        return Err(ResponseError::EmptyAfterValidation { rejected });
    }
    if !EXPECTED_TAG_RANGE.contains(&kept.len()) {
        warnings.push(format!(
            "{} tags, expected {}-{}",
            kept.len(),
            EXPECTED_TAG_RANGE.start(),
            EXPECTED_TAG_RANGE.end()
        ));
    }
    if kept.len() > MAX_TAGS {
        warnings.push(format!("truncated to the first {MAX_TAGS} tags"));
        kept.truncate(MAX_TAGS);
    }
    let tags = TagList::new(kept).expect("labels were normalized and deduplicated");
    Ok(ParsedTags {
        tags,
        rejected,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Configuration and backends
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParserConfig {
    /// Base URL of an OpenAI-compatible server, or `"fixture"`.
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub top_p: f64,
    /// Total attempts per record (1 = no retry).
    pub max_retries: u32,
    pub fixture_path: Option<PathBuf>,
    /// Overrides the bundled prompt template.
    pub prompt_path: Option<PathBuf>,
    /// Bound on in-flight requests.
    pub jobs: usize,
    /// Fixed delay between attempts against a live endpoint.
    pub retry_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for ParserConfig {
    fn default() -> Self {
        Self {
            endpoint_url: FIXTURE_ENDPOINT.into(),
            model_name: "Qwen2.5-7B-Instruct".into(),
            temperature: 0.3,
            top_p: 0.9,
            max_retries: 3,
            fixture_path: None,
            prompt_path: None,
            jobs: 8,
            retry_backoff_ms: 1000,
            timeout_secs: 120,
        }
    }
}

impl ParserConfig {
    pub fn is_fixture(&self) -> bool {
        self.endpoint_url == FIXTURE_ENDPOINT
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Config(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.max_retries == 0 {
            return Err(Error::Config("max_retries must be at least 1".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.is_fixture() && self.fixture_path.is_none() {
            return Err(Error::Config("fixture mode requires fixture_path".into()));
        }
        if self.model_name.trim().is_empty() {
            return Err(Error::Config("model_name is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("fixture has no response for id {0:?}")]
    FixtureMissing(String),
}

/// Something that turns a prompt into a raw model reply.
///
/// `attempt` is 1-based; fixture replay uses it to serve scripted retries.
pub trait CompletionBackend: Sync {
    fn complete(&self, id: &str, prompt: &str, attempt: u32) -> Result<String, BackendError>;
}

/// Recorded replies keyed by record id. Repeated ids form a script served
/// one entry per attempt; attempts past the end reuse the last entry.
#[derive(Debug, Clone, Default)]
pub struct FixtureBackend {
    responses: HashMap<String, Vec<String>>,
}

#[derive(Deserialize)]
struct FixtureLine {
    id: String,
    response: String,
}

impl FixtureBackend {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut responses: HashMap<String, Vec<String>> = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureLine = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            responses.entry(entry.id).or_default().push(entry.response);
        }
        Ok(Self { responses })
    }

    pub fn insert(&mut self, id: impl Into<String>, response: impl Into<String>) {
        self.responses.entry(id.into()).or_default().push(response.into());
    }
}

impl CompletionBackend for FixtureBackend {
    fn complete(&self, id: &str, _prompt: &str, attempt: u32) -> Result<String, BackendError> {
        let script = self
            .responses
            .get(id)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| BackendError::FixtureMissing(id.to_owned()))?;
        let idx = (attempt.max(1) as usize - 1).min(script.len() - 1);
        Ok(script[idx].clone())
    }
}

/// Blocking client for `POST {base}/chat/completions`.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    temperature: f64,
    top_p: f64,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &ParserConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let base = config.endpoint_url.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_owned()
        } else {
            format!("{base}/chat/completions")
        };
        Ok(Self {
            client,
            url,
            model: config.model_name.clone(),
            temperature: config.temperature,
            top_p: config.top_p,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": self.temperature,
            "top_p": self.top_p,
        })
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, _id: &str, prompt: &str, _attempt: u32) -> Result<String, BackendError> {
        let mut req = self.client.post(&self.url).json(&self.request_body(prompt));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let body: Value = resp
            .json()
            .map_err(|e| BackendError::Transport(format!("HTTP {status}: unreadable body: {e}")))?;
        if !status.is_success() {
            return Err(BackendError::Transport(format!("HTTP {status}: {body}")));
        }
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| BackendError::Transport("reply has no choices[0].message.content".into()))
    }
}

// ---------------------------------------------------------------------------
// Batch parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Transport,
    FixtureMissing,
    InvalidJson,
    MissingLabels,
    EmptyAfterValidation,
    Prompt,
}

impl FailureKind {
    /// Transport and structural failures are retried; a well-formed reply
    /// whose labels were all rejected is not.
    pub fn is_retryable(self) -> bool {
        matches!(
            self,
            FailureKind::Transport | FailureKind::InvalidJson | FailureKind::MissingLabels
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub id: String,
    pub kind: FailureKind,
    pub message: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning {
    pub id: String,
    pub warning: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchOutcome {
    /// Successful records in input order.
    pub tagged: Vec<(String, TagList)>,
    pub failures: Vec<ParseFailure>,
    pub warnings: Vec<ParseWarning>,
}

enum RecordOutcome {
    Tagged(TagList, Vec<String>),
    Failed(ParseFailure),
}

fn parse_one(
    record: &CaptionRecord,
    template: &PromptTemplate,
    backend: &dyn CompletionBackend,
    max_attempts: u32,
    backoff: Duration,
) -> RecordOutcome {
    if let Some(tags) = &record.tags {
        return RecordOutcome::Tagged(tags.clone(), Vec::new());
    }
    let fail = |kind, message: String, attempts| {
        RecordOutcome::Failed(ParseFailure {
            id: record.id.clone(),
            kind,
            message,
            attempts,
        })
    };
    let prompt = match template.render(&record.caption) {
        Ok(p) => p,
        Err(e) => return fail(FailureKind::Prompt, e.to_string(), 0),
    };
    let mut attempt = 1;
    loop {
        let (kind, message) = match backend.complete(&record.id, &prompt, attempt) {
            Ok(raw) => match parse_response(&raw) {
                Ok(parsed) => {
                    let mut warnings = parsed.warnings;
                    if !parsed.rejected.is_empty() {
                        warnings.push(format!("rejected labels: {:?}", parsed.rejected));
                    }
                    return RecordOutcome::Tagged(parsed.tags, warnings);
                }
                Err(e) => (e.kind(), e.to_string()),
            },
            Err(BackendError::Transport(m)) => (FailureKind::Transport, m),
            Err(e @ BackendError::FixtureMissing(_)) => (FailureKind::FixtureMissing, e.to_string()),
        };
        if !kind.is_retryable() || attempt >= max_attempts {
            return fail(kind, message, attempt);
        }
        attempt += 1;
        if !backoff.is_zero() {
            std::thread::sleep(backoff);
        }
    }
}

/// Parses records against an explicit backend.
///
/// Records that already carry tags pass through without a request. Work is
/// spread over at most `config.jobs` threads; output order always follows
/// input order.
pub fn parse_batch_with(
    records: &[CaptionRecord],
    config: &ParserConfig,
    template: &PromptTemplate,
    backend: &dyn CompletionBackend,
) -> BatchOutcome {
    let backoff = if config.is_fixture() {
        Duration::ZERO
    } else {
        Duration::from_millis(config.retry_backoff_ms)
    };
    let slots: Vec<Mutex<Option<RecordOutcome>>> =
        records.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.jobs.clamp(1, records.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(record) = records.get(i) else { break };
                let outcome = parse_one(record, template, backend, config.max_retries, backoff);
                *slots[i].lock().unwrap() = Some(outcome);
            });
        }
    });

    let mut out = BatchOutcome::default();
    for (record, slot) in records.iter().zip(slots) {
        match slot.into_inner().unwrap().expect("every slot is filled") {
            RecordOutcome::Tagged(tags, warnings) => {
                out.warnings.extend(warnings.into_iter().map(|warning| ParseWarning {
                    id: record.id.clone(),
                    warning,
                }));
                out.tagged.push((record.id.clone(), tags));
            }
            RecordOutcome::Failed(f) => out.failures.push(f),
        }
    }
    out
}

/// Parses records using the backend and template selected by `config`.
pub fn parse_batch(records: &[CaptionRecord], config: &ParserConfig) -> Result<BatchOutcome> {
    config.validate()?;
    let template = match &config.prompt_path {
        Some(p) => PromptTemplate::load(p)?,
        None => PromptTemplate::builtin(),
    };
    if config.is_fixture() {
        let path = config.fixture_path.as_ref().expect("validated");
        let backend = FixtureBackend::load(path)?;
        Ok(parse_batch_with(records, config, &template, &backend))
    } else {
        let backend = HttpBackend::new(config)?;
        Ok(parse_batch_with(records, config, &template, &backend))
    }
}
