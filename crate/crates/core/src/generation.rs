//! Prompt rendering and text generators.
//!
//! Three prompt shapes exist: a question with one retrieved document, a
//! question with released keywords, and the bare question. Generators are
//! either a remote chat-completion endpoint or a deterministic mock.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::histogram::{normalized_words, NormalizedToken};

pub const DEFAULT_MAX_TOKENS: usize = 64;

const DEFAULT_WITH_DOCUMENT: &str = include_str!("../templates/with_document.txt");
const DEFAULT_WITH_KEYWORDS: &str = include_str!("../templates/with_keywords.txt");
const DEFAULT_ZERO_SHOT: &str = include_str!("../templates/zero_shot.txt");

/// Section markers the default templates use and the mock generator reads.
pub const DOCUMENT_MARKER: &str = "Document:";
pub const KEYWORDS_MARKER: &str = "Keywords:";
pub const QUESTION_MARKER: &str = "Question:";

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("template for {kind:?} needs a value for {{{placeholder}}}")]
    MissingValue {
        kind: TemplateKind,
        placeholder: &'static str,
    },
    #[error("{kind:?} prompt does not accept a {what}")]
    NotAllowed {
        kind: TemplateKind,
        what: &'static str,
    },
    #[error("unresolved placeholder {{{0}}}")]
    UnresolvedPlaceholder(String),
    #[error("invalid {kind:?} template: {reason}")]
    InvalidTemplate { kind: TemplateKind, reason: String },
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("request timed out")]
    Timeout,
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response body: {0}")]
    MalformedResponse(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("auth token environment variable {0} is not set")]
    MissingAuth(String),
}

impl GenerationError {
    fn is_retryable(&self) -> bool {
        match self {
            Self::Timeout | Self::Transport(_) => true,
            Self::Status { status, .. } => *status == 429 || (500..600).contains(status),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    WithDocument,
    WithKeywords,
    ZeroShot,
}

impl TemplateKind {
    fn file_name(self) -> &'static str {
        match self {
            Self::WithDocument => "with_document.txt",
            Self::WithKeywords => "with_keywords.txt",
            Self::ZeroShot => "zero_shot.txt",
        }
    }

    fn default_text(self) -> &'static str {
        match self {
            Self::WithDocument => DEFAULT_WITH_DOCUMENT,
            Self::WithKeywords => DEFAULT_WITH_KEYWORDS,
            Self::ZeroShot => DEFAULT_ZERO_SHOT,
        }
    }

    fn allows(self, placeholder: &str) -> bool {
        match placeholder {
            "question" => true,
            "document" => self == Self::WithDocument,
            "keywords" => self == Self::WithKeywords,
            _ => false,
        }
    }
}

enum Segment<'a> {
    Text(&'a str),
    Placeholder(&'a str),
}

/// Splits a template into literal text and `{name}` placeholders, where `name`
/// is a non-empty run of ASCII lowercase letters or underscores.
fn segments(template: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            out.push(Segment::Text(&rest[..open]));
            out.push(Segment::Placeholder(&after[..name_len]));
            rest = &after[name_len + 1..];
        } else {
            out.push(Segment::Text(&rest[..=open]));
            rest = after;
        }
    }
    out.push(Segment::Text(rest));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    kind: TemplateKind,
    template: String,
}

impl PromptTemplate {
    pub fn new(kind: TemplateKind, template: impl Into<String>) -> Result<Self, GenerationError> {
        let template = template.into();
        let mut found: Vec<&str> = Vec::new();
        for seg in segments(&template) {
            if let Segment::Placeholder(name) = seg {
                if !kind.allows(name) {
                    return Err(GenerationError::InvalidTemplate {
                        kind,
                        reason: format!("placeholder {{{name}}} not allowed"),
                    });
                }
                found.push(name);
            }
        }
        let required: &[&str] = match kind {
            TemplateKind::WithDocument => &["question", "document"],
            TemplateKind::WithKeywords => &["question", "keywords"],
            TemplateKind::ZeroShot => &["question"],
        };
        if let Some(missing) = required.iter().find(|r| !found.contains(r)) {
            return Err(GenerationError::InvalidTemplate {
                kind,
                reason: format!("missing placeholder {{{missing}}}"),
            });
        }
        Ok(Self { kind, template })
    }

    pub fn default_for(kind: TemplateKind) -> Self {
        Self::new(kind, kind.default_text()).expect("embedded templates are valid")
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn text(&self) -> &str {
        &self.template
    }
}

/// The three templates a run uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub with_document: PromptTemplate,
    pub with_keywords: PromptTemplate,
    pub zero_shot: PromptTemplate,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            with_document: PromptTemplate::default_for(TemplateKind::WithDocument),
            with_keywords: PromptTemplate::default_for(TemplateKind::WithKeywords),
            zero_shot: PromptTemplate::default_for(TemplateKind::ZeroShot),
        }
    }
}

impl Templates {
    /// Loads `with_document.txt`, `with_keywords.txt` and `zero_shot.txt` from
    /// `dir`; missing files keep the embedded defaults.
    pub fn load_dir(dir: &Path) -> Result<Self, GenerationError> {
        let load = |kind: TemplateKind| -> Result<PromptTemplate, GenerationError> {
            let path = dir.join(kind.file_name());
            match std::fs::read_to_string(&path) {
                Ok(text) => PromptTemplate::new(kind, text),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    Ok(PromptTemplate::default_for(kind))
                }
                Err(source) => Err(GenerationError::Io {
                    path: path.display().to_string(),
                    source,
                }),
            }
        };
        Ok(Self {
            with_document: load(TemplateKind::WithDocument)?,
            with_keywords: load(TemplateKind::WithKeywords)?,
            zero_shot: load(TemplateKind::ZeroShot)?,
        })
    }
}

/// Substitutes the placeholders of `template`. Keywords are joined by `", "`
/// in release order.
pub fn render_prompt(
    template: &PromptTemplate,
    question: &str,
    document: Option<&str>,
    keywords: Option<&[NormalizedToken]>,
) -> Result<String, GenerationError> {
    let kind = template.kind;
    if document.is_some() && !kind.allows("document") {
        return Err(GenerationError::NotAllowed {
            kind,
            what: "document",
        });
    }
    if keywords.is_some() && !kind.allows("keywords") {
        return Err(GenerationError::NotAllowed {
            kind,
            what: "keyword list",
        });
    }
    let joined = keywords.map(|ks| {
        ks.iter()
            .map(NormalizedToken::as_str)
            .collect::<Vec<_>>()
            .join(", ")
    });
    let mut out = String::with_capacity(template.template.len() + question.len());
    for seg in segments(&template.template) {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Placeholder("question") => out.push_str(question),
            Segment::Placeholder("document") => {
                out.push_str(document.ok_or(GenerationError::MissingValue {
                    kind,
                    placeholder: "document",
                })?)
            }
            Segment::Placeholder("keywords") => match joined.as_deref() {
                Some(k) if !k.is_empty() => out.push_str(k),
                _ => {
                    return Err(GenerationError::MissingValue {
                        kind,
                        placeholder: "keywords",
                    })
                }
            },
            Segment::Placeholder(other) => {
                return Err(GenerationError::UnresolvedPlaceholder(other.to_owned()))
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(prompt: String, max_tokens: usize) -> Result<Self, GenerationError> {
        if prompt.is_empty() {
            return Err(GenerationError::InvalidRequest("empty prompt".into()));
        }
        if max_tokens == 0 {
            return Err(GenerationError::InvalidRequest(
                "max_tokens must be >= 1".into(),
            ));
        }
        Ok(Self {
            prompt,
            max_tokens,
            temperature: 0.0,
            seed: None,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }
}

pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError>;
}

/// Built-in deterministic behaviors of [`MockGenerator`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", content = "value", rename_all = "snake_case")]
pub enum MockBehavior {
    /// Document prompts: the document's most frequent normalized tokens.
    /// Keyword prompts: the keywords. Bare prompts: `"unknown"`.
    EchoDocumentKeywords,
    /// Keyword prompts: the keywords verbatim. Anything else: `"unknown"`.
    AnswerFromKeywords,
    FixedString(String),
}

impl std::str::FromStr for MockBehavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "echo" | "echo-document-keywords" => Ok(Self::EchoDocumentKeywords),
            "keywords" | "answer-from-keywords" => Ok(Self::AnswerFromKeywords),
            other => other
                .strip_prefix("fixed:")
                .map(|v| Self::FixedString(v.to_owned()))
                .ok_or_else(|| format!("unknown mock behavior {other:?}")),
        }
    }
}

/// Number of document tokens echoed by [`MockBehavior::EchoDocumentKeywords`].
pub const ECHO_TOKENS: usize = 8;

const MOCK_FALLBACK: &str = "unknown";

/// Text following `marker` up to the last question marker, if the marker is present.
fn section<'a>(prompt: &'a str, marker: &str) -> Option<&'a str> {
    let start = prompt.find(marker)? + marker.len();
    let body = &prompt[start..];
    let end = body.rfind(QUESTION_MARKER).unwrap_or(body.len());
    Some(body[..end].trim())
}

fn top_document_tokens(document: &str, limit: usize) -> Vec<NormalizedToken> {
    let words = normalized_words(document);
    let mut stats: HashMap<&NormalizedToken, (usize, usize)> = HashMap::new();
    for (pos, w) in words.iter().enumerate() {
        stats.entry(w).or_insert((0, pos)).0 += 1;
    }
    let mut ranked: Vec<_> = stats.into_iter().collect();
    ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    ranked
        .into_iter()
        .take(limit)
        .map(|(t, _)| t.clone())
        .collect()
}

fn truncate_words(text: &str, max_words: usize) -> String {
    text.split_whitespace()
        .take(max_words)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deterministic generator for hermetic runs. The output depends only on the
/// prompt; the seed is accepted and ignored.
pub fn mock_generate(request: &GenerationRequest, behavior: &MockBehavior) -> String {
    let text = match behavior {
        MockBehavior::FixedString(s) => return s.clone(),
        MockBehavior::EchoDocumentKeywords => {
            if let Some(doc) = section(&request.prompt, DOCUMENT_MARKER) {
                top_document_tokens(doc, ECHO_TOKENS)
                    .iter()
                    .map(NormalizedToken::as_str)
                    .collect::<Vec<_>>()
                    .join(" ")
            } else if let Some(k) = section(&request.prompt, KEYWORDS_MARKER) {
                k.to_owned()
            } else {
                MOCK_FALLBACK.to_owned()
            }
        }
        MockBehavior::AnswerFromKeywords => section(&request.prompt, KEYWORDS_MARKER)
            .map_or_else(|| MOCK_FALLBACK.to_owned(), str::to_owned),
    };
    truncate_words(&text, request.max_tokens)
}

#[derive(Debug, Clone)]
pub struct MockGenerator {
    pub behavior: MockBehavior,
}

impl MockGenerator {
    pub fn new(behavior: MockBehavior) -> Self {
        Self { behavior }
    }
}

impl Generator for MockGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        Ok(mock_generate(request, &self.behavior))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff_ms: 200,
            max_backoff_ms: 10_000,
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff before retry number `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt.saturating_sub(1)).min(20);
        Duration::from_millis(
            self.initial_backoff_ms
                .saturating_mul(factor)
                .min(self.max_backoff_ms),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding a bearer token, if any.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_parallel() -> usize {
    8
}

impl GeneratorEndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            auth_env: None,
            timeout_secs: default_timeout(),
            max_parallel: default_parallel(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            max,
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    max_tokens: usize,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

/// Client for an OpenAI-style `POST {base_url}/chat/completions` endpoint.
#[derive(Debug)]
pub struct HttpGenerator {
    config: GeneratorEndpointConfig,
    client: reqwest::blocking::Client,
    token: Option<String>,
    limiter: Limiter,
}

impl HttpGenerator {
    pub fn new(config: GeneratorEndpointConfig) -> Result<Self, GenerationError> {
        if config.max_parallel == 0 {
            return Err(GenerationError::InvalidRequest(
                "max_parallel must be >= 1".into(),
            ));
        }
        if !(config.timeout_secs > 0.0) || !config.timeout_secs.is_finite() {
            return Err(GenerationError::InvalidRequest(
                "timeout must be positive".into(),
            ));
        }
        let token = match &config.auth_env {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| GenerationError::MissingAuth(var.clone()))?)
            }
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| GenerationError::Transport(e.to_string()))?;
        Ok(Self {
            limiter: Limiter::new(config.max_parallel),
            config,
            client,
            token,
        })
    }

    pub fn config(&self) -> &GeneratorEndpointConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn attempt(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            seed: request.seed,
        };
        let mut builder = self.client.post(self.endpoint()).json(&body);
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let _permit = self.limiter.acquire();
        let response = builder.send().map_err(map_reqwest_error)?;
        let status = response.status();
        let text = response.text().map_err(map_reqwest_error)?;
        if !status.is_success() {
            return Err(GenerationError::Status {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| GenerationError::MalformedResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GenerationError::MalformedResponse("no message content".into()))
    }
}

fn map_reqwest_error(e: reqwest::Error) -> GenerationError {
    if e.is_timeout() {
        GenerationError::Timeout
    } else {
        GenerationError::Transport(e.to_string())
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        debug!(
            "chat request model={} max_tokens={} prompt=<redacted, {} chars>",
            self.config.model,
            request.max_tokens,
            request.prompt.chars().count()
        );
        let mut attempt = 0;
        loop {
            match self.attempt(request) {
                Ok(text) => {
                    debug!("chat response <redacted, {} chars>", text.chars().count());
                    return Ok(text);
                }
                Err(e) if e.is_retryable() && attempt < self.config.retry.max_retries => {
                    attempt += 1;
                    let wait = self.config.retry.backoff(attempt);
                    warn!("generation attempt {attempt} failed ({e}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
                Err(e) => return Err(e),
            }
        }
    }
}
