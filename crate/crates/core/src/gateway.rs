//! Model backends, response cache, retries, majority voting and output parsing.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codebook::{CodeId, Codebook};
use crate::corpus::{logical_time, Assignment, Message, MessageId};
use crate::prompt::{assemble_prompt, LabelSet, PromptContext, PromptError, PromptText, PromptVariant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backend: String,
    pub model: String,
    pub temperature: f64,
    pub votes: u32,
    pub request_reasoning: bool,
    pub max_retries: u32,
    /// Base delay of the exponential backoff between retries.
    pub backoff_ms: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backend: "mock".into(),
            model: "mock-1".into(),
            temperature: 0.0,
            votes: 1,
            request_reasoning: true,
            max_retries: 3,
            backoff_ms: 200,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidConfig(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.votes == 0 {
            return Err(GatewayError::InvalidConfig("votes must be at least 1".into()));
        }
        if self.votes > 1 && self.votes % 2 == 0 {
            return Err(GatewayError::InvalidConfig(format!("votes must be odd, got {}", self.votes)));
        }
        Ok(())
    }

    /// Stable text of the fields that influence a completion.
    fn fingerprint(&self) -> String {
        format!(
            "{}\u{1f}{}\u{1f}{:?}\u{1f}{}",
            self.backend, self.model, self.temperature, self.request_reasoning
        )
    }
}

/// Identifies the unit of work behind a request; used for logging and scripted mocks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RequestMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_id: Option<String>,
}

impl RequestMeta {
    pub fn new(message_id: impl Into<String>, variant_id: impl Into<String>) -> Self {
        RequestMeta { message_id: Some(message_id.into()), variant_id: Some(variant_id.into()) }
    }
}

#[derive(Debug, Clone)]
pub struct BackendRequest<'a> {
    pub prompt: &'a str,
    pub model: &'a str,
    pub temperature: f64,
    pub vote_index: u32,
    pub attempt: u32,
    pub meta: &'a RequestMeta,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend failure: {0}")]
    Permanent(String),
}

impl BackendError {
    /// 408, 429 and 5xx are worth retrying; other statuses are not.
    pub fn from_status(status: u16, body: impl Into<String>) -> Self {
        let text = format!("HTTP {status}: {}", body.into());
        if status == 408 || status == 429 || status >= 500 {
            BackendError::Transient(text)
        } else {
            BackendError::Permanent(text)
        }
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, req: &BackendRequest<'_>) -> Result<String, BackendError>;
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Conditions a mock rule matches on. Empty fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockMatch {
    pub prompt_hash: Option<String>,
    pub contains: Option<String>,
    pub message_id: Option<String>,
    pub variant_id: Option<String>,
}

impl MockMatch {
    fn matches(&self, req: &BackendRequest<'_>, hash: &str) -> bool {
        self.prompt_hash.as_deref().is_none_or(|h| h == hash)
            && self.contains.as_deref().is_none_or(|s| req.prompt.contains(s))
            && self.message_id.as_deref().is_none_or(|m| req.meta.message_id.as_deref() == Some(m))
            && self.variant_id.as_deref().is_none_or(|v| req.meta.variant_id.as_deref() == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "kebab-case")]
pub enum MockReply {
    /// One label per vote, cycled; rendered as a `Code:` / `Reason:` answer.
    Labels { labels: Vec<String> },
    /// Verbatim responses, one per vote, cycled.
    Raw { texts: Vec<String> },
    /// Answers with the code of the first additional example in the prompt.
    FirstListedExample,
    /// Fails the first `times` calls for a prompt, then falls through to later rules.
    Fail {
        #[serde(default)]
        transient: bool,
        #[serde(default = "one")]
        times: u32,
    },
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub when: MockMatch,
    #[serde(flatten)]
    pub reply: MockReply,
}

/// JSON description of a deterministic mock backend.
///
/// Resolution order: `rules` (first match), then `script[variant][message]`, then
/// `default`. A request nothing matches is a permanent error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSpec {
    pub rules: Vec<MockRule>,
    pub script: BTreeMap<String, BTreeMap<String, String>>,
    pub default: Option<MockReply>,
}

impl MockSpec {
    pub fn constant(label: impl Into<String>) -> Self {
        MockSpec { default: Some(MockReply::Labels { labels: vec![label.into()] }), ..Default::default() }
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

pub struct MockBackend {
    spec: MockSpec,
    calls: AtomicU64,
    failures: Mutex<HashMap<(usize, String), u32>>,
}

impl MockBackend {
    pub fn new(spec: MockSpec) -> Self {
        MockBackend { spec, calls: AtomicU64::new(0), failures: Mutex::new(HashMap::new()) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

pub fn render_answer(label: &str, reason: &str) -> String {
    format!("Code: {label}\nReason: {reason}")
}

fn first_listed_example(prompt: &str) -> Option<&str> {
    let extra = prompt.split("Additional coded examples:").nth(1)?;
    extra.lines().find_map(|l| l.trim().strip_prefix("Code:")).map(str::trim)
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn complete(&self, req: &BackendRequest<'_>) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let hash = sha256_hex(req.prompt.as_bytes());
        let vote = req.vote_index as usize;
        for (i, rule) in self.spec.rules.iter().enumerate() {
            if !rule.when.matches(req, &hash) {
                continue;
            }
            if let MockReply::Fail { transient, times } = rule.reply {
                let mut failures = self.failures.lock().unwrap();
                let seen = failures.entry((i, hash.clone())).or_insert(0);
                if *seen < times {
                    *seen += 1;
                    let msg = format!("scripted failure {} of {times}", *seen);
                    return Err(if transient { BackendError::Transient(msg) } else { BackendError::Permanent(msg) });
                }
                continue;
            }
            return reply(&rule.reply, vote, req.prompt);
        }
        if let (Some(v), Some(m)) = (&req.meta.variant_id, &req.meta.message_id) {
            if let Some(label) = self.spec.script.get(v).and_then(|s| s.get(m)) {
                return Ok(render_answer(label, "scripted reply"));
            }
        }
        match &self.spec.default {
            Some(r) => reply(r, vote, req.prompt),
            None => Err(BackendError::Permanent("mock has no reply for this request".into())),
        }
    }
}

fn reply(r: &MockReply, vote: usize, prompt: &str) -> Result<String, BackendError> {
    match r {
        MockReply::Labels { labels } if !labels.is_empty() => {
            Ok(render_answer(&labels[vote % labels.len()], "mock reply"))
        }
        MockReply::Raw { texts } if !texts.is_empty() => Ok(texts[vote % texts.len()].clone()),
        MockReply::FirstListedExample => first_listed_example(prompt)
            .map(|label| render_answer(label, "first listed example"))
            .ok_or_else(|| BackendError::Permanent("prompt has no additional examples".into())),
        _ => Err(BackendError::Permanent("empty mock reply".into())),
    }
}

/// OpenAI-compatible chat-completions endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    /// Environment variable holding the API key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    "QCODE_API_KEY".into()
}

fn default_timeout() -> u64 {
    120
}

pub struct HttpBackend {
    cfg: HttpConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn from_env(cfg: HttpConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&cfg.api_key_env)
            .map_err(|_| GatewayError::InvalidConfig(format!("environment variable {} is not set", cfg.api_key_env)))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        Ok(HttpBackend { cfg, api_key, agent })
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        "http"
    }

    fn complete(&self, req: &BackendRequest<'_>) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "model": req.model,
            "temperature": req.temperature,
            "messages": [{"role": "user", "content": req.prompt}],
        });
        let mut response = self
            .agent
            .post(&self.cfg.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| match e {
                ureq::Error::StatusCode(code) => BackendError::from_status(code, "request rejected"),
                ureq::Error::Io(_) | ureq::Error::Timeout(_) | ureq::Error::ConnectionFailed => {
                    BackendError::Transient(e.to_string())
                }
                other => BackendError::Permanent(other.to_string()),
            })?;
        let value: serde_json::Value =
            response.body_mut().read_json().map_err(|e| BackendError::Permanent(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Permanent("response has no message content".into()))
    }
}

/// Backend choice as it appears in config files and API requests.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendSpec {
    Mock {
        #[serde(default)]
        spec: MockSpec,
    },
    Http(HttpConfig),
}

impl BackendSpec {
    pub fn gateway(&self) -> Result<Gateway, GatewayError> {
        Ok(match self {
            BackendSpec::Mock { spec } => Gateway::mock(spec.clone()).0,
            BackendSpec::Http(cfg) => Gateway::new(Arc::new(HttpBackend::from_env(cfg.clone())?)),
        })
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParseError {
    #[error("no `Code:` line in response")]
    NoLabelLine,
    #[error("label {text:?} is not one of the legal labels")]
    UnknownLabel { text: String },
    #[error("response names several labels: {labels:?}")]
    Conflict { labels: Vec<String> },
    #[error("{0}")]
    Other(String),
}

/// Extracts the code from a `Code: <label>` line and the justification after it.
///
/// Labels match exactly (case-insensitive) on display name or id. A label line naming
/// more than one legal label, or several label lines that disagree, is a conflict.
pub fn parse_output(raw: &str, legal: &LabelSet) -> Result<(CodeId, String), ParseError> {
    let mut found: Vec<CodeId> = Vec::new();
    let mut reason: Option<String> = None;
    let mut rest = Vec::new();
    let lines: Vec<&str> = raw.lines().collect();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i].trim().trim_start_matches(['*', '#', '-', ' ']);
        let lower = line.to_ascii_lowercase();
        if lower.starts_with("code:") {
            let value = line[5..].trim().trim_matches(['*', '"', '\'', '.', '`', ' ']);
            match legal.resolve(value) {
                Some(label) => found.push(label.id.clone()),
                None => {
                    let named = labels_named_in(value, legal);
                    return Err(if named.len() > 1 {
                        ParseError::Conflict { labels: named }
                    } else {
                        ParseError::UnknownLabel { text: value.to_string() }
                    });
                }
            }
        } else if lower.starts_with("reason:") || lower.starts_with("reasoning:") {
            let head = line.split_once(':').map_or("", |(_, r)| r.trim());
            let mut text = vec![head.to_string()];
            text.extend(lines[i + 1..].iter().map(|l| l.to_string()));
            reason = Some(text.join("\n").trim().to_string());
            break;
        } else {
            rest.push(lines[i]);
        }
        i += 1;
    }
    found.dedup();
    let mut distinct = found.clone();
    distinct.sort();
    distinct.dedup();
    match distinct.len() {
        0 => Err(ParseError::NoLabelLine),
        1 => Ok((found.remove(0), reason.unwrap_or_else(|| rest.join("\n").trim().to_string()))),
        _ => Err(ParseError::Conflict { labels: found.iter().map(|c| c.to_string()).collect() }),
    }
}

/// Legal labels mentioned inside `text`, longest names first, without overlaps.
fn labels_named_in(text: &str, legal: &LabelSet) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut names: Vec<(String, &CodeId)> = legal
        .iter()
        .flat_map(|l| [(l.display.to_lowercase(), &l.id), (l.id.as_str().to_lowercase(), &l.id)])
        .collect();
    names.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
    let mut taken = vec![false; lower.len()];
    let mut hits: Vec<(usize, String)> = Vec::new();
    for (name, id) in names {
        if name.is_empty() {
            continue;
        }
        let mut from = 0;
        while let Some(pos) = lower[from..].find(&name) {
            let start = from + pos;
            let end = start + name.len();
            let before_ok = start == 0 || !lower.as_bytes()[start - 1].is_ascii_alphanumeric();
            let after_ok = end == lower.len() || !lower.as_bytes()[end].is_ascii_alphanumeric();
            if before_ok && after_ok && !taken[start..end].iter().any(|t| *t) {
                taken[start..end].iter_mut().for_each(|t| *t = true);
                hits.push((start, id.to_string()));
            }
            from = end;
        }
    }
    hits.sort();
    let mut out: Vec<String> = Vec::new();
    for (_, id) in hits {
        if !out.contains(&id) {
            out.push(id);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTrace {
    pub votes: Vec<CodeId>,
    pub tie: bool,
}

/// Modal label; ties go to the label whose first occurrence is earliest.
pub fn majority_vote(outputs: &[CodeId]) -> Option<(CodeId, bool)> {
    let mut tally: Vec<(&CodeId, usize)> = Vec::new();
    for o in outputs {
        match tally.iter_mut().find(|(c, _)| *c == o) {
            Some((_, n)) => *n += 1,
            None => tally.push((o, 1)),
        }
    }
    let best = tally.iter().map(|(_, n)| *n).max()?;
    let mut leaders = tally.iter().filter(|(_, n)| *n == best);
    let winner = leaders.next()?.0.clone();
    Some((winner, leaders.next().is_some()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledOutput {
    pub code_id: CodeId,
    pub justification: String,
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote_trace: Option<VoteTrace>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GatewayError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("output still unparseable after {attempts} attempts ({error}): {raw:?}")]
    Unparseable { attempts: u32, raw: String, error: ParseError },
    #[error("backend failed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("backend failure: {0}")]
    Permanent(String),
    #[error(transparent)]
    Prompt(#[from] PromptErrorText),
}

/// Serializable wrapper for prompt assembly failures inside a run.
#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[error("{0}")]
pub struct PromptErrorText(pub String);

impl From<PromptError> for GatewayError {
    fn from(e: PromptError) -> Self {
        GatewayError::Prompt(PromptErrorText(e.to_string()))
    }
}

/// Raw completions keyed by sha256 of (prompt bytes, config fingerprint, vote index).
/// Entries are only written once the response parsed.
#[derive(Default)]
pub struct ResponseCache {
    slots: Mutex<HashMap<String, Arc<Mutex<Option<String>>>>>,
}

impl ResponseCache {
    pub fn key(prompt: &str, cfg: &ModelConfig, vote: u32) -> String {
        let mut h = Sha256::new();
        h.update(prompt.as_bytes());
        h.update([0u8]);
        h.update(cfg.fingerprint().as_bytes());
        h.update([0u8]);
        h.update(vote.to_le_bytes());
        hex::encode(h.finalize())
    }

    fn slot(&self, key: &str) -> Arc<Mutex<Option<String>>> {
        self.slots.lock().unwrap().entry(key.to_string()).or_default().clone()
    }

    pub fn len(&self) -> usize {
        self.slots.lock().unwrap().values().filter(|s| s.lock().unwrap().is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.slots
            .lock()
            .unwrap()
            .iter()
            .filter_map(|(k, v)| v.lock().unwrap().clone().map(|raw| (k.clone(), raw)))
            .collect()
    }

    pub fn restore(&self, entries: BTreeMap<String, String>) {
        let mut slots = self.slots.lock().unwrap();
        for (k, v) in entries {
            slots.insert(k, Arc::new(Mutex::new(Some(v))));
        }
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: ResponseCache,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Gateway { backend, cache: ResponseCache::default() }
    }

    pub fn mock(spec: MockSpec) -> (Self, Arc<MockBackend>) {
        let backend = Arc::new(MockBackend::new(spec));
        (Gateway::new(backend.clone()), backend)
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// One completion, parsed by `parse`, cached and retried.
    ///
    /// Transient backend errors and unparseable responses are retried up to
    /// `cfg.max_retries` times; permanent errors return immediately.
    pub fn complete_with<T>(
        &self,
        prompt: &str,
        cfg: &ModelConfig,
        vote_index: u32,
        meta: &RequestMeta,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<(T, String), GatewayError> {
        cfg.validate()?;
        let slot = self.cache.slot(&ResponseCache::key(prompt, cfg, vote_index));
        let mut cached = slot.lock().unwrap();
        if let Some(raw) = cached.as_ref() {
            if let Ok(v) = parse(raw) {
                return Ok((v, raw.clone()));
            }
        }
        let attempts = cfg.max_retries + 1;
        let mut last_parse: Option<(String, ParseError)> = None;
        let mut last_err = String::new();
        for attempt in 0..attempts {
            if attempt > 0 && cfg.backoff_ms > 0 {
                let factor = 1u64 << (attempt - 1).min(6);
                std::thread::sleep(Duration::from_millis(cfg.backoff_ms.saturating_mul(factor)));
            }
            let req = BackendRequest {
                prompt,
                model: &cfg.model,
                temperature: cfg.temperature,
                vote_index,
                attempt,
                meta,
            };
            match self.backend.complete(&req) {
                Ok(raw) => match parse(&raw) {
                    Ok(v) => {
                        *cached = Some(raw.clone());
                        return Ok((v, raw));
                    }
                    Err(e) => last_parse = Some((raw, e)),
                },
                Err(BackendError::Transient(msg)) => last_err = msg,
                Err(BackendError::Permanent(msg)) => return Err(GatewayError::Permanent(msg)),
            }
        }
        Err(match last_parse {
            Some((raw, error)) => GatewayError::Unparseable { attempts, raw, error },
            None => GatewayError::Exhausted { attempts, last: last_err },
        })
    }

    /// Codes one assembled prompt, with majority voting when `cfg.votes > 1`.
    pub fn code_message(
        &self,
        prompt: &PromptText,
        cfg: &ModelConfig,
        meta: &RequestMeta,
    ) -> Result<LabeledOutput, GatewayError> {
        cfg.validate()?;
        let text = prompt.render();
        let mut votes = Vec::with_capacity(cfg.votes as usize);
        for v in 0..cfg.votes {
            let ((code, justification), raw) =
                self.complete_with(&text, cfg, v, meta, |raw| parse_output(raw, &prompt.legal_labels))?;
            votes.push((code, justification, raw));
        }
        if cfg.votes == 1 {
            let (code_id, justification, raw) = votes.remove(0);
            return Ok(LabeledOutput { code_id, justification, raw, vote_trace: None });
        }
        let codes: Vec<CodeId> = votes.iter().map(|v| v.0.clone()).collect();
        let (winner, tie) = majority_vote(&codes).expect("votes >= 1");
        let (code_id, justification, raw) = votes.into_iter().find(|v| v.0 == winner).expect("winner was voted");
        Ok(LabeledOutput { code_id, justification, raw, vote_trace: Some(VoteTrace { votes: codes, tie }) })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    pub message_id: MessageId,
    pub error: GatewayError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutput {
    pub message_id: MessageId,
    pub output: LabeledOutput,
}

/// Result of one variant over a message set. Unparseable or failed messages are listed
/// in `failures` and have no assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant_id: String,
    pub codebook_version: u32,
    pub assignments: Vec<Assignment>,
    pub outputs: Vec<RunOutput>,
    pub failures: Vec<RunFailure>,
}

pub fn coder_id_for(variant_id: &str) -> String {
    format!("llm:{variant_id}")
}

/// Runs `variant` over `messages` with bounded parallelism. Output order follows
/// `messages`, so results are identical regardless of scheduling.
pub fn run_variant(
    gateway: &Gateway,
    cfg: &ModelConfig,
    variant: &PromptVariant,
    cb: &Codebook,
    ctx: &PromptContext,
    messages: &[&Message],
) -> VariantRun {
    let results: Vec<Result<LabeledOutput, GatewayError>> = messages
        .par_iter()
        .map(|m| {
            let prompt = assemble_prompt(variant, cb, ctx, &m.elicited_by, m, ctx.question_for(&m.elicited_by))?;
            gateway.code_message(&prompt, cfg, &RequestMeta::new(m.id.as_str(), variant.id.as_str()))
        })
        .collect();

    let coder = coder_id_for(&variant.id);
    let mut run = VariantRun {
        variant_id: variant.id.clone(),
        codebook_version: cb.version,
        assignments: Vec::new(),
        outputs: Vec::new(),
        failures: Vec::new(),
    };
    for (seq, (m, r)) in messages.iter().zip(results).enumerate() {
        match r {
            Ok(output) => {
                let mut a = Assignment::new(&m.id, &coder, &output.code_id, logical_time(seq as u64));
                a.justification = Some(output.justification.clone());
                run.assignments.push(a);
                run.outputs.push(RunOutput { message_id: m.id.clone(), output });
            }
            Err(error) => run.failures.push(RunFailure { message_id: m.id.clone(), error }),
        }
    }
    run
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::Label;

    fn labels() -> LabelSet {
        LabelSet(vec![
            Label { id: "anger".into(), display: "Stigmatizing (anger)".into() },
            Label { id: "non-stigmatizing".into(), display: "Non-stigmatizing".into() },
            Label { id: "others".into(), display: "Stigmatizing (others)".into() },
        ])
    }

    fn prompt() -> PromptText {
        PromptText {
            role_preamble: "You are a tester.".into(),
            instruction_block: "### Instructions".into(),
            content_block: "### Content".into(),
            output_contract: "### Output format".into(),
            legal_labels: labels(),
        }
    }

    fn fast() -> ModelConfig {
        ModelConfig { backoff_ms: 0, ..Default::default() }
    }

    #[test]
    fn parse_canonical() {
        let (code, why) = parse_output("Code: Stigmatizing (anger)\nReason: blames them", &labels()).unwrap();
        assert_eq!((code.as_str(), why.as_str()), ("anger", "blames them"));
        let (code, _) = parse_output("**Code:** non-stigmatizing", &labels()).unwrap();
        assert_eq!(code.as_str(), "non-stigmatizing");
    }

    #[test]
    fn parse_refuses_free_prose() {
        assert_eq!(parse_output("It is non-stigmatizing I think", &labels()), Err(ParseError::NoLabelLine));
    }

    #[test]
    fn parse_conflicts() {
        let e = parse_output("Code: Stigmatizing (anger) or Non-stigmatizing", &labels()).unwrap_err();
        assert_eq!(e, ParseError::Conflict { labels: vec!["anger".into(), "non-stigmatizing".into()] });
        let e = parse_output("Code: Stigmatizing (anger)\nCode: Non-stigmatizing", &labels()).unwrap_err();
        assert!(matches!(e, ParseError::Conflict { .. }));
        let e = parse_output("Code: Stigmatizing (fear)", &labels()).unwrap_err();
        assert!(matches!(e, ParseError::UnknownLabel { .. }));
    }

    #[test]
    fn majority_and_ties() {
        let c = |s: &str| CodeId::new(s);
        assert_eq!(majority_vote(&[c("A")]), Some((c("A"), false)));
        assert_eq!(majority_vote(&[c("A"), c("B"), c("A")]), Some((c("A"), false)));
        assert_eq!(majority_vote(&[c("A"), c("B")]), Some((c("A"), true)));
        assert_eq!(majority_vote(&[]), None);
    }

    #[test]
    fn constant_mock_and_cache_idempotence() {
        let (gw, mock) = Gateway::mock(MockSpec::constant("Non-stigmatizing"));
        let meta = RequestMeta::default();
        let a = gw.code_message(&prompt(), &fast(), &meta).unwrap();
        let b = gw.code_message(&prompt(), &fast(), &meta).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.code_id.as_str(), "non-stigmatizing");
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn five_votes() {
        let spec = MockSpec {
            default: Some(MockReply::Labels {
                labels: ["anger", "anger", "non-stigmatizing", "anger", "others"].map(String::from).to_vec(),
            }),
            ..Default::default()
        };
        let (gw, _) = Gateway::mock(spec);
        let cfg = ModelConfig { votes: 5, ..fast() };
        let out = gw.code_message(&prompt(), &cfg, &RequestMeta::default()).unwrap();
        assert_eq!(out.code_id.as_str(), "anger");
        let trace = out.vote_trace.unwrap();
        assert_eq!(trace.votes.len(), 5);
        assert!(!trace.tie);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { votes: 4, ..fast() }.validate().is_err());
        assert!(ModelConfig { votes: 0, ..fast() }.validate().is_err());
        assert!(ModelConfig { temperature: -0.1, ..fast() }.validate().is_err());
        let d = ModelConfig::default();
        assert_eq!((d.temperature, d.votes), (0.0, 1));
    }

    #[test]
    fn transient_failures_are_retried() {
        let spec = MockSpec {
            rules: vec![MockRule { when: MockMatch::default(), reply: MockReply::Fail { transient: true, times: 2 } }],
            default: Some(MockReply::Labels { labels: vec!["others".into()] }),
            ..Default::default()
        };
        let (gw, mock) = Gateway::mock(spec);
        let out = gw.code_message(&prompt(), &fast(), &RequestMeta::default()).unwrap();
        assert_eq!(out.code_id.as_str(), "others");
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn retries_exhaust_and_permanent_stops() {
        let fail = |transient| MockSpec {
            rules: vec![MockRule { when: MockMatch::default(), reply: MockReply::Fail { transient, times: 100 } }],
            ..Default::default()
        };
        let (gw, mock) = Gateway::mock(fail(true));
        let err = gw.code_message(&prompt(), &ModelConfig { max_retries: 2, ..fast() }, &RequestMeta::default());
        assert!(matches!(err, Err(GatewayError::Exhausted { attempts: 3, .. })));
        assert_eq!(mock.calls(), 3);
        let (gw, mock) = Gateway::mock(fail(false));
        assert!(matches!(gw.code_message(&prompt(), &fast(), &RequestMeta::default()), Err(GatewayError::Permanent(_))));
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn unparseable_surfaces_raw_text() {
        let spec = MockSpec { default: Some(MockReply::Raw { texts: vec!["no idea".into()] }), ..Default::default() };
        let (gw, _) = Gateway::mock(spec);
        match gw.code_message(&prompt(), &ModelConfig { max_retries: 1, ..fast() }, &RequestMeta::default()) {
            Err(GatewayError::Unparseable { raw, attempts, .. }) => assert_eq!((raw.as_str(), attempts), ("no idea", 2)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(gw.cache().is_empty());
    }

    #[test]
    fn status_classes() {
        assert!(matches!(BackendError::from_status(503, ""), BackendError::Transient(_)));
        assert!(matches!(BackendError::from_status(429, ""), BackendError::Transient(_)));
        assert!(matches!(BackendError::from_status(401, ""), BackendError::Permanent(_)));
    }

    #[test]
    fn mock_spec_json() {
        let spec = MockSpec::from_json(
            r#"{"rules":[{"when":{"contains":"angry"},"reply":"labels","labels":["anger"]}],
                "script":{"L1":{"m1":"others"}},
                "default":{"reply":"labels","labels":["non-stigmatizing"]}}"#,
        )
        .unwrap();
        assert_eq!(spec.rules.len(), 1);
        assert_eq!(spec.script["L1"]["m1"], "others");
    }
}
