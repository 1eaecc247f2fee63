//! The two reasoning agents: the classification agent, which labels a flow
//! given any retrieved past experience, and the error-analysis agent, which
//! turns a misclassification into a rule.
//!
//! Both sit behind [`ReasoningAgent`], which maps a [`Prompt`] to raw response
//! text. Parsing is shared, so a remote chat model and the offline
//! [`MockAgent`] go through identical label and rule handling.

use std::fs::File;
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{Embedder, FlowEmbedding};
use crate::flow::{format_real, ClassLabel, ClassSet, FlowRecord, NUMERIC_FEATURES};
use crate::library::RetrievalResult;
use crate::remote::{HttpTransport, InFlightLimiter, JsonTransport, RetryPolicy, TransportError};

/// Maximum rule length in characters, marker included.
pub const MAX_RULE_CHARS: usize = 1000;
const TRUNCATION_MARKER: &str = " [truncated]";
const SEPARATOR: &str = "\n\n";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("agent unavailable: {0}")]
    AgentUnavailable(String),
    #[error("agent response timed out")]
    ResponseTimeout,
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("invalid agent configuration: {0}")]
    Config(String),
}

impl From<TransportError> for AgentError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Timeout => AgentError::ResponseTimeout,
            other => AgentError::AgentUnavailable(other.to_string()),
        }
    }
}

// ---------------------------------------------------------------------------
// Prompts

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PromptKind {
    Classify,
    Induce { predicted: ClassLabel, actual: ClassLabel },
}

/// The retrieved experience rendered into a prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub entry_id: u64,
    pub similarity: f64,
    pub rule_text: String,
}

impl RetrievedContext {
    fn from_retrieval(r: &RetrievalResult) -> Option<Self> {
        match r {
            RetrievalResult::Hit { entry, similarity } => Some(RetrievedContext {
                entry_id: entry.entry_id,
                similarity: *similarity,
                rule_text: entry.rule.text.clone(),
            }),
            RetrievalResult::NoContext => None,
        }
    }
}

/// A fully rendered prompt plus the structured inputs it was rendered from.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub kind: PromptKind,
    pub system_text: String,
    pub user_text: String,
    pub flow_json: String,
    pub context: Option<RetrievedContext>,
}

impl Prompt {
    /// Hex SHA-256 over system and user text.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system_text.as_bytes());
        h.update([0u8]);
        h.update(self.user_text.as_bytes());
        hex::encode(h.finalize())
    }
}

fn similarity_text(s: f64) -> String {
    format!("{s:.3}")
}

pub fn build_classification_prompt(flow_json: &str, retrieval: &RetrievalResult, classes: &ClassSet) -> Prompt {
    let system_text = format!(
        "You are a network traffic classification agent for an intrusion detection system.\n\
         Classify the NetFlow record given by the user as exactly one of these classes: {}.\n\
         The record is a JSON object of flow features. If a relevant past experience is \
         provided, it is a rule learned from an earlier classification error on similar \
         traffic; use it to ground your decision.\n\
         Answer with exactly one line of the form `LABEL: <class>` followed by one short line of rationale.",
        classes.names().join(", ")
    );
    let context = RetrievedContext::from_retrieval(retrieval);
    let experience = match &context {
        Some(c) => format!(
            "Relevant past experience (similarity {}): {}",
            similarity_text(c.similarity),
            c.rule_text
        ),
        None => "No relevant past experience.".to_string(),
    };
    Prompt {
        kind: PromptKind::Classify,
        system_text,
        user_text: format!("{flow_json}{SEPARATOR}{experience}"),
        flow_json: flow_json.to_string(),
        context,
    }
}

pub fn build_induction_prompt(
    flow_json: &str,
    predicted: &ClassLabel,
    actual: &ClassLabel,
    retrieval: &RetrievalResult,
) -> Result<Prompt, AgentError> {
    if predicted == actual {
        return Err(AgentError::PreconditionViolated(format!(
            "induction requires a misclassification, got predicted = actual = {actual}"
        )));
    }
    let system_text = "You are an error analysis agent for an intrusion detection system.\n\
         A network flow was misclassified. Compare the flow against the correct class and \
         isolate the features that separate it from the wrongly predicted class (for example, \
         an unusually high average inter-arrival time).\n\
         Respond with one concise rule in exactly this form:\n\
         IF <feature conditions> THEN class=<actual class>; previously misclassified as \
         <predicted class>; key features: <comma-separated feature names>"
        .to_string();
    let context = RetrievedContext::from_retrieval(retrieval);
    let previous = match &context {
        Some(c) => format!(
            "Previous related experience: {} (similarity {})",
            c.rule_text,
            similarity_text(c.similarity)
        ),
        None => "Previous related experience: none".to_string(),
    };
    Ok(Prompt {
        kind: PromptKind::Induce {
            predicted: predicted.clone(),
            actual: actual.clone(),
        },
        system_text,
        user_text: format!("{flow_json}{SEPARATOR}predicted: {predicted}\nactual: {actual}\n{previous}"),
        flow_json: flow_json.to_string(),
        context,
    })
}

// ---------------------------------------------------------------------------
// Label parsing

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Exact,
    Fuzzy,
    Unparsed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentVerdict {
    pub label: ClassLabel,
    pub raw_text: String,
    pub parse_status: ParseStatus,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte offset of the first whole-word, case-insensitive occurrence.
fn find_word(haystack_lower: &str, needle_lower: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(rel) = haystack_lower[from..].find(needle_lower) {
        let start = from + rel;
        let end = start + needle_lower.len();
        let before_ok = haystack_lower[..start].chars().next_back().is_none_or(|c| !is_word_char(c));
        let after_ok = haystack_lower[end..].chars().next().is_none_or(|c| !is_word_char(c));
        if before_ok && after_ok {
            return Some(start);
        }
        from = start + haystack_lower[start..].chars().next().map_or(1, char::len_utf8);
    }
    None
}

/// Extract a label from free text.
///
/// 1. a `LABEL: <name>` line naming a class (or `UNKNOWN`) → exact;
/// 2. the earliest whole-word mention of any class anywhere → fuzzy;
/// 3. otherwise `Unknown` with the first 40 characters → unparsed.
pub fn parse_label(raw: &str, classes: &ClassSet) -> (ClassLabel, ParseStatus) {
    for line in raw.lines() {
        let line = line.trim().trim_matches(|c| c == '*' || c == '`').trim();
        if line.len() < 6 || !line[..6].eq_ignore_ascii_case("label:") {
            continue;
        }
        let value = line[6..]
            .trim()
            .trim_matches(|c: char| c == '*' || c == '`' || c == '"' || c == '\'' || c == '.')
            .trim();
        let label = classes.resolve(value);
        if label.is_known() {
            return (label, ParseStatus::Exact);
        }
        if value.eq_ignore_ascii_case("unknown") {
            return (ClassLabel::unknown(), ParseStatus::Exact);
        }
    }

    let lower = raw.to_lowercase();
    let mut best: Option<(usize, usize)> = None;
    for (idx, name) in classes.names().iter().enumerate() {
        if let Some(pos) = find_word(&lower, &name.to_lowercase()) {
            if best.is_none_or(|(bpos, _)| pos < bpos) {
                best = Some((pos, idx));
            }
        }
    }
    if let Some((_, idx)) = best {
        return (ClassLabel::Known(classes.names()[idx].clone()), ParseStatus::Fuzzy);
    }
    (ClassLabel::Unknown(raw.chars().take(40).collect()), ParseStatus::Unparsed)
}

// ---------------------------------------------------------------------------
// Rules

/// A human-readable rule induced from one misclassification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleText {
    pub text: String,
    pub target_class: ClassLabel,
    pub confused_with: ClassLabel,
}

/// Cap at [`MAX_RULE_CHARS`] characters, marker included.
pub fn truncate_rule(text: &str) -> String {
    if text.chars().count() <= MAX_RULE_CHARS {
        return text.to_string();
    }
    let keep = MAX_RULE_CHARS - TRUNCATION_MARKER.chars().count();
    let mut out: String = text.chars().take(keep).collect();
    out.push_str(TRUNCATION_MARKER);
    out
}

impl RuleText {
    /// Normalize an agent response. A response with an `IF ... THEN` line is
    /// kept from that line on; anything else is wrapped into the template.
    /// Returns the rule and whether the response was well formed.
    pub fn from_response(raw: &str, actual: &ClassLabel, predicted: &ClassLabel) -> (RuleText, bool) {
        let trimmed = raw.trim();
        let start = trimmed.lines().position(|l| {
            let l = l.trim_start();
            l.len() >= 3 && l[..3].eq_ignore_ascii_case("if ") && l.to_ascii_uppercase().contains(" THEN ")
        });
        let (text, well_formed) = match start {
            Some(i) => (trimmed.lines().skip(i).collect::<Vec<_>>().join("\n").trim().to_string(), true),
            None => (
                format!(
                    "IF <unstructured analysis> THEN class={actual}; previously misclassified as {predicted}; \
                     key features: unspecified; analysis: {}",
                    if trimmed.is_empty() { "(empty response)" } else { trimmed }
                ),
                false,
            ),
        };
        (
            RuleText {
                text: truncate_rule(&text),
                target_class: actual.clone(),
                confused_with: predicted.clone(),
            },
            well_formed,
        )
    }

    /// The class named by `THEN class=<name>`, if it is in `classes`.
    pub fn stated_class(text: &str, classes: &ClassSet) -> Option<ClassLabel> {
        let lower = text.to_ascii_lowercase();
        let at = lower.find("then class=")? + "then class=".len();
        let name: String = text[at..]
            .chars()
            .take_while(|c| c.is_alphanumeric() || *c == '_' || *c == '-')
            .collect();
        Some(classes.resolve(&name)).filter(ClassLabel::is_known)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InducedRule {
    pub rule: RuleText,
    pub raw_text: String,
    pub well_formed: bool,
}

// ---------------------------------------------------------------------------
// Agent interface

/// What an agent learns after ground truth for a flow is revealed.
pub struct Observation<'a> {
    pub record: &'a FlowRecord,
    pub embedding: &'a FlowEmbedding,
    pub label: &'a ClassLabel,
}

pub trait ReasoningAgent: Send + Sync {
    /// Raw response text for one prompt. Stateless across flows.
    fn respond(&self, prompt: &Prompt) -> Result<String, AgentError>;

    /// Ground truth feedback during library construction. Remote models ignore it.
    fn observe(&mut self, _obs: &Observation<'_>) {}

    /// Serializable internal state for checkpoints.
    fn export_state(&self) -> Option<Value> {
        None
    }

    fn import_state(&mut self, _state: Value) -> Result<(), AgentError> {
        Ok(())
    }
}

/// Run the classification agent and parse its label. Transport failures propagate.
pub fn classify(agent: &dyn ReasoningAgent, prompt: &Prompt, classes: &ClassSet) -> Result<AgentVerdict, AgentError> {
    if prompt.kind != PromptKind::Classify {
        return Err(AgentError::PreconditionViolated("classify needs a classification prompt".into()));
    }
    let raw_text = agent.respond(prompt)?;
    let (label, parse_status) = parse_label(&raw_text, classes);
    Ok(AgentVerdict {
        label,
        raw_text,
        parse_status,
    })
}

/// Run the error-analysis agent and shape its answer into a rule.
pub fn induce_rule(agent: &dyn ReasoningAgent, prompt: &Prompt) -> Result<InducedRule, AgentError> {
    let PromptKind::Induce { predicted, actual } = &prompt.kind else {
        return Err(AgentError::PreconditionViolated("induce_rule needs an induction prompt".into()));
    };
    if predicted == actual {
        return Err(AgentError::PreconditionViolated("predicted equals actual".into()));
    }
    let raw_text = agent.respond(prompt)?;
    let (rule, well_formed) = RuleText::from_response(&raw_text, actual, predicted);
    Ok(InducedRule {
        rule,
        raw_text,
        well_formed,
    })
}

// ---------------------------------------------------------------------------
// Mock agent

/// Streaming mean and variance (Welford).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStat {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl RunningStat {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).sqrt()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct ClassState {
    count: u64,
    centroid: Vec<f64>,
    features: Vec<RunningStat>,
}

impl ClassState {
    fn new(dim: usize) -> Self {
        ClassState {
            count: 0,
            centroid: vec![0.0; dim],
            features: vec![RunningStat::default(); NUMERIC_FEATURES.len()],
        }
    }

    fn observe(&mut self, record: &FlowRecord, embedding: &FlowEmbedding) {
        self.count += 1;
        let n = self.count as f64;
        for (c, &v) in self.centroid.iter_mut().zip(embedding.values()) {
            *c += (v as f64 - *c) / n;
        }
        for (stat, (_, x)) in self.features.iter_mut().zip(record.numeric_features()) {
            stat.push(x);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MockState {
    classes: Vec<ClassState>,
    global: Vec<RunningStat>,
}

/// Deterministic offline stand-in for the chat model, answering both prompt kinds.
///
/// Classification: the class stated by the retrieved rule when one is in the
/// prompt; otherwise the nearest class centroid (cosine) over observed
/// embeddings; with no observations, `LABEL: UNKNOWN`.
///
/// Induction: conditions on the two numeric features with the largest
/// |z-score| against the running statistics of the wrongly predicted class
/// (all observed flows when that class has none).
pub struct MockAgent {
    embedder: Arc<dyn Embedder>,
    classes: ClassSet,
    state: MockState,
}

/// A feature chosen by the mock inducer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureContrast {
    pub feature: &'static str,
    pub value: f64,
    pub reference_mean: f64,
    pub z: f64,
}

impl MockAgent {
    pub fn new(embedder: Arc<dyn Embedder>, classes: ClassSet) -> Self {
        let dim = embedder.dim();
        let state = MockState {
            classes: (0..classes.len()).map(|_| ClassState::new(dim)).collect(),
            global: vec![RunningStat::default(); NUMERIC_FEATURES.len()],
        };
        MockAgent {
            embedder,
            classes,
            state,
        }
    }

    pub fn observations(&self, class: &ClassLabel) -> u64 {
        self.classes.index_of(class).map_or(0, |i| self.state.classes[i].count)
    }

    pub fn centroid(&self, class: &ClassLabel) -> Option<&[f64]> {
        let st = &self.state.classes[self.classes.index_of(class)?];
        (st.count > 0).then_some(st.centroid.as_slice())
    }

    /// Running statistics per numeric feature, in schema order.
    pub fn feature_stats(&self, class: &ClassLabel) -> Option<&[RunningStat]> {
        let st = &self.state.classes[self.classes.index_of(class)?];
        (st.count > 0).then_some(st.features.as_slice())
    }

    pub fn global_stats(&self) -> &[RunningStat] {
        &self.state.global
    }

    /// Nearest centroid by cosine; ties go to the earlier class.
    pub fn nearest_centroid(&self, embedding: &FlowEmbedding) -> Option<(ClassLabel, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, st) in self.state.classes.iter().enumerate() {
            if st.count == 0 {
                continue;
            }
            let norm = st.centroid.iter().map(|c| c * c).sum::<f64>().sqrt();
            let sim = if norm == 0.0 || embedding.is_zero_sentinel() {
                -1.0
            } else {
                st.centroid.iter().zip(embedding.values()).map(|(c, &v)| c * v as f64).sum::<f64>() / norm
            };
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((i, sim));
            }
        }
        best.map(|(i, s)| (ClassLabel::Known(self.classes.names()[i].clone()), s))
    }

    /// The two most deviating numeric features of `record`.
    pub fn contrast(&self, record: &FlowRecord, predicted: &ClassLabel) -> Vec<FeatureContrast> {
        let reference = self
            .feature_stats(predicted)
            .unwrap_or(&self.state.global);
        let mut scored: Vec<FeatureContrast> = record
            .numeric_features()
            .zip(reference)
            .map(|((feature, value), stat)| FeatureContrast {
                feature,
                value,
                reference_mean: stat.mean,
                z: (value - stat.mean) / stat.std().max(1e-6),
            })
            .collect();
        // Stable sort keeps schema order among equal |z|.
        scored.sort_by(|a, b| b.z.abs().total_cmp(&a.z.abs()));
        scored.truncate(2);
        scored
    }

    fn classify_response(&self, prompt: &Prompt) -> Result<String, AgentError> {
        if let Some(ctx) = &prompt.context {
            if let Some(class) = RuleText::stated_class(&ctx.rule_text, &self.classes) {
                return Ok(format!(
                    "LABEL: {class}\nMatches past experience #{} (similarity {}).",
                    ctx.entry_id,
                    similarity_text(ctx.similarity)
                ));
            }
        }
        let embedding = self
            .embedder
            .embed(&prompt.flow_json)
            .map_err(|e| AgentError::AgentUnavailable(e.to_string()))?;
        Ok(match self.nearest_centroid(&embedding) {
            Some((class, sim)) => format!("LABEL: {class}\nNearest class centroid (cosine {}).", similarity_text(sim)),
            None => "LABEL: UNKNOWN\nNo prior observations.".to_string(),
        })
    }

    fn induce_response(&self, prompt: &Prompt, predicted: &ClassLabel, actual: &ClassLabel) -> Result<String, AgentError> {
        let record = FlowRecord::from_json(&prompt.flow_json)
            .map_err(|e| AgentError::PreconditionViolated(format!("flow payload: {e}")))?;
        let picked = self.contrast(&record, predicted);
        let conditions: Vec<String> = picked
            .iter()
            .map(|c| {
                let threshold = format_real((c.value + c.reference_mean) / 2.0);
                if c.value > c.reference_mean {
                    format!("{} > {threshold}", c.feature)
                } else if c.value < c.reference_mean {
                    format!("{} < {threshold}", c.feature)
                } else {
                    format!("{} = {}", c.feature, format_real(c.value))
                }
            })
            .collect();
        let names: Vec<&str> = picked.iter().map(|c| c.feature).collect();
        Ok(format!(
            "IF {} THEN class={actual}; previously misclassified as {predicted}; key features: {}",
            conditions.join(" AND "),
            names.join(", ")
        ))
    }
}

impl ReasoningAgent for MockAgent {
    fn respond(&self, prompt: &Prompt) -> Result<String, AgentError> {
        match &prompt.kind {
            PromptKind::Classify => self.classify_response(prompt),
            PromptKind::Induce { predicted, actual } => self.induce_response(prompt, predicted, actual),
        }
    }

    fn observe(&mut self, obs: &Observation<'_>) {
        let Some(i) = self.classes.index_of(obs.label) else {
            return;
        };
        self.state.classes[i].observe(obs.record, obs.embedding);
        for (stat, (_, x)) in self.state.global.iter_mut().zip(obs.record.numeric_features()) {
            stat.push(x);
        }
    }

    fn export_state(&self) -> Option<Value> {
        serde_json::to_value(&self.state).ok()
    }

    fn import_state(&mut self, state: Value) -> Result<(), AgentError> {
        let st: MockState = serde_json::from_value(state).map_err(|e| AgentError::Config(e.to_string()))?;
        if st.classes.len() != self.classes.len() {
            return Err(AgentError::Config("checkpoint class count differs".into()));
        }
        self.state = st;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Remote chat agent

/// Chat-completions client. Requests always carry the configured temperature
/// (0.0) and a system + user message pair; no history is kept between flows.
pub struct RemoteChatAgent {
    transport: Box<dyn JsonTransport>,
    model: String,
    temperature: f64,
    max_tokens: u32,
    retry: RetryPolicy,
    limiter: InFlightLimiter,
}

impl RemoteChatAgent {
    pub fn new(transport: Box<dyn JsonTransport>, model: &str, max_tokens: u32) -> Self {
        RemoteChatAgent {
            transport,
            model: model.to_string(),
            temperature: 0.0,
            max_tokens,
            retry: RetryPolicy::default(),
            limiter: InFlightLimiter::new(4),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.limiter = InFlightLimiter::new(n);
        self
    }

    pub fn request_body(&self, prompt: &Prompt) -> Value {
        json!({
            "model": self.model,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": [
                { "role": "system", "content": prompt.system_text },
                { "role": "user", "content": prompt.user_text },
            ],
        })
    }
}

impl ReasoningAgent for RemoteChatAgent {
    fn respond(&self, prompt: &Prompt) -> Result<String, AgentError> {
        let body = self.request_body(prompt);
        let resp = {
            let _permit = self.limiter.acquire();
            self.retry.run(|| self.transport.post_json(&body))?
        };
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| AgentError::AgentUnavailable("response has no choices[0].message.content".into()))
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    RemoteLlm,
    Mock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSpec {
    pub kind: AgentKind,
    pub model_name: String,
    pub temperature: f64,
    pub max_response_tokens: u32,
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    pub retries: u32,
    pub retry_backoff_ms: u64,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub max_in_flight: usize,
}

impl Default for AgentSpec {
    fn default() -> Self {
        AgentSpec {
            kind: AgentKind::Mock,
            model_name: "mock".into(),
            temperature: 0.0,
            max_response_tokens: 256,
            endpoint: None,
            timeout_secs: 60,
            retries: 3,
            retry_backoff_ms: 500,
            api_key_env: None,
            max_in_flight: 4,
        }
    }
}

impl AgentSpec {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.temperature != 0.0 {
            return Err(AgentError::Config(format!(
                "temperature must be 0.0, got {}",
                self.temperature
            )));
        }
        if self.kind == AgentKind::RemoteLlm && self.endpoint.is_none() {
            return Err(AgentError::Config("remote agent needs `endpoint`".into()));
        }
        Ok(())
    }

    pub fn build(&self, embedder: Arc<dyn Embedder>, classes: &ClassSet) -> Result<Box<dyn ReasoningAgent>, AgentError> {
        self.validate()?;
        match self.kind {
            AgentKind::Mock => Ok(Box::new(MockAgent::new(embedder, classes.clone()))),
            AgentKind::RemoteLlm => {
                let endpoint = self.endpoint.as_deref().expect("validated");
                let transport = HttpTransport::new(
                    endpoint,
                    self.api_key_env.as_deref(),
                    Duration::from_secs(self.timeout_secs),
                );
                Ok(Box::new(
                    RemoteChatAgent::new(Box::new(transport), &self.model_name, self.max_response_tokens)
                        .with_retry(RetryPolicy {
                            attempts: self.retries.max(1),
                            initial_backoff: Duration::from_millis(self.retry_backoff_ms),
                        })
                        .with_max_in_flight(self.max_in_flight),
                ))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Transcript

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub flow_id: u64,
    pub kind: String,
    pub prompt_hash: String,
    pub raw_text: String,
    pub parse_status: String,
}

/// JSON Lines log of every raw agent response.
pub struct Transcript {
    out: Option<BufWriter<File>>,
    written: u64,
}

impl Transcript {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Transcript {
            out: Some(BufWriter::new(File::create(path)?)),
            written: 0,
        })
    }

    /// Reopen an existing transcript, dropping everything after byte `len`.
    pub fn resume(path: &Path, len: u64) -> std::io::Result<Self> {
        let mut f = std::fs::OpenOptions::new().write(true).open(path)?;
        f.set_len(len)?;
        f.seek(SeekFrom::End(0))?;
        Ok(Transcript {
            out: Some(BufWriter::new(f)),
            written: len,
        })
    }

    pub fn disabled() -> Self {
        Transcript { out: None, written: 0 }
    }

    pub fn record(&mut self, rec: &TranscriptRecord) -> std::io::Result<()> {
        if let Some(out) = &mut self.out {
            let mut line = serde_json::to_string(rec)?;
            line.push('\n');
            out.write_all(line.as_bytes())?;
            self.written += line.len() as u64;
        }
        Ok(())
    }

    /// Bytes written so far, including any resumed prefix.
    pub fn position(&self) -> u64 {
        self.written
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        if let Some(out) = &mut self.out {
            out.flush()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::flow::to_canonical_json;
    use crate::library::ExperienceEntry;
    use std::sync::Mutex;

    fn classes() -> ClassSet {
        ClassSet::nf_bot_iot()
    }

    fn hit(rule: &str, sim: f64) -> RetrievalResult {
        RetrievalResult::Hit {
            entry: ExperienceEntry {
                entry_id: 7,
                key: FlowEmbedding::zero(4),
                rule: RuleText {
                    text: rule.into(),
                    target_class: ClassLabel::Known("DDoS".into()),
                    confused_with: ClassLabel::Known("DoS".into()),
                },
                predicted: ClassLabel::Known("DoS".into()),
                actual: ClassLabel::Known("DDoS".into()),
                source_flow_id: 3,
                created_seq: 3,
            },
            similarity: sim,
        }
    }

    fn flow_json() -> String {
        let mut r = FlowRecord::zeroed("TCP");
        r.in_pkts = 12;
        r.avg_iat_src_to_dst = 4.5;
        to_canonical_json(&r)
    }

    #[test]
    fn classification_prompt_no_context() {
        let p = build_classification_prompt(&flow_json(), &RetrievalResult::NoContext, &classes());
        assert!(p.user_text.starts_with(&flow_json()));
        assert!(p.user_text.contains("No relevant past experience."));
        for name in classes().names() {
            let list = p.system_text.lines().nth(1).unwrap();
            assert_eq!(list.matches(&format!(" {name},")).count() + list.matches(&format!(" {name}.")).count(), 1);
        }
        assert!(p.system_text.contains("LABEL: <class>"));
    }

    #[test]
    fn classification_prompt_with_hit() {
        let rule = "IF in_pkts > 10 THEN class=DDoS; previously misclassified as DoS; key features: in_pkts";
        let p = build_classification_prompt(&flow_json(), &hit(rule, 0.93), &classes());
        assert!(p.user_text.contains(rule));
        assert!(p.user_text.contains("0.93"));
        let again = build_classification_prompt(&flow_json(), &hit(rule, 0.93), &classes());
        assert_eq!(p, again);
        let other = build_classification_prompt(&flow_json(), &hit("IF x THEN class=DoS", 0.93), &classes());
        assert_ne!(p.user_text, other.user_text);
    }

    #[test]
    fn induction_prompt_contents() {
        let dos = ClassLabel::Known("DoS".into());
        let ddos = ClassLabel::Known("DDoS".into());
        let p = build_induction_prompt(&flow_json(), &dos, &ddos, &RetrievalResult::NoContext).unwrap();
        assert!(p.user_text.contains("predicted: DoS"));
        assert!(p.user_text.contains("actual: DDoS"));
        assert!(p.user_text.contains(&flow_json()));
        let h = build_induction_prompt(&flow_json(), &dos, &ddos, &hit("IF a THEN class=DDoS", 0.8)).unwrap();
        assert!(h.user_text.contains("Previous related experience: IF a THEN class=DDoS"));
        assert_eq!(h, build_induction_prompt(&flow_json(), &dos, &ddos, &hit("IF a THEN class=DDoS", 0.8)).unwrap());
        assert!(matches!(
            build_induction_prompt(&flow_json(), &dos, &dos, &RetrievalResult::NoContext),
            Err(AgentError::PreconditionViolated(_))
        ));
    }

    #[test]
    fn parse_label_rules() {
        let cs = classes();
        assert_eq!(parse_label("LABEL: Benign", &cs), (ClassLabel::Known("Benign".into()), ParseStatus::Exact));
        assert_eq!(
            parse_label("LABEL: DDoS\nHigh packet rate from many sources.", &cs),
            (ClassLabel::Known("DDoS".into()), ParseStatus::Exact)
        );
        assert_eq!(parse_label("label: ddos.", &cs), (ClassLabel::Known("DDoS".into()), ParseStatus::Exact));
        assert_eq!(
            parse_label("This looks like a reconnaissance sweep.", &cs),
            (ClassLabel::Known("Reconnaissance".into()), ParseStatus::Fuzzy)
        );
        let (l, s) = parse_label("insufficient information", &cs);
        assert_eq!(s, ParseStatus::Unparsed);
        assert_eq!(l, ClassLabel::Unknown("insufficient information".into()));
        assert_eq!(parse_label("LABEL: UNKNOWN\nnothing", &cs), (ClassLabel::unknown(), ParseStatus::Exact));
    }

    #[test]
    fn fuzzy_respects_word_boundaries_and_position() {
        let cs = classes();
        // "DoS" inside "DDoS" is not a whole word.
        assert_eq!(parse_label("clearly ddos traffic", &cs).0, ClassLabel::Known("DDoS".into()));
        assert_eq!(parse_label("DoS, not DDoS", &cs).0, ClassLabel::Known("DoS".into()));
        assert_eq!(parse_label("benign? no, DDoS", &cs).0, ClassLabel::Known("Benign".into()));
        let (_, s) = parse_label("LABEL: Noise", &cs);
        assert_eq!(s, ParseStatus::Unparsed);
        let long = "x".repeat(100);
        assert_eq!(parse_label(&long, &cs).0.name().len(), 40);
    }

    #[test]
    fn rule_from_response() {
        let dos = ClassLabel::Known("DoS".into());
        let ddos = ClassLabel::Known("DDoS".into());
        let (r, ok) = RuleText::from_response(
            "Analysis...\nIF in_pkts > 10 THEN class=DDoS; previously misclassified as DoS; key features: in_pkts",
            &ddos,
            &dos,
        );
        assert!(ok);
        assert!(r.text.starts_with("IF in_pkts"));
        let (r, ok) = RuleText::from_response("no idea", &ddos, &dos);
        assert!(!ok);
        assert!(r.text.contains("THEN class=DDoS"));
        assert!(r.text.contains("no idea"));
        let (r, _) = RuleText::from_response("", &ddos, &dos);
        assert!(!r.text.is_empty());
        let (r, _) = RuleText::from_response(&format!("IF a THEN class=DDoS {}", "y".repeat(2000)), &ddos, &dos);
        assert_eq!(r.text.chars().count(), MAX_RULE_CHARS);
        assert!(r.text.ends_with(TRUNCATION_MARKER));
        assert_eq!(RuleText::stated_class(&r.text, &classes()), Some(ddos.clone()));
    }

    fn mock() -> MockAgent {
        MockAgent::new(Arc::new(HashEmbedder::new(64, 0).unwrap()), classes())
    }

    #[test]
    fn cold_mock_says_unknown() {
        let m = mock();
        let p = build_classification_prompt(&flow_json(), &RetrievalResult::NoContext, &classes());
        let v = classify(&m, &p, &classes()).unwrap();
        assert_eq!(v.label, ClassLabel::unknown());
        assert_eq!(v.parse_status, ParseStatus::Exact);
    }

    #[test]
    fn mock_follows_retrieved_rule() {
        let m = mock();
        let rule = "IF in_pkts > 10 THEN class=DDoS; previously misclassified as DoS; key features: in_pkts";
        let p = build_classification_prompt(&flow_json(), &hit(rule, 0.9), &classes());
        assert_eq!(classify(&m, &p, &classes()).unwrap().label, ClassLabel::Known("DDoS".into()));
    }

    #[test]
    fn centroid_is_streaming_mean() {
        let emb = Arc::new(HashEmbedder::new(64, 0).unwrap());
        let mut m = MockAgent::new(emb.clone(), classes());
        let dos = ClassLabel::Known("DoS".into());
        let mut all = Vec::new();
        for i in 0..100u64 {
            let mut r = FlowRecord::zeroed("UDP");
            r.in_bytes = i * 37 % 11;
            r.dst_port = (i % 7) as u16;
            let e = emb.embed(&to_canonical_json(&r)).unwrap();
            m.observe(&Observation {
                record: &r,
                embedding: &e,
                label: &dos,
            });
            all.push(e);
            if i == 0 {
                let c = m.centroid(&dos).unwrap();
                assert!(c.iter().zip(all[0].values()).all(|(a, b)| (*a - *b as f64).abs() < 1e-12));
            }
            if i == 1 {
                let c = m.centroid(&dos).unwrap();
                for (j, v) in c.iter().enumerate() {
                    let mean = (all[0].values()[j] as f64 + all[1].values()[j] as f64) / 2.0;
                    assert!((v - mean).abs() < 1e-12);
                }
            }
        }
        let c = m.centroid(&dos).unwrap();
        for (j, v) in c.iter().enumerate() {
            let batch: f64 = all.iter().map(|e| e.values()[j] as f64).sum::<f64>() / 100.0;
            assert!((v - batch).abs() < 1e-6);
        }
        assert_eq!(m.observations(&dos), 100);
    }

    #[test]
    fn mock_state_round_trips() {
        let emb = Arc::new(HashEmbedder::new(16, 0).unwrap());
        let mut m = MockAgent::new(emb.clone(), classes());
        let r = FlowRecord::zeroed("TCP");
        let e = emb.embed(&to_canonical_json(&r)).unwrap();
        m.observe(&Observation {
            record: &r,
            embedding: &e,
            label: &ClassLabel::Known("Benign".into()),
        });
        let state = m.export_state().unwrap();
        let mut fresh = MockAgent::new(emb, classes());
        fresh.import_state(state.clone()).unwrap();
        assert_eq!(fresh.export_state().unwrap(), state);
    }

    /// Fake chat endpoint that records the request body.
    struct FakeChat {
        reply: Result<Value, TransportError>,
        seen: Mutex<Vec<Value>>,
    }

    impl JsonTransport for Arc<FakeChat> {
        fn post_json(&self, body: &Value) -> Result<Value, TransportError> {
            self.seen.lock().unwrap().push(body.clone());
            self.reply.clone()
        }
    }

    #[test]
    fn remote_agent_wire_format() {
        let fake = Arc::new(FakeChat {
            reply: Ok(json!({"choices":[{"message":{"role":"assistant","content":"LABEL: DDoS\nHigh packet rate"}}]})),
            seen: Mutex::new(Vec::new()),
        });
        let agent = RemoteChatAgent::new(Box::new(fake.clone()), "gpt-x", 128).with_retry(RetryPolicy::no_wait(3));
        let p = build_classification_prompt(&flow_json(), &RetrievalResult::NoContext, &classes());
        let v = classify(&agent, &p, &classes()).unwrap();
        assert_eq!(v.label, ClassLabel::Known("DDoS".into()));
        assert_eq!(v.parse_status, ParseStatus::Exact);
        let body = fake.seen.lock().unwrap()[0].clone();
        assert_eq!(body["temperature"], json!(0.0));
        assert_eq!(body["model"], json!("gpt-x"));
        assert_eq!(body["messages"][0]["role"], json!("system"));
        assert_eq!(body["messages"][1]["content"], json!(p.user_text));
    }

    #[test]
    fn remote_errors_propagate() {
        let fake = Arc::new(FakeChat {
            reply: Err(TransportError::Timeout),
            seen: Mutex::new(Vec::new()),
        });
        let agent = RemoteChatAgent::new(Box::new(fake.clone()), "m", 16).with_retry(RetryPolicy::no_wait(3));
        let p = build_classification_prompt(&flow_json(), &RetrievalResult::NoContext, &classes());
        assert_eq!(classify(&agent, &p, &classes()), Err(AgentError::ResponseTimeout));
        assert_eq!(fake.seen.lock().unwrap().len(), 3);

        let fake = Arc::new(FakeChat {
            reply: Err(TransportError::Network("refused".into())),
            seen: Mutex::new(Vec::new()),
        });
        let agent = RemoteChatAgent::new(Box::new(fake), "m", 16).with_retry(RetryPolicy::no_wait(2));
        assert!(matches!(classify(&agent, &p, &classes()), Err(AgentError::AgentUnavailable(_))));
    }

    #[test]
    fn spec_rejects_nonzero_temperature() {
        let spec = AgentSpec {
            temperature: 0.7,
            ..AgentSpec::default()
        };
        assert!(matches!(spec.validate(), Err(AgentError::Config(_))));
    }

    #[test]
    fn induce_requires_induce_prompt() {
        let m = mock();
        let p = build_classification_prompt(&flow_json(), &RetrievalResult::NoContext, &classes());
        assert!(matches!(induce_rule(&m, &p), Err(AgentError::PreconditionViolated(_))));
    }
}
