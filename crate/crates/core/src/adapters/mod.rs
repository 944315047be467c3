//! Interfaces to language-model services: chat under an active guideline,
//! text embeddings for duplicate detection, and topic choice for the
//! taxonomy classifier. Every capability has a deterministic local stub.

#[cfg(feature = "http")]
pub mod http;
mod limiter;
pub mod stub;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Guideline, GuidelineId, TopicId};

pub use limiter::RateLimiter;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdapterError {
    #[error("provider timed out")]
    Timeout { retry_after_secs: Option<u64> },
    #[error("provider rejected the request ({status}): {message}")]
    Rejected {
        status: u16,
        message: String,
        retry_after_secs: Option<u64>,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("provider unavailable: {0}")]
    Unavailable(String),
}

impl AdapterError {
    /// Seconds the provider asked callers to wait, when it said so.
    pub fn retry_after_secs(&self) -> Option<u64> {
        match self {
            AdapterError::Timeout { retry_after_secs } | AdapterError::Rejected { retry_after_secs, .. } => {
                *retry_after_secs
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Rules the assistant must follow; the active guideline comes first.
    pub system_rules: Vec<String>,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    /// A single-turn request testing `guideline` on `prompt`.
    pub fn with_guideline(guideline: &Guideline, prompt: impl Into<String>) -> Self {
        ChatRequest {
            system_rules: vec![guideline.as_rule()],
            messages: vec![ChatMessage {
                role: Role::User,
                text: prompt.into(),
            }],
        }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.messages.is_empty() {
            return Err(AdapterError::InvalidRequest("at least one message is required".into()));
        }
        for (i, m) in self.messages.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if m.role != expected {
                return Err(AdapterError::InvalidRequest(format!(
                    "message {} should come from the {:?} role",
                    i + 1,
                    expected
                )));
            }
        }
        Ok(())
    }

    /// Text of the most recent user turn.
    pub fn last_user_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.text.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, AdapterError> {
        if values.is_empty() {
            return Err(AdapterError::Malformed("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AdapterError::Malformed("embedding has non-finite values".into()));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum VectorError {
    #[error("vectors have dimensions {left} and {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine similarity of a zero vector is undefined")]
    ZeroVector,
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, VectorError> {
    if a.dimension() != b.dimension() {
        return Err(VectorError::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a.values()), norm(b.values()));
    if na == 0.0 || nb == 0.0 {
        return Err(VectorError::ZeroVector);
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, AdapterError>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, AdapterError>;
}

/// A child topic offered to a [`TopicChooser`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate<'a> {
    pub id: &'a TopicId,
    pub name: &'a str,
    pub description: &'a str,
    /// Example prompt for this topic, in few-shot mode.
    pub example: Option<&'a str>,
}

/// Picks one of `candidates` for `prompt`. The answer is free text naming a
/// candidate (by name or id) or the word `none`.
pub trait TopicChooser: Send + Sync {
    fn choose(&self, prompt: &str, candidates: &[Candidate<'_>]) -> Result<String, AdapterError>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum DedupOutcome {
    Pass,
    DuplicateOf { id: GuidelineId, similarity: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DedupError {
    #[error("dedup threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Provider(#[from] AdapterError),
    #[error(transparent)]
    Vector(#[from] VectorError),
}

/// Compares an already embedded candidate against `existing`. The most similar
/// guideline (lowest id on ties) is reported when it reaches `threshold`.
pub fn dedup_against(
    candidate: &EmbeddingVector,
    existing: &[(GuidelineId, EmbeddingVector)],
    threshold: f64,
) -> Result<DedupOutcome, DedupError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(DedupError::InvalidThreshold(threshold));
    }
    let mut best: Option<(&GuidelineId, f64)> = None;
    for (id, vector) in existing {
        let sim = cosine_similarity(candidate, vector)?;
        let better = match best {
            None => true,
            Some((best_id, best_sim)) => sim > best_sim || (sim == best_sim && id < best_id),
        };
        if better {
            best = Some((id, sim));
        }
    }
    Ok(match best {
        Some((id, similarity)) if similarity >= threshold => DedupOutcome::DuplicateOf {
            id: id.clone(),
            similarity,
        },
        _ => DedupOutcome::Pass,
    })
}

pub fn dedup_check(
    candidate: &str,
    existing: &[(GuidelineId, EmbeddingVector)],
    provider: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<DedupOutcome, DedupError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(DedupError::InvalidThreshold(threshold));
    }
    if existing.is_empty() {
        return Ok(DedupOutcome::Pass);
    }
    let vector = provider.embed(candidate)?;
    dedup_against(&vector, existing, threshold)
}

/// Asks a chat model to pick a topic.
pub struct LlmChooser<C> {
    chat: C,
}

impl<C: ChatProvider> LlmChooser<C> {
    pub fn new(chat: C) -> Self {
        LlmChooser { chat }
    }

    pub fn request(prompt: &str, candidates: &[Candidate<'_>]) -> ChatRequest {
        let mut listing = String::new();
        for c in candidates {
            listing.push_str(&format!("- {}: {}\n", c.name, c.description));
            if let Some(example) = c.example {
                listing.push_str(&format!("  example: {example}\n"));
            }
        }
        ChatRequest {
            system_rules: vec![
                "Classify the user's prompt into one of the listed topics. Reply with the topic name \
                 only, or the single word none if no topic fits."
                    .to_string(),
            ],
            messages: vec![ChatMessage {
                role: Role::User,
                text: format!("Topics:\n{listing}\nPrompt: {prompt}"),
            }],
        }
    }
}

impl<C: ChatProvider> TopicChooser for LlmChooser<C> {
    fn choose(&self, prompt: &str, candidates: &[Candidate<'_>]) -> Result<String, AdapterError> {
        self.chat.chat(&Self::request(prompt, candidates))
    }
}

impl<T: ChatProvider + ?Sized> ChatProvider for Arc<T> {
    fn chat(&self, request: &ChatRequest) -> Result<String, AdapterError> {
        (**self).chat(request)
    }
}

pub const API_KEY_ENV: &str = "CONCORD_PROVIDER_API_KEY";
pub const ENDPOINT_ENV: &str = "CONCORD_PROVIDER_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    /// `stub` or `openai`.
    pub kind: String,
    pub endpoint: Option<String>,
    pub chat_model: String,
    pub embedding_model: String,
    pub embedding_dim: usize,
    pub timeout_secs: u64,
    pub requests_per_minute: u32,
    pub seed: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: "stub".into(),
            endpoint: None,
            chat_model: "gpt-4o-mini".into(),
            embedding_model: "text-embedding-3-small".into(),
            embedding_dim: 1536,
            timeout_secs: 30,
            requests_per_minute: 60,
            seed: 0,
        }
    }
}

/// Shared handles to the three capabilities.
#[derive(Clone)]
pub struct Providers {
    pub chat: Arc<dyn ChatProvider>,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub chooser: Arc<dyn TopicChooser>,
}

impl Providers {
    pub fn stub(seed: u64) -> Self {
        Providers {
            chat: Arc::new(stub::StubChat::default()),
            embedder: Arc::new(stub::HashingEmbedder::new(seed)),
            chooser: Arc::new(stub::KeywordChooser::political()),
        }
    }

    /// Builds the configured providers. Credentials and endpoint overrides come
    /// from the environment.
    pub fn from_config(cfg: &ProviderConfig) -> Result<Self, AdapterError> {
        match cfg.kind.as_str() {
            "stub" => Ok(Self::stub(cfg.seed)),
            #[cfg(feature = "http")]
            "openai" => {
                let endpoint = std::env::var(ENDPOINT_ENV)
                    .ok()
                    .or_else(|| cfg.endpoint.clone())
                    .unwrap_or_else(|| "https://api.openai.com/v1".into());
                let key = std::env::var(API_KEY_ENV)
                    .map_err(|_| AdapterError::InvalidRequest(format!("{API_KEY_ENV} is not set")))?;
                let provider = Arc::new(http::OpenAiProvider::new(endpoint, key, cfg)?);
                Ok(Providers {
                    chat: provider.clone(),
                    embedder: provider.clone(),
                    chooser: Arc::new(LlmChooser::new(provider)),
                })
            }
            other => Err(AdapterError::InvalidRequest(format!("unknown provider {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::stub::HashingEmbedder;
    use super::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    fn gid(s: &str) -> GuidelineId {
        GuidelineId::new(s).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[0.3, -1.2, 4.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let s = cosine_similarity(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(VectorError::DimensionMismatch { left: 1, right: 2 })
        );
        assert_eq!(cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(VectorError::ZeroVector));
    }

    #[test]
    fn chat_request_shape() {
        let empty = ChatRequest { system_rules: vec![], messages: vec![] };
        assert!(matches!(empty.validate(), Err(AdapterError::InvalidRequest(_))));
        let bad = ChatRequest {
            system_rules: vec![],
            messages: vec![ChatMessage { role: Role::Assistant, text: "hi".into() }],
        };
        assert!(bad.validate().is_err());
        let ok = ChatRequest {
            system_rules: vec![],
            messages: vec![
                ChatMessage { role: Role::User, text: "a".into() },
                ChatMessage { role: Role::Assistant, text: "b".into() },
                ChatMessage { role: Role::User, text: "c".into() },
            ],
        };
        ok.validate().unwrap();
        assert_eq!(ok.last_user_text(), Some("c"));
    }

    #[test]
    fn dedup_examples() {
        let e = HashingEmbedder::new(0);
        let text = "Provide neutral information about how to register to vote";
        let existing = vec![(gid("g1"), e.embed(text).unwrap())];
        assert_eq!(
            dedup_check(text, &existing, &e, 0.9).unwrap(),
            DedupOutcome::DuplicateOf { id: gid("g1"), similarity: 1.0 }
        );
        assert_eq!(dedup_check(text, &[], &e, 0.9).unwrap(), DedupOutcome::Pass);
        assert_eq!(
            dedup_check(text, &existing, &e, 0.0),
            Err(DedupError::InvalidThreshold(0.0))
        );
    }

    #[test]
    fn dedup_ties_go_to_lowest_id() {
        let same = v(&[1.0, 2.0]);
        let existing = vec![(gid("b"), same.clone()), (gid("a"), same.clone())];
        match dedup_against(&same, &existing, 0.5).unwrap() {
            DedupOutcome::DuplicateOf { id, .. } => assert_eq!(id, gid("a")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_provider_is_rejected() {
        let cfg = ProviderConfig { kind: "mystery".into(), ..Default::default() };
        assert!(matches!(Providers::from_config(&cfg), Err(AdapterError::InvalidRequest(_))));
        assert!(Providers::from_config(&ProviderConfig::default()).is_ok());
    }

    struct Scripted(&'static str);
    impl ChatProvider for Scripted {
        fn chat(&self, request: &ChatRequest) -> Result<String, AdapterError> {
            request.validate()?;
            Ok(self.0.to_string())
        }
    }

    #[test]
    fn llm_chooser_lists_candidates() {
        let id = TopicId::new("voting").unwrap();
        let candidates = [Candidate {
            id: &id,
            name: "Voting",
            description: "Voting procedures",
            example: Some("Where do I vote?"),
        }];
        let req = LlmChooser::<Scripted>::request("How do ballots work?", &candidates);
        let text = req.last_user_text().unwrap();
        assert!(text.contains("- Voting: Voting procedures"));
        assert!(text.contains("example: Where do I vote?"));
        assert!(text.ends_with("Prompt: How do ballots work?"));
        let chooser = LlmChooser::new(Scripted("Voting"));
        assert_eq!(chooser.choose("x", &candidates).unwrap(), "Voting");
    }
}
