//! OpenAI-compatible chat and embedding endpoints over blocking HTTP.
//!
//! Calls block the current thread; async callers should run them on a
//! blocking pool.

use std::time::Duration;

use reqwest::blocking::{Client, Response};
use reqwest::header::RETRY_AFTER;
use serde_json::{json, Value};

use super::{
    AdapterError, ChatProvider, ChatRequest, EmbeddingProvider, EmbeddingVector, ProviderConfig, RateLimiter, Role,
};

pub struct OpenAiProvider {
    client: Client,
    endpoint: String,
    api_key: String,
    chat_model: String,
    embedding_model: String,
    embedding_dim: usize,
    limiter: RateLimiter,
}

impl OpenAiProvider {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>, cfg: &ProviderConfig) -> Result<Self, AdapterError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs.max(1)))
            .build()
            .map_err(|e| AdapterError::Unavailable(e.to_string()))?;
        Ok(OpenAiProvider {
            client,
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            chat_model: cfg.chat_model.clone(),
            embedding_model: cfg.embedding_model.clone(),
            embedding_dim: cfg.embedding_dim,
            limiter: RateLimiter::per_minute(cfg.requests_per_minute),
        })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, AdapterError> {
        self.limiter.acquire();
        let response = self
            .client
            .post(format!("{}/{path}", self.endpoint))
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    AdapterError::Timeout { retry_after_secs: None }
                } else {
                    AdapterError::Unavailable(e.to_string())
                }
            })?;
        decode(response)
    }
}

fn decode(response: Response) -> Result<Value, AdapterError> {
    let status = response.status();
    let retry_after_secs = response
        .headers()
        .get(RETRY_AFTER)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse().ok());
    if status.as_u16() == 408 || status.as_u16() == 504 {
        return Err(AdapterError::Timeout { retry_after_secs });
    }
    if !status.is_success() {
        let message = response.text().unwrap_or_default();
        return Err(AdapterError::Rejected {
            status: status.as_u16(),
            message,
            retry_after_secs,
        });
    }
    response.json().map_err(|e| AdapterError::Malformed(e.to_string()))
}

impl ChatProvider for OpenAiProvider {
    fn chat(&self, request: &ChatRequest) -> Result<String, AdapterError> {
        request.validate()?;
        let mut messages: Vec<Value> = request
            .system_rules
            .iter()
            .map(|rule| json!({"role": "system", "content": rule}))
            .collect();
        messages.extend(request.messages.iter().map(|m| {
            let role = match m.role {
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            json!({"role": role, "content": m.text})
        }));
        let reply = self.post("chat/completions", &json!({"model": self.chat_model, "messages": messages}))?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| AdapterError::Malformed("missing choices[0].message.content".into()))
    }
}

impl EmbeddingProvider for OpenAiProvider {
    fn dimension(&self) -> usize {
        self.embedding_dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, AdapterError> {
        if text.trim().is_empty() {
            return Err(AdapterError::InvalidRequest("cannot embed empty text".into()));
        }
        let reply = self.post("embeddings", &json!({"model": self.embedding_model, "input": text}))?;
        let values: Vec<f64> = reply["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| AdapterError::Malformed("missing data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| AdapterError::Malformed("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        if values.len() != self.embedding_dim {
            return Err(AdapterError::Malformed(format!(
                "embedding has dimension {}, expected {}",
                values.len(),
                self.embedding_dim
            )));
        }
        EmbeddingVector::new(values)
    }
}
