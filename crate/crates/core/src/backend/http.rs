//! JSON-over-HTTP clients for completion and embedding services.
//!
//! Completions: `POST {endpoint}` with `{model, prompt: [..], max_tokens,
//! temperature, seed}` answered by `{choices: [{text, index}]}`.
//! Embeddings: `POST {endpoint}` with `{model, input: [..]}` answered by
//! `{data: [{embedding, index}]}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::{
    CallError, CallResult, CompletionBackend, CompletionRequest, DimensionLock, EmbeddingBackend,
};

fn agent(timeout_secs: u64) -> Agent {
    Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(timeout_secs.max(1))))
        .http_status_as_error(false)
        .build()
        .into()
}

fn post<B: Serialize, R: for<'de> Deserialize<'de>>(
    agent: &Agent,
    url: &str,
    api_key: Option<&str>,
    body: &B,
) -> CallResult<R> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(key) = api_key {
        req = req.header("Authorization", format!("Bearer {key}"));
    }
    let mut resp = req
        .send_json(body)
        .map_err(|e| CallError::Transient(format!("transport: {e}")))?;
    let status = resp.status().as_u16();
    if status == 429 || status >= 500 {
        return Err(CallError::Transient(format!("http status {status}")));
    }
    if status >= 400 {
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        return Err(CallError::Fatal(format!("http status {status}: {text}")));
    }
    resp.body_mut()
        .read_json()
        .map_err(|e| CallError::Fatal(format!("malformed response: {e}")))
}

#[derive(Serialize)]
struct CompletionBody<'a> {
    model: &'a str,
    prompt: &'a [String],
    max_tokens: u32,
    temperature: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    index: Option<usize>,
}

/// Reorders indexed items; unindexed responses keep arrival order.
fn align<T>(items: Vec<(Option<usize>, T)>, expected: usize) -> CallResult<Vec<T>> {
    if items.iter().all(|(i, _)| i.is_none()) {
        return Ok(items.into_iter().map(|(_, t)| t).collect());
    }
    let mut slots: Vec<Option<T>> = (0..expected).map(|_| None).collect();
    for (index, item) in items {
        match index {
            Some(i) if i < expected && slots[i].is_none() => slots[i] = Some(item),
            _ => {
                return Err(CallError::Fatal(
                    "response indices do not match the request".into(),
                ))
            }
        }
    }
    slots
        .into_iter()
        .map(|s| s.ok_or_else(|| CallError::Fatal("response is missing an index".into())))
        .collect()
}

#[derive(Debug)]
pub struct HttpCompletion {
    url: String,
    model: String,
    retries: usize,
    api_key: Option<String>,
    agent: Agent,
}

impl HttpCompletion {
    pub fn new(
        url: &str,
        model: &str,
        timeout_secs: u64,
        retries: usize,
        api_key: Option<String>,
    ) -> Self {
        Self {
            url: url.to_string(),
            model: model.to_string(),
            retries,
            api_key,
            agent: agent(timeout_secs),
        }
    }
}

impl CompletionBackend for HttpCompletion {
    fn id(&self) -> &str {
        &self.model
    }

    fn complete(&self, req: &CompletionRequest) -> CallResult<Vec<String>> {
        let body = CompletionBody {
            model: if req.model.is_empty() {
                &self.model
            } else {
                &req.model
            },
            prompt: &req.prompts,
            max_tokens: req.max_new_tokens,
            temperature: req.temperature,
            seed: req.seed,
        };
        let resp: CompletionResponse =
            post(&self.agent, &self.url, self.api_key.as_deref(), &body)?;
        align(
            resp.choices
                .into_iter()
                .map(|c| (c.index, c.text))
                .collect(),
            req.prompts.len(),
        )
    }

    fn retries(&self) -> usize {
        self.retries
    }
}

#[derive(Serialize)]
struct EmbeddingBody<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f32>,
    #[serde(default)]
    index: Option<usize>,
}

#[derive(Debug)]
pub struct HttpEmbedder {
    url: String,
    model: String,
    retries: usize,
    api_key: Option<String>,
    agent: Agent,
    dims: DimensionLock,
}

impl HttpEmbedder {
    pub fn new(
        url: &str,
        model: &str,
        timeout_secs: u64,
        retries: usize,
        api_key: Option<String>,
    ) -> Self {
        Self {
            url: url.to_string(),
            model: model.to_string(),
            retries,
            api_key,
            agent: agent(timeout_secs),
            dims: DimensionLock::default(),
        }
    }
}

impl EmbeddingBackend for HttpEmbedder {
    fn id(&self) -> &str {
        &self.model
    }

    fn embed(&self, texts: &[String]) -> CallResult<Vec<Vec<f32>>> {
        let body = EmbeddingBody {
            model: &self.model,
            input: texts,
        };
        let resp: EmbeddingResponse = post(&self.agent, &self.url, self.api_key.as_deref(), &body)?;
        let vectors = align(
            resp.data
                .into_iter()
                .map(|d| (d.index, d.embedding))
                .collect(),
            texts.len(),
        )?;
        self.dims.check(&vectors)?;
        Ok(vectors)
    }

    fn retries(&self) -> usize {
        self.retries
    }
}
