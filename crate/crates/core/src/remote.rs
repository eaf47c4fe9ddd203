//! JSON-over-HTTP backends.
//!
//! | service    | request                                   | response        |
//! |------------|-------------------------------------------|-----------------|
//! | generation | `{prompt, temperature, max_tokens, n}`    | `{texts}`       |
//! | retrieval  | `{query, top_k}`                          | `{documents}`   |
//! | value      | `{trajectory, candidate, kind}`           | `{score}`       |
//!
//! Requests carry `Authorization: Bearer <token>` when a token is configured.

use std::sync::Arc;
use std::time::Duration;

use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, GenerationRequest, LlmJudge, LlmPolicy, TextGenerator};
use crate::backends::Backends;
use crate::config::BackendSection;
use crate::error::BackendError;
use crate::retrieval::{RetrievalError, Retriever};
use crate::tree::{Document, StepContent, Trajectory};
use crate::value::{JudgeValueModel, PlanCandidate, PlanValueModel, SearchCandidate, SearchValueModel};

#[derive(Debug, Clone)]
pub struct HttpService {
    client: Client,
    url: String,
    token: Option<String>,
}

impl HttpService {
    pub fn new(url: impl Into<String>, token: Option<String>, timeout: Duration) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self {
            client,
            url: url.into(),
            token,
        })
    }

    pub fn call<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R, BackendError> {
        let mut request = self.client.post(&self.url).json(body);
        if let Some(token) = &self.token {
            request = request.bearer_auth(token);
        }
        let response = request
            .send()
            .map_err(|e| BackendError::Unavailable(format!("{}: {e}", self.url)))?;
        let status = response.status();
        if !status.is_success() {
            return Err(BackendError::Unavailable(format!("{}: HTTP {status}", self.url)));
        }
        response
            .json()
            .map_err(|e| BackendError::InvalidResponse(format!("{}: {e}", self.url)))
    }
}

#[derive(Serialize)]
struct GenerationBody<'a> {
    prompt: &'a str,
    temperature: f64,
    max_tokens: usize,
    n: usize,
}

#[derive(Deserialize)]
struct GenerationReply {
    texts: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct HttpGenerator(pub HttpService);

impl TextGenerator for HttpGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        let reply: GenerationReply = self.0.call(&GenerationBody {
            prompt: &request.prompt_text,
            temperature: request.temperature,
            max_tokens: request.max_new_tokens,
            n: request.sample_count,
        })?;
        Ok(reply.texts)
    }
}

#[derive(Serialize)]
struct RetrievalBody<'a> {
    query: &'a str,
    top_k: usize,
}

#[derive(Deserialize)]
struct RetrievalReply {
    documents: Vec<Document>,
}

#[derive(Debug, Clone)]
pub struct HttpRetriever {
    pub service: HttpService,
    pub top_k: usize,
}

impl Retriever for HttpRetriever {
    fn retrieve(&self, query: &str) -> Result<Vec<Document>, RetrievalError> {
        if query.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let reply: RetrievalReply = self.service.call(&RetrievalBody {
            query,
            top_k: self.top_k,
        })?;
        Ok(reply.documents.into_iter().take(self.top_k).collect())
    }
}

#[derive(Serialize)]
struct ValueBody<'a> {
    trajectory: &'a Trajectory,
    candidate: StepContent,
    kind: &'static str,
}

#[derive(Deserialize)]
struct ValueReply {
    score: f64,
}

/// Both value models served from one endpoint, told apart by `kind`.
#[derive(Debug, Clone)]
pub struct HttpValueModel(pub HttpService);

impl PlanValueModel for HttpValueModel {
    fn score_plan(&self, candidate: &PlanCandidate) -> Result<f64, BackendError> {
        let reply: ValueReply = self.0.call(&ValueBody {
            trajectory: &candidate.traj,
            candidate: candidate.as_step(),
            kind: "plan",
        })?;
        Ok(reply.score)
    }
}

impl SearchValueModel for HttpValueModel {
    fn score_search(&self, candidate: &SearchCandidate) -> Result<f64, BackendError> {
        let reply: ValueReply = self.0.call(&ValueBody {
            trajectory: &candidate.traj,
            candidate: candidate.as_step(),
            kind: "search",
        })?;
        Ok(reply.score)
    }
}

/// Remote backends from the `[backend]` section. Value scoring falls back to
/// the judge prompt when no value service is configured.
pub fn remote_backends(section: &BackendSection, agent: &AgentConfig, top_k: usize) -> Result<Backends, BackendError> {
    let token = std::env::var(&section.token_env).ok().filter(|t| !t.is_empty());
    let timeout = Duration::from_secs(section.timeout_secs);
    let service = |url: &Option<String>, name: &str| {
        let url = url
            .as_ref()
            .ok_or_else(|| BackendError::Unavailable(format!("no {name} url configured")))?;
        HttpService::new(url.clone(), token.clone(), timeout)
    };
    let generator = Arc::new(HttpGenerator(service(&section.generation_url, "generation")?));
    let judge = Arc::new(LlmJudge {
        generator: generator.clone(),
        temperature: agent.judge_temperature,
        max_new_tokens: agent.max_new_tokens,
    });
    let (plan_value, search_value): (Arc<dyn PlanValueModel>, Arc<dyn SearchValueModel>) = match &section.value_url {
        Some(_) => {
            let values = Arc::new(HttpValueModel(service(&section.value_url, "value")?));
            (values.clone(), values)
        }
        None => {
            let values = Arc::new(JudgeValueModel {
                judge: judge.clone(),
                cfg: *agent,
            });
            (values.clone(), values)
        }
    };
    Ok(Backends {
        policy: Arc::new(LlmPolicy {
            generator,
            max_new_tokens: agent.max_new_tokens,
        }),
        judge,
        retriever: Arc::new(HttpRetriever {
            service: service(&section.retrieval_url, "retrieval")?,
            top_k,
        }),
        plan_value,
        search_value,
    })
}
