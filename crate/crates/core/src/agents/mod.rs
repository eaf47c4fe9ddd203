//! Policy and judge backends.
//!
//! Every backend speaks raw completion text in the two prompt formats; the
//! parsers in [`parse`] turn that text into decisions and scores. This keeps
//! scripted and simulated backends on the same parsing path as a real LLM.

pub mod parse;
pub mod prompt;
pub mod scripted;

use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::BackendError;
use crate::tree::{StepContent, Trajectory};

pub use parse::{
    parse_action, parse_action_capped, parse_judge_scores, Action, ActionDecision, JudgeScores,
    DEFAULT_MAX_QUERIES,
};
pub use prompt::{build_judge_prompt, build_query_prompt, build_step_prompt, render_action, render_judgement};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("could not parse model output: {reason}")]
    ParseFailure { reason: String },
    #[error("every sampled completion was unparseable")]
    AllSamplesUnparseable,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt_text: String,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub sample_count: usize,
}

/// Plain prompt-in, completions-out text generation.
pub trait TextGenerator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError>;
}

/// Which samples to draw. `first_index` lets table-driven backends continue a
/// sequence across retries; generative backends only look at `count`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub first_index: usize,
    pub count: usize,
    pub temperature: f64,
}

pub trait PolicyModel: Send + Sync {
    /// Completions in the Thought/Action format for the next step of `traj`.
    fn complete_step(&self, traj: &Trajectory, spec: &SampleSpec) -> Result<Vec<String>, BackendError>;

    /// Completions proposing query variants for a fixed plan. Each must parse
    /// as a Search action.
    fn complete_queries(
        &self,
        traj: &Trajectory,
        plan_text: &str,
        spec: &SampleSpec,
    ) -> Result<Vec<String>, BackendError>;
}

pub trait JudgeModel: Send + Sync {
    /// Judge completion for `step` appended to `traj`.
    fn complete_judgement(&self, traj: &Trajectory, step: &StepContent) -> Result<String, BackendError>;
}

impl<G: TextGenerator + ?Sized> TextGenerator for Arc<G> {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        (**self).generate(request)
    }
}

impl<T: PolicyModel + ?Sized> PolicyModel for Arc<T> {
    fn complete_step(&self, traj: &Trajectory, spec: &SampleSpec) -> Result<Vec<String>, BackendError> {
        (**self).complete_step(traj, spec)
    }

    fn complete_queries(
        &self,
        traj: &Trajectory,
        plan_text: &str,
        spec: &SampleSpec,
    ) -> Result<Vec<String>, BackendError> {
        (**self).complete_queries(traj, plan_text, spec)
    }
}

impl<T: JudgeModel + ?Sized> JudgeModel for Arc<T> {
    fn complete_judgement(&self, traj: &Trajectory, step: &StepContent) -> Result<String, BackendError> {
        (**self).complete_judgement(traj, step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// Extra sampling rounds for unparseable completions.
    pub retry_budget: usize,
    pub max_queries: usize,
    pub judge_temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            retry_budget: 2,
            max_queries: DEFAULT_MAX_QUERIES,
            judge_temperature: 0.0,
            max_new_tokens: 512,
        }
    }
}

/// Draws up to `k` decisions for the next step. Unparseable completions are
/// re-requested for up to `cfg.retry_budget` rounds and then dropped; the
/// result keeps generation order.
pub fn sample_actions(
    policy: &dyn PolicyModel,
    traj: &Trajectory,
    k: usize,
    temperature: f64,
    cfg: &AgentConfig,
) -> Result<Vec<ActionDecision>, AgentError> {
    collect_parsed(k, cfg, |spec| policy.complete_step(traj, &spec), temperature, |text| {
        parse_action_capped(text, cfg.max_queries)
    })
}

/// Draws up to `k` query-variant completions for a fixed plan and flattens
/// their query lists in order.
pub fn sample_query_variants(
    policy: &dyn PolicyModel,
    traj: &Trajectory,
    plan_text: &str,
    k: usize,
    temperature: f64,
    cfg: &AgentConfig,
) -> Result<Vec<String>, AgentError> {
    let prefix = prompt::query_prefix(plan_text);
    let decisions = collect_parsed(
        k,
        cfg,
        |spec| policy.complete_queries(traj, plan_text, &spec),
        temperature,
        |text| {
            // Completions may or may not repeat the prefix they continue.
            let full = if text.contains("Action:") {
                text.to_string()
            } else {
                format!("{prefix}{text}")
            };
            parse_action_capped(&full, cfg.max_queries)
        },
    )?;
    Ok(decisions
        .into_iter()
        .flat_map(|d| d.queries().to_vec())
        .collect())
}

fn collect_parsed(
    k: usize,
    cfg: &AgentConfig,
    mut fetch: impl FnMut(SampleSpec) -> Result<Vec<String>, BackendError>,
    temperature: f64,
    parse: impl Fn(&str) -> Result<ActionDecision, AgentError>,
) -> Result<Vec<ActionDecision>, AgentError> {
    let k = k.max(1);
    let mut decisions = Vec::with_capacity(k);
    let mut next_index = 0;
    let mut missing = k;
    for _round in 0..=cfg.retry_budget {
        let spec = SampleSpec {
            first_index: next_index,
            count: missing,
            temperature,
        };
        let texts = fetch(spec)?;
        next_index += missing;
        for text in texts.iter().take(missing) {
            match parse(text) {
                Ok(d) => decisions.push(d),
                Err(e) => warn!("dropping unparseable sample: {e}"),
            }
        }
        missing = k - decisions.len();
        if missing == 0 {
            break;
        }
    }
    if decisions.is_empty() {
        return Err(AgentError::AllSamplesUnparseable);
    }
    Ok(decisions)
}

/// Scores `step` with the judge. Backend errors and unparseable output are
/// retried; once the budget is spent the scores fall back to neutral (0, 0).
pub fn judge_step(judge: &dyn JudgeModel, traj: &Trajectory, step: &StepContent, cfg: &AgentConfig) -> JudgeScores {
    for attempt in 0..=cfg.retry_budget {
        match judge.complete_judgement(traj, step) {
            Ok(text) => match parse_judge_scores(&text) {
                Ok(scores) => return scores,
                Err(e) => warn!("judge attempt {attempt}: {e}"),
            },
            Err(e) => warn!("judge attempt {attempt}: {e}"),
        }
    }
    warn!("judge gave no usable score; falling back to neutral rewards");
    JudgeScores::neutral()
}

/// Policy backed by a text generator and the step-sampling prompt.
pub struct LlmPolicy<G> {
    pub generator: G,
    pub max_new_tokens: usize,
}

impl<G: TextGenerator> PolicyModel for LlmPolicy<G> {
    fn complete_step(&self, traj: &Trajectory, spec: &SampleSpec) -> Result<Vec<String>, BackendError> {
        self.generator.generate(&GenerationRequest {
            prompt_text: build_step_prompt(traj),
            temperature: spec.temperature,
            max_new_tokens: self.max_new_tokens,
            sample_count: spec.count,
        })
    }

    fn complete_queries(
        &self,
        traj: &Trajectory,
        plan_text: &str,
        spec: &SampleSpec,
    ) -> Result<Vec<String>, BackendError> {
        self.generator.generate(&GenerationRequest {
            prompt_text: build_query_prompt(traj, plan_text),
            temperature: spec.temperature,
            max_new_tokens: self.max_new_tokens,
            sample_count: spec.count,
        })
    }
}

/// Judge backed by a text generator and the evaluation prompt.
pub struct LlmJudge<G> {
    pub generator: G,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl<G: TextGenerator> JudgeModel for LlmJudge<G> {
    fn complete_judgement(&self, traj: &Trajectory, step: &StepContent) -> Result<String, BackendError> {
        let texts = self.generator.generate(&GenerationRequest {
            prompt_text: build_judge_prompt(traj, step),
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            sample_count: 1,
        })?;
        texts
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::InvalidResponse("no completion returned".into()))
    }
}
