//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//!
//! [mcts]
//! w = 1.4
//! max_iterations = 20
//!
//! [hbs]
//! b1 = 3
//! b2 = 3
//!
//! [backend]
//! kind = "oracle"
//! ```
//!
//! Every section is optional and unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentConfig;
use crate::experiment::WorldRun;
use crate::export::ExportHeader;
use crate::hbs::HbsConfig;
use crate::mcts::MctsConfig;
use crate::synthworld::{OracleOptions, Ranking};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Value-loss weight, recorded for the external trainer.
    pub beta: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { beta: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    pub top_k: usize,
    /// Overrides a world's retrieval noise.
    pub noise: Option<f64>,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self { top_k: 5, noise: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringSection {
    /// Sign-flip probability for oracle values.
    pub epsilon: f64,
    pub plan_ranking: Ranking,
    pub search_ranking: Ranking,
}

impl Default for ScoringSection {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            plan_ranking: Ranking::Value,
            search_ranking: Ranking::Value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Answers read off a synthetic world.
    Oracle,
    /// Policy and judge completions replayed from a script file.
    Scripted,
    /// HTTP generation, retrieval, and value services.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub script: Option<PathBuf>,
    pub generation_url: Option<String>,
    pub retrieval_url: Option<String>,
    /// Without it, values come from the judge prompt.
    pub value_url: Option<String>,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Oracle,
            script: None,
            generation_url: None,
            retrieval_url: None,
            value_url: None,
            token_env: "TREERAG_API_TOKEN".into(),
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    /// Worker threads for per-question work; 0 uses every core.
    pub parallelism: usize,
    pub mcts: MctsConfig,
    pub training: TrainingConfig,
    pub hbs: HbsConfig,
    pub agent: AgentConfig,
    pub retrieval: RetrievalSection,
    pub scoring: ScoringSection,
    pub backend: BackendSection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration:")?;
        for v in &self.violations {
            write!(f, "\n  {}: {}", v.field, v.message)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

struct Checker(Vec<Violation>);

impl Checker {
    fn check(&mut self, ok: bool, field: &str, message: impl Into<String>) {
        if !ok {
            self.0.push(Violation {
                field: field.to_string(),
                message: message.into(),
            });
        }
    }

    fn positive(&mut self, value: usize, field: &str) {
        self.check(value >= 1, field, format!("must be at least 1, got {value}"));
    }

    fn probability(&mut self, value: f64, field: &str) {
        self.check((0.0..=1.0).contains(&value), field, format!("must be in [0, 1], got {value}"));
    }

    fn non_negative(&mut self, value: f64, field: &str) {
        self.check(
            value.is_finite() && value >= 0.0,
            field,
            format!("must be a finite non-negative number, got {value}"),
        );
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut c = Checker(Vec::new());
        c.non_negative(self.mcts.w, "mcts.w");
        c.positive(self.mcts.max_iterations, "mcts.max_iterations");
        c.positive(self.mcts.expansion_samples, "mcts.expansion_samples");
        c.positive(self.mcts.max_depth, "mcts.max_depth");
        c.non_negative(self.mcts.expansion_temperature, "mcts.expansion_temperature");
        c.non_negative(self.training.beta, "training.beta");
        c.positive(self.hbs.b1, "hbs.b1");
        c.positive(self.hbs.b2, "hbs.b2");
        c.positive(self.hbs.beam_width, "hbs.beam_width");
        c.positive(self.hbs.max_depth, "hbs.max_depth");
        c.non_negative(self.hbs.temperature, "hbs.temperature");
        c.positive(self.agent.max_queries, "agent.max_queries");
        c.positive(self.agent.max_new_tokens, "agent.max_new_tokens");
        c.non_negative(self.agent.judge_temperature, "agent.judge_temperature");
        c.positive(self.retrieval.top_k, "retrieval.top_k");
        if let Some(noise) = self.retrieval.noise {
            c.probability(noise, "retrieval.noise");
        }
        c.probability(self.scoring.epsilon, "scoring.epsilon");
        match self.backend.kind {
            BackendKind::Oracle => {}
            BackendKind::Scripted => {
                c.check(self.backend.script.is_some(), "backend.script", "required for scripted backends");
            }
            BackendKind::Remote => {
                c.check(
                    self.backend.generation_url.is_some(),
                    "backend.generation_url",
                    "required for remote backends",
                );
                c.check(
                    self.backend.retrieval_url.is_some(),
                    "backend.retrieval_url",
                    "required for remote backends",
                );
            }
        }
        c.positive(self.backend.timeout_secs as usize, "backend.timeout_secs");
        if c.0.is_empty() {
            Ok(())
        } else {
            Err(ValidationError { violations: c.0 })
        }
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Config, ConfigError> {
        let config: Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// MCTS settings with the retrieval depth applied.
    pub fn mcts_config(&self) -> MctsConfig {
        MctsConfig {
            top_k: self.retrieval.top_k,
            ..self.mcts
        }
    }

    pub fn export_header(&self) -> ExportHeader {
        ExportHeader {
            w: self.mcts.w,
            beta: self.training.beta,
            max_iterations: self.mcts.max_iterations,
            expansion_samples: self.mcts.expansion_samples,
            max_depth: self.mcts.max_depth,
        }
    }

    pub fn oracle_options(&self) -> OracleOptions {
        OracleOptions {
            top_k: self.retrieval.top_k,
            retrieval_noise: self.retrieval.noise,
            epsilon: self.scoring.epsilon,
            seed: self.seed,
            plan_ranking: self.scoring.plan_ranking,
            search_ranking: self.scoring.search_ranking,
        }
    }

    pub fn world_run(&self) -> WorldRun {
        WorldRun {
            hbs: self.hbs,
            agent: self.agent,
            oracle: self.oracle_options(),
        }
    }
}

pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Config::from_toml_str(&text, path)
}
