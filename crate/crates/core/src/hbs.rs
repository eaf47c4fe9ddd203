//! Hierarchical beam search.
//!
//! Each step samples `b1` plans and ranks them with the planning value model;
//! Finish plans go to the final answer pool, the best Search plans continue.
//! For every kept plan, `b2` query variants are retrieved separately and
//! ranked with the search value model; the best (plan, query, documents)
//! extends the beam. The answer is the pooled Finish with the highest plan
//! score.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{sample_actions, sample_query_variants, ActionDecision, AgentConfig, AgentError};
use crate::backends::Backends;
use crate::error::BackendError;
use crate::retrieval::RetrievalError;
use crate::tree::{NodeId, ReasoningTree, StepContent, Trajectory};
use crate::value::{rank_and_keep, score_plan, score_search, PlanCandidate, SearchCandidate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HbsError {
    #[error("no parseable plan at depth {depth}")]
    NoValidPlans { depth: usize },
    #[error("question is empty")]
    EmptyQuestion,
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HbsConfig {
    /// Plan expansion size.
    pub b1: usize,
    /// Search expansion size.
    pub b2: usize,
    pub beam_width: usize,
    pub max_depth: usize,
    pub temperature: f64,
}

impl Default for HbsConfig {
    fn default() -> Self {
        Self {
            b1: 3,
            b2: 3,
            beam_width: 1,
            max_depth: 6,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionKind {
    Plan,
    Search,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Kept,
    Pruned,
    /// A Finish plan moved to the answer pool.
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCandidate {
    pub score: f64,
    pub status: Status,
    pub plan_text: String,
    pub queries: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub doc_ids: Vec<String>,
    /// Node in the trace tree, when the candidate was materialized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPoint {
    pub depth: usize,
    pub kind: DecisionKind,
    pub candidates: Vec<TraceCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum HbsAnswer {
    Answer { text: String, plan_score: f64 },
    NoAnswerProduced,
}

impl HbsAnswer {
    pub fn text(&self) -> Option<&str> {
        match self {
            HbsAnswer::Answer { text, .. } => Some(text),
            HbsAnswer::NoAnswerProduced => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HbsResult {
    pub answer: HbsAnswer,
    pub trace: Vec<DecisionPoint>,
    /// Materialized candidates in the reasoning-tree layout: search candidates
    /// and Finish plans, with `V_p`/`R_p` holding plan scores, `V_s`/`R_s`
    /// search scores, and `N = 1` on kept nodes.
    pub tree: ReasoningTree,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinishedCandidate {
    pub answer: String,
    pub plan_score: f64,
    pub node: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamEntry {
    pub traj: Trajectory,
    pub node: NodeId,
}

/// What one step produced for the next.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepOutcome {
    pub finished: Vec<FinishedCandidate>,
    pub next_beam: Vec<BeamEntry>,
}

pub struct BeamSearch<'a> {
    pub backends: &'a Backends,
    pub cfg: HbsConfig,
    pub agent: AgentConfig,
}

struct ScoredPlan {
    beam: usize,
    decision: ActionDecision,
}

impl<'a> BeamSearch<'a> {
    pub fn new(backends: &'a Backends, cfg: HbsConfig, agent: AgentConfig) -> Self {
        Self { backends, cfg, agent }
    }

    fn query_variants(&self, traj: &Trajectory, decision: &ActionDecision) -> Result<Vec<String>, HbsError> {
        let mut queries: Vec<String> = Vec::with_capacity(self.cfg.b2);
        for q in decision.queries() {
            if queries.len() < self.cfg.b2 && !queries.contains(q) {
                queries.push(q.clone());
            }
        }
        if queries.len() < self.cfg.b2 {
            let extra = sample_query_variants(
                self.backends.policy.as_ref(),
                traj,
                &decision.thought,
                self.cfg.b2 - queries.len(),
                self.cfg.temperature,
                &self.agent,
            );
            match extra {
                Ok(extra) => {
                    for q in extra {
                        if queries.len() < self.cfg.b2 && !queries.contains(&q) {
                            queries.push(q);
                        }
                    }
                }
                Err(AgentError::AllSamplesUnparseable) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(queries)
    }

    /// One level of plan expansion and search expansion over the beam.
    pub fn step(
        &self,
        beam: &[BeamEntry],
        depth: usize,
        tree: &mut ReasoningTree,
        trace: &mut Vec<DecisionPoint>,
    ) -> Result<StepOutcome, HbsError> {
        let mut outcome = StepOutcome::default();

        let mut plan_point = Vec::new();
        let mut search_plans = Vec::new();
        let mut search_scores = Vec::new();
        let mut any_parsed = false;
        for (beam_index, entry) in beam.iter().enumerate() {
            let decisions = match sample_actions(
                self.backends.policy.as_ref(),
                &entry.traj,
                self.cfg.b1,
                self.cfg.temperature,
                &self.agent,
            ) {
                Ok(d) => d,
                Err(AgentError::AllSamplesUnparseable) => continue,
                Err(e) => return Err(e.into()),
            };
            any_parsed = true;
            for decision in decisions {
                let candidate = PlanCandidate {
                    traj: entry.traj.clone(),
                    decision,
                };
                let score = score_plan(self.backends.plan_value.as_ref(), &candidate)?;
                let decision = candidate.decision;
                if let Some(answer) = decision.answer() {
                    let node = tree
                        .add_child(entry.node, StepContent::finish(decision.thought.clone(), answer))
                        .expect("beam nodes are non-terminal");
                    let n = &mut tree.nodes[node.index()];
                    n.plan_value = score;
                    n.plan_reward = Some(score);
                    outcome.finished.push(FinishedCandidate {
                        answer: answer.to_string(),
                        plan_score: score,
                        node,
                    });
                    plan_point.push(TraceCandidate {
                        score,
                        status: Status::Finished,
                        plan_text: decision.thought.clone(),
                        queries: Vec::new(),
                        answer: Some(answer.to_string()),
                        doc_ids: Vec::new(),
                        node: Some(node),
                    });
                } else {
                    plan_point.push(TraceCandidate {
                        score,
                        status: Status::Pruned,
                        plan_text: decision.thought.clone(),
                        queries: decision.queries().to_vec(),
                        answer: None,
                        doc_ids: Vec::new(),
                        node: None,
                    });
                    search_plans.push((plan_point.len() - 1, ScoredPlan {
                        beam: beam_index,
                        decision,
                    }));
                    search_scores.push(score);
                }
            }
        }
        if !any_parsed {
            return Err(HbsError::NoValidPlans { depth });
        }

        let kept_plans = if search_plans.is_empty() {
            Vec::new()
        } else {
            rank_and_keep(search_plans, &search_scores, self.cfg.beam_width)
                .expect("one score per plan and beam_width >= 1")
        };
        for kept in &kept_plans {
            plan_point[kept.item.0].status = Status::Kept;
        }
        trace.push(DecisionPoint {
            depth,
            kind: DecisionKind::Plan,
            candidates: plan_point,
        });

        let mut search_point = Vec::new();
        let mut search_candidates = Vec::new();
        let mut candidate_scores = Vec::new();
        for kept in kept_plans {
            let (_, plan) = kept.item;
            let entry = &beam[plan.beam];
            for query in self.query_variants(&entry.traj, &plan.decision)? {
                let docs = self.backends.retriever.retrieve(&query)?;
                let candidate = SearchCandidate {
                    traj: entry.traj.clone(),
                    plan_text: plan.decision.thought.clone(),
                    query,
                    docs,
                };
                let score = score_search(self.backends.search_value.as_ref(), &candidate)?;
                let node = tree
                    .add_child(entry.node, candidate.as_step())
                    .expect("beam nodes are non-terminal");
                let n = &mut tree.nodes[node.index()];
                n.plan_value = kept.score;
                n.search_value = score;
                n.plan_reward = Some(kept.score);
                n.search_reward = Some(score);
                search_point.push(TraceCandidate {
                    score,
                    status: Status::Pruned,
                    plan_text: candidate.plan_text.clone(),
                    queries: vec![candidate.query.clone()],
                    answer: None,
                    doc_ids: candidate.docs.iter().map(|d| d.doc_id.clone()).collect(),
                    node: Some(node),
                });
                search_candidates.push((search_point.len() - 1, plan.beam, candidate, node));
                candidate_scores.push(score);
            }
        }
        if !search_candidates.is_empty() {
            let kept = rank_and_keep(search_candidates, &candidate_scores, self.cfg.beam_width)
                .expect("one score per candidate and beam_width >= 1");
            for k in kept {
                let (point_index, _, candidate, node) = k.item;
                search_point[point_index].status = Status::Kept;
                tree.nodes[node.index()].visits = 1;
                outcome.next_beam.push(BeamEntry {
                    traj: candidate.traj.extended(candidate.as_step()),
                    node,
                });
            }
            trace.push(DecisionPoint {
                depth,
                kind: DecisionKind::Search,
                candidates: search_point,
            });
        }
        Ok(outcome)
    }

    pub fn run(&self, question: &str) -> Result<HbsResult, HbsError> {
        if question.trim().is_empty() {
            return Err(HbsError::EmptyQuestion);
        }
        let mut tree = ReasoningTree::new(question, Vec::new());
        let mut trace = Vec::new();
        let mut finished: Vec<FinishedCandidate> = Vec::new();
        let mut beam = vec![BeamEntry {
            traj: Trajectory::new(question),
            node: NodeId::ROOT,
        }];
        for depth in 0..self.cfg.max_depth {
            if beam.is_empty() {
                break;
            }
            let outcome = self.step(&beam, depth, &mut tree, &mut trace)?;
            finished.extend(outcome.finished);
            beam = outcome.next_beam;
        }
        if finished.is_empty() {
            return Ok(HbsResult {
                answer: HbsAnswer::NoAnswerProduced,
                trace,
                tree,
            });
        }
        let scores: Vec<f64> = finished.iter().map(|f| f.plan_score).collect();
        let ranked = rank_and_keep(finished, &scores, scores.len()).expect("non-empty pool");
        let winner = ranked[0].item.clone();
        tree.nodes[winner.node.index()].visits = 1;
        trace.push(DecisionPoint {
            depth: self.cfg.max_depth.min(trace.last().map_or(0, |p| p.depth)),
            kind: DecisionKind::Final,
            candidates: ranked
                .iter()
                .enumerate()
                .map(|(rank, r)| TraceCandidate {
                    score: r.score,
                    status: if rank == 0 { Status::Kept } else { Status::Pruned },
                    plan_text: tree.nodes[r.item.node.index()]
                        .step
                        .as_ref()
                        .map(|s| s.plan_text.clone())
                        .unwrap_or_default(),
                    queries: Vec::new(),
                    answer: Some(r.item.answer.clone()),
                    doc_ids: Vec::new(),
                    node: Some(r.item.node),
                })
                .collect(),
        });
        Ok(HbsResult {
            answer: HbsAnswer::Answer {
                text: winner.answer,
                plan_score: winner.plan_score,
            },
            trace,
            tree,
        })
    }
}

pub fn run_hbs(question: &str, backends: &Backends, cfg: &HbsConfig, agent: &AgentConfig) -> Result<HbsResult, HbsError> {
    BeamSearch::new(backends, *cfg, *agent).run(question)
}

/// Single-path agent without value models: take the first sampled action,
/// search its first query, repeat until it answers or hits the depth cap.
pub fn greedy_agent(
    question: &str,
    backends: &Backends,
    max_depth: usize,
    temperature: f64,
    agent: &AgentConfig,
) -> Result<HbsAnswer, HbsError> {
    if question.trim().is_empty() {
        return Err(HbsError::EmptyQuestion);
    }
    let mut traj = Trajectory::new(question);
    for depth in 0..max_depth {
        let decision = match sample_actions(backends.policy.as_ref(), &traj, 1, temperature, agent) {
            Ok(mut d) => d.remove(0),
            Err(AgentError::AllSamplesUnparseable) => return Err(HbsError::NoValidPlans { depth }),
            Err(e) => return Err(e.into()),
        };
        if let Some(answer) = decision.answer() {
            return Ok(HbsAnswer::Answer {
                text: answer.to_string(),
                plan_score: 0.0,
            });
        }
        let query = decision.queries()[0].clone();
        let docs = backends.retriever.retrieve(&query)?;
        traj.steps.push(StepContent::search(decision.thought, vec![query], docs));
    }
    Ok(HbsAnswer::NoAnswerProduced)
}
