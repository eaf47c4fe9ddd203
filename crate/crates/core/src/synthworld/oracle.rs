//! Backends that read answers straight off a [`World`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agents::{render_action, render_judgement, ActionDecision, JudgeModel, PolicyModel, SampleSpec};
use crate::backends::Backends;
use crate::error::BackendError;
use crate::metrics::exact_match;
use crate::retrieval::{LocalRetriever, RetrievalConfig};
use crate::seed::Draw;
use crate::tree::{Document, StepContent, Trajectory};
use crate::value::{NoisyScorer, PlanCandidate, PlanValueModel, RandomScorer, SearchCandidate, SearchValueModel};

use super::{query_text, search_thought, PathState, World, WorldQuestion, QUERY_TEMPLATES};

/// Immediate judge reward for a decoy plan taken from the gold path.
pub const DECOY_PLAN_REWARD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ranking {
    /// Rank by the (possibly noisy) oracle value.
    Value,
    /// Seeded random selection.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleOptions {
    pub top_k: usize,
    /// Overrides the world's own retrieval noise when set.
    pub retrieval_noise: Option<f64>,
    /// Sign-flip probability applied to oracle values.
    pub epsilon: f64,
    pub seed: u64,
    pub plan_ranking: Ranking,
    pub search_ranking: Ranking,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            top_k: 5,
            retrieval_noise: None,
            epsilon: 0.0,
            seed: 0,
            plan_ranking: Ranking::Value,
            search_ranking: Ranking::Value,
        }
    }
}

/// Policy, judge, and exact value scorers for one world.
#[derive(Debug, Clone)]
pub struct WorldOracle {
    pub world: Arc<World>,
}

fn score(good: bool) -> f64 {
    if good {
        1.0
    } else {
        -1.0
    }
}

impl WorldOracle {
    pub fn new(world: Arc<World>) -> Self {
        Self { world }
    }

    fn question(&self, traj: &Trajectory) -> Result<&WorldQuestion, BackendError> {
        self.world
            .question_by_text(&traj.question)
            .ok_or_else(|| BackendError::InvalidResponse(format!("question not in world: {}", traj.question)))
    }

    fn decision_target(&self, decision: &ActionDecision) -> Option<(String, String)> {
        self.world
            .parse_target(&decision.thought)
            .or_else(|| decision.queries().first().and_then(|q| self.world.parse_target(q)))
    }

    /// Whether `decision` continues the gold path from `state`.
    fn on_gold_plan(&self, q: &WorldQuestion, state: &PathState, decision: &ActionDecision) -> bool {
        if let Some(answer) = decision.answer() {
            return exact_match(answer, &q.gold_answers) == 1;
        }
        let hop = state.hop();
        hop < q.decomposition.len()
            && self.world.on_gold(q, state)
            && self
                .decision_target(decision)
                .is_some_and(|(e, r)| e == state.head() && r == q.decomposition[hop].relation)
    }

    /// +1 when `decision` continues the gold path, -1 otherwise.
    pub fn plan_value(&self, traj: &Trajectory, decision: &ActionDecision) -> Result<f64, BackendError> {
        let q = self.question(traj)?;
        let state = self.world.path_state(q, &traj.steps);
        Ok(score(self.on_gold_plan(q, &state, decision)))
    }

    /// Judge reward for a plan: +1 on the gold path, a mild positive for a
    /// decoy taken from the gold path, -1 once off it.
    pub fn judge_plan_value(&self, traj: &Trajectory, decision: &ActionDecision) -> Result<f64, BackendError> {
        let q = self.question(traj)?;
        let state = self.world.path_state(q, &traj.steps);
        if self.on_gold_plan(q, &state, decision) {
            return Ok(1.0);
        }
        Ok(if self.world.on_gold(q, &state) {
            DECOY_PLAN_REWARD
        } else {
            -1.0
        })
    }

    /// +1 when `docs` hold the fact that `text` asks about.
    pub fn search_value(&self, text: &str, docs: &[Document]) -> f64 {
        let found = self
            .world
            .parse_target(text)
            .and_then(|(e, r)| self.world.fact(&e, &r))
            .is_some_and(|f| docs.iter().any(|d| d.doc_id == f.doc_id));
        score(found)
    }
}

impl PolicyModel for WorldOracle {
    fn complete_step(&self, traj: &Trajectory, spec: &SampleSpec) -> Result<Vec<String>, BackendError> {
        let q = self.question(traj)?;
        let state = self.world.path_state(q, &traj.steps);
        let options = self.world.options(q, &state);
        Ok((spec.first_index..spec.first_index + spec.count)
            .map(|i| render_action(&options[i % options.len()]))
            .collect())
    }

    /// One query per completion, cycling through the templates after the two
    /// the plan's own option already uses.
    fn complete_queries(
        &self,
        _traj: &Trajectory,
        plan_text: &str,
        spec: &SampleSpec,
    ) -> Result<Vec<String>, BackendError> {
        let (entity, relation) = self
            .world
            .parse_target(plan_text)
            .ok_or_else(|| BackendError::InvalidResponse(format!("plan names no hop: {plan_text}")))?;
        let variant = (0..QUERY_TEMPLATES.len())
            .find(|&v| search_thought(v, &entity, &relation) == plan_text)
            .unwrap_or(0);
        Ok((spec.first_index..spec.first_index + spec.count)
            .map(|i| {
                let q = query_text(variant + 2 + i, &entity, &relation);
                format!("{}])", serde_json::to_string(&q).expect("string serializes"))
            })
            .collect())
    }
}

impl JudgeModel for WorldOracle {
    fn complete_judgement(&self, traj: &Trajectory, step: &StepContent) -> Result<String, BackendError> {
        let decision = match &step.answer {
            Some(answer) => ActionDecision::finish(step.plan_text.clone(), answer.clone()),
            None => ActionDecision::search(step.plan_text.clone(), step.queries.clone()),
        };
        let plan = self.judge_plan_value(traj, &decision)?;
        let search = if step.answer.is_some() {
            plan
        } else {
            let text = if self.world.parse_target(&step.plan_text).is_some() {
                &step.plan_text
            } else {
                step.queries.first().map_or("", String::as_str)
            };
            self.search_value(text, &step.retrieved_docs)
        };
        Ok(render_judgement(plan, search))
    }
}

impl PlanValueModel for WorldOracle {
    fn score_plan(&self, candidate: &PlanCandidate) -> Result<f64, BackendError> {
        self.plan_value(&candidate.traj, &candidate.decision)
    }
}

impl SearchValueModel for WorldOracle {
    fn score_search(&self, candidate: &SearchCandidate) -> Result<f64, BackendError> {
        Ok(self.search_value(&candidate.query, &candidate.docs))
    }
}

/// Oracle backends for `world` under `opts`.
pub fn oracle_backends(world: &Arc<World>, opts: &OracleOptions) -> Backends {
    let oracle = Arc::new(WorldOracle::new(world.clone()));
    let seed = Draw::new(opts.seed);
    let plan_seed = seed.with("plan").bits();
    let search_seed = seed.with("search").bits();
    let plan_value: Arc<dyn PlanValueModel> = match opts.plan_ranking {
        Ranking::Value => Arc::new(NoisyScorer {
            inner: oracle.clone(),
            epsilon: opts.epsilon,
            seed: plan_seed,
        }),
        Ranking::Random => Arc::new(RandomScorer { seed: plan_seed }),
    };
    let search_value: Arc<dyn SearchValueModel> = match opts.search_ranking {
        Ranking::Value => Arc::new(NoisyScorer {
            inner: oracle.clone(),
            epsilon: opts.epsilon,
            seed: search_seed,
        }),
        Ranking::Random => Arc::new(RandomScorer { seed: search_seed }),
    };
    let retriever = LocalRetriever::new(
        world.index().clone(),
        RetrievalConfig {
            top_k: opts.top_k,
            noise_drop_prob: opts.retrieval_noise.unwrap_or(world.spec.retrieval_noise),
            seed: seed.with("retrieval").bits(),
        },
    );
    Backends {
        policy: oracle.clone(),
        judge: oracle,
        retriever: Arc::new(retriever),
        plan_value,
        search_value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{parse_judge_scores, sample_actions, AgentConfig};
    use crate::synthworld::{generate_world, search_option, WorldSpec};

    fn world(ambiguity: f64) -> Arc<World> {
        Arc::new(
            generate_world(&WorldSpec {
                n_entities: 40,
                n_questions: 5,
                plan_ambiguity: ambiguity,
                ..WorldSpec::default()
            })
            .unwrap(),
        )
    }

    #[test]
    fn gold_plan_scores_one_and_decoy_minus_one() {
        let w = world(0.5);
        let oracle = WorldOracle::new(w.clone());
        let q = &w.questions[0];
        let traj = Trajectory::new(q.question.clone());
        let gold = search_option(0, q.start(), &q.decomposition[0].relation);
        assert_eq!(oracle.plan_value(&traj, &gold).unwrap(), 1.0);
        let other = w.spec.relations.iter().find(|r| **r != q.decomposition[0].relation).unwrap();
        let decoy = search_option(0, q.start(), other);
        assert_eq!(oracle.plan_value(&traj, &decoy).unwrap(), -1.0);
        assert_eq!(oracle.judge_plan_value(&traj, &decoy).unwrap(), DECOY_PLAN_REWARD);
    }

    #[test]
    fn policy_cycles_layout() {
        let w = world(0.5);
        let oracle = WorldOracle::new(w.clone());
        let q = &w.questions[0];
        let traj = Trajectory::new(q.question.clone());
        let d = sample_actions(&oracle, &traj, 4, 1.0, &AgentConfig::default()).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d[0], d[3]);
        let on_gold = d[..3].iter().filter(|x| oracle.plan_value(&traj, x).unwrap() == 1.0).count();
        assert_eq!(on_gold, 1);
    }

    #[test]
    fn resolving_a_hop_moves_the_state() {
        let w = world(0.0);
        let oracle = WorldOracle::new(w.clone());
        let backends = oracle_backends(&w, &OracleOptions::default());
        let q = &w.questions[0];
        let hop = &q.decomposition[0];
        let query = query_text(0, &hop.entity, &hop.relation);
        let docs = backends.retriever.retrieve(&query).unwrap();
        assert_eq!(oracle.search_value(&query, &docs), 1.0);
        let step = StepContent::search(search_thought(0, &hop.entity, &hop.relation), vec![query], docs);
        let state = w.path_state(q, std::slice::from_ref(&step));
        assert_eq!(state.head(), hop.answer);
        let judged = parse_judge_scores(&oracle.complete_judgement(&Trajectory::new(q.question.clone()), &step).unwrap())
            .unwrap();
        assert_eq!((judged.plan_score, judged.search_score), (1.0, 1.0));
    }

    #[test]
    fn failed_search_scores_minus_one() {
        let w = world(0.0);
        let oracle = WorldOracle::new(w.clone());
        let q = &w.questions[0];
        let hop = &q.decomposition[0];
        assert_eq!(oracle.search_value(&query_text(0, &hop.entity, &hop.relation), &[]), -1.0);
    }
}
