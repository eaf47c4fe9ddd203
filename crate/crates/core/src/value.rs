//! Planning and search value models used to prune beam candidates.
//!
//! Scorers return values in [-1, 1]. Besides remote and judge-backed
//! scorers there are two wrappers for controlled experiments: [`NoisyScorer`]
//! flips the sign of another scorer's output with probability epsilon, and
//! [`RandomScorer`] replaces value ranking with seeded random selection.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{parse_judge_scores, render_action, ActionDecision, AgentConfig, JudgeModel};
use crate::error::BackendError;
use crate::seed::Draw;
use crate::tree::{Document, StepContent, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCandidate {
    pub traj: Trajectory,
    pub decision: ActionDecision,
}

impl PlanCandidate {
    /// The decision as a step, with no documents attached yet.
    pub fn as_step(&self) -> StepContent {
        match self.decision.answer() {
            Some(answer) => StepContent::finish(self.decision.thought.clone(), answer),
            None => StepContent::search(self.decision.thought.clone(), self.decision.queries().to_vec(), vec![]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchCandidate {
    pub traj: Trajectory,
    pub plan_text: String,
    pub query: String,
    pub docs: Vec<Document>,
}

impl SearchCandidate {
    pub fn as_step(&self) -> StepContent {
        StepContent::search(self.plan_text.clone(), vec![self.query.clone()], self.docs.clone())
    }
}

pub trait PlanValueModel: Send + Sync {
    fn score_plan(&self, candidate: &PlanCandidate) -> Result<f64, BackendError>;
}

pub trait SearchValueModel: Send + Sync {
    fn score_search(&self, candidate: &SearchCandidate) -> Result<f64, BackendError>;
}

impl<T: PlanValueModel + ?Sized> PlanValueModel for Arc<T> {
    fn score_plan(&self, candidate: &PlanCandidate) -> Result<f64, BackendError> {
        (**self).score_plan(candidate)
    }
}

impl<T: SearchValueModel + ?Sized> SearchValueModel for Arc<T> {
    fn score_search(&self, candidate: &SearchCandidate) -> Result<f64, BackendError> {
        (**self).score_search(candidate)
    }
}

fn clamp_score(score: f64) -> Result<f64, BackendError> {
    if score.is_nan() {
        return Err(BackendError::InvalidResponse("value model returned NaN".into()));
    }
    Ok(score.clamp(-1.0, 1.0))
}

pub fn score_plan(model: &dyn PlanValueModel, candidate: &PlanCandidate) -> Result<f64, BackendError> {
    clamp_score(model.score_plan(candidate)?)
}

pub fn score_search(model: &dyn SearchValueModel, candidate: &SearchCandidate) -> Result<f64, BackendError> {
    clamp_score(model.score_search(candidate)?)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankError {
    #[error("{candidates} candidates but {scores} scores")]
    LengthMismatch { candidates: usize, scores: usize },
    #[error("keep must be at least 1")]
    ZeroKeep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked<T> {
    /// Position in the original candidate list.
    pub index: usize,
    pub score: f64,
    pub item: T,
}

/// Sorts candidates by descending score (ties by original index) and keeps
/// the first `keep`.
pub fn rank_and_keep<T>(candidates: Vec<T>, scores: &[f64], keep: usize) -> Result<Vec<Ranked<T>>, RankError> {
    if candidates.len() != scores.len() {
        return Err(RankError::LengthMismatch {
            candidates: candidates.len(),
            scores: scores.len(),
        });
    }
    if keep == 0 {
        return Err(RankError::ZeroKeep);
    }
    let mut ranked: Vec<Ranked<T>> = candidates
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(index, (item, &score))| Ranked { index, score, item })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    ranked.truncate(keep);
    Ok(ranked)
}

/// Scores candidates with the evaluation prompt: the thought score for plans,
/// the search-result score for searches.
pub struct JudgeValueModel<J> {
    pub judge: J,
    pub cfg: AgentConfig,
}

impl<J: JudgeModel> JudgeValueModel<J> {
    fn judge_scores(&self, traj: &Trajectory, step: &StepContent) -> Result<(f64, f64), BackendError> {
        let mut last_error = BackendError::InvalidResponse("no judge attempt".into());
        for _ in 0..=self.cfg.retry_budget {
            match self.judge.complete_judgement(traj, step) {
                Ok(text) => match parse_judge_scores(&text) {
                    Ok(s) => return Ok((s.plan_score, s.search_score)),
                    Err(e) => last_error = BackendError::InvalidResponse(e.to_string()),
                },
                Err(e) => last_error = e,
            }
        }
        Err(last_error)
    }
}

impl<J: JudgeModel> PlanValueModel for JudgeValueModel<J> {
    fn score_plan(&self, candidate: &PlanCandidate) -> Result<f64, BackendError> {
        Ok(self.judge_scores(&candidate.traj, &candidate.as_step())?.0)
    }
}

impl<J: JudgeModel> SearchValueModel for JudgeValueModel<J> {
    fn score_search(&self, candidate: &SearchCandidate) -> Result<f64, BackendError> {
        Ok(self.judge_scores(&candidate.traj, &candidate.as_step())?.1)
    }
}

fn trajectory_draw(seed: u64, traj: &Trajectory) -> Draw {
    traj.steps.iter().fold(Draw::new(seed).with(&traj.question), |d, s| {
        let d = d.with(&s.plan_text);
        s.queries.iter().fold(d, |d, q| d.with(q))
    })
}

fn plan_key(seed: u64, c: &PlanCandidate) -> Draw {
    trajectory_draw(seed, &c.traj).with("plan").with(&render_action(&c.decision))
}

fn search_key(seed: u64, c: &SearchCandidate) -> Draw {
    c.docs.iter().fold(
        trajectory_draw(seed, &c.traj).with("search").with(&c.plan_text).with(&c.query),
        |d, doc| d.with(&doc.doc_id),
    )
}

/// Flips the sign of the wrapped scorer's output with probability `epsilon`,
/// decided per candidate from `seed`.
#[derive(Debug, Clone)]
pub struct NoisyScorer<S> {
    pub inner: S,
    pub epsilon: f64,
    pub seed: u64,
}

impl<S: PlanValueModel> PlanValueModel for NoisyScorer<S> {
    fn score_plan(&self, candidate: &PlanCandidate) -> Result<f64, BackendError> {
        let score = self.inner.score_plan(candidate)?;
        let flip = plan_key(self.seed, candidate).bernoulli(self.epsilon);
        Ok(if flip { -score } else { score })
    }
}

impl<S: SearchValueModel> SearchValueModel for NoisyScorer<S> {
    fn score_search(&self, candidate: &SearchCandidate) -> Result<f64, BackendError> {
        let score = self.inner.score_search(candidate)?;
        let flip = search_key(self.seed, candidate).bernoulli(self.epsilon);
        Ok(if flip { -score } else { score })
    }
}

/// Uniform scores in [-1, 1) keyed on the candidate; ranking by them is
/// seeded random selection.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl PlanValueModel for RandomScorer {
    fn score_plan(&self, candidate: &PlanCandidate) -> Result<f64, BackendError> {
        Ok(2.0 * plan_key(self.seed, candidate).unit() - 1.0)
    }
}

impl SearchValueModel for RandomScorer {
    fn score_search(&self, candidate: &SearchCandidate) -> Result<f64, BackendError> {
        Ok(2.0 * search_key(self.seed, candidate).unit() - 1.0)
    }
}

/// Constant scorer, handy as a neutral baseline.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl PlanValueModel for ConstantScorer {
    fn score_plan(&self, _: &PlanCandidate) -> Result<f64, BackendError> {
        Ok(self.0)
    }
}

impl SearchValueModel for ConstantScorer {
    fn score_search(&self, _: &SearchCandidate) -> Result<f64, BackendError> {
        Ok(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::render_judgement;

    #[test]
    fn argmax_kept() {
        let kept = rank_and_keep(vec!["a", "b", "c"], &[0.1, 0.9, 0.5], 1).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].index, 1);
        assert_eq!(kept[0].item, "b");
    }

    #[test]
    fn ties_keep_original_order() {
        let kept = rank_and_keep(vec!["a", "b", "c"], &[0.5, 0.5, 0.5], 2).unwrap();
        let idx: Vec<_> = kept.iter().map(|r| r.index).collect();
        assert_eq!(idx, [0, 1]);
    }

    #[test]
    fn keep_larger_than_n_sorts_all() {
        let kept = rank_and_keep(vec![1, 2, 3], &[0.0, -1.0, 1.0], 10).unwrap();
        let idx: Vec<_> = kept.iter().map(|r| r.index).collect();
        assert_eq!(idx, [2, 0, 1]);
    }

    #[test]
    fn rank_errors() {
        assert_eq!(
            rank_and_keep(vec![1, 2], &[0.0], 1),
            Err(RankError::LengthMismatch { candidates: 2, scores: 1 })
        );
        assert_eq!(rank_and_keep(vec![1], &[0.0], 0), Err(RankError::ZeroKeep));
    }

    struct FixedJudge;

    impl JudgeModel for FixedJudge {
        fn complete_judgement(&self, _: &Trajectory, _: &StepContent) -> Result<String, BackendError> {
            Ok(render_judgement(0.8, -0.25))
        }
    }

    #[test]
    fn judge_backed_scores_pass_through() {
        let model = JudgeValueModel {
            judge: FixedJudge,
            cfg: AgentConfig::default(),
        };
        let plan = PlanCandidate {
            traj: Trajectory::new("q"),
            decision: ActionDecision::search("t", ["x"]),
        };
        assert_eq!(score_plan(&model, &plan).unwrap(), 0.8);
        let search = SearchCandidate {
            traj: Trajectory::new("q"),
            plan_text: "t".into(),
            query: "x".into(),
            docs: vec![],
        };
        assert_eq!(score_search(&model, &search).unwrap(), -0.25);
    }

    #[test]
    fn scores_are_clamped() {
        let plan = PlanCandidate {
            traj: Trajectory::new("q"),
            decision: ActionDecision::finish("t", "x"),
        };
        assert_eq!(score_plan(&ConstantScorer(4.0), &plan).unwrap(), 1.0);
        assert!(score_plan(&ConstantScorer(f64::NAN), &plan).is_err());
    }

    #[test]
    fn noisy_scorer_is_deterministic_per_candidate() {
        let noisy = NoisyScorer {
            inner: ConstantScorer(1.0),
            epsilon: 0.5,
            seed: 3,
        };
        let plan = PlanCandidate {
            traj: Trajectory::new("q"),
            decision: ActionDecision::search("t", ["x"]),
        };
        let a = noisy.score_plan(&plan).unwrap();
        assert_eq!(a, noisy.score_plan(&plan.clone()).unwrap());
        assert!(a == 1.0 || a == -1.0);
    }

    #[test]
    fn random_scorer_in_range() {
        let r = RandomScorer { seed: 9 };
        for i in 0..200 {
            let plan = PlanCandidate {
                traj: Trajectory::new(format!("q{i}")),
                decision: ActionDecision::search("t", ["x"]),
            };
            let s = r.score_plan(&plan).unwrap();
            assert!((-1.0..1.0).contains(&s));
        }
    }
}
