//! Batch inference over synthetic worlds, paired significance tests, and
//! sweep grids.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::agents::AgentConfig;
use crate::hbs::{greedy_agent, run_hbs, HbsAnswer, HbsConfig, HbsError, HbsResult};
use crate::metrics::{exact_match, EvalReport, Prediction};
use crate::seed::derive_seed;
use crate::synthworld::oracle::oracle_backends;
use crate::synthworld::{OracleOptions, Ranking, World, WorldQuestion};

/// Everything a world-backed inference run needs. `oracle.seed` is the
/// global seed; each question runs under `derive_seed(seed, id)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WorldRun {
    pub hbs: HbsConfig,
    pub agent: AgentConfig,
    pub oracle: OracleOptions,
}

impl WorldRun {
    pub fn question_options(&self, question_id: &str) -> OracleOptions {
        OracleOptions {
            seed: derive_seed(self.oracle.seed, question_id),
            ..self.oracle
        }
    }
}

pub fn infer_question(world: &Arc<World>, q: &WorldQuestion, run: &WorldRun) -> Result<HbsResult, HbsError> {
    let backends = oracle_backends(world, &run.question_options(&q.id));
    run_hbs(&q.question, &backends, &run.hbs, &run.agent)
}

pub fn greedy_question(world: &Arc<World>, q: &WorldQuestion, run: &WorldRun) -> Result<HbsAnswer, HbsError> {
    let backends = oracle_backends(world, &run.question_options(&q.id));
    greedy_agent(&q.question, &backends, run.hbs.max_depth, run.hbs.temperature, &run.agent)
}

/// A failed run predicts nothing and is scored as incorrect.
pub fn prediction_for(id: &str, outcome: &Result<HbsAnswer, HbsError>) -> Prediction {
    Prediction {
        id: id.to_string(),
        answer: outcome.as_ref().ok().and_then(|a| a.text().map(str::to_string)),
        trace_path: None,
    }
}

/// Per-question exact match of HBS over the whole world, in question order.
pub fn exact_match_vector(world: &Arc<World>, run: &WorldRun) -> Vec<u8> {
    world
        .questions
        .iter()
        .map(|q| {
            let outcome = infer_question(world, q, run).map(|r| r.answer);
            match prediction_for(&q.id, &outcome).answer {
                Some(answer) => exact_match(&answer, &q.gold_answers),
                None => 0,
            }
        })
        .collect()
}

pub fn mean(values: &[u8]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|&v| f64::from(v)).sum::<f64>() / values.len() as f64
}

/// One-sided paired test that system A beats system B on binary outcomes,
/// using the normal approximation to McNemar's statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    /// Questions A got right and B got wrong.
    pub a_only: usize,
    /// Questions B got right and A got wrong.
    pub b_only: usize,
    pub z: f64,
    pub p_value: f64,
}

pub fn paired_one_sided(a: &[u8], b: &[u8]) -> PairedTest {
    assert_eq!(a.len(), b.len(), "paired outcomes must align");
    let a_only = a.iter().zip(b).filter(|(x, y)| **x > **y).count();
    let b_only = a.iter().zip(b).filter(|(x, y)| **x < **y).count();
    let discordant = (a_only + b_only) as f64;
    let (z, p_value) = if discordant == 0.0 {
        (0.0, 1.0)
    } else {
        let z = (a_only as f64 - b_only as f64) / discordant.sqrt();
        let normal = Normal::standard();
        (z, 1.0 - normal.cdf(z))
    };
    PairedTest {
        a_only,
        b_only,
        z,
        p_value,
    }
}

/// Axes of a sweep; every combination is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub b1: Vec<usize>,
    pub b2: Vec<usize>,
    pub noise: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub plan_ranking: Vec<Ranking>,
    pub search_ranking: Vec<Ranking>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        let hbs = HbsConfig::default();
        Self {
            b1: vec![hbs.b1],
            b2: vec![hbs.b2],
            noise: vec![0.0],
            epsilon: vec![0.0],
            plan_ranking: vec![Ranking::Value],
            search_ranking: vec![Ranking::Value],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub b1: usize,
    pub b2: usize,
    pub noise: f64,
    pub epsilon: f64,
    pub plan_ranking: Ranking,
    pub search_ranking: Ranking,
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut cells = Vec::new();
        for &b1 in &self.b1 {
            for &b2 in &self.b2 {
                for &noise in &self.noise {
                    for &epsilon in &self.epsilon {
                        for &plan_ranking in &self.plan_ranking {
                            for &search_ranking in &self.search_ranking {
                                cells.push(SweepCell {
                                    b1,
                                    b2,
                                    noise,
                                    epsilon,
                                    plan_ranking,
                                    search_ranking,
                                });
                            }
                        }
                    }
                }
            }
        }
        cells
    }
}

impl SweepCell {
    /// `base` with this cell's settings applied.
    pub fn apply(&self, base: &WorldRun) -> WorldRun {
        WorldRun {
            hbs: HbsConfig {
                b1: self.b1,
                b2: self.b2,
                ..base.hbs
            },
            agent: base.agent,
            oracle: OracleOptions {
                retrieval_noise: Some(self.noise),
                epsilon: self.epsilon,
                plan_ranking: self.plan_ranking,
                search_ranking: self.search_ranking,
                ..base.oracle
            },
        }
    }

    pub fn label(&self) -> String {
        format!(
            "b1={} b2={} noise={} epsilon={} plan={} search={}",
            self.b1,
            self.b2,
            self.noise,
            self.epsilon,
            ranking_name(self.plan_ranking),
            ranking_name(self.search_ranking)
        )
    }
}

fn ranking_name(r: Ranking) -> &'static str {
    match r {
        Ranking::Value => "value",
        Ranking::Random => "random",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: SweepCell,
    /// `None` when the cell failed.
    pub report: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Markdown matrix: one row per cell, EM and F1 in percent.
pub fn render_matrix(results: &[CellResult]) -> String {
    let mut out = String::from("| B1 | B2 | noise | epsilon | plan ranking | search ranking | EM | F1 |\n");
    out.push_str("|---:|---:|---:|---:|:---|:---|---:|---:|\n");
    for r in results {
        let c = &r.cell;
        let (em, f1) = match &r.report {
            Some(report) => (format!("{:.1}", report.em), format!("{:.1}", report.f1)),
            None => ("failed".to_string(), "failed".to_string()),
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            c.b1,
            c.b2,
            c.noise,
            c.epsilon,
            ranking_name(c.plan_ranking),
            ranking_name(c.search_ranking),
            em,
            f1
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_a_cartesian_product() {
        let grid = SweepGrid {
            b2: vec![1, 2, 3, 4, 5],
            epsilon: vec![0.0, 0.1],
            ..SweepGrid::default()
        };
        let cells = grid.cells();
        assert_eq!(cells.len(), 10);
        assert_eq!((cells[0].b2, cells[0].epsilon), (1, 0.0));
        assert_eq!((cells[1].b2, cells[1].epsilon), (1, 0.1));
    }

    #[test]
    fn paired_test_direction() {
        let a = [1, 1, 1, 1, 0, 1, 1, 1, 1, 1];
        let b = [0, 0, 0, 0, 0, 1, 1, 0, 0, 0];
        let t = paired_one_sided(&a, &b);
        assert_eq!((t.a_only, t.b_only), (7, 0));
        assert!((t.z - 7f64.sqrt()).abs() < 1e-12);
        assert!(t.p_value < 0.01);
        let back = paired_one_sided(&b, &a);
        assert!(back.p_value > 0.99);
    }

    #[test]
    fn identical_systems_are_not_significant() {
        let t = paired_one_sided(&[1, 0, 1], &[1, 0, 1]);
        assert_eq!(t.p_value, 1.0);
    }

    #[test]
    fn failed_cells_render() {
        let cell = SweepGrid::default().cells()[0];
        let table = render_matrix(&[CellResult {
            cell,
            report: None,
            error: Some("down".into()),
        }]);
        assert!(table.lines().nth(2).unwrap().ends_with("| failed | failed |"));
    }
}
