//! Exact-match and token F1 answer metrics and run-level reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, strip punctuation, drop English articles, collapse whitespace.
pub fn normalize(answer: &str) -> String {
    let stripped: String = answer
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    stripped
        .split_whitespace()
        .filter(|tok| !ARTICLES.contains(tok))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, golds: &[String]) -> u8 {
    let pred = normalize(pred);
    u8::from(golds.iter().any(|g| normalize(g) == pred))
}

fn token_f1(pred: &str, gold: &str) -> f64 {
    let pred = normalize(pred);
    let gold = normalize(gold);
    let pred_tokens: Vec<&str> = pred.split_whitespace().collect();
    let gold_tokens: Vec<&str> = gold.split_whitespace().collect();
    match (pred_tokens.is_empty(), gold_tokens.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for tok in &gold_tokens {
        *gold_counts.entry(tok).or_default() += 1;
    }
    let mut common = 0usize;
    for tok in &pred_tokens {
        if let Some(count) = gold_counts.get_mut(tok) {
            if *count > 0 {
                *count -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred_tokens.len() as f64;
    let recall = common as f64 / gold_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-multiset F1, maximized over the gold answers.
pub fn f1(pred: &str, golds: &[String]) -> f64 {
    golds.iter().map(|g| token_f1(pred, g)).fold(0.0, f64::max)
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction set is empty")]
    MissingPredictions,
    #[error("prediction for unknown question id {0:?}")]
    UnknownQuestion(String),
    #[error("duplicate prediction for question id {0:?}")]
    DuplicatePrediction(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    /// `None` when the run produced no answer; scored as incorrect.
    pub answer: Option<String>,
    /// Where the run's decision trace was written, relative to the
    /// predictions file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub id: String,
    #[serde(default)]
    pub question: String,
    pub gold_answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub id: String,
    pub prediction: Option<String>,
    pub gold_answers: Vec<String>,
    pub em: u8,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent, 0..=100.
    pub em: f64,
    /// Percent, 0..=100.
    pub f1: f64,
    pub questions: usize,
    pub missing: usize,
    pub per_question: Vec<QuestionScore>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "questions: {}", self.questions);
        let _ = writeln!(s, "missing predictions: {}", self.missing);
        let _ = writeln!(s, "EM: {:.2}", self.em);
        let _ = writeln!(s, "F1: {:.2}", self.f1);
        s
    }
}

/// Scores predictions against every gold question. Questions without a
/// prediction count as empty answers.
pub fn evaluate_run(predictions: &[Prediction], golds: &[GoldRecord]) -> Result<EvalReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::MissingPredictions);
    }
    let known: HashMap<&str, &GoldRecord> = golds.iter().map(|g| (g.id.as_str(), g)).collect();
    let mut by_id: BTreeMap<&str, Option<&str>> = BTreeMap::new();
    for p in predictions {
        if !known.contains_key(p.id.as_str()) {
            return Err(EvalError::UnknownQuestion(p.id.clone()));
        }
        if by_id.insert(p.id.as_str(), p.answer.as_deref()).is_some() {
            return Err(EvalError::DuplicatePrediction(p.id.clone()));
        }
    }
    let mut missing = 0;
    let per_question: Vec<QuestionScore> = golds
        .iter()
        .map(|g| {
            let prediction = match by_id.get(g.id.as_str()) {
                Some(answer) => answer.map(str::to_owned),
                None => {
                    missing += 1;
                    None
                }
            };
            let text = prediction.as_deref().unwrap_or("");
            let (em, f1) = if prediction.is_some() {
                (exact_match(text, &g.gold_answers), f1(text, &g.gold_answers))
            } else {
                (0, 0.0)
            };
            QuestionScore {
                id: g.id.clone(),
                prediction,
                gold_answers: g.gold_answers.clone(),
                em,
                f1,
            }
        })
        .collect();
    let n = per_question.len().max(1) as f64;
    let em = 100.0 * per_question.iter().map(|q| f64::from(q.em)).sum::<f64>() / n;
    let f1 = 100.0 * per_question.iter().map(|q| q.f1).sum::<f64>() / n;
    Ok(EvalReport {
        em,
        f1,
        questions: per_question.len(),
        missing,
        per_question,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golds(g: &[&str]) -> Vec<String> {
        g.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize("The Answer!"), "answer");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("Orhan  Ghazi."), "orhan ghazi");
        assert_eq!(normalize("  An apple, a day "), "apple day");
    }

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match("orhan ghazi", &golds(&["Orhan Ghazi"])), 1);
        assert_eq!(exact_match("Murad I", &golds(&["Orhan Ghazi"])), 0);
        assert_eq!(exact_match("Orhan", &golds(&["Murad", "orhan"])), 1);
        assert_eq!(exact_match("x", &[]), 0);
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1("Orhan Ghazi", &golds(&["Orhan Ghazi"])), 1.0);
        // P = 1/1, R = 1/2 -> 2 * 0.5 / 1.5
        let partial = f1("Orhan", &golds(&["Orhan Ghazi"]));
        assert!((partial - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1("Murad", &golds(&["Orhan Ghazi"])), 0.0);
        assert_eq!(f1("", &golds(&[""])), 1.0);
        assert_eq!(f1("the", &golds(&["x"])), 0.0);
        assert_eq!(f1("x", &golds(&["the"])), 0.0);
    }

    #[test]
    fn f1_counts_multiset_overlap() {
        let score = f1("x x y", &golds(&["x y y"]));
        // common = min(2,1) + min(1,2) = 2, P = 2/3, R = 2/3
        assert!((score - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_prediction_set_is_an_error() {
        let g = vec![GoldRecord {
            id: "q1".into(),
            question: String::new(),
            gold_answers: golds(&["a"]),
        }];
        assert_eq!(evaluate_run(&[], &g), Err(EvalError::MissingPredictions));
    }

    #[test]
    fn all_correct_scores_hundred() {
        let g: Vec<GoldRecord> = (0..3)
            .map(|i| GoldRecord {
                id: format!("q{i}"),
                question: String::new(),
                gold_answers: vec![format!("ans {i}")],
            })
            .collect();
        let p: Vec<Prediction> = (0..3)
            .map(|i| Prediction {
                id: format!("q{i}"),
                answer: Some(format!("Ans {i}.")),
                trace_path: None,
            })
            .collect();
        let report = evaluate_run(&p, &g).unwrap();
        assert_eq!(report.em, 100.0);
        assert_eq!(report.f1, 100.0);
        assert_eq!(report.missing, 0);
    }

    #[test]
    fn unknown_and_duplicate_ids_rejected() {
        let g = vec![GoldRecord {
            id: "q1".into(),
            question: String::new(),
            gold_answers: golds(&["a"]),
        }];
        let stray = [Prediction { id: "zz".into(), answer: None, trace_path: None }];
        assert_eq!(evaluate_run(&stray, &g), Err(EvalError::UnknownQuestion("zz".into())));
        let dup = [
            Prediction { id: "q1".into(), answer: None, trace_path: None },
            Prediction { id: "q1".into(), answer: None, trace_path: None },
        ];
        assert_eq!(evaluate_run(&dup, &g), Err(EvalError::DuplicatePrediction("q1".into())));
    }
}
