//! Browser demo over a small synthetic world. Each operation has a plain
//! Rust form returning JSON and a `demo_*` wrapper for `www/index.html`.

use std::sync::Arc;

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use treerag::agents::AgentConfig;
use treerag::experiment::{exact_match_vector, infer_question, mean, WorldRun};
use treerag::hbs::HbsConfig;
use treerag::mcts::{Annotator, MctsConfig};
use treerag::metrics::exact_match;
use treerag::synthworld::oracle::oracle_backends;
use treerag::synthworld::{generate_world, OracleOptions, World, WorldSpec};

pub fn world(seed: u64, n_questions: usize, noise: f64, ambiguity: f64) -> Result<Arc<World>, String> {
    let spec = WorldSpec {
        seed,
        n_entities: 60,
        n_questions,
        retrieval_noise: noise,
        plan_ambiguity: ambiguity,
        ..WorldSpec::default()
    };
    generate_world(&spec).map(Arc::new).map_err(|e| e.to_string())
}

fn question_at(world: &World, index: usize) -> Result<&treerag::synthworld::WorldQuestion, String> {
    world
        .questions
        .get(index)
        .ok_or_else(|| format!("question {index} out of range (world has {})", world.questions.len()))
}

/// One beam-search run with its full decision trace.
pub fn hbs_trace(seed: u64, b1: usize, b2: usize, noise: f64, ambiguity: f64, question: usize) -> Result<Value, String> {
    let world = world(seed, 12, noise, ambiguity)?;
    let q = question_at(&world, question)?;
    let run = WorldRun {
        hbs: HbsConfig {
            b1: b1.max(1),
            b2: b2.max(1),
            ..HbsConfig::default()
        },
        oracle: OracleOptions {
            seed,
            epsilon: 0.1,
            ..OracleOptions::default()
        },
        ..WorldRun::default()
    };
    let result = infer_question(&world, q, &run).map_err(|e| e.to_string())?;
    let answer = result.answer.text().map(str::to_string);
    Ok(json!({
        "question": q.question,
        "gold": q.gold_answers,
        "answer": answer,
        "correct": answer.as_deref().is_some_and(|a| exact_match(a, &q.gold_answers) == 1),
        "trace": result.trace,
    }))
}

/// An MCTS-annotated tree as a flat node list.
pub fn mcts_tree(seed: u64, iterations: usize, w: f64, question: usize) -> Result<Value, String> {
    let world = world(seed, 12, 0.0, 0.0)?;
    let q = question_at(&world, question)?;
    let options = OracleOptions {
        seed,
        ..OracleOptions::default()
    };
    let cfg = MctsConfig {
        w,
        max_iterations: iterations.max(1),
        ..MctsConfig::default()
    };
    let annotator = Annotator::new(oracle_backends(&world, &options), cfg, AgentConfig::default());
    let (tree, _) = annotator.run(&q.question, &q.gold_answers).map_err(|e| e.to_string())?;
    let nodes: Vec<Value> = tree
        .iter()
        .map(|n| {
            let label = match &n.step {
                None => q.question.clone(),
                Some(step) => match &step.answer {
                    Some(answer) => format!("{} => Finish({answer})", step.plan_text),
                    None => format!("{} => Search({})", step.plan_text, step.queries.join(" | ")),
                },
            };
            json!({
                "id": n.node_id.index(),
                "parent": n.parent_id.map(|p| p.index()),
                "label": label,
                "N": n.visits,
                "V_p": n.plan_value,
                "V_s": n.search_value,
                "terminal": n.is_terminal,
                "reward": n.plan_reward.zip(n.search_reward),
            })
        })
        .collect();
    Ok(json!({ "question": q.question, "gold": q.gold_answers, "nodes": nodes }))
}

/// Exact match for B2 = 1..=5 over a fresh world.
pub fn b2_curve(seed: u64, n_questions: usize, noise: f64, epsilon: f64) -> Result<Value, String> {
    let world = world(seed, n_questions.clamp(1, 200), noise, 0.0)?;
    let points: Vec<Value> = (1..=5)
        .map(|b2| {
            let run = WorldRun {
                hbs: HbsConfig {
                    b2,
                    ..HbsConfig::default()
                },
                oracle: OracleOptions {
                    seed,
                    epsilon,
                    ..OracleOptions::default()
                },
                ..WorldRun::default()
            };
            json!({ "b2": b2, "em": 100.0 * mean(&exact_match_vector(&world, &run)) })
        })
        .collect();
    Ok(json!({ "questions": world.questions.len(), "points": points }))
}

fn to_js(result: Result<Value, String>) -> Result<String, JsValue> {
    result.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn demo_hbs_trace(seed: u32, b1: u32, b2: u32, noise: f64, ambiguity: f64, question: u32) -> Result<String, JsValue> {
    to_js(hbs_trace(seed.into(), b1 as usize, b2 as usize, noise, ambiguity, question as usize))
}

#[wasm_bindgen]
pub fn demo_mcts_tree(seed: u32, iterations: u32, w: f64, question: u32) -> Result<String, JsValue> {
    to_js(mcts_tree(seed.into(), iterations as usize, w, question as usize))
}

#[wasm_bindgen]
pub fn demo_b2_curve(seed: u32, n_questions: u32, noise: f64, epsilon: f64) -> Result<String, JsValue> {
    to_js(b2_curve(seed.into(), n_questions as usize, noise, epsilon))
}
