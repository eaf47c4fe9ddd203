//! Extraction of correct and incorrect solution paths from annotated trees,
//! and their line-delimited export as value-training records.
//!
//! A records file starts with one header line carrying the annotation
//! settings, followed by one record per line:
//!
//! ```text
//! {"header":{"w":1.4,"beta":0.1,"max_iterations":20,...}}
//! {"question":..,"steps":[{"plan_text":..,"queries":[..],"doc_ids":[..],"V_p_target":..,"V_s_target":..,"prompt":..,"response":..}],"final_answer":..,"correct":true,"T":3}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::prompt::{build_step_prompt, render_action_call};
use crate::agents::Action;
use crate::tree::{NodeId, ReasoningTree, StepContent, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordStep {
    pub plan_text: String,
    pub queries: Vec<String>,
    pub doc_ids: Vec<String>,
    #[serde(rename = "V_p_target")]
    pub plan_target: f64,
    #[serde(rename = "V_s_target")]
    pub search_target: f64,
    /// Step-sampling prompt for the trajectory before this step.
    pub prompt: String,
    /// The step rendered as a policy completion.
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub question: String,
    pub steps: Vec<RecordStep>,
    pub final_answer: String,
    pub correct: bool,
    #[serde(rename = "T")]
    pub step_count: usize,
}

/// Settings snapshot written at the top of a records file. `beta` is the
/// value-loss weight for the external trainer and is not used here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportHeader {
    pub w: f64,
    pub beta: f64,
    pub max_iterations: usize,
    pub expansion_samples: usize,
    pub max_depth: usize,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: ExportHeader,
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("records line {line}: {message}")]
    Malformed { line: usize, message: String },
}

fn response_for(step: &StepContent) -> String {
    let action = match &step.answer {
        Some(answer) => Action::Finish { answer: answer.clone() },
        None => Action::Search {
            queries: step.queries.clone(),
        },
    };
    format!("**Thought:** {}\n**Action:** {}", step.plan_text, render_action_call(&action))
}

fn record_for(tree: &ReasoningTree, terminal: NodeId) -> TrainingRecord {
    let path = tree.path_ids(terminal).expect("terminal id comes from the tree");
    let mut prefix = Trajectory::new(tree.question.clone());
    let mut steps = Vec::with_capacity(path.len());
    for id in &path {
        let node = &tree.nodes[id.index()];
        let step = node.step.as_ref().expect("non-root node has a step");
        steps.push(RecordStep {
            plan_text: step.plan_text.clone(),
            queries: step.queries.clone(),
            doc_ids: step.retrieved_docs.iter().map(|d| d.doc_id.clone()).collect(),
            plan_target: node.plan_value,
            search_target: node.search_value,
            prompt: build_step_prompt(&prefix),
            response: response_for(step),
        });
        prefix.steps.push(step.clone());
    }
    let leaf = &tree.nodes[terminal.index()];
    TrainingRecord {
        question: tree.question.clone(),
        final_answer: leaf
            .step
            .as_ref()
            .and_then(|s| s.answer.clone())
            .unwrap_or_default(),
        correct: leaf.plan_reward == Some(1.0) && leaf.search_reward == Some(1.0),
        step_count: steps.len(),
        steps,
    }
}

/// One record per simulated terminal node, split into (correct, incorrect).
/// Terminals that were expanded but never simulated carry no outcome and are
/// skipped.
pub fn extract_paths(tree: &ReasoningTree) -> (Vec<TrainingRecord>, Vec<TrainingRecord>) {
    tree.iter()
        .filter(|n| n.is_terminal && n.is_scored())
        .map(|n| record_for(tree, n.node_id))
        .partition(|r| r.correct)
}

/// Streams `records` after the header line; returns how many were written.
pub fn write_records<W: Write>(
    mut out: W,
    header: &ExportHeader,
    records: impl IntoIterator<Item = TrainingRecord>,
) -> std::io::Result<usize> {
    serde_json::to_writer(&mut out, &HeaderLine { header: header.clone() })?;
    out.write_all(b"\n")?;
    let mut written = 0;
    for record in records {
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
        written += 1;
    }
    out.flush()?;
    Ok(written)
}

pub fn export_records(
    path: &Path,
    header: &ExportHeader,
    records: impl IntoIterator<Item = TrainingRecord>,
) -> Result<usize, ExportError> {
    let io_err = |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_records(BufWriter::new(file), header, records).map_err(io_err)
}

/// Reads the header, then yields records lazily.
pub fn read_records<R: BufRead>(
    input: R,
) -> Result<(ExportHeader, impl Iterator<Item = Result<TrainingRecord, ExportError>>), ExportError> {
    let mut lines = input.lines().enumerate();
    let malformed = |line: usize, message: String| ExportError::Malformed { line, message };
    let (_, first) = lines
        .next()
        .ok_or_else(|| malformed(1, "missing header line".into()))?;
    let first = first.map_err(|e| malformed(1, e.to_string()))?;
    let header: HeaderLine = serde_json::from_str(&first).map_err(|e| malformed(1, e.to_string()))?;
    let records = lines
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(move |(i, line)| {
            let line = line.map_err(|e| malformed(i + 1, e.to_string()))?;
            serde_json::from_str(&line).map_err(|e| malformed(i + 1, e.to_string()))
        });
    Ok((header.header, records))
}

pub fn import_records(path: &Path) -> Result<(ExportHeader, Vec<TrainingRecord>), ExportError> {
    let file = File::open(path).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (header, records) = read_records(BufReader::new(file))?;
    Ok((header, records.collect::<Result<_, _>>()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::Document;

    fn search(plan: &str) -> StepContent {
        StepContent::search(
            plan,
            vec![format!("{plan} query")],
            vec![Document {
                doc_id: format!("doc-{plan}"),
                title: String::new(),
                text: String::new(),
                score: 1.0,
            }],
        )
    }

    fn annotated() -> ReasoningTree {
        let mut tree = ReasoningTree::new("q", vec!["right".into()]);
        let a = tree.add_child(NodeId::ROOT, search("a")).unwrap();
        tree.set_rewards(a, 0.5, 0.5).unwrap();
        tree.backpropagate(a, 0.5, 0.5).unwrap();
        for (answer, reward) in [("right", 1.0), ("wrong", -1.0), ("also wrong", -1.0)] {
            let t = tree.add_child(a, StepContent::finish("answer", answer)).unwrap();
            tree.set_rewards(t, reward, reward).unwrap();
            tree.backpropagate(t, reward, reward).unwrap();
        }
        // expanded but never simulated
        tree.add_child(a, StepContent::finish("late", "right")).unwrap();
        tree
    }

    #[test]
    fn one_record_per_simulated_terminal() {
        let (correct, incorrect) = extract_paths(&annotated());
        assert_eq!((correct.len(), incorrect.len()), (1, 2));
        assert_eq!(correct[0].final_answer, "right");
        assert_eq!(correct[0].step_count, 2);
    }

    #[test]
    fn targets_copy_node_values() {
        let tree = annotated();
        let (correct, _) = extract_paths(&tree);
        let a = &tree.nodes[1];
        assert_eq!(correct[0].steps[0].plan_target, a.plan_value);
        assert_eq!(correct[0].steps[0].search_target, a.search_value);
        assert_eq!(correct[0].steps[0].doc_ids, ["doc-a"]);
        assert_eq!(correct[0].steps[1].plan_target, 1.0);
        assert!(correct[0].steps[1].response.ends_with("Finish(right)"));
    }

    #[test]
    fn no_terminals_no_records() {
        let mut tree = ReasoningTree::new("q", vec![]);
        tree.add_child(NodeId::ROOT, search("a")).unwrap();
        let (c, i) = extract_paths(&tree);
        assert!(c.is_empty() && i.is_empty());
    }

    fn header() -> ExportHeader {
        ExportHeader {
            w: 1.4,
            beta: 0.1,
            max_iterations: 20,
            expansion_samples: 3,
            max_depth: 6,
        }
    }

    #[test]
    fn empty_export_is_header_only() {
        let mut buf = Vec::new();
        assert_eq!(write_records(&mut buf, &header(), vec![]).unwrap(), 0);
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        let (h, records) = read_records(text.as_bytes()).unwrap();
        assert_eq!(h, header());
        assert_eq!(records.count(), 0);
    }

    #[test]
    fn round_trip() {
        let (correct, incorrect) = extract_paths(&annotated());
        let all: Vec<_> = correct.into_iter().chain(incorrect).collect();
        let mut buf = Vec::new();
        write_records(&mut buf, &header(), all.clone()).unwrap();
        let (_, back) = read_records(buf.as_slice()).unwrap();
        let back: Vec<_> = back.collect::<Result<_, _>>().unwrap();
        assert_eq!(back, all);
    }

    #[test]
    fn io_errors_name_the_path() {
        let err = export_records(Path::new("/nonexistent/dir/records.jsonl"), &header(), vec![]).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/records.jsonl"));
    }
}
