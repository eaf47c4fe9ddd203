//! Reasoning tree shared by MCTS annotation and beam-search inference.
//!
//! Each non-root node holds one reasoning step (a plan, the queries issued for
//! it and the documents they retrieved, or a final answer) together with the
//! dual planning/search statistics maintained by backpropagation. The root
//! stands for the bare question: it carries no step and never receives value
//! updates.
//!
//! Trees serialize as one JSON object per line:
//!
//! ```text
//! {"question":..,"gold_answers":[..],"nodes":[{"node_id":0,"parent_id":null,"children":[1],
//!   "step":null,"N":0,"V_p":0.0,"V_s":0.0,"R_p":null,"R_s":null,"is_terminal":false}, ..]}
//! ```

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stable node identifier; ids are assigned in insertion order starting at the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("unknown parent node {0}")]
    UnknownParent(NodeId),
    #[error("parent node {0} is terminal")]
    ParentIsTerminal(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("reward {0} outside [-1, 1]")]
    RewardOutOfRange(f64),
    #[error("invalid step: {0}")]
    InvalidStep(String),
    #[error("malformed tree stream at record {record}, line {line}, column {column}: {message}")]
    MalformedStream {
        record: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("inconsistent tree: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
    /// Retriever score, unitless.
    pub score: f64,
}

/// One reasoning step: the thought, the search it issued and what came back,
/// or the final answer for a terminal step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepContent {
    pub plan_text: String,
    pub queries: Vec<String>,
    #[serde(rename = "docs")]
    pub retrieved_docs: Vec<Document>,
    pub answer: Option<String>,
}

impl StepContent {
    pub fn search(plan_text: impl Into<String>, queries: Vec<String>, docs: Vec<Document>) -> Self {
        Self {
            plan_text: plan_text.into(),
            queries,
            retrieved_docs: docs,
            answer: None,
        }
    }

    pub fn finish(plan_text: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            plan_text: plan_text.into(),
            queries: Vec::new(),
            retrieved_docs: Vec::new(),
            answer: Some(answer.into()),
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.answer.is_some()
    }

    /// A search step needs at least one query; a finish step carries neither
    /// queries nor documents. A search whose retrieval came back empty is
    /// still a valid step.
    pub fn validate(&self) -> Result<(), TreeError> {
        match &self.answer {
            Some(_) if !self.queries.is_empty() || !self.retrieved_docs.is_empty() => Err(
                TreeError::InvalidStep("finish step carries queries or documents".into()),
            ),
            Some(_) => Ok(()),
            None if self.queries.is_empty() => {
                Err(TreeError::InvalidStep("search step has no queries".into()))
            }
            None if self.retrieved_docs.iter().any(|d| d.doc_id.is_empty() || !d.score.is_finite()) => {
                Err(TreeError::InvalidStep("document with empty id or non-finite score".into()))
            }
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningNode {
    pub node_id: NodeId,
    pub parent_id: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub step: Option<StepContent>,
    #[serde(rename = "N")]
    pub visits: u64,
    #[serde(rename = "V_p")]
    pub plan_value: f64,
    #[serde(rename = "V_s")]
    pub search_value: f64,
    #[serde(rename = "R_p")]
    pub plan_reward: Option<f64>,
    #[serde(rename = "R_s")]
    pub search_reward: Option<f64>,
    pub is_terminal: bool,
}

impl ReasoningNode {
    fn fresh(node_id: NodeId, parent_id: Option<NodeId>, step: Option<StepContent>) -> Self {
        let is_terminal = step.as_ref().is_some_and(StepContent::is_terminal);
        Self {
            node_id,
            parent_id,
            children: Vec::new(),
            step,
            visits: 0,
            plan_value: 0.0,
            search_value: 0.0,
            plan_reward: None,
            search_reward: None,
            is_terminal,
        }
    }

    pub fn is_root(&self) -> bool {
        self.parent_id.is_none()
    }

    /// Whether the simulation phase has stored judge rewards on this node.
    pub fn is_scored(&self) -> bool {
        self.plan_reward.is_some() && self.search_reward.is_some()
    }
}

/// The path from the question to some node, as consumed by every backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question: String,
    pub gold_answers: Option<Vec<String>>,
    pub steps: Vec<StepContent>,
}

impl Trajectory {
    pub fn new(question: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            gold_answers: None,
            steps: Vec::new(),
        }
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    pub fn last_step(&self) -> Option<&StepContent> {
        self.steps.last()
    }

    pub fn is_finished(&self) -> bool {
        self.steps.last().is_some_and(StepContent::is_terminal)
    }

    /// Returns a copy extended by `step`.
    pub fn extended(&self, step: StepContent) -> Self {
        let mut next = self.clone();
        next.steps.push(step);
        next
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTree {
    pub question: String,
    pub gold_answers: Vec<String>,
    pub nodes: Vec<ReasoningNode>,
}

impl ReasoningTree {
    pub fn new(question: impl Into<String>, gold_answers: Vec<String>) -> Self {
        Self {
            question: question.into(),
            gold_answers,
            nodes: vec![ReasoningNode::fresh(NodeId::ROOT, None, None)],
        }
    }

    pub fn root_id(&self) -> NodeId {
        NodeId::ROOT
    }

    pub fn root(&self) -> &ReasoningNode {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    pub fn get(&self, id: NodeId) -> Option<&ReasoningNode> {
        self.nodes.get(id.0)
    }

    pub fn node(&self, id: NodeId) -> Result<&ReasoningNode, TreeError> {
        self.nodes.get(id.0).ok_or(TreeError::UnknownNode(id))
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut ReasoningNode, TreeError> {
        self.nodes.get_mut(id.0).ok_or(TreeError::UnknownNode(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReasoningNode> {
        self.nodes.iter()
    }

    pub fn add_child(&mut self, parent: NodeId, step: StepContent) -> Result<NodeId, TreeError> {
        let parent_node = self.nodes.get(parent.0).ok_or(TreeError::UnknownParent(parent))?;
        if parent_node.is_terminal {
            return Err(TreeError::ParentIsTerminal(parent));
        }
        step.validate()?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(ReasoningNode::fresh(id, Some(parent), Some(step)));
        self.nodes[parent.0].children.push(id);
        Ok(id)
    }

    /// Node ids from the first step below the root down to `node`, root excluded.
    pub fn path_ids(&self, node: NodeId) -> Result<Vec<NodeId>, TreeError> {
        let mut path = Vec::new();
        let mut cursor = self.node(node)?;
        while let Some(parent) = cursor.parent_id {
            path.push(cursor.node_id);
            cursor = self.node(parent)?;
        }
        path.reverse();
        Ok(path)
    }

    /// Number of steps between the root and `node`.
    pub fn depth(&self, node: NodeId) -> Result<usize, TreeError> {
        let mut depth = 0;
        let mut cursor = self.node(node)?;
        while let Some(parent) = cursor.parent_id {
            depth += 1;
            cursor = self.node(parent)?;
        }
        Ok(depth)
    }

    pub fn path_to(&self, node: NodeId) -> Result<Trajectory, TreeError> {
        let steps = self
            .path_ids(node)?
            .into_iter()
            .filter_map(|id| self.nodes[id.0].step.clone())
            .collect();
        Ok(Trajectory {
            question: self.question.clone(),
            gold_answers: Some(self.gold_answers.clone()),
            steps,
        })
    }

    /// Stores the simulation rewards on `node` without touching its statistics.
    pub fn set_rewards(&mut self, node: NodeId, plan: f64, search: f64) -> Result<(), TreeError> {
        check_reward(plan)?;
        check_reward(search)?;
        let n = self.node_mut(node)?;
        n.plan_reward = Some(plan);
        n.search_reward = Some(search);
        Ok(())
    }

    /// Incremental-mean update of visit count and both values on every node
    /// from the leaf up to (but excluding) the root.
    pub fn backpropagate(&mut self, leaf: NodeId, plan: f64, search: f64) -> Result<(), TreeError> {
        check_reward(plan)?;
        check_reward(search)?;
        for id in self.path_ids(leaf)? {
            let n = &mut self.nodes[id.0];
            n.visits += 1;
            let count = n.visits as f64;
            n.plan_value += (plan - n.plan_value) / count;
            n.search_value += (search - n.search_value) / count;
        }
        Ok(())
    }

    /// Checks structural invariants: ids match positions, parent/child links
    /// agree, everything hangs off the root, terminal flags match answers.
    pub fn validate(&self) -> Result<(), TreeError> {
        let bad = |msg: String| Err(TreeError::Inconsistent(msg));
        if self.nodes.is_empty() {
            return bad("tree has no root".into());
        }
        let root = &self.nodes[0];
        if root.parent_id.is_some() || root.step.is_some() {
            return bad("node 0 must be a step-less root".into());
        }
        for (index, node) in self.nodes.iter().enumerate() {
            if node.node_id.0 != index {
                return bad(format!("node at position {index} has id {}", node.node_id));
            }
            if index > 0 {
                let Some(parent) = node.parent_id else {
                    return bad(format!("node {index} has no parent"));
                };
                // Parents always precede children, which rules out cycles.
                if parent.0 >= index {
                    return bad(format!("node {index} has parent {parent} that does not precede it"));
                }
                if !self.nodes[parent.0].children.contains(&node.node_id) {
                    return bad(format!("parent {parent} does not list child {index}"));
                }
                let Some(step) = &node.step else {
                    return bad(format!("node {index} has no step"));
                };
                step.validate()?;
                if node.is_terminal != step.is_terminal() {
                    return bad(format!("node {index} terminal flag disagrees with its step"));
                }
            }
            for child in &node.children {
                match self.nodes.get(child.0) {
                    Some(c) if c.parent_id == Some(node.node_id) => {}
                    _ => return bad(format!("node {index} lists child {child} that does not point back")),
                }
            }
            for value in [node.plan_value, node.search_value] {
                if !(-1.0..=1.0).contains(&value) {
                    return bad(format!("node {index} value {value} outside [-1, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("tree serialization is infallible")
    }

    pub fn from_json_line(line: &str) -> Result<Self, TreeError> {
        parse_record(line, 1)
    }
}

fn check_reward(reward: f64) -> Result<(), TreeError> {
    if (-1.0..=1.0).contains(&reward) {
        Ok(())
    } else {
        Err(TreeError::RewardOutOfRange(reward))
    }
}

fn parse_record(line: &str, record: usize) -> Result<ReasoningTree, TreeError> {
    let tree: ReasoningTree = serde_json::from_str(line).map_err(|e| TreeError::MalformedStream {
        record,
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    tree.validate()?;
    Ok(tree)
}

/// Writes trees as line-delimited records.
pub fn write_trees<'a, W: Write>(
    mut out: W,
    trees: impl IntoIterator<Item = &'a ReasoningTree>,
) -> std::io::Result<()> {
    for tree in trees {
        serde_json::to_writer(&mut out, tree)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Streams trees back from line-delimited records; blank lines are skipped.
pub fn read_trees<R: BufRead>(input: R) -> impl Iterator<Item = Result<ReasoningTree, TreeError>> {
    input
        .lines()
        .enumerate()
        .filter(|(_, line)| !matches!(line, Ok(l) if l.trim().is_empty()))
        .map(|(index, line)| {
            let line = line.map_err(|e| TreeError::MalformedStream {
                record: index + 1,
                line: 0,
                column: 0,
                message: e.to_string(),
            })?;
            parse_record(&line, index + 1)
        })
}
