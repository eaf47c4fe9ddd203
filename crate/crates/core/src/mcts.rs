//! MCTS annotation: selection by UCT on the search value, expansion by sampled
//! plans and queries, simulation by judge rewards (or answer correctness at
//! terminals), and incremental-mean backpropagation.
//!
//! Each simulation scores exactly one node. Freshly expanded children are
//! pending until simulated; pending nodes have `N = 0`, so UCT selects them
//! before any visited sibling.

use std::collections::HashSet;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{judge_step, sample_actions, Action, AgentConfig, AgentError};
use crate::backends::Backends;
use crate::metrics::exact_match;
use crate::retrieval::{merge_results, RetrievalError};
use crate::tree::{NodeId, ReasoningNode, ReasoningTree, StepContent, TreeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MctsError {
    #[error("parent visit count {parent} below child visit count {child}")]
    InvalidCounts { parent: u64, child: u64 },
    #[error("no node left to expand or simulate")]
    TreeExhausted,
    #[error("node {0} cannot be expanded")]
    NotExpandable(NodeId),
    #[error("question is empty")]
    EmptyQuestion,
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Which value estimate drives the exploitation term of UCT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionValue {
    Search,
    Plan,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MctsConfig {
    /// UCT exploration weight.
    pub w: f64,
    pub max_iterations: usize,
    pub expansion_samples: usize,
    pub max_depth: usize,
    pub expansion_temperature: f64,
    pub selection_value: SelectionValue,
    /// Documents kept after merging the results of a step's queries. Set
    /// from the retrieval settings rather than read from the `mcts` table.
    #[serde(skip)]
    pub top_k: usize,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self {
            w: 1.4,
            max_iterations: 20,
            expansion_samples: 3,
            max_depth: 6,
            expansion_temperature: 1.0,
            selection_value: SelectionValue::Search,
            top_k: 5,
        }
    }
}

fn selection_value(node: &ReasoningNode, which: SelectionValue) -> f64 {
    match which {
        SelectionValue::Search => node.search_value,
        SelectionValue::Plan => node.plan_value,
        SelectionValue::Mean => 0.5 * (node.plan_value + node.search_value),
    }
}

/// `V_s + w * sqrt(ln(parent_visits) / N)`, or `+inf` for an unvisited node.
pub fn uct_score(node: &ReasoningNode, parent_visits: u64, w: f64) -> Result<f64, MctsError> {
    uct_score_with(node, parent_visits, w, SelectionValue::Search)
}

pub fn uct_score_with(
    node: &ReasoningNode,
    parent_visits: u64,
    w: f64,
    which: SelectionValue,
) -> Result<f64, MctsError> {
    if parent_visits < node.visits {
        return Err(MctsError::InvalidCounts {
            parent: parent_visits,
            child: node.visits,
        });
    }
    if node.visits == 0 {
        return Ok(f64::INFINITY);
    }
    let n = node.visits as f64;
    Ok(selection_value(node, which) + w * ((parent_visits as f64).ln() / n).sqrt())
}

/// Visit count used as `N_parent` for the children of `id`. The root is
/// never updated, so its count is the number of simulations below it.
pub fn parent_visits(tree: &ReasoningTree, id: NodeId) -> u64 {
    let node = &tree.nodes[id.index()];
    if node.is_root() {
        node.children.iter().map(|c| tree.nodes[c.index()].visits).sum()
    } else {
        node.visits
    }
}

/// Node-level selection predicates shared by [`select`] and the annotator.
struct Frontier<'a> {
    cfg: &'a MctsConfig,
    saturated: &'a HashSet<NodeId>,
    depth: Vec<usize>,
    has_work: Vec<bool>,
}

impl<'a> Frontier<'a> {
    fn new(tree: &'a ReasoningTree, cfg: &'a MctsConfig, saturated: &'a HashSet<NodeId>) -> Self {
        let n = tree.nodes.len();
        let mut depth = vec![0; n];
        for node in &tree.nodes {
            if let Some(p) = node.parent_id {
                depth[node.node_id.index()] = depth[p.index()] + 1;
            }
        }
        let mut frontier = Self {
            cfg,
            saturated,
            depth,
            has_work: vec![false; n],
        };
        // Children always have larger ids than their parents.
        for i in (0..n).rev() {
            let node = &tree.nodes[i];
            let below = node.children.iter().any(|c| frontier.has_work[c.index()]);
            frontier.has_work[i] = below || frontier.is_pending(node) || frontier.is_expandable(node);
        }
        frontier
    }

    fn is_pending(&self, node: &ReasoningNode) -> bool {
        !node.is_root() && node.visits == 0
    }

    fn is_expandable(&self, node: &ReasoningNode) -> bool {
        !node.is_terminal
            && self.depth[node.node_id.index()] < self.cfg.max_depth
            && node.children.len() < self.cfg.expansion_samples
            && !self.saturated.contains(&node.node_id)
    }
}

/// Descends from the root by maximal UCT (ties to the lowest id), stopping at
/// the first node that is pending simulation or still expandable.
pub fn select(tree: &ReasoningTree, cfg: &MctsConfig) -> Result<NodeId, MctsError> {
    select_with(tree, cfg, &HashSet::new())
}

/// [`select`], additionally treating `saturated` nodes as fully expanded.
pub fn select_with(
    tree: &ReasoningTree,
    cfg: &MctsConfig,
    saturated: &HashSet<NodeId>,
) -> Result<NodeId, MctsError> {
    let frontier = Frontier::new(tree, cfg, saturated);
    let mut cursor = tree.root_id();
    loop {
        let node = &tree.nodes[cursor.index()];
        if frontier.is_pending(node) || frontier.is_expandable(node) {
            return Ok(cursor);
        }
        let parent_n = parent_visits(tree, cursor);
        let mut best: Option<(NodeId, f64)> = None;
        for &child in node.children.iter().filter(|c| frontier.has_work[c.index()]) {
            let score = uct_score_with(&tree.nodes[child.index()], parent_n, cfg.w, cfg.selection_value)?;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((child, score));
            }
        }
        match best {
            Some((child, _)) => cursor = child,
            None => return Err(MctsError::TreeExhausted),
        }
    }
}

/// One simulation: the node scored and the rewards it propagated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub node: NodeId,
    pub plan_reward: f64,
    pub search_reward: f64,
}

/// Runs annotation over a set of backends.
pub struct Annotator {
    pub backends: Backends,
    pub cfg: MctsConfig,
    pub agent: AgentConfig,
}

fn same_decision(step: &StepContent, thought: &str, action: &Action) -> bool {
    step.plan_text == thought
        && match action {
            Action::Finish { answer } => step.answer.as_deref() == Some(answer.as_str()),
            Action::Search { queries } => step.answer.is_none() && &step.queries == queries,
        }
}

impl Annotator {
    pub fn new(backends: Backends, cfg: MctsConfig, agent: AgentConfig) -> Self {
        Self { backends, cfg, agent }
    }

    /// Samples actions at `node` and attaches one child per distinct decision.
    /// Search children carry the merged, deduplicated results of their queries.
    pub fn expand(&self, tree: &mut ReasoningTree, node: NodeId) -> Result<Vec<NodeId>, MctsError> {
        let n = tree.node(node)?;
        if n.is_terminal || tree.depth(node)? >= self.cfg.max_depth {
            return Err(MctsError::NotExpandable(node));
        }
        let traj = tree.path_to(node)?;
        let decisions = sample_actions(
            self.backends.policy.as_ref(),
            &traj,
            self.cfg.expansion_samples,
            self.cfg.expansion_temperature,
            &self.agent,
        )?;
        let mut added = Vec::new();
        for decision in decisions {
            let duplicate = tree.nodes[node.index()].children.iter().any(|c| {
                tree.nodes[c.index()]
                    .step
                    .as_ref()
                    .is_some_and(|s| same_decision(s, &decision.thought, &decision.action))
            });
            if duplicate {
                continue;
            }
            let step = match decision.action {
                Action::Finish { answer } => StepContent::finish(decision.thought, answer),
                Action::Search { queries } => {
                    let results = queries
                        .iter()
                        .map(|q| self.backends.retriever.retrieve(q))
                        .collect::<Result<Vec<_>, _>>()?;
                    StepContent::search(decision.thought, queries, merge_results(results, self.cfg.top_k))
                }
            };
            added.push(tree.add_child(node, step)?);
        }
        Ok(added)
    }

    /// Rewards for `node`: answer correctness at terminals, (-1, -1) for a
    /// non-terminal at the depth cap, the judge's scores otherwise. The
    /// rewards are stored on the node.
    pub fn simulate(&self, tree: &mut ReasoningTree, node: NodeId) -> Result<(f64, f64), MctsError> {
        let n = tree.node(node)?;
        let step = n.step.clone().ok_or(MctsError::NotExpandable(node))?;
        let rewards = if let Some(answer) = &step.answer {
            if exact_match(answer, &tree.gold_answers) == 1 {
                (1.0, 1.0)
            } else {
                (-1.0, -1.0)
            }
        } else if tree.depth(node)? >= self.cfg.max_depth {
            (-1.0, -1.0)
        } else {
            let parent = n.parent_id.expect("non-root node has a parent");
            let prefix = tree.path_to(parent)?;
            let scores = judge_step(self.backends.judge.as_ref(), &prefix, &step, &self.agent);
            (scores.plan_score, scores.search_score)
        };
        tree.set_rewards(node, rewards.0, rewards.1)?;
        Ok(rewards)
    }

    /// Builds and annotates a tree for one question. Stops after
    /// `max_iterations` simulations or when nothing is left to expand.
    pub fn run(
        &self,
        question: &str,
        gold_answers: &[String],
    ) -> Result<(ReasoningTree, Vec<Simulation>), MctsError> {
        if question.trim().is_empty() {
            return Err(MctsError::EmptyQuestion);
        }
        let mut tree = ReasoningTree::new(question, gold_answers.to_vec());
        let mut saturated = HashSet::new();
        let mut log = Vec::with_capacity(self.cfg.max_iterations);
        while log.len() < self.cfg.max_iterations {
            let leaf = match select_with(&tree, &self.cfg, &saturated) {
                Ok(id) => id,
                Err(MctsError::TreeExhausted) => break,
                Err(e) => return Err(e),
            };
            let pending = !tree.nodes[leaf.index()].is_root() && tree.nodes[leaf.index()].visits == 0;
            let target = if pending {
                leaf
            } else {
                let added = match self.expand(&mut tree, leaf) {
                    Ok(added) => added,
                    Err(MctsError::Agent(AgentError::AllSamplesUnparseable)) => {
                        warn!("no parseable expansion at node {leaf}");
                        Vec::new()
                    }
                    Err(e) => return Err(e),
                };
                match added.first() {
                    Some(&first) => first,
                    None => {
                        // Every sample duplicated an existing child.
                        saturated.insert(leaf);
                        continue;
                    }
                }
            };
            let (plan_reward, search_reward) = self.simulate(&mut tree, target)?;
            tree.backpropagate(target, plan_reward, search_reward)?;
            log.push(Simulation {
                node: target,
                plan_reward,
                search_reward,
            });
        }
        Ok((tree, log))
    }
}

/// Convenience wrapper returning only the tree.
pub fn run_annotation(
    question: &str,
    gold_answers: &[String],
    backends: &Backends,
    cfg: &MctsConfig,
    agent: &AgentConfig,
) -> Result<ReasoningTree, MctsError> {
    Annotator::new(backends.clone(), *cfg, *agent)
        .run(question, gold_answers)
        .map(|(tree, _)| tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::Document;

    fn search(plan: &str) -> StepContent {
        StepContent::search(
            plan,
            vec![plan.to_string()],
            vec![Document {
                doc_id: plan.into(),
                title: String::new(),
                text: String::new(),
                score: 1.0,
            }],
        )
    }

    fn node(visits: u64, v_s: f64) -> ReasoningNode {
        let mut tree = ReasoningTree::new("q", vec![]);
        let id = tree.add_child(NodeId::ROOT, search("a")).unwrap();
        let mut n = tree.nodes[id.index()].clone();
        n.visits = visits;
        n.search_value = v_s;
        n
    }

    #[test]
    fn uct_formula_value() {
        let score = uct_score(&node(2, 0.5), 10, 1.4).unwrap();
        let expected = 0.5 + 1.4 * (10f64.ln() / 2.0).sqrt();
        assert!((score - expected).abs() < 1e-12);
        assert!((score - 2.0022).abs() < 1e-4);
    }

    #[test]
    fn uct_exploitation_only() {
        assert_eq!(uct_score(&node(3, -0.25), 7, 0.0).unwrap(), -0.25);
    }

    #[test]
    fn uct_unvisited_is_infinite() {
        assert_eq!(uct_score(&node(0, 0.0), 5, 1.4).unwrap(), f64::INFINITY);
        assert_eq!(uct_score(&node(0, 0.0), 0, 1.4).unwrap(), f64::INFINITY);
    }

    #[test]
    fn uct_rejects_inconsistent_counts() {
        assert_eq!(
            uct_score(&node(4, 0.0), 3, 1.4),
            Err(MctsError::InvalidCounts { parent: 3, child: 4 })
        );
    }

    fn full_root(values: &[f64]) -> ReasoningTree {
        let mut tree = ReasoningTree::new("q", vec![]);
        for (i, v) in values.iter().enumerate() {
            let id = tree.add_child(NodeId::ROOT, search(&format!("c{i}"))).unwrap();
            tree.backpropagate(id, 0.0, *v).unwrap();
        }
        tree
    }

    #[test]
    fn select_prefers_higher_search_value() {
        let tree = full_root(&[0.9, 0.1]);
        let cfg = MctsConfig {
            expansion_samples: 2,
            ..MctsConfig::default()
        };
        assert_eq!(select(&tree, &cfg).unwrap(), NodeId(1));
        let tree = full_root(&[0.1, 0.9]);
        assert_eq!(select(&tree, &cfg).unwrap(), NodeId(2));
    }

    #[test]
    fn select_prefers_unvisited_child() {
        let mut tree = full_root(&[0.9, 0.8]);
        let fresh = tree.add_child(NodeId::ROOT, search("fresh")).unwrap();
        let cfg = MctsConfig {
            expansion_samples: 3,
            ..MctsConfig::default()
        };
        assert_eq!(select(&tree, &cfg).unwrap(), fresh);
    }

    #[test]
    fn select_stops_at_expandable_root() {
        let tree = full_root(&[0.9]);
        assert_eq!(select(&tree, &MctsConfig::default()).unwrap(), NodeId::ROOT);
    }

    #[test]
    fn exhausted_tree_reports_it() {
        let mut tree = ReasoningTree::new("q", vec![]);
        let fin = tree.add_child(NodeId::ROOT, StepContent::finish("t", "a")).unwrap();
        tree.backpropagate(fin, 1.0, 1.0).unwrap();
        let cfg = MctsConfig {
            expansion_samples: 1,
            ..MctsConfig::default()
        };
        assert_eq!(select(&tree, &cfg), Err(MctsError::TreeExhausted));
    }

    #[test]
    fn depth_cap_blocks_descent() {
        let mut tree = ReasoningTree::new("q", vec![]);
        let a = tree.add_child(NodeId::ROOT, search("a")).unwrap();
        tree.backpropagate(a, 0.0, 0.0).unwrap();
        let cfg = MctsConfig {
            expansion_samples: 1,
            max_depth: 1,
            ..MctsConfig::default()
        };
        assert_eq!(select(&tree, &cfg), Err(MctsError::TreeExhausted));
    }

    #[test]
    fn root_parent_visits_sum_children() {
        let tree = full_root(&[0.1, 0.2, 0.3]);
        assert_eq!(parent_visits(&tree, NodeId::ROOT), 3);
        assert_eq!(parent_visits(&tree, NodeId(1)), 1);
    }

    fn scripted_annotator(max_depth: usize) -> Annotator {
        use crate::agents::scripted::{ScriptEntry, ScriptTable, ScriptedBackend};
        use crate::retrieval::{LexicalIndex, LocalRetriever, RetrievalConfig};
        use crate::value::ConstantScorer;
        use std::sync::Arc;
        let table = ScriptTable::from_entries([ScriptEntry::Judge {
            question: "q".into(),
            step: 0,
            text: "the value of the thought is ***0.4*** the value of the search result is ***-0.2***".into(),
        }]);
        let script = Arc::new(ScriptedBackend::new(table));
        let backends = Backends {
            policy: script.clone(),
            judge: script,
            retriever: Arc::new(LocalRetriever::new(Arc::new(LexicalIndex::new(vec![])), RetrievalConfig::default())),
            plan_value: Arc::new(ConstantScorer(0.0)),
            search_value: Arc::new(ConstantScorer(0.0)),
        };
        let cfg = MctsConfig {
            max_depth,
            ..MctsConfig::default()
        };
        Annotator::new(backends, cfg, AgentConfig::default())
    }

    #[test]
    fn terminal_rewards_follow_exact_match() {
        let annotator = scripted_annotator(6);
        let mut tree = ReasoningTree::new("q", vec!["Orhan Ghazi".into()]);
        let right = tree.add_child(NodeId::ROOT, StepContent::finish("p", "Orhan Ghazi")).unwrap();
        let wrong = tree.add_child(NodeId::ROOT, StepContent::finish("p", "Osman")).unwrap();
        assert_eq!(annotator.simulate(&mut tree, right).unwrap(), (1.0, 1.0));
        assert_eq!(annotator.simulate(&mut tree, wrong).unwrap(), (-1.0, -1.0));
        assert_eq!(tree.nodes[right.index()].plan_reward, Some(1.0));
    }

    #[test]
    fn depth_cap_and_judge_rewards() {
        let mut tree = ReasoningTree::new("q", vec!["x".into()]);
        let child = tree.add_child(NodeId::ROOT, search("a")).unwrap();
        assert_eq!(scripted_annotator(1).simulate(&mut tree, child).unwrap(), (-1.0, -1.0));
        assert_eq!(scripted_annotator(6).simulate(&mut tree, child).unwrap(), (0.4, -0.2));
    }
}
