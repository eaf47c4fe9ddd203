use proptest::collection::vec;
use proptest::prelude::*;

use treerag::agents::{parse_action, parse_judge_scores, render_action, render_judgement, ActionDecision};
use treerag::export::extract_paths;
use treerag::metrics::normalize;
use treerag::value::rank_and_keep;
use treerag::{Document, NodeId, ReasoningTree, StepContent};

/// (parent choice, terminal?, optional reward pair) per node after the root.
type Shape = Vec<(usize, bool, Option<(f64, f64)>)>;

fn shape(max: usize) -> impl Strategy<Value = Shape> {
    vec((any::<usize>(), prop::bool::weighted(0.3), prop::option::of((-1.0..=1.0f64, -1.0..=1.0f64))), 1..max)
}

fn build(shape: &Shape) -> ReasoningTree {
    let mut tree = ReasoningTree::new("who?", vec!["x".into()]);
    for (i, (pick, terminal, reward)) in shape.iter().enumerate() {
        let open: Vec<NodeId> = tree.iter().filter(|n| !n.is_terminal).map(|n| n.node_id).collect();
        let parent = open[pick % open.len()];
        let step = if *terminal {
            StepContent::finish(format!("t{i}"), "x")
        } else {
            let doc = Document {
                doc_id: format!("d{i}"),
                title: "t".into(),
                text: format!("text {i}"),
                score: i as f64 * 0.5,
            };
            StepContent::search(format!("t{i}"), vec![format!("q{i}")], vec![doc])
        };
        let id = tree.add_child(parent, step).unwrap();
        if let Some((p, s)) = reward {
            tree.set_rewards(id, *p, *s).unwrap();
            tree.backpropagate(id, *p, *s).unwrap();
        }
    }
    tree
}

fn text() -> impl Strategy<Value = String> {
    "[A-Za-z0-9'?.,()\\[\\]\" ]{0,20}[A-Za-z0-9'?.\"]"
}

proptest! {
    #[test]
    fn backprop_values_stay_in_range_and_visits_sum(shape in shape(60)) {
        let tree = build(&shape);
        tree.validate().unwrap();
        for node in tree.iter().filter(|n| !n.is_root()) {
            let child_visits: u64 = node.children.iter().map(|c| tree.nodes[c.index()].visits).sum();
            prop_assert!(node.visits >= child_visits);
            prop_assert!((-1.0..=1.0).contains(&node.plan_value));
            prop_assert!((-1.0..=1.0).contains(&node.search_value));
            if node.visits == 0 {
                prop_assert_eq!((node.plan_value, node.search_value), (0.0, 0.0));
            }
        }
        prop_assert_eq!(tree.root().visits, 0);
    }

    #[test]
    fn tree_serde_round_trips(shape in shape(50)) {
        let tree = build(&shape);
        let back = ReasoningTree::from_json_line(&tree.to_json_line()).unwrap();
        prop_assert_eq!(back, tree);
    }

    #[test]
    fn parents_precede_children(shape in shape(60)) {
        let tree = build(&shape);
        for node in tree.iter() {
            for child in &node.children {
                prop_assert!(child.index() > node.node_id.index());
            }
            let path = tree.path_ids(node.node_id).unwrap();
            prop_assert!(path.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(path.last().copied(), (!node.is_root()).then_some(node.node_id));
            prop_assert_eq!(path.len(), tree.depth(node.node_id).unwrap());
        }
    }

    #[test]
    fn extracted_paths_end_at_scored_terminals(shape in shape(40)) {
        let tree = build(&shape);
        let (correct, incorrect) = extract_paths(&tree);
        let expected = tree.iter().filter(|n| n.is_terminal && n.is_scored()).count();
        prop_assert_eq!(correct.len() + incorrect.len(), expected);
        for record in correct.iter().chain(&incorrect) {
            prop_assert_eq!(record.step_count, record.steps.len());
            prop_assert_eq!(record.final_answer.as_str(), "x");
        }
        let winners = tree
            .iter()
            .filter(|n| n.is_terminal && n.plan_reward == Some(1.0) && n.search_reward == Some(1.0))
            .count();
        prop_assert_eq!(correct.len(), winners);
    }

    #[test]
    fn actions_round_trip(thought in text(), answer in text(), queries in vec(text(), 1..=5), finish in any::<bool>()) {
        let thought = thought.trim().to_string();
        prop_assume!(!thought.is_empty());
        let decision = if finish {
            let answer = answer.trim().to_string();
            prop_assume!(!answer.is_empty());
            ActionDecision::finish(thought, answer)
        } else {
            let queries: Vec<String> = queries.iter().map(|q| q.trim().to_string()).collect();
            prop_assume!(queries.iter().all(|q| !q.is_empty()));
            ActionDecision::search(thought, queries)
        };
        prop_assert_eq!(parse_action(&render_action(&decision)).unwrap(), decision);
    }

    #[test]
    fn judgements_round_trip_with_clamping(p in -3.0..3.0f64, s in -3.0..3.0f64) {
        let scores = parse_judge_scores(&render_judgement(p, s)).unwrap();
        prop_assert_eq!(scores.plan_score, p.clamp(-1.0, 1.0));
        prop_assert_eq!(scores.search_score, s.clamp(-1.0, 1.0));
    }

    #[test]
    fn normalize_is_idempotent(s in "\\PC{0,40}") {
        let once = normalize(&s);
        prop_assert_eq!(normalize(&once), once);
    }

    #[test]
    fn ranking_ignores_input_order(scores in vec(-1.0..1.0f64, 1..20), keep in 1usize..25, seed in any::<u64>()) {
        let n = scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (state >> 33) as usize % (i + 1));
        }
        let shuffled: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let a = rank_and_keep((0..n).collect(), &scores, keep).unwrap();
        let b = rank_and_keep(order.clone(), &shuffled, keep).unwrap();
        prop_assert_eq!(a.len(), keep.min(n));
        let sa: Vec<f64> = a.iter().map(|r| r.score).collect();
        let sb: Vec<f64> = b.iter().map(|r| r.score).collect();
        prop_assert_eq!(&sa, &sb);
        prop_assert!(sa.windows(2).all(|w| w[0] >= w[1]));
    }
}
