//! Prompt templates for step sampling and step judging, plus renderers for
//! the output formats the parsers accept.

use std::fmt::Write as _;

use crate::tree::{StepContent, Trajectory};

use super::parse::{Action, ActionDecision};

const SAMPLE_TEMPLATE: &str = "\
**You are a highly capable web agent. Your task is to engage in multi-step reasoning and propose plans to reach a final answer for the given question.**

For each step, please include the following elements:

**Thought:** Offer a comprehensive and detailed analysis. This section should cover:
    - An analysis of the specific information required to address the question effectively and the information currently available.
    - If the information is enough to answer the question, you should conduct deep analysis based on the information and then answer the question.
    - If the information is not enough to answer the question, you should analyze whether the current plan progresses well.
        - If yes, predict the next action.
        - If no, reflect on why the progress is not good and then propose a new plan.

**Action:** Provide the next action. This section should cover:
   - If the information is enough to answer the question, you should output the final answer in format of Finish(put the answer here) without extra content.
   - If the information is not enough to answer the question, you should clearly specify the exact query for the next search in the format Search([List of Queries]) without extra content. Ensure the queries convey the same semantic information but are expressed differently to enhance the likelihood of finding the necessary information.

For the question: {query}, here is the reasoning process so far:
{history}

**The Output Format:**
- **Thought:** [Detailed analysis of the needed information, existing information, identifies whether information is enough. If enough, conduct analysis to obtain the final answer, else, identify what still needs to be searched]
- **Action:** [Finish(put the answer here) or Search([List of Queries])]

Please provide the plan for the next step:
";

const JUDGE_TEMPLATE: &str = "\
**Task:**  Assess the effectiveness of the thought and the search result in the last reasoning step.
As an advanced web search agent, your role is to systematically evaluate the current step step.
For the question: {query}, here is the reasoning process so far:
{history}

As an expert in web search, your tasks are as follows:
1. Analyze the thought in the last step: Evaluate the thought and determine its effectiveness in reaching the final answer. Assign a score between -1 and 1, where -1 means the thought is useless and 1 means the thought is very effective.
2. Analyze the search result in the last step: Evaluate the search result and determine its effectiveness in reaching the final answer. Assign a score between -1 and 1, where -1 means the search result was ineffective, and 1 means the search results were highly useful.

You should output the following elements
**Analysis of the thought:**
- Analyze whether the thought from the last step were helpful in progressing toward the final answer.
- Assign a score between -1 and 1, where -1 means the step was ineffective, and 1 indicates high usefulness.
- You must conclude the analysis with the format of \"the value of the thought is ***x***\", where x represent the value and * is the identifier. Remember that you must output the value x with identifier ***.

**Analysis of the search result:**
- Analyze whether the search query and search results from the last step were helpful in progressing toward the final answer.
- Assign a score between -1 and 1, where -1 means the step was ineffective, and 1 indicates high usefulness.
- You must conclude the analysis with the format of \"the value of the search result is ***x***\", where x represent the value and * is the identifier. Remember that you must output the value x with identifier ***.

Please begin by analyzing the previous step:
**Analysis of the thought:**
";

fn fill(template: &str, question: &str, history: &str) -> String {
    template.replace("{query}", question).replace("{history}", history)
}

/// Renders `decision` the way a well-behaved policy completion looks.
pub fn render_action(decision: &ActionDecision) -> String {
    format!(
        "**Thought:** {}\n**Action:** {}",
        decision.thought,
        render_action_call(&decision.action)
    )
}

pub fn render_action_call(action: &Action) -> String {
    match action {
        Action::Finish { answer } => format!("Finish({answer})"),
        Action::Search { queries } => {
            let items: Vec<String> = queries
                .iter()
                .map(|q| serde_json::to_string(q).expect("string serialization"))
                .collect();
            format!("Search([{}])", items.join(", "))
        }
    }
}

/// Renders judge output in the format `parse_judge_scores` expects.
pub fn render_judgement(plan_score: f64, search_score: f64) -> String {
    format!(
        "**Analysis of the thought:**\nthe value of the thought is ***{plan_score}***\n\n\
         **Analysis of the search result:**\nthe value of the search result is ***{search_score}***"
    )
}

fn render_step(out: &mut String, index: usize, step: &StepContent) {
    let _ = writeln!(out, "Step {}:", index + 1);
    let _ = writeln!(out, "**Thought:** {}", step.plan_text);
    let action = match &step.answer {
        Some(answer) => Action::Finish { answer: answer.clone() },
        None => Action::Search { queries: step.queries.clone() },
    };
    let _ = writeln!(out, "**Action:** {}", render_action_call(&action));
    if step.answer.is_none() {
        let _ = writeln!(out, "**Observation:**");
        if step.retrieved_docs.is_empty() {
            let _ = writeln!(out, "(no documents retrieved)");
        }
        for (rank, doc) in step.retrieved_docs.iter().enumerate() {
            let _ = writeln!(out, "[{}] {}: {}", rank + 1, doc.title, doc.text);
        }
    }
}

/// The reasoning-so-far block: one Thought/Action/Observation group per step.
pub fn render_history(steps: &[StepContent]) -> String {
    let mut out = String::new();
    for (i, step) in steps.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        render_step(&mut out, i, step);
    }
    out
}

pub fn build_step_prompt(traj: &Trajectory) -> String {
    fill(SAMPLE_TEMPLATE, &traj.question, &render_history(&traj.steps))
}

/// Step prompt followed by a fixed thought and an open `Search([`, used to
/// draw more query variants for an already chosen plan.
pub fn build_query_prompt(traj: &Trajectory, plan_text: &str) -> String {
    let mut prompt = build_step_prompt(traj);
    prompt.push_str(&query_prefix(plan_text));
    prompt
}

/// The text a query-variant completion continues from.
pub fn query_prefix(plan_text: &str) -> String {
    format!("**Thought:** {plan_text}\n**Action:** Search([")
}

/// Judge prompt whose history ends with `last_step`, the step under evaluation.
pub fn build_judge_prompt(traj: &Trajectory, last_step: &StepContent) -> String {
    let mut steps = traj.steps.clone();
    steps.push(last_step.clone());
    fill(JUDGE_TEMPLATE, &traj.question, &render_history(&steps))
}
