//! Strict parsers for policy actions and judge scores.

use serde::{Deserialize, Serialize};

use super::AgentError;

/// Default cap on the number of queries kept from one `Search([...])` list.
pub const DEFAULT_MAX_QUERIES: usize = 5;

const THOUGHT_MARKERS: [&str; 2] = ["**Thought:**", "Thought:"];
const ACTION_MARKERS: [&str; 2] = ["**Action:**", "Action:"];
const PLAN_VALUE_PHRASE: &str = "the value of the thought is";
const SEARCH_VALUE_PHRASE: &str = "the value of the search result is";
const SCORE_FENCE: &str = "***";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Action {
    Finish { answer: String },
    Search { queries: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionDecision {
    pub thought: String,
    pub action: Action,
}

impl ActionDecision {
    pub fn finish(thought: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            thought: thought.into(),
            action: Action::Finish { answer: answer.into() },
        }
    }

    pub fn search<S: Into<String>>(thought: impl Into<String>, queries: impl IntoIterator<Item = S>) -> Self {
        Self {
            thought: thought.into(),
            action: Action::Search {
                queries: queries.into_iter().map(Into::into).collect(),
            },
        }
    }

    pub fn is_finish(&self) -> bool {
        matches!(self.action, Action::Finish { .. })
    }

    pub fn queries(&self) -> &[String] {
        match &self.action {
            Action::Search { queries } => queries,
            Action::Finish { .. } => &[],
        }
    }

    pub fn answer(&self) -> Option<&str> {
        match &self.action {
            Action::Finish { answer } => Some(answer),
            Action::Search { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub plan_score: f64,
    pub search_score: f64,
    pub raw_text: String,
}

impl JudgeScores {
    pub fn neutral() -> Self {
        Self {
            plan_score: 0.0,
            search_score: 0.0,
            raw_text: String::new(),
        }
    }
}

fn failure(reason: impl Into<String>) -> AgentError {
    AgentError::ParseFailure { reason: reason.into() }
}

fn rfind_any<'a>(text: &str, markers: &[&'a str]) -> Option<(usize, &'a str)> {
    markers
        .iter()
        .filter_map(|m| text.rfind(m).map(|i| (i, *m)))
        .max_by_key(|(i, m)| (*i + m.len(), m.len()))
}

fn find_any<'a>(text: &str, markers: &[&'a str]) -> Option<(usize, &'a str)> {
    markers
        .iter()
        .filter_map(|m| text.find(m).map(|i| (i, *m)))
        .min_by_key(|(i, m)| (*i, std::cmp::Reverse(m.len())))
}

/// Parses a completion in the sample-prompt output format with the default
/// query cap.
pub fn parse_action(generated: &str) -> Result<ActionDecision, AgentError> {
    parse_action_capped(generated, DEFAULT_MAX_QUERIES)
}

pub fn parse_action_capped(generated: &str, max_queries: usize) -> Result<ActionDecision, AgentError> {
    let (action_at, marker) =
        rfind_any(generated, &ACTION_MARKERS).ok_or_else(|| failure("no Action marker"))?;
    let head = &generated[..action_at];
    let action_text = generated[action_at + marker.len()..].trim();

    let thought = match find_any(head, &THOUGHT_MARKERS) {
        Some((at, m)) => &head[at + m.len()..],
        None => head,
    };
    let thought = trim_list_marker(thought.trim()).to_string();

    let action = if let Some(rest) = action_text.strip_prefix("Finish(") {
        let close = rest.rfind(')').ok_or_else(|| failure("unterminated Finish("))?;
        let answer = rest[..close].trim();
        if answer.is_empty() {
            return Err(failure("empty Finish answer"));
        }
        Action::Finish { answer: answer.to_string() }
    } else if let Some(rest) = action_text.strip_prefix("Search(") {
        let mut queries = parse_query_list(rest)?;
        queries.truncate(max_queries.max(1));
        Action::Search { queries }
    } else {
        return Err(failure("Action is neither Finish(...) nor Search(...)"));
    };
    Ok(ActionDecision { thought, action })
}

fn trim_list_marker(s: &str) -> &str {
    let s = s.trim_end();
    let s = s.strip_suffix('-').unwrap_or(s);
    s.trim()
}

/// Splits the argument of `Search(` on top-level commas. Accepts a bracketed
/// list or bare items, with double- or single-quoted strings.
fn parse_query_list(rest: &str) -> Result<Vec<String>, AgentError> {
    let body = rest.trim_start();
    let (inner, closer) = match body.strip_prefix('[') {
        Some(inner) => (inner, ']'),
        None => (body, ')'),
    };
    let mut items = Vec::new();
    let mut current = String::new();
    let mut quote: Option<char> = None;
    let mut escaped = false;
    let mut depth = 0usize;
    let mut closed = false;
    for c in inner.chars() {
        if let Some(q) = quote {
            current.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '"' | '\'' if current.trim().is_empty() => {
                quote = Some(c);
                current.push(c);
            }
            '[' | '(' => {
                depth += 1;
                current.push(c);
            }
            c if c == closer && depth == 0 => {
                closed = true;
                break;
            }
            ']' | ')' => {
                depth = depth.saturating_sub(1);
                current.push(c);
            }
            ',' if depth == 0 => items.push(std::mem::take(&mut current)),
            _ => current.push(c),
        }
    }
    if !closed {
        return Err(failure("unterminated Search list"));
    }
    items.push(current);
    let queries: Vec<String> = items
        .iter()
        .map(|raw| unquote(raw.trim()))
        .filter(|q| !q.is_empty())
        .collect();
    if queries.is_empty() {
        return Err(failure("Search list has no queries"));
    }
    Ok(queries)
}

fn unquote(item: &str) -> String {
    if item.len() >= 2 && item.starts_with('"') && item.ends_with('"') {
        if let Ok(s) = serde_json::from_str::<String>(item) {
            return s.trim().to_string();
        }
    }
    if item.len() >= 2 && item.starts_with('\'') && item.ends_with('\'') {
        return item[1..item.len() - 1].replace("\\'", "'").trim().to_string();
    }
    item.trim().to_string()
}

/// Locates the two `***x***` values (anchored on their phrases when present,
/// else the first two fenced values in order) and clamps them into [-1, 1].
pub fn parse_judge_scores(generated: &str) -> Result<JudgeScores, AgentError> {
    let lower = generated.to_lowercase();
    let anchored = |phrase: &str| {
        lower
            .rfind(phrase)
            .and_then(|at| fenced_value(&generated[at + phrase.len()..]).map(|(v, _)| v))
    };
    let (plan, search) = match (anchored(PLAN_VALUE_PHRASE), anchored(SEARCH_VALUE_PHRASE)) {
        (Some(p), Some(s)) => (p, s),
        _ if lower.contains(PLAN_VALUE_PHRASE) || lower.contains(SEARCH_VALUE_PHRASE) => {
            return Err(failure("missing thought or search-result value"));
        }
        _ => {
            let (first, used) = fenced_value(generated).ok_or_else(|| failure("no ***x*** value"))?;
            let (second, _) =
                fenced_value(&generated[used..]).ok_or_else(|| failure("missing second ***x*** value"))?;
            (first, second)
        }
    };
    let plan = parse_score(plan)?;
    let search = parse_score(search)?;
    Ok(JudgeScores {
        plan_score: plan.clamp(-1.0, 1.0),
        search_score: search.clamp(-1.0, 1.0),
        raw_text: generated.to_string(),
    })
}

/// First `***x***` in `text`; returns the inner slice and the byte offset just
/// past the closing fence.
fn fenced_value(text: &str) -> Option<(&str, usize)> {
    let open = text.find(SCORE_FENCE)? + SCORE_FENCE.len();
    let close = text[open..].find(SCORE_FENCE)? + open;
    Some((text[open..close].trim(), close + SCORE_FENCE.len()))
}

fn parse_score(raw: &str) -> Result<f64, AgentError> {
    let value: f64 = raw
        .parse()
        .map_err(|_| failure(format!("score {raw:?} is not a number")))?;
    if value.is_nan() {
        return Err(failure("score is NaN"));
    }
    Ok(value)
}
