//! Table-driven policy and judge for deterministic runs.
//!
//! The table file is line-delimited JSON:
//!
//! ```text
//! {"kind":"policy","question":"...","step":0,"sample":0,"text":"**Thought:** ...\n**Action:** Search([...])"}
//! {"kind":"queries","question":"...","step":0,"sample":0,"text":"\"variant\"])"}
//! {"kind":"judge","question":"...","step":0,"text":"... ***0.5*** ... ***1***"}
//! ```
//!
//! `step` is the index of the step being generated or judged. Sample indices
//! past the end of a (question, step) list wrap around.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::{JudgeModel, PolicyModel, SampleSpec};
use crate::error::BackendError;
use crate::tree::{StepContent, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScriptEntry {
    Policy {
        question: String,
        step: usize,
        sample: usize,
        text: String,
    },
    Queries {
        question: String,
        step: usize,
        sample: usize,
        text: String,
    },
    Judge {
        question: String,
        step: usize,
        text: String,
    },
}

type Key = (String, usize);

#[derive(Debug, Clone, Default)]
pub struct ScriptTable {
    policy: BTreeMap<Key, BTreeMap<usize, String>>,
    queries: BTreeMap<Key, BTreeMap<usize, String>>,
    judge: BTreeMap<Key, String>,
}

impl ScriptTable {
    pub fn from_entries(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mut table = Self::default();
        for entry in entries {
            match entry {
                ScriptEntry::Policy { question, step, sample, text } => {
                    table.policy.entry((question, step)).or_default().insert(sample, text);
                }
                ScriptEntry::Queries { question, step, sample, text } => {
                    table.queries.entry((question, step)).or_default().insert(sample, text);
                }
                ScriptEntry::Judge { question, step, text } => {
                    table.judge.insert((question, step), text);
                }
            }
        }
        table
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, BackendError> {
        let mut entries = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| BackendError::Unavailable(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(&line)
                .map_err(|e| BackendError::InvalidResponse(format!("script line {}: {e}", n + 1)))?;
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }

    fn pick(
        map: &BTreeMap<Key, BTreeMap<usize, String>>,
        question: &str,
        step: usize,
        spec: &SampleSpec,
    ) -> Option<Vec<String>> {
        let samples = map.get(&(question.to_string(), step))?;
        let ordered: Vec<&String> = samples.values().collect();
        Some(
            (spec.first_index..spec.first_index + spec.count)
                .map(|i| ordered[i % ordered.len()].clone())
                .collect(),
        )
    }
}

/// Serves completions from a [`ScriptTable`]; usable as policy and judge.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    table: ScriptTable,
}

impl ScriptedBackend {
    pub fn new(table: ScriptTable) -> Self {
        Self { table }
    }
}

impl PolicyModel for ScriptedBackend {
    fn complete_step(&self, traj: &Trajectory, spec: &SampleSpec) -> Result<Vec<String>, BackendError> {
        ScriptTable::pick(&self.table.policy, &traj.question, traj.depth(), spec).ok_or_else(|| {
            BackendError::Unavailable(format!("no scripted step {} for {:?}", traj.depth(), traj.question))
        })
    }

    fn complete_queries(
        &self,
        traj: &Trajectory,
        _plan_text: &str,
        spec: &SampleSpec,
    ) -> Result<Vec<String>, BackendError> {
        ScriptTable::pick(&self.table.queries, &traj.question, traj.depth(), spec)
            .map(Ok)
            .unwrap_or_else(|| self.complete_step(traj, spec))
    }
}

impl JudgeModel for ScriptedBackend {
    fn complete_judgement(&self, traj: &Trajectory, _step: &StepContent) -> Result<String, BackendError> {
        self.table
            .judge
            .get(&(traj.question.clone(), traj.depth()))
            .cloned()
            .ok_or_else(|| {
                BackendError::Unavailable(format!("no scripted judgement {} for {:?}", traj.depth(), traj.question))
            })
    }
}
