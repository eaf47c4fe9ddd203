//! Deterministic multi-hop question worlds.
//!
//! A world is a random relation graph over synthetic entities (`E0001`, ...),
//! written out as one fact document per edge plus optional distractor
//! documents. Questions compose a chain of relations starting from one
//! entity. For every (question, hop) the world also fixes a layout of
//! `branching` plan options: paraphrases of the gold hop and decoys that
//! follow a different relation (or, at the last step, answer with the bridge
//! entity). [`oracle`] turns a world into policy, judge, scorer, and
//! retriever backends.

pub mod oracle;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::ActionDecision;
use crate::retrieval::{tokenize, CorpusDoc, LexicalIndex, RetrievalConfig};
use crate::seed::Draw;

pub use oracle::{OracleOptions, Ranking, WorldOracle};

pub const DEFAULT_RELATIONS: [&str; 6] = ["spouse", "father", "mother", "mentor", "rival", "neighbor"];

/// Top-k used for the answerability check at generation time.
pub const GENERATION_TOP_K: usize = 5;

const SEARCH_THOUGHTS: [&str; 6] = [
    "I need to find the {r} of {e}.",
    "Next I should look up who {e}'s {r} is.",
    "The missing piece is the {r} of {e}.",
    "Let me search for the {r} of {e}.",
    "To continue, identify {e}'s {r}.",
    "I should determine who is the {r} of {e}.",
];

const FINISH_THOUGHTS: [&str; 6] = [
    "The answer is {e}.",
    "I have found it: {e}.",
    "All hops are resolved, so the answer is {e}.",
    "The chain ends at {e}.",
    "That gives {e} as the answer.",
    "Putting it together, the answer is {e}.",
];

pub const QUERY_TEMPLATES: [&str; 6] = [
    "Who is {e}'s {r}?",
    "{e} {r}",
    "{r} of {e}",
    "What is the name of {e}'s {r}?",
    "{e}'s {r} identity",
    "Find the {r} of {e}",
];

const DISTRACTOR_TEMPLATES: [&str; 3] = [
    "Records mention {e} and a {r} but give no name.",
    "The {r} of {e} is discussed in several letters.",
    "Little is known about {e}'s {r}.",
];

fn fill(template: &str, entity: &str, relation: &str) -> String {
    template.replace("{e}", entity).replace("{r}", relation)
}

pub fn entity_name(index: usize) -> String {
    format!("E{:04}", index + 1)
}

pub fn fact_doc_id(subject: &str, relation: &str) -> String {
    format!("f-{subject}-{relation}")
}

pub fn query_text(variant: usize, entity: &str, relation: &str) -> String {
    fill(QUERY_TEMPLATES[variant % QUERY_TEMPLATES.len()], entity, relation)
}

pub fn search_thought(variant: usize, entity: &str, relation: &str) -> String {
    fill(SEARCH_THOUGHTS[variant % SEARCH_THOUGHTS.len()], entity, relation)
}

pub fn finish_thought(variant: usize, answer: &str) -> String {
    fill(FINISH_THOUGHTS[variant % FINISH_THOUGHTS.len()], answer, "")
}

/// The search option for `variant`: its thought and two consecutive query
/// templates.
pub fn search_option(variant: usize, entity: &str, relation: &str) -> ActionDecision {
    ActionDecision::search(
        search_thought(variant, entity, relation),
        [query_text(variant, entity, relation), query_text(variant + 1, entity, relation)],
    )
}

pub fn question_text(start: &str, relations: &[String]) -> String {
    let mut text = String::from("Who is");
    for r in relations.iter().rev() {
        text.push_str(&format!(" the {r} of"));
    }
    text.push_str(&format!(" {start}?"));
    text
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("infeasible world spec: {0}")]
    InfeasibleSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_entities: usize,
    pub relations: Vec<String>,
    pub hop_count: usize,
    /// Plan options per (question, step).
    pub branching: usize,
    pub distractors_per_fact: usize,
    pub retrieval_noise: f64,
    /// Fraction of plan options that are decoys.
    pub plan_ambiguity: f64,
    pub n_questions: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_entities: 200,
            relations: DEFAULT_RELATIONS.iter().map(|r| r.to_string()).collect(),
            hop_count: 2,
            branching: 3,
            distractors_per_fact: 1,
            retrieval_noise: 0.0,
            plan_ambiguity: 0.0,
            n_questions: 50,
        }
    }
}

impl WorldSpec {
    /// Decoys among `branching` options. At least one option stays on the
    /// gold path unless the ambiguity is 1.
    pub fn decoy_count(&self) -> usize {
        if self.plan_ambiguity >= 1.0 {
            self.branching
        } else {
            ((self.plan_ambiguity * self.branching as f64).round() as usize).min(self.branching.saturating_sub(1))
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let infeasible = |m: String| Err(WorldError::InfeasibleSpec(m));
        if self.n_entities < 2 {
            return infeasible(format!("n_entities must be at least 2, got {}", self.n_entities));
        }
        if !(1..=3).contains(&self.hop_count) {
            return infeasible(format!("hop_count must be in 1..=3, got {}", self.hop_count));
        }
        if self.branching == 0 {
            return infeasible("branching must be positive".into());
        }
        if self.n_questions == 0 {
            return infeasible("n_questions must be positive".into());
        }
        for (name, p) in [("retrieval_noise", self.retrieval_noise), ("plan_ambiguity", self.plan_ambiguity)] {
            if !(0.0..=1.0).contains(&p) {
                return infeasible(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if self.relations.is_empty() {
            return infeasible("relations must not be empty".into());
        }
        let reserved = reserved_words();
        let mut seen = HashSet::new();
        for r in &self.relations {
            let valid = !r.is_empty()
                && r.chars().all(|c| c.is_ascii_lowercase())
                && !reserved.contains(r.as_str())
                && parse_entity_token(r).is_none();
            if !valid {
                return infeasible(format!("relation {r:?} must be a lowercase word not used by the templates"));
            }
            if !seen.insert(r) {
                return infeasible(format!("duplicate relation {r:?}"));
            }
        }
        let decoys = self.decoy_count();
        if decoys > self.relations.len() - 1 {
            return infeasible(format!(
                "{decoys} decoys per step need {} relations, have {}",
                decoys + 1,
                self.relations.len()
            ));
        }
        let gold = self.branching - decoys;
        if gold > QUERY_TEMPLATES.len() {
            return infeasible(format!(
                "{gold} gold paraphrases per step but only {} are constructible",
                QUERY_TEMPLATES.len()
            ));
        }
        Ok(())
    }
}

fn reserved_words() -> HashSet<String> {
    SEARCH_THOUGHTS
        .iter()
        .chain(&FINISH_THOUGHTS)
        .chain(&QUERY_TEMPLATES)
        .chain(&DISTRACTOR_TEMPLATES)
        .chain(&["Who is the of"])
        .flat_map(|t| tokenize(&fill(t, "", "")))
        .collect()
}

/// `E0042` from a lowercased token like `e0042`.
fn parse_entity_token(token: &str) -> Option<String> {
    let digits = token.strip_prefix('e').or_else(|| token.strip_prefix('E'))?;
    (!digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit())).then(|| format!("E{digits}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub doc_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hop {
    pub entity: String,
    pub relation: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldQuestion {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub decomposition: Vec<Hop>,
}

impl WorldQuestion {
    pub fn gold_relations(&self) -> impl Iterator<Item = &str> {
        self.decomposition.iter().map(|h| h.relation.as_str())
    }

    pub fn start(&self) -> &str {
        &self.decomposition[0].entity
    }
}

/// One plan option, resolved against the current path state when rendered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Slot {
    /// Paraphrase of the gold hop, or of Finish with the resolved entity.
    Gold { variant: usize },
    /// Search along another relation.
    Decoy { relation: String, variant: usize },
    /// Finish with the entity one hop short of the end.
    Bridge { variant: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanLayout {
    pub question_id: String,
    /// Resolved hops so far; `hop == hop_count` is the Finish step.
    pub hop: usize,
    pub options: Vec<Slot>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub facts: Vec<Fact>,
    pub corpus: Vec<CorpusDoc>,
    pub questions: Vec<WorldQuestion>,
    pub plans: Vec<PlanLayout>,
    index: Arc<LexicalIndex>,
    fact_lookup: HashMap<(String, String), usize>,
    question_lookup: HashMap<String, usize>,
    plan_lookup: HashMap<(String, usize), usize>,
    relation_set: HashSet<String>,
}

/// Entities resolved so far along whatever relations the trajectory used.
#[derive(Debug, Clone, PartialEq)]
pub struct PathState {
    pub chain: Vec<String>,
    pub relations: Vec<String>,
}

impl PathState {
    pub fn head(&self) -> &str {
        self.chain.last().expect("chain starts with the question entity")
    }

    pub fn hop(&self) -> usize {
        self.relations.len()
    }

    /// Entity one hop short of the head, if any.
    pub fn bridge(&self) -> Option<&str> {
        self.chain.len().checked_sub(2).map(|i| self.chain[i].as_str())
    }
}

impl World {
    fn assemble(
        spec: WorldSpec,
        facts: Vec<Fact>,
        corpus: Vec<CorpusDoc>,
        questions: Vec<WorldQuestion>,
        plans: Vec<PlanLayout>,
        index: Arc<LexicalIndex>,
    ) -> Self {
        let fact_lookup = facts
            .iter()
            .enumerate()
            .map(|(i, f)| ((f.subject.clone(), f.relation.clone()), i))
            .collect();
        let question_lookup = questions
            .iter()
            .enumerate()
            .map(|(i, q)| (q.question.clone(), i))
            .collect();
        let plan_lookup = plans
            .iter()
            .enumerate()
            .map(|(i, p)| ((p.question_id.clone(), p.hop), i))
            .collect();
        let relation_set = spec.relations.iter().cloned().collect();
        Self {
            spec,
            facts,
            corpus,
            questions,
            plans,
            index,
            fact_lookup,
            question_lookup,
            plan_lookup,
            relation_set,
        }
    }

    pub fn index(&self) -> &Arc<LexicalIndex> {
        &self.index
    }

    pub fn fact(&self, subject: &str, relation: &str) -> Option<&Fact> {
        self.fact_lookup
            .get(&(subject.to_string(), relation.to_string()))
            .map(|&i| &self.facts[i])
    }

    pub fn question_by_text(&self, text: &str) -> Option<&WorldQuestion> {
        self.question_lookup.get(text).map(|&i| &self.questions[i])
    }

    pub fn layout(&self, question_id: &str, hop: usize) -> Option<&PlanLayout> {
        self.plan_lookup
            .get(&(question_id.to_string(), hop))
            .map(|&i| &self.plans[i])
    }

    /// The (entity, relation) a plan or query text asks about.
    pub fn parse_target(&self, text: &str) -> Option<(String, String)> {
        let tokens = tokenize(text);
        let entity = tokens.iter().find_map(|t| parse_entity_token(t))?;
        let relation = tokens.into_iter().find(|t| self.relation_set.contains(t))?;
        Some((entity, relation))
    }

    /// Follows the trajectory's search steps: a step advances the chain when
    /// it asked about the current head and its documents hold that fact.
    pub fn path_state(&self, question: &WorldQuestion, steps: &[crate::tree::StepContent]) -> PathState {
        let mut state = PathState {
            chain: vec![question.start().to_string()],
            relations: Vec::new(),
        };
        for step in steps {
            if step.answer.is_some() || state.hop() >= question.decomposition.len() {
                continue;
            }
            let target = self
                .parse_target(&step.plan_text)
                .or_else(|| step.queries.first().and_then(|q| self.parse_target(q)));
            let Some((entity, relation)) = target else { continue };
            if entity != state.head() {
                continue;
            }
            if let Some(fact) = self.fact(&entity, &relation) {
                if step.retrieved_docs.iter().any(|d| d.doc_id == fact.doc_id) {
                    state.chain.push(fact.object.clone());
                    state.relations.push(relation);
                }
            }
        }
        state
    }

    /// Every resolved hop followed the gold relation.
    pub fn on_gold(&self, question: &WorldQuestion, state: &PathState) -> bool {
        state.relations.iter().map(String::as_str).eq(question.gold_relations().take(state.hop()))
    }

    pub fn render_slot(&self, question: &WorldQuestion, state: &PathState, slot: &Slot) -> ActionDecision {
        let hop = state.hop();
        let done = hop >= question.decomposition.len();
        match slot {
            Slot::Gold { variant } if done => ActionDecision::finish(finish_thought(*variant, state.head()), state.head()),
            Slot::Gold { variant } => search_option(*variant, state.head(), &question.decomposition[hop].relation),
            Slot::Decoy { relation, variant } => search_option(*variant, state.head(), relation),
            Slot::Bridge { variant } => {
                let bridge = state.bridge().unwrap_or(state.head());
                ActionDecision::finish(finish_thought(*variant, bridge), bridge)
            }
        }
    }

    /// Plan options at `state`, in layout order.
    pub fn options(&self, question: &WorldQuestion, state: &PathState) -> Vec<ActionDecision> {
        let layout = self
            .layout(&question.id, state.hop())
            .expect("a layout exists for every hop of every question");
        layout
            .options
            .iter()
            .map(|slot| self.render_slot(question, state, slot))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), WorldError> {
        std::fs::create_dir_all(dir).map_err(|source| WorldError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let spec_path = dir.join("spec.json");
        let spec = serde_json::to_string_pretty(&self.spec).expect("spec serializes") + "\n";
        std::fs::write(&spec_path, spec).map_err(|source| WorldError::Io { path: spec_path, source })?;
        write_jsonl(&dir.join("facts.jsonl"), &self.facts)?;
        write_jsonl(&dir.join("corpus.jsonl"), &self.corpus)?;
        write_jsonl(&dir.join("questions.jsonl"), &self.questions)?;
        write_jsonl(&dir.join("plans.jsonl"), &self.plans)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<World, WorldError> {
        let spec_path = dir.join("spec.json");
        let spec_text = std::fs::read_to_string(&spec_path).map_err(|source| WorldError::Io {
            path: spec_path.clone(),
            source,
        })?;
        let spec: WorldSpec = serde_json::from_str(&spec_text).map_err(|e| WorldError::Malformed {
            path: spec_path,
            line: e.line(),
            message: e.to_string(),
        })?;
        let facts = read_jsonl(&dir.join("facts.jsonl"))?;
        let corpus: Vec<CorpusDoc> = read_jsonl(&dir.join("corpus.jsonl"))?;
        let questions = read_jsonl(&dir.join("questions.jsonl"))?;
        let plans = read_jsonl(&dir.join("plans.jsonl"))?;
        let index = Arc::new(LexicalIndex::new(corpus.clone()));
        Ok(World::assemble(spec, facts, corpus, questions, plans, index))
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), WorldError> {
    let io_err = |source| WorldError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for item in items {
        serde_json::to_writer(&mut out, item).expect("world records serialize");
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, WorldError> {
    let file = File::open(path).map_err(|source| WorldError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let malformed = |message: String| WorldError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let line = line.map_err(|e| malformed(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?);
    }
    Ok(items)
}

const MAX_QUESTION_ATTEMPTS: u64 = 10_000;

/// Builds the world for `spec`. The result depends on nothing but the spec.
pub fn generate_world(spec: &WorldSpec) -> Result<World, WorldError> {
    spec.validate()?;
    let root = Draw::new(spec.seed);
    let n = spec.n_entities;

    let mut facts = Vec::with_capacity(n * spec.relations.len());
    let mut corpus = Vec::with_capacity(facts.capacity() * (1 + spec.distractors_per_fact));
    for i in 0..n {
        let subject = entity_name(i);
        for relation in &spec.relations {
            let draw = root.with("fact").with(&subject).with(relation);
            let mut j = (draw.bits() % (n as u64 - 1)) as usize;
            if j >= i {
                j += 1;
            }
            let object = entity_name(j);
            let doc_id = fact_doc_id(&subject, relation);
            corpus.push(CorpusDoc {
                doc_id: doc_id.clone(),
                title: subject.clone(),
                text: format!("{subject}'s {relation} is {object}."),
                distractor: false,
            });
            for d in 0..spec.distractors_per_fact {
                corpus.push(CorpusDoc {
                    doc_id: format!("d-{subject}-{relation}-{d}"),
                    title: subject.clone(),
                    text: fill(DISTRACTOR_TEMPLATES[d % DISTRACTOR_TEMPLATES.len()], &subject, relation),
                    distractor: true,
                });
            }
            facts.push(Fact {
                subject: subject.clone(),
                relation: relation.clone(),
                object,
                doc_id,
            });
        }
    }
    let index = Arc::new(LexicalIndex::new(corpus.clone()));
    let world = World::assemble(spec.clone(), facts, corpus, Vec::new(), Vec::new(), index);

    let mut questions = Vec::with_capacity(spec.n_questions);
    let mut texts = HashSet::new();
    let mut attempt = 0u64;
    while questions.len() < spec.n_questions {
        if attempt >= MAX_QUESTION_ATTEMPTS {
            return Err(WorldError::InfeasibleSpec(format!(
                "found only {} distinct answerable questions",
                questions.len()
            )));
        }
        let mut rng = root.with("question").with_u64(attempt).rng();
        attempt += 1;
        let start = entity_name(rng.random_range(0..n));
        let relations: Vec<String> = (0..spec.hop_count)
            .map(|_| spec.relations[rng.random_range(0..spec.relations.len())].clone())
            .collect();
        let text = question_text(&start, &relations);
        if texts.contains(&text) {
            continue;
        }
        let mut decomposition = Vec::with_capacity(spec.hop_count);
        let mut entity = start;
        for relation in &relations {
            let fact = world.fact(&entity, relation).expect("every entity has every relation");
            decomposition.push(Hop {
                entity: entity.clone(),
                relation: relation.clone(),
                answer: fact.object.clone(),
            });
            entity = fact.object.clone();
        }
        if !answerable(&world, &decomposition) {
            continue;
        }
        texts.insert(text.clone());
        questions.push(WorldQuestion {
            id: format!("q{:04}", questions.len() + 1),
            question: text,
            gold_answers: vec![entity],
            decomposition,
        });
    }

    let decoys = spec.decoy_count();
    let mut plans = Vec::with_capacity(questions.len() * (spec.hop_count + 1));
    for q in &questions {
        for hop in 0..=spec.hop_count {
            let mut rng = root.with("plan").with(&q.id).with_u64(hop as u64).rng();
            let mut options: Vec<Slot> = (0..spec.branching - decoys).map(|variant| Slot::Gold { variant }).collect();
            if hop < spec.hop_count {
                let gold = &q.decomposition[hop].relation;
                let mut others: Vec<&String> = spec.relations.iter().filter(|r| *r != gold).collect();
                others.shuffle(&mut rng);
                options.extend(others.into_iter().take(decoys).enumerate().map(|(variant, r)| Slot::Decoy {
                    relation: r.clone(),
                    variant,
                }));
            } else {
                options.extend((0..decoys).map(|variant| Slot::Bridge { variant }));
            }
            options.shuffle(&mut rng);
            plans.push(PlanLayout {
                question_id: q.id.clone(),
                hop,
                options,
            });
        }
    }

    let World {
        spec,
        facts,
        corpus,
        index,
        ..
    } = world;
    Ok(World::assemble(spec, facts, corpus, questions, plans, index))
}

/// Every query template for every gold hop retrieves the hop's fact without
/// noise, so any gold option can resolve its hop.
fn answerable(world: &World, decomposition: &[Hop]) -> bool {
    let cfg = RetrievalConfig {
        top_k: GENERATION_TOP_K,
        ..RetrievalConfig::default()
    };
    decomposition.iter().all(|hop| {
        let doc_id = fact_doc_id(&hop.entity, &hop.relation);
        (0..QUERY_TEMPLATES.len()).all(|v| {
            world
                .index
                .retrieve(&query_text(v, &hop.entity, &hop.relation), &cfg)
                .is_ok_and(|docs| docs.iter().any(|d| d.doc_id == doc_id))
        })
    })
}
