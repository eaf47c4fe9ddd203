//! File-level stages: world generation, annotation, path extraction,
//! inference, evaluation, and sweeps.
//!
//! Per-question work fans out over a worker pool (with the `parallel`
//! feature); results are collected in question order and written by a
//! single writer, so outputs do not depend on scheduling.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::scripted::{ScriptTable, ScriptedBackend};
use crate::backends::Backends;
use crate::config::{BackendKind, Config};
use crate::error::BackendError;
use crate::experiment::{CellResult, SweepCell, SweepGrid};
use crate::export::{export_records, extract_paths, ExportError};
use crate::hbs::{run_hbs, DecisionPoint, HbsAnswer, HbsError, HbsResult};
use crate::mcts::{Annotator, MctsError};
use crate::metrics::{evaluate_run, EvalError, EvalReport, GoldRecord, Prediction};
use crate::retrieval::{read_corpus, LexicalIndex, LocalRetriever, RetrievalConfig, RetrievalError};
use crate::seed::{derive_seed, Draw};
use crate::synthworld::oracle::oracle_backends;
use crate::synthworld::{generate_world, Ranking, World, WorldError, WorldSpec};
use crate::tree::{read_trees, write_trees, ReasoningTree, TreeError};
use crate::value::{JudgeValueModel, NoisyScorer, PlanValueModel, RandomScorer, SearchValueModel};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("backend failure: {0}")]
    Backend(String),
}

impl PipelineError {
    /// Whether the failure came from a model, retriever, or scorer rather
    /// than from the inputs.
    pub fn is_backend(&self) -> bool {
        matches!(self, PipelineError::Backend(_))
    }
}

impl From<BackendError> for PipelineError {
    fn from(e: BackendError) -> Self {
        PipelineError::Backend(e.to_string())
    }
}

impl From<MctsError> for PipelineError {
    fn from(e: MctsError) -> Self {
        match e {
            MctsError::EmptyQuestion => PipelineError::Invalid(e.to_string()),
            other => PipelineError::Backend(other.to_string()),
        }
    }
}

impl From<HbsError> for PipelineError {
    fn from(e: HbsError) -> Self {
        match e {
            HbsError::EmptyQuestion => PipelineError::Invalid(e.to_string()),
            other => PipelineError::Backend(other.to_string()),
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs `f` over `items` on up to `parallelism` workers (0 means all cores),
/// keeping input order.
#[cfg(feature = "parallel")]
pub fn map_ordered<T: Sync, R: Send>(parallelism: usize, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("worker pool unavailable ({e}); running sequentially");
            items.iter().map(f).collect()
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T: Sync, R: Send>(_parallelism: usize, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    items.iter().map(f).collect()
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = File::open(path).map_err(io_error(path))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_error(path))?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| PipelineError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(items)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), PipelineError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_error(path))?);
    for item in items {
        serde_json::to_writer(&mut out, &item).expect("records serialize");
        out.write_all(b"\n").map_err(io_error(path))?;
    }
    out.flush().map_err(io_error(path))
}

/// Questions plus whatever the configured backend needs to answer them.
#[derive(Clone, Default)]
pub struct Inputs {
    pub questions: Vec<GoldRecord>,
    pub world: Option<Arc<World>>,
    pub corpus: Option<Arc<LexicalIndex>>,
    pub script: Option<Arc<ScriptedBackend>>,
}

impl Inputs {
    pub fn from_world(world: Arc<World>) -> Self {
        let questions = world
            .questions
            .iter()
            .map(|q| GoldRecord {
                id: q.id.clone(),
                question: q.question.clone(),
                gold_answers: q.gold_answers.clone(),
            })
            .collect();
        Self {
            questions,
            corpus: Some(world.index().clone()),
            world: Some(world),
            script: None,
        }
    }

    /// Loads inputs for `cfg`. `questions` and `corpus` override the files
    /// of `world_dir`.
    pub fn load(
        cfg: &Config,
        world_dir: Option<&Path>,
        questions: Option<&Path>,
        corpus: Option<&Path>,
    ) -> Result<Self, PipelineError> {
        let mut inputs = match world_dir {
            Some(dir) => Inputs::from_world(Arc::new(World::load(dir)?)),
            None => Inputs::default(),
        };
        if let Some(path) = questions {
            inputs.questions = read_jsonl(path)?;
        }
        if let Some(path) = corpus {
            let file = File::open(path).map_err(io_error(path))?;
            let docs = read_corpus(BufReader::new(file)).map_err(|e| PipelineError::Malformed {
                path: path.to_path_buf(),
                line: match &e {
                    RetrievalError::MalformedCorpus { line, .. } => *line,
                    _ => 0,
                },
                message: e.to_string(),
            })?;
            inputs.corpus = Some(Arc::new(LexicalIndex::new(docs)));
        }
        if let (BackendKind::Scripted, Some(path)) = (cfg.backend.kind, &cfg.backend.script) {
            let file = File::open(path).map_err(io_error(path))?;
            let table = ScriptTable::read(BufReader::new(file)).map_err(|e| PipelineError::Malformed {
                path: path.clone(),
                line: 0,
                message: e.to_string(),
            })?;
            inputs.script = Some(Arc::new(ScriptedBackend::new(table)));
        }
        inputs.check(cfg)?;
        Ok(inputs)
    }

    pub fn check(&self, cfg: &Config) -> Result<(), PipelineError> {
        if self.questions.is_empty() {
            return Err(PipelineError::Invalid("no questions given".into()));
        }
        match cfg.backend.kind {
            BackendKind::Oracle if self.world.is_none() => {
                Err(PipelineError::Invalid("oracle backends need a world directory".into()))
            }
            BackendKind::Scripted if self.corpus.is_none() => {
                Err(PipelineError::Invalid("scripted backends need a corpus".into()))
            }
            BackendKind::Scripted if self.script.is_none() => {
                Err(PipelineError::Invalid("scripted backends need a script file".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Applies the configured noise and ranking to a pair of value models.
fn scored(
    cfg: &Config,
    seed: u64,
    plan: Arc<dyn PlanValueModel>,
    search: Arc<dyn SearchValueModel>,
) -> (Arc<dyn PlanValueModel>, Arc<dyn SearchValueModel>) {
    let draw = Draw::new(seed);
    let (plan_seed, search_seed) = (draw.with("plan").bits(), draw.with("search").bits());
    let epsilon = cfg.scoring.epsilon;
    let plan: Arc<dyn PlanValueModel> = match cfg.scoring.plan_ranking {
        Ranking::Random => Arc::new(RandomScorer { seed: plan_seed }),
        Ranking::Value if epsilon > 0.0 => Arc::new(NoisyScorer {
            inner: plan,
            epsilon,
            seed: plan_seed,
        }),
        Ranking::Value => plan,
    };
    let search: Arc<dyn SearchValueModel> = match cfg.scoring.search_ranking {
        Ranking::Random => Arc::new(RandomScorer { seed: search_seed }),
        Ranking::Value if epsilon > 0.0 => Arc::new(NoisyScorer {
            inner: search,
            epsilon,
            seed: search_seed,
        }),
        Ranking::Value => search,
    };
    (plan, search)
}

/// Builds per-question backends for a configuration.
pub struct BackendFactory<'a> {
    cfg: &'a Config,
    inputs: &'a Inputs,
    #[cfg(feature = "remote")]
    remote: Option<Backends>,
}

impl<'a> BackendFactory<'a> {
    pub fn new(cfg: &'a Config, inputs: &'a Inputs) -> Result<Self, PipelineError> {
        inputs.check(cfg)?;
        #[cfg(feature = "remote")]
        let remote = match cfg.backend.kind {
            BackendKind::Remote => Some(crate::remote::remote_backends(
                &cfg.backend,
                &cfg.agent,
                cfg.retrieval.top_k,
            )?),
            _ => None,
        };
        #[cfg(not(feature = "remote"))]
        if cfg.backend.kind == BackendKind::Remote {
            return Err(PipelineError::Invalid("built without remote backend support".into()));
        }
        Ok(Self {
            cfg,
            inputs,
            #[cfg(feature = "remote")]
            remote,
        })
    }

    pub fn for_question(&self, question_id: &str) -> Backends {
        let seed = derive_seed(self.cfg.seed, question_id);
        match self.cfg.backend.kind {
            BackendKind::Oracle => {
                let world = self.inputs.world.as_ref().expect("checked in new");
                let opts = crate::synthworld::OracleOptions {
                    seed,
                    ..self.cfg.oracle_options()
                };
                oracle_backends(world, &opts)
            }
            BackendKind::Scripted => {
                let script = self.inputs.script.clone().expect("checked in new");
                let corpus = self.inputs.corpus.clone().expect("checked in new");
                let values = Arc::new(JudgeValueModel {
                    judge: script.clone(),
                    cfg: self.cfg.agent,
                });
                let (plan_value, search_value) = scored(self.cfg, seed, values.clone(), values);
                let retriever = LocalRetriever::new(
                    corpus,
                    RetrievalConfig {
                        top_k: self.cfg.retrieval.top_k,
                        noise_drop_prob: self.cfg.retrieval.noise.unwrap_or(0.0),
                        seed: Draw::new(seed).with("retrieval").bits(),
                    },
                );
                Backends {
                    policy: script.clone(),
                    judge: script,
                    retriever: Arc::new(retriever),
                    plan_value,
                    search_value,
                }
            }
            BackendKind::Remote => {
                #[cfg(feature = "remote")]
                {
                    let base = self.remote.clone().expect("built in new");
                    let (plan_value, search_value) = scored(self.cfg, seed, base.plan_value, base.search_value);
                    Backends {
                        plan_value,
                        search_value,
                        ..base
                    }
                }
                #[cfg(not(feature = "remote"))]
                unreachable!("rejected in new")
            }
        }
    }
}

pub fn worldgen(spec: &WorldSpec, out_dir: &Path) -> Result<World, PipelineError> {
    let world = generate_world(spec)?;
    world.save(out_dir)?;
    Ok(world)
}

pub fn load_world_spec(path: &Path) -> Result<WorldSpec, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|message| PipelineError::Malformed {
        path: path.to_path_buf(),
        line: 0,
        message,
    })
}

pub type QuestionResult<T> = (String, Result<T, PipelineError>);

/// One annotated tree per question.
pub fn annotate(cfg: &Config, inputs: &Inputs) -> Result<Vec<QuestionResult<ReasoningTree>>, PipelineError> {
    let factory = BackendFactory::new(cfg, inputs)?;
    Ok(map_ordered(cfg.parallelism, &inputs.questions, |q| {
        let annotator = Annotator::new(factory.for_question(&q.id), cfg.mcts_config(), cfg.agent);
        let tree = annotator
            .run(&q.question, &q.gold_answers)
            .map(|(tree, _)| tree)
            .map_err(PipelineError::from);
        (q.id.clone(), tree)
    }))
}

pub fn write_tree_file(path: &Path, trees: &[ReasoningTree]) -> Result<(), PipelineError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_error(path))?);
    write_trees(&mut out, trees).map_err(io_error(path))?;
    out.flush().map_err(io_error(path))
}

pub fn read_tree_file(path: &Path) -> Result<Vec<ReasoningTree>, PipelineError> {
    let file = File::open(path).map_err(io_error(path))?;
    Ok(read_trees(BufReader::new(file)).collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractCounts {
    pub correct: usize,
    pub incorrect: usize,
}

/// Extracts correct and incorrect paths from every tree into one records
/// file, correct paths first within each tree.
pub fn extract(cfg: &Config, trees_path: &Path, out: &Path) -> Result<ExtractCounts, PipelineError> {
    let trees = read_tree_file(trees_path)?;
    let mut counts = ExtractCounts {
        correct: 0,
        incorrect: 0,
    };
    let mut records = Vec::new();
    for tree in &trees {
        let (correct, incorrect) = extract_paths(tree);
        counts.correct += correct.len();
        counts.incorrect += incorrect.len();
        records.extend(correct);
        records.extend(incorrect);
    }
    export_records(out, &cfg.export_header(), records)?;
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub question: String,
    pub answer: HbsAnswer,
    pub decision_points: Vec<DecisionPoint>,
}

pub struct InferOutput {
    pub predictions: Vec<Prediction>,
    pub runs: Vec<QuestionResult<HbsResult>>,
}

impl InferOutput {
    pub fn failures(&self) -> impl Iterator<Item = (&str, &PipelineError)> {
        self.runs
            .iter()
            .filter_map(|(id, r)| r.as_ref().err().map(|e| (id.as_str(), e)))
    }
}

pub fn infer(cfg: &Config, inputs: &Inputs) -> Result<InferOutput, PipelineError> {
    let factory = BackendFactory::new(cfg, inputs)?;
    let runs = map_ordered(cfg.parallelism, &inputs.questions, |q| {
        let backends = factory.for_question(&q.id);
        let result = run_hbs(&q.question, &backends, &cfg.hbs, &cfg.agent).map_err(PipelineError::from);
        (q.id.clone(), result)
    });
    let predictions = runs
        .iter()
        .map(|(id, r)| Prediction {
            id: id.clone(),
            answer: r.as_ref().ok().and_then(|r| r.answer.text().map(str::to_string)),
            trace_path: None,
        })
        .collect();
    Ok(InferOutput { predictions, runs })
}

/// Writes predictions and, when `traces` is given, the decision trace of
/// every successful run plus a `*.trees.jsonl` file with the traced
/// candidates in tree form.
pub fn write_infer_output(
    output: &InferOutput,
    inputs: &Inputs,
    predictions: &Path,
    traces: Option<&Path>,
) -> Result<(), PipelineError> {
    let trace_ref = traces.map(|t| relative_to(t, predictions));
    let linked = output.predictions.iter().zip(&output.runs).map(|(p, (_, r))| Prediction {
        trace_path: trace_ref.clone().filter(|_| r.is_ok()),
        ..p.clone()
    });
    write_jsonl(predictions, linked)?;
    if let Some(path) = traces {
        let records = output.runs.iter().zip(&inputs.questions).filter_map(|((id, r), q)| {
            r.as_ref().ok().map(|r| TraceRecord {
                id: id.clone(),
                question: q.question.clone(),
                answer: r.answer.clone(),
                decision_points: r.trace.clone(),
            })
        });
        write_jsonl(path, records)?;
        let trees: Vec<ReasoningTree> = output
            .runs
            .iter()
            .filter_map(|(_, r)| r.as_ref().ok().map(|r| r.tree.clone()))
            .collect();
        write_tree_file(&path.with_extension("trees.jsonl"), &trees)?;
    }
    Ok(())
}

/// `path` relative to the directory of `anchor` when it lies inside it.
fn relative_to(path: &Path, anchor: &Path) -> String {
    let base = anchor.parent().unwrap_or(Path::new(""));
    path.strip_prefix(base).unwrap_or(path).display().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub report: EvalReport,
    pub summary: String,
}

pub fn evaluate_files(predictions: &Path, golds: &Path, report: &Path) -> Result<EvalReport, PipelineError> {
    let preds: Vec<Prediction> = read_jsonl(predictions)?;
    let golds: Vec<GoldRecord> = read_jsonl(golds)?;
    let result = evaluate_run(&preds, &golds)?;
    let file = ReportFile {
        summary: result.summary(),
        report: result.clone(),
    };
    let text = serde_json::to_string_pretty(&file).expect("report serializes") + "\n";
    std::fs::write(report, text).map_err(io_error(report))?;
    Ok(result)
}

/// `base` with a sweep cell's settings applied.
pub fn cell_config(cell: &SweepCell, base: &Config) -> Config {
    let mut cfg = base.clone();
    cfg.hbs.b1 = cell.b1;
    cfg.hbs.b2 = cell.b2;
    cfg.retrieval.noise = Some(cell.noise);
    cfg.scoring.epsilon = cell.epsilon;
    cfg.scoring.plan_ranking = cell.plan_ranking;
    cfg.scoring.search_ranking = cell.search_ranking;
    cfg
}

/// Runs inference and evaluation for every cell. A cell with failed
/// questions still reports (failures score as incorrect) and carries the
/// first error.
pub fn sweep(grid: &SweepGrid, base: &Config, inputs: &Inputs) -> Vec<CellResult> {
    grid.cells()
        .into_iter()
        .map(|cell| {
            let cfg = cell_config(&cell, base);
            let outcome = cfg
                .validate()
                .map_err(|e| PipelineError::Invalid(e.to_string()))
                .and_then(|_| infer(&cfg, inputs));
            match outcome {
                Ok(output) => {
                    let error = output.failures().next().map(|(id, e)| format!("{id}: {e}"));
                    match evaluate_run(&output.predictions, &inputs.questions) {
                        Ok(report) => CellResult {
                            cell,
                            report: Some(report),
                            error,
                        },
                        Err(e) => CellResult {
                            cell,
                            report: None,
                            error: Some(e.to_string()),
                        },
                    }
                }
                Err(e) => CellResult {
                    cell,
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

pub fn load_sweep_grid(path: &Path) -> Result<SweepGrid, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    toml::from_str(&text).map_err(|e| PipelineError::Malformed {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}
