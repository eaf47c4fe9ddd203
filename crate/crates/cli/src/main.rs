use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use thiserror::Error;

use treerag::config::{load_config, Config, ConfigError};
use treerag::experiment::render_matrix;
use treerag::pipeline::{self, Inputs, PipelineError};

/// Tree-structured retrieval reasoning: synthetic worlds, MCTS annotation,
/// value-record export, hierarchical beam-search inference and evaluation.
#[derive(Debug, Parser)]
#[command(name = "treerag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Synthetic world directory (questions, corpus and oracle tables).
    #[arg(long)]
    world: Option<PathBuf>,
    /// Questions file, one `{id, question, gold_answers}` per line.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Corpus file, one `{doc_id, title, text}` per line.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-hop world.
    Worldgen {
        /// World spec, TOML or JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build one MCTS reasoning tree per question.
    Annotate {
        /// Run configuration (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export value-training records from annotated trees.
    Extract {
        /// Run configuration (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trees: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer questions with hierarchical beam search.
    Infer {
        /// Run configuration (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        inputs: InputArgs,
        /// Predictions file.
        #[arg(long)]
        out: PathBuf,
        /// Decision traces; tree-form traces go next to it as `*.trees.jsonl`.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Score predictions against gold answers.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run inference and evaluation over a grid of settings.
    Sweep {
        /// Grid file (TOML) listing values for b1, b2, noise, epsilon, plan_ranking, search_ranking.
        #[arg(long)]
        sweep: PathBuf,
        /// Run configuration (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        inputs: InputArgs,
        /// Output directory for `matrix.md` and `results.json`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{failed} of {total} questions failed")]
    Questions { failed: usize, total: usize, backend: bool },
    #[error("{failed} of {total} sweep cells failed")]
    Sweep { failed: usize, total: usize },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Pipeline(e) if e.is_backend() => 2,
            CliError::Pipeline(_) => 1,
            CliError::Questions { backend: true, .. } => 2,
            CliError::Questions { .. } => 1,
            CliError::Sweep { .. } => 3,
        }
    }
}

fn config(path: Option<&Path>) -> Result<Config, CliError> {
    match path {
        Some(path) => Ok(load_config(path)?),
        None => Ok(Config::default()),
    }
}

fn inputs(cfg: &Config, args: &InputArgs) -> Result<Inputs, CliError> {
    Ok(Inputs::load(
        cfg,
        args.world.as_deref(),
        args.input.as_deref(),
        args.corpus.as_deref(),
    )?)
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| {
        CliError::Pipeline(PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Logs per-question failures and turns them into one error.
fn check_questions<'a>(
    total: usize,
    failures: impl Iterator<Item = (&'a str, &'a PipelineError)>,
) -> Result<(), CliError> {
    let (mut failed, mut backend) = (0, false);
    for (id, e) in failures {
        error!("{id}: {e}");
        failed += 1;
        backend |= e.is_backend();
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Questions { failed, total, backend })
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Worldgen { spec, out } => {
            let spec = pipeline::load_world_spec(&spec)?;
            let world = pipeline::worldgen(&spec, &out)?;
            info!(
                "wrote {} facts, {} documents, {} questions to {}",
                world.facts.len(),
                world.corpus.len(),
                world.questions.len(),
                out.display()
            );
        }
        Command::Annotate { config: path, inputs: args, out } => {
            let cfg = config(path.as_deref())?;
            let inputs = inputs(&cfg, &args)?;
            let results = pipeline::annotate(&cfg, &inputs)?;
            let trees: Vec<_> = results.iter().filter_map(|(_, r)| r.as_ref().ok().cloned()).collect();
            pipeline::write_tree_file(&out, &trees)?;
            info!("wrote {} trees to {}", trees.len(), out.display());
            let failures = results.iter().filter_map(|(id, r)| r.as_ref().err().map(|e| (id.as_str(), e)));
            check_questions(results.len(), failures)?;
        }
        Command::Extract { config: path, trees, out } => {
            let cfg = config(path.as_deref())?;
            let counts = pipeline::extract(&cfg, &trees, &out)?;
            info!(
                "wrote {} correct and {} incorrect paths to {}",
                counts.correct,
                counts.incorrect,
                out.display()
            );
        }
        Command::Infer {
            config: path,
            inputs: args,
            out,
            traces,
        } => {
            let cfg = config(path.as_deref())?;
            let inputs = inputs(&cfg, &args)?;
            let output = pipeline::infer(&cfg, &inputs)?;
            pipeline::write_infer_output(&output, &inputs, &out, traces.as_deref())?;
            info!("wrote {} predictions to {}", output.predictions.len(), out.display());
            check_questions(output.runs.len(), output.failures())?;
        }
        Command::Eval { pred, gold, report } => {
            let result = pipeline::evaluate_files(&pred, &gold, &report)?;
            println!("{}", result.summary());
        }
        Command::Sweep {
            sweep,
            config: path,
            inputs: args,
            out,
        } => {
            let grid = pipeline::load_sweep_grid(&sweep)?;
            let cfg = config(path.as_deref())?;
            let inputs = inputs(&cfg, &args)?;
            let results = pipeline::sweep(&grid, &cfg, &inputs);
            fs::create_dir_all(&out).map_err(io_error(&out))?;
            let matrix = render_matrix(&results);
            let matrix_path = out.join("matrix.md");
            fs::write(&matrix_path, &matrix).map_err(io_error(&matrix_path))?;
            let results_path = out.join("results.json");
            let json = serde_json::to_string_pretty(&results).expect("sweep results serialize") + "\n";
            fs::write(&results_path, json).map_err(io_error(&results_path))?;
            print!("{matrix}");
            let failed: Vec<_> = results.iter().filter(|r| r.error.is_some()).collect();
            for r in &failed {
                warn!("{}: {}", r.cell.label(), r.error.as_deref().unwrap_or_default());
            }
            if !failed.is_empty() {
                return Err(CliError::Sweep {
                    failed: failed.len(),
                    total: results.len(),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
