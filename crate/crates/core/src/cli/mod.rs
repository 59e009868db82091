//! The `kffn` command line: index building, retrieval, dataset generation,
//! training, evaluation, sweeps and activation dumps.
//!
//! Failures print `E_CONFIG`, `E_DATA` or `E_NUMERIC` followed by the
//! message on one line and exit with 2, 3 or 4.

mod config;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

pub use config::{Paths, RunConfig};

use crate::encoder::checkpoint::{self, CheckpointError};
use crate::encoder::{Model, ModelError};
use crate::harness::io::{write_activations, write_dataset, write_sweep_csv, write_sweep_metrics};
use crate::harness::{
    self, dump_activations, generate_dataset, gold_column_rate, prepare, run_experiment,
    standard_layer_sets, sweep_layers, sweep_topn, HarnessError, Retriever, Sweep, TaskData,
};
use crate::injection::FusionMode;
use crate::retrieval::{build_index, Corpus, InvertedIndex, RetrievalError};
use crate::text::tokenize;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Config(_) => "E_CONFIG",
            Self::Data(_) => "E_DATA",
            Self::Numeric(_) => "E_NUMERIC",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => Self::Config(m),
            ModelError::Numeric(n) => Self::Numeric(n.to_string()),
            ModelError::Input(m) => Self::Data(m),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::UnsupportedMode(_) => Self::Config(e.to_string()),
            HarnessError::Divergence { .. } => Self::Numeric(e.to_string()),
            HarnessError::Model(m) => m.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(m) => m.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "kffn", about = "Knowledge injection into transformer feed-forward layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a BM25 index from a JSON-lines corpus of {"id", "text"} records.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = crate::retrieval::DEFAULT_K1)]
        k1: f64,
        #[arg(long, default_value_t = crate::retrieval::DEFAULT_B)]
        b: f64,
    },
    /// Print ranked candidates for a query as JSON. Without a checkpoint
    /// only the sparse stage runs.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        query: String,
        #[arg(long = "sparse-m", default_value_t = 100)]
        sparse_m: usize,
        #[arg(long, default_value_t = 5)]
        topn: usize,
    },
    /// Write the synthetic train, dev and corpus files.
    Generate(RunArgs),
    /// Train a model and save it with its metrics.
    Train(RunArgs),
    /// Evaluate a trained run on the dev split.
    Eval(RunArgs),
    /// One training run per injection layer set.
    SweepLayers {
        #[command(flatten)]
        run: RunArgs,
        /// Layer sets separated by ';', layers by ','; `none` is the empty
        /// set. Defaults to top, middle, bottom and none.
        #[arg(long)]
        sets: Option<String>,
    },
    /// Dev accuracy per number of injected knowledge texts.
    SweepTopn {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,15,20,25")]
        ns: Vec<usize>,
        /// Train a model per N instead of re-evaluating one model.
        #[arg(long)]
        retrain: bool,
    },
    /// Write knowledge activation matrices of a trained run.
    DumpActivations {
        #[command(flatten)]
        run: RunArgs,
        /// Index into the dev split.
        #[arg(long, default_value_t = 0)]
        example: usize,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<FusionMode>,
    /// Comma-separated 1-based layer indices.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long)]
    topn: Option<usize>,
    #[arg(long = "sparse-m")]
    sparse_m: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` overrides, e.g. `train.lr=0.003`.
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                RunConfig::from_toml(&text)?
            }
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = self.mode {
            cfg.injection.mode = mode;
            if self.layers.is_none() && !mode.uses_slots() {
                cfg.injection.layers.clear();
            }
        }
        if let Some(layers) = &self.layers {
            cfg.injection.layers = layers.iter().copied().collect();
        }
        if let Some(n) = self.topn {
            cfg.injection.top_n = n;
        }
        if let Some(m) = self.sparse_m {
            cfg.injection.sparse_m = m;
        }
        if let Some(out) = &self.out {
            cfg.paths.out = out.clone();
        }
        cfg.resolve()
    }
}

/// Parses `args` (without the program name) and runs the command, writing
/// human-readable output to `out` and warnings to `warn`.
pub fn run(args: &[String], out: &mut dyn Write, warn: &mut dyn Write) -> Result<()> {
    let argv = std::iter::once("kffn".to_string()).chain(args.iter().cloned());
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            write!(out, "{e}")?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Config(first_line(&e.to_string()))),
    };
    let header = format!("# kffn {}", args.join(" "));
    match cli.command {
        Command::BuildIndex { corpus, index, k1, b } => cmd_build_index(&corpus, &index, k1, b, out),
        Command::Retrieve {
            index,
            checkpoint,
            query,
            sparse_m,
            topn,
        } => cmd_retrieve(&index, checkpoint.as_deref(), &query, sparse_m, topn, out, warn),
        Command::Generate(run) => cmd_generate(&run.resolve()?, &header, out),
        Command::Train(run) => cmd_train(&run.resolve()?, &header, out),
        Command::Eval(run) => cmd_eval(&run.resolve()?, &header, out),
        Command::SweepLayers { run, sets } => {
            let cfg = run.resolve()?;
            let sets = match sets {
                Some(s) => parse_layer_sets(&s)?,
                None => standard_layer_sets(cfg.model.num_layers),
            };
            cmd_sweep_layers(&cfg, &sets, &header, out)
        }
        Command::SweepTopn { run, ns, retrain } => {
            cmd_sweep_topn(&run.resolve()?, &ns, retrain, &header, out)
        }
        Command::DumpActivations { run, example } => {
            cmd_dump_activations(&run.resolve()?, example, &header, out)
        }
    }
}

fn first_line(s: &str) -> String {
    s.lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or_default()
        .trim_start_matches("error: ")
        .to_string()
}

fn parse_layer_sets(s: &str) -> Result<Vec<BTreeSet<usize>>> {
    s.split(';')
        .map(|set| {
            let set = set.trim();
            if set == "none" || set.is_empty() {
                return Ok(BTreeSet::new());
            }
            set.split(',')
                .map(|l| {
                    l.trim()
                        .parse::<usize>()
                        .map_err(|_| CliError::Config(format!("bad layer {l:?} in --sets")))
                })
                .collect()
        })
        .collect()
}

pub fn cmd_build_index(corpus: &Path, index: &Path, k1: f64, b: f64, out: &mut dyn Write) -> Result<()> {
    let corpus = Corpus::load(corpus)?;
    let idx = build_index(&corpus, k1, b)?;
    idx.save(index)?;
    writeln!(
        out,
        "indexed {} documents, {} terms",
        idx.num_docs(),
        idx.vocabulary_size()
    )?;
    Ok(())
}

pub fn cmd_retrieve(
    index: &Path,
    checkpoint: Option<&Path>,
    query: &str,
    sparse_m: usize,
    topn: usize,
    out: &mut dyn Write,
    warn: &mut dyn Write,
) -> Result<()> {
    if sparse_m == 0 {
        return Err(CliError::Config("--sparse-m must be positive".into()));
    }
    let index = InvertedIndex::load(index)?;
    let n = if topn > sparse_m {
        writeln!(warn, "warning: --topn {topn} exceeds --sparse-m {sparse_m}, using {sparse_m}")?;
        sparse_m
    } else {
        topn
    };
    let candidates = match checkpoint {
        Some(path) => {
            let (model, vocab) = checkpoint::load::<f64>(path)?;
            Retriever::from_parts(index, &vocab).retrieve(&model, query, sparse_m, n)?
        }
        None => {
            let mut c = index.sparse_retrieve(&tokenize(query), sparse_m);
            c.truncate(n);
            c
        }
    };
    serde_json::to_writer_pretty(&mut *out, &candidates)?;
    writeln!(out)?;
    Ok(())
}

fn echo(cfg: &RunConfig, header: &str, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{header}")?;
    write!(out, "{}", cfg.to_toml())?;
    Ok(())
}

/// Creates `dir` and records the invocation and resolved config in it.
fn start_dir(dir: &Path, cfg: &RunConfig, header: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), format!("{header}\n{}", cfg.to_toml()))?;
    Ok(())
}

fn dataset(cfg: &RunConfig) -> Result<TaskData> {
    Ok(generate_dataset(&cfg.task)?)
}

pub fn cmd_generate(cfg: &RunConfig, header: &str, out: &mut dyn Write) -> Result<()> {
    echo(cfg, header, out)?;
    let data = dataset(cfg)?;
    let dir = cfg.paths.out.join(format!("data_s{}", cfg.seed));
    std::fs::create_dir_all(&dir)?;
    write_dataset(&dir.join("train.jsonl"), &data.train)?;
    write_dataset(&dir.join("dev.jsonl"), &data.dev)?;
    data.corpus.save(&dir.join("corpus.jsonl"))?;
    writeln!(
        out,
        "wrote {} train, {} dev, {} documents to {}",
        data.train.len(),
        data.dev.len(),
        data.corpus.len(),
        dir.display()
    )?;
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    dev_accuracy: f64,
    train_examples: usize,
    dev_examples: usize,
}

pub fn cmd_train(cfg: &RunConfig, header: &str, out: &mut dyn Write) -> Result<()> {
    echo(cfg, header, out)?;
    let data = dataset(cfg)?;
    let dir = cfg.run_dir();
    start_dir(&dir, cfg, header)?;
    let outcome = run_experiment::<f64>(&cfg.experiment(), &data)?;
    let mut metrics = Vec::new();
    harness::io::write_jsonl(&mut metrics, &outcome.report.history)?;
    std::fs::write(dir.join("metrics.jsonl"), metrics)?;
    checkpoint::save(&dir.join("model.ckpt"), &outcome.model, &data.vocab)?;
    let summary = Summary {
        dev_accuracy: outcome.report.dev_accuracy,
        train_examples: data.train.len(),
        dev_examples: data.dev.len(),
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    writeln!(out, "dev_accuracy {}", outcome.report.dev_accuracy)?;
    writeln!(out, "run directory {}", dir.display())?;
    Ok(())
}

/// Loads a run's checkpoint and checks it against the regenerated data.
fn load_run(cfg: &RunConfig, data: &TaskData) -> Result<Model<f64>> {
    let path = cfg.run_dir().join("model.ckpt");
    if !path.exists() {
        return Err(CliError::Data(format!(
            "no checkpoint at {}; run `kffn train` with the same settings first",
            path.display()
        )));
    }
    let (model, vocab) = checkpoint::load::<f64>(&path)?;
    if vocab != data.vocab {
        return Err(CliError::Data(format!(
            "{} was trained on a different task vocabulary",
            path.display()
        )));
    }
    Ok(model)
}

#[derive(Serialize)]
struct EvalOutput {
    accuracy: f64,
    examples: usize,
    correct: usize,
}

pub fn cmd_eval(cfg: &RunConfig, header: &str, out: &mut dyn Write) -> Result<()> {
    echo(cfg, header, out)?;
    let data = dataset(cfg)?;
    let model = load_run(cfg, &data)?;
    let retriever = Retriever::new(&data, cfg.retrieval.k1, cfg.retrieval.b)?;
    let dev = prepare(&model, &retriever, &data.dev)?;
    let report = harness::evaluate(&model, &dev, &data.vocab)?;
    let result = EvalOutput {
        accuracy: report.accuracy,
        examples: dev.len(),
        correct: report.correct.iter().filter(|&&c| c).count(),
    };
    let json = serde_json::to_string(&result)?;
    std::fs::write(cfg.run_dir().join("eval.json"), &json)?;
    writeln!(out, "{json}")?;
    Ok(())
}

fn write_sweep(dir: &Path, sweep: &Sweep, out: &mut dyn Write) -> Result<()> {
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &sweep.rows)?;
    std::fs::write(dir.join("sweep.csv"), &csv)?;
    let mut metrics = Vec::new();
    write_sweep_metrics(&mut metrics, sweep)?;
    std::fs::write(dir.join("metrics.jsonl"), metrics)?;
    out.write_all(&csv)?;
    writeln!(out, "sweep directory {}", dir.display())?;
    Ok(())
}

pub fn cmd_sweep_layers(
    cfg: &RunConfig,
    sets: &[BTreeSet<usize>],
    header: &str,
    out: &mut dyn Write,
) -> Result<()> {
    echo(cfg, header, out)?;
    let data = dataset(cfg)?;
    let dir = cfg.paths.out.join(format!("sweep-layers_{}", cfg.run_name()));
    start_dir(&dir, cfg, header)?;
    let sweep = sweep_layers::<f64>(&cfg.experiment(), &data, sets)?;
    write_sweep(&dir, &sweep, out)
}

pub fn cmd_sweep_topn(
    cfg: &RunConfig,
    ns: &[usize],
    retrain: bool,
    header: &str,
    out: &mut dyn Write,
) -> Result<()> {
    echo(cfg, header, out)?;
    let data = dataset(cfg)?;
    let dir = cfg.paths.out.join(format!("sweep-topn_{}", cfg.run_name()));
    start_dir(&dir, cfg, header)?;
    let sweep = sweep_topn::<f64>(&cfg.experiment(), &data, ns, retrain)?;
    write_sweep(&dir, &sweep, out)
}

pub fn cmd_dump_activations(cfg: &RunConfig, example: usize, header: &str, out: &mut dyn Write) -> Result<()> {
    echo(cfg, header, out)?;
    if cfg.injection.mode != FusionMode::Ffn {
        return Err(CliError::Config(format!(
            "activation dumps need mode ffn, not {}",
            cfg.injection.mode
        )));
    }
    let data = dataset(cfg)?;
    let ex = data.dev.get(example).ok_or_else(|| {
        CliError::Data(format!("dev example {example} out of range ({} examples)", data.dev.len()))
    })?;
    let model = load_run(cfg, &data)?;
    let retriever = Retriever::new(&data, cfg.retrieval.k1, cfg.retrieval.b)?;
    let prepared = prepare(&model, &retriever, std::slice::from_ref(ex))?;
    let matrices = dump_activations(&model, &retriever, example, &prepared[0])?;
    let dir = cfg.run_dir();
    let mut buf = Vec::new();
    write_activations(&mut buf, &matrices)?;
    std::fs::write(dir.join(format!("activations_{example}.json")), buf)?;
    let report = gold_column_rate(&model, &retriever, &data.dev)?;
    std::fs::write(dir.join("gold_column.json"), serde_json::to_string_pretty(&report)?)?;
    for m in &matrices {
        let (rows, cols) = m.shape();
        writeln!(out, "layer {} activations {rows}x{cols}", m.layer)?;
    }
    writeln!(
        out,
        "gold column is the max on {}/{} correctly answered dev examples",
        report.gold_is_max, report.considered
    )?;
    Ok(())
}
