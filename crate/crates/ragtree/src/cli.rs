//! Command-line interface: single-question runs, batch evaluation,
//! threshold/depth sweeps, and corpus indexing.
//!
//! Settings are layered: command-line flags override the TOML config file,
//! which overrides environment variables (`RAGTREE_BACKEND_URL`,
//! `RAGTREE_MODEL`), which override built-in defaults. Backend credentials
//! come only from `RAGTREE_API_KEY`. Every run writes a `manifest.json`
//! describing the resolved settings next to its outputs.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::engine::{Engine, EngineError};
use crate::eval::{aggregate, load_dataset, EvalRecord, MetricsReport, QAExample};
use crate::llm::{LanguageModel, LlmError, MockLlm, WireClient, WireConfig};
use crate::retrieval::{Corpus, RemoteRetriever, RetrievalError, Retriever};

#[derive(Parser)]
#[command(
    name = "ragtree",
    version,
    about = "Confidence-guided query decomposition trees for retrieval-augmented QA"
)]
pub struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Corpus JSONL file (one {"id","title","text"} object per line)
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Completions endpoint base URL
    #[arg(long, global = true)]
    backend_url: Option<String>,
    /// Scripted mock backend (JSON rule file)
    #[arg(long, global = true, conflicts_with = "backend_url")]
    mock_script: Option<PathBuf>,
    /// Model name sent to the wire backend
    #[arg(long, global = true)]
    model: Option<String>,
    /// Remote retriever endpoint (POST {"query","k"})
    #[arg(long, global = true)]
    retriever_url: Option<String>,
    /// Answer acceptance threshold on confidence
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Maximum query-node depth
    #[arg(long, global = true)]
    max_depth: Option<usize>,
    /// Maximum children per decomposition
    #[arg(long, global = true)]
    max_branching: Option<usize>,
    /// Documents retrieved per call
    #[arg(long, global = true)]
    top_k: Option<usize>,
    /// Retrieval calls allowed per question
    #[arg(long, global = true)]
    retrieval_cap: Option<u32>,
    /// Generation token limit
    #[arg(long, global = true)]
    max_tokens: Option<u32>,
    /// Prompt set: "default" or a template directory
    #[arg(long, global = true)]
    prompt_set: Option<String>,
    /// Evaluation worker threads
    #[arg(long, global = true)]
    parallel: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Answer one question and write the decomposition tree
    Ask {
        question: String,
        /// Also write a Graphviz rendering of the tree
        #[arg(long)]
        dot: bool,
    },
    /// Run a JSONL dataset and write per-example records plus a report
    Eval {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Evaluate a (tau, max_depth) grid and write one CSV row per cell
    Sweep {
        /// Comma-separated acceptance thresholds
        #[arg(long, value_delimiter = ',', required = true)]
        tau_list: Vec<f64>,
        /// Comma-separated depth caps
        #[arg(long, value_delimiter = ',', required = true)]
        depth_list: Vec<usize>,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Build the corpus index and write a reloadable snapshot
    Index,
}

/// Everything a run resolved from flags, config file, environment, and
/// defaults, written next to the outputs for reproducibility.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    engine: EngineConfig,
    corpus: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    backend: Option<BackendDesc>,
    retriever: String,
    out_dir: String,
    /// True when the backend is scripted: outputs are byte-reproducible and
    /// wall times are zeroed.
    deterministic: bool,
}

#[derive(Debug, Serialize)]
struct BackendDesc {
    kind: &'static str,
    detail: String,
}

#[derive(Debug, Clone)]
enum Backend {
    Mock(PathBuf),
    Wire { url: String, model: String },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    max_branching: Option<usize>,
    max_depth: Option<usize>,
    tau_a: Option<f64>,
    top_k: Option<usize>,
    retrieval_cap: Option<u32>,
    max_tokens: Option<u32>,
    prompt_set: Option<String>,
    parallelism: Option<usize>,
    corpus: Option<PathBuf>,
    backend_url: Option<String>,
    mock_script: Option<PathBuf>,
    model: Option<String>,
    retriever_url: Option<String>,
    parallel: Option<usize>,
    out_dir: Option<PathBuf>,
}

struct Settings {
    engine: EngineConfig,
    corpus: Option<PathBuf>,
    backend: Option<Backend>,
    retriever_url: Option<String>,
    parallel: usize,
    out_dir: PathBuf,
}

impl Settings {
    fn deterministic(&self) -> bool {
        matches!(self.backend, Some(Backend::Mock(_)))
    }

    fn backend_desc(&self) -> Option<BackendDesc> {
        self.backend.as_ref().map(|b| match b {
            Backend::Mock(path) => BackendDesc {
                kind: "mock",
                detail: path.display().to_string(),
            },
            Backend::Wire { url, .. } => BackendDesc {
                kind: "wire",
                detail: url.clone(),
            },
        })
    }

    fn retriever_desc(&self) -> String {
        match &self.retriever_url {
            Some(url) => url.clone(),
            None => "bm25".to_string(),
        }
    }

    fn manifest(&self, command: &str, dataset: Option<&Path>) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            engine: self.engine.clone(),
            corpus: self.corpus.as_ref().map(|p| p.display().to_string()),
            dataset: dataset.map(|p| p.display().to_string()),
            backend: self.backend_desc(),
            retriever: self.retriever_desc(),
            out_dir: self.out_dir.display().to_string(),
            deterministic: self.deterministic(),
        }
    }
}

fn resolve(common: &CommonArgs) -> Result<Settings> {
    let file: ConfigFile = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            toml::from_str(&text)
                .with_context(|| format!("invalid config file {}", path.display()))?
        }
        None => ConfigFile::default(),
    };

    let mut engine = EngineConfig::default();
    let layers = [
        (
            file.max_branching,
            file.max_depth,
            file.tau_a,
            file.top_k,
            file.retrieval_cap,
            file.max_tokens,
            file.prompt_set.clone(),
        ),
        (
            common.max_branching,
            common.max_depth,
            common.tau,
            common.top_k,
            common.retrieval_cap,
            common.max_tokens,
            common.prompt_set.clone(),
        ),
    ];
    for (branching, depth, tau, top_k, cap, tokens, prompt_set) in layers {
        if let Some(v) = branching {
            engine.max_branching = v;
        }
        if let Some(v) = depth {
            engine.max_depth = v;
        }
        if let Some(v) = tau {
            engine.tau_a = v;
        }
        if let Some(v) = top_k {
            engine.top_k = v;
        }
        if let Some(v) = cap {
            engine.retrieval_cap = v;
        }
        if let Some(v) = tokens {
            engine.max_tokens = v;
        }
        if let Some(v) = prompt_set {
            engine.prompt_set = v;
        }
    }
    if let Some(v) = file.parallelism {
        engine.parallelism = v;
    }
    engine.validate()?;

    let model = common
        .model
        .clone()
        .or(file.model)
        .or_else(|| std::env::var("RAGTREE_MODEL").ok());
    let wire = |url: String| -> Result<Backend> {
        let model = model
            .clone()
            .context("a wire backend needs --model, a config `model`, or RAGTREE_MODEL")?;
        Ok(Backend::Wire { url, model })
    };
    let backend = if common.mock_script.is_some() || common.backend_url.is_some() {
        match (&common.mock_script, &common.backend_url) {
            (Some(script), None) => Some(Backend::Mock(script.clone())),
            (None, Some(url)) => Some(wire(url.clone())?),
            _ => unreachable!("clap rejects combined backend flags"),
        }
    } else if file.mock_script.is_some() || file.backend_url.is_some() {
        match (file.mock_script, file.backend_url) {
            (Some(script), None) => Some(Backend::Mock(script)),
            (None, Some(url)) => Some(wire(url)?),
            _ => bail!("config file sets both mock_script and backend_url; choose one"),
        }
    } else if let Ok(url) = std::env::var("RAGTREE_BACKEND_URL") {
        Some(wire(url)?)
    } else {
        None
    };

    Ok(Settings {
        engine,
        corpus: common.corpus.clone().or(file.corpus),
        backend,
        retriever_url: common.retriever_url.clone().or(file.retriever_url),
        parallel: common.parallel.or(file.parallel).unwrap_or(1).max(1),
        out_dir: common
            .out_dir
            .clone()
            .or(file.out_dir)
            .unwrap_or_else(|| PathBuf::from("./out")),
    })
}

fn build_llm(settings: &Settings) -> Result<Box<dyn LanguageModel>> {
    let backend = settings
        .backend
        .as_ref()
        .context("a backend is required: pass --mock-script or --backend-url")?;
    match backend {
        Backend::Mock(path) => Ok(Box::new(
            MockLlm::from_script_file(path)
                .with_context(|| format!("cannot load mock script {}", path.display()))?,
        )),
        Backend::Wire { url, model } => {
            let mut cfg = WireConfig::new(url.clone(), model.clone());
            cfg.api_key = std::env::var("RAGTREE_API_KEY").ok();
            Ok(Box::new(WireClient::new(cfg)))
        }
    }
}

fn load_corpus(settings: &Settings) -> Result<Option<Corpus>> {
    settings
        .corpus
        .as_ref()
        .map(|path| {
            Corpus::ingest(path).with_context(|| format!("cannot ingest corpus {}", path.display()))
        })
        .transpose()
}

fn build_retriever(settings: &Settings) -> Result<Box<dyn Retriever>> {
    let corpus = load_corpus(settings)?;
    match &settings.retriever_url {
        Some(url) => {
            let mut remote = RemoteRetriever::new(url.clone());
            if let Some(c) = corpus {
                remote = remote.with_store(std::sync::Arc::new(c));
            }
            Ok(Box::new(remote))
        }
        None => {
            let c = corpus
                .context("a document source is required: pass --corpus or --retriever-url")?;
            Ok(Box::new(c))
        }
    }
}

fn write_manifest(settings: &Settings, command: &str, dataset: Option<&Path>) -> Result<()> {
    std::fs::create_dir_all(&settings.out_dir)
        .with_context(|| format!("cannot create {}", settings.out_dir.display()))?;
    let manifest = settings.manifest(command, dataset);
    let path = settings.out_dir.join("manifest.json");
    std::fs::write(
        &path,
        format!("{}\n", serde_json::to_string_pretty(&manifest)?),
    )
    .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Entry point for the `ragtree` binary.
pub fn main() -> Result<()> {
    let cli = Cli::parse();
    dispatch(cli)
}

fn dispatch(cli: Cli) -> Result<()> {
    let settings = resolve(&cli.common)?;
    match cli.command {
        Command::Ask { question, dot } => cmd_ask(&settings, &question, dot),
        Command::Eval { dataset } => cmd_eval(&settings, &dataset),
        Command::Sweep {
            tau_list,
            depth_list,
            dataset,
        } => cmd_sweep(&settings, &tau_list, &depth_list, &dataset),
        Command::Index => cmd_index(&settings),
    }
}

fn cmd_ask(settings: &Settings, question: &str, dot: bool) -> Result<()> {
    write_manifest(settings, "ask", None)?;
    let llm = build_llm(settings)?;
    let retriever = build_retriever(settings)?;
    let engine = Engine::new(settings.engine.clone(), llm.as_ref(), retriever.as_ref())?;
    let tree = engine.run(question)?;

    let tree_path = settings.out_dir.join("tree.json");
    std::fs::write(&tree_path, format!("{}\n", tree.to_json()))
        .with_context(|| format!("cannot write {}", tree_path.display()))?;
    if dot {
        let dot_path = settings.out_dir.join("tree.dot");
        std::fs::write(&dot_path, tree.to_dot())
            .with_context(|| format!("cannot write {}", dot_path.display()))?;
    }
    println!("{}", tree.final_answer);
    Ok(())
}

/// True for failures that invalidate the whole run rather than one example.
fn is_systemic(e: &EngineError) -> bool {
    matches!(
        e,
        EngineError::Llm(LlmError::BackendUnavailable(_))
            | EngineError::Retrieval(RetrievalError::Backend(_))
            | EngineError::Retrieval(RetrievalError::Io(_))
    )
}

/// Runs every example through the engine, preserving input order in the
/// returned records. Per-example failures are recorded and the run
/// continues; systemic failures abort.
fn run_examples(
    engine: &Engine<'_>,
    examples: &[QAExample],
    parallel: usize,
    deterministic: bool,
) -> Result<Vec<EvalRecord>> {
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<EvalRecord, EngineError>>>> =
        Mutex::new((0..examples.len()).map(|_| None).collect());

    let worker = || loop {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= examples.len() {
            break;
        }
        let example = &examples[i];
        let started = Instant::now();
        let outcome = engine.run(&example.question);
        let wall_time_ms = if deterministic {
            0.0
        } else {
            started.elapsed().as_secs_f64() * 1000.0
        };
        let entry = match outcome {
            Ok(tree) => Ok(EvalRecord {
                id: example.id.clone(),
                predicted: tree.final_answer.clone(),
                retrieved_ids: tree.retrieved_ids(),
                retrieval_calls: tree.retrieval_calls,
                wall_time_ms,
                tree: Some(tree),
                error: None,
            }),
            Err(e) if is_systemic(&e) => {
                stop.store(true, Ordering::SeqCst);
                Err(e)
            }
            Err(e) => Ok(EvalRecord {
                id: example.id.clone(),
                predicted: String::new(),
                retrieved_ids: Vec::new(),
                retrieval_calls: 0,
                wall_time_ms,
                tree: None,
                error: Some(e.to_string()),
            }),
        };
        let failed = entry.as_ref().map(|r| r.error.is_some()).unwrap_or(true);
        slots.lock().unwrap()[i] = Some(entry);
        let finished = done.fetch_add(1, Ordering::SeqCst) + 1;
        eprintln!(
            "[{finished}/{}] {} {}",
            examples.len(),
            example.id,
            if failed { "failed" } else { "ok" }
        );
    };

    let workers = parallel.min(examples.len()).max(1);
    if workers == 1 {
        worker();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(worker);
            }
        });
    }

    let mut records = Vec::with_capacity(examples.len());
    for slot in slots.into_inner().unwrap() {
        match slot {
            Some(Ok(record)) => records.push(record),
            Some(Err(e)) => return Err(e.into()),
            None => {
                bail!("evaluation aborted before all examples ran")
            }
        }
    }
    Ok(records)
}

fn eval_dataset(
    settings: &Settings,
    dataset: &Path,
    engine_cfg: EngineConfig,
) -> Result<(Vec<EvalRecord>, MetricsReport)> {
    let examples = load_dataset(dataset)
        .with_context(|| format!("cannot load dataset {}", dataset.display()))?;
    let llm = build_llm(settings)?;
    let retriever = build_retriever(settings)?;
    let engine = Engine::new(engine_cfg, llm.as_ref(), retriever.as_ref())?;
    let records = run_examples(
        &engine,
        &examples,
        settings.parallel,
        settings.deterministic(),
    )?;
    let report = aggregate(&records, &examples)?;
    Ok((records, report))
}

fn cmd_eval(settings: &Settings, dataset: &Path) -> Result<()> {
    write_manifest(settings, "eval", Some(dataset))?;
    let (records, report) = eval_dataset(settings, dataset, settings.engine.clone())?;

    let records_path = settings.out_dir.join("records.jsonl");
    let mut lines = String::new();
    for record in &records {
        lines.push_str(&serde_json::to_string(record)?);
        lines.push('\n');
    }
    std::fs::write(&records_path, lines)
        .with_context(|| format!("cannot write {}", records_path.display()))?;

    let report_path = settings.out_dir.join("report.json");
    std::fs::write(
        &report_path,
        format!("{}\n", serde_json::to_string_pretty(&report)?),
    )
    .with_context(|| format!("cannot write {}", report_path.display()))?;

    eprintln!(
        "n={} em={:.2} f1={:.2} rn={:.2}",
        report.n, report.em, report.f1, report.rn
    );
    Ok(())
}

fn mean_tree_depth(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let total: usize = records
        .iter()
        .map(|r| r.tree.as_ref().map(|t| t.depth()).unwrap_or(0))
        .sum();
    total as f64 / records.len() as f64
}

fn csv_cell(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

fn cmd_sweep(
    settings: &Settings,
    tau_list: &[f64],
    depth_list: &[usize],
    dataset: &Path,
) -> Result<()> {
    if tau_list.is_empty() || depth_list.is_empty() {
        bail!("sweep needs at least one tau and one depth");
    }
    write_manifest(settings, "sweep", Some(dataset))?;

    let mut seen = std::collections::HashSet::new();
    let mut csv = String::from("tau,max_depth,em,f1,efr,rn,mean_tree_depth\n");
    for &tau in tau_list {
        for &depth in depth_list {
            if !seen.insert((tau.to_bits(), depth)) {
                continue;
            }
            let mut cfg = settings.engine.clone();
            cfg.tau_a = tau;
            cfg.max_depth = depth;
            let (records, report) = eval_dataset(settings, dataset, cfg)?;
            csv.push_str(&format!(
                "{tau},{depth},{},{},{},{},{}\n",
                report.em,
                report.f1,
                csv_cell(report.efr),
                report.rn,
                mean_tree_depth(&records)
            ));
            eprintln!(
                "tau={tau} depth={depth}: em={:.2} f1={:.2}",
                report.em, report.f1
            );
        }
    }

    let csv_path = settings.out_dir.join("sweep.csv");
    std::fs::write(&csv_path, csv)
        .with_context(|| format!("cannot write {}", csv_path.display()))?;
    Ok(())
}

fn cmd_index(settings: &Settings) -> Result<()> {
    write_manifest(settings, "index", None)?;
    let corpus = load_corpus(settings)?.context("indexing requires --corpus")?;
    let snapshot_path = settings.out_dir.join("index.json");
    std::fs::write(
        &snapshot_path,
        format!("{}\n", serde_json::to_string(&corpus)?),
    )
    .with_context(|| format!("cannot write {}", snapshot_path.display()))?;
    println!(
        "indexed {} documents ({} distinct terms) -> {}",
        corpus.len(),
        corpus.term_count(),
        snapshot_path.display()
    );
    Ok(())
}
