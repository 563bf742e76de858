use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rerag_core::backend::http::{HttpClient, HttpConfig, HttpGenerator, HttpJudge};
use rerag_core::backend::{GeneratorBackend, MockGenerator, MockJudge};
use rerag_core::data::{dataset_stats, load_dataset};
use rerag_core::losses::check_gradients;
use rerag_core::pipeline::{
    check_consistency, emit_classify_report, emit_report, emit_rerank_report, Backends, EvalReport, Pipeline,
    ReportFormat, RunConfig,
};
use rerag_core::{BackendError, Error};

#[derive(Parser, Debug)]
#[command(name = "rerag", version, about = "Relevance-estimator reranking and evaluation for retrieval-augmented QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rerank contexts and write the reordered dataset plus recall@k.
    Rerank(RunArgs),
    /// Run the full pipeline and write an evaluation report.
    Eval(RunArgs),
    /// Classify context sets as answerable or not.
    Classify(ClassifyArgs),
    /// Answer low-confidence questions from the parametric model.
    Mixed(MixedArgs),
    /// Compare analytic and finite-difference loss gradients.
    CheckGrad(CheckGradArgs),
    /// Print dataset statistics.
    Stats(StatsArgs),
    /// Verify a saved JSON report and re-emit it in another format.
    Report(ReportArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Dataset JSON file.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
    /// `key = value` file applied after the flags, so its entries win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendKind,
    /// Contexts the generator sees per question.
    #[arg(long)]
    top_k: Option<usize>,
    /// Contexts loaded and judged per question.
    #[arg(long)]
    top_k_rerank: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// none | unanswerable | parametric-fallback
    #[arg(long)]
    policy: Option<String>,
    /// re | retriever
    #[arg(long)]
    confidence_source: Option<String>,
    /// re | retriever | none
    #[arg(long)]
    rerank_source: Option<String>,
    /// re | retriever
    #[arg(long)]
    weight_source: Option<String>,
    /// exact | normalized
    #[arg(long)]
    grouping: Option<String>,
    /// per-context | concatenated
    #[arg(long)]
    generation_style: Option<String>,
    /// Score every candidate answer under every context.
    #[arg(long)]
    thorough: bool,
    /// Add a threshold sweep to the report.
    #[arg(long)]
    sweep: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// json | csv | table
    #[arg(long)]
    format: Option<String>,
    /// JSON object mapping questions to answers, known to the mock
    /// generator when asked without contexts.
    #[arg(long)]
    parametric_knowledge: Option<PathBuf>,
    /// Model name for the generator (http backend).
    #[arg(long, env = "RERAG_MODEL")]
    model: Option<String>,
    /// Model name for relevance judgments; defaults to --model.
    #[arg(long)]
    judge_model: Option<String>,
    /// Base URL of an OpenAI-compatible API.
    #[arg(long)]
    api_base: Option<String>,
    /// The endpoint supports echo + logprobs on /completions.
    #[arg(long)]
    supports_scoring: bool,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pick the threshold by grid search on this dev dataset.
    #[arg(long, conflicts_with = "search")]
    dev: Option<PathBuf>,
    /// Pick the threshold by grid search on the input itself.
    #[arg(long)]
    search: bool,
}

#[derive(Args, Debug)]
struct MixedArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Also run the plain pipeline and report the EM gain.
    #[arg(long)]
    compare_baseline: bool,
}

#[derive(Args, Debug)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    #[arg(long, default_value_t = 2)]
    min_contexts: usize,
    #[arg(long, default_value_t = 8)]
    max_contexts: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    max_rel_error: f64,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
    /// Count only the first N contexts of each question.
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// A JSON report written by `eval` or `mixed`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: FormatArg,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Table,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Table => ReportFormat::Table,
        }
    }
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::Backend(_) | Error::AllFailed(_) => 3,
            Error::Inconsistent(_) => 4,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<BackendError> for Failure {
    fn from(e: BackendError) -> Self {
        Error::Backend(e).into()
    }
}

type CliResult<T> = Result<T, Failure>;

impl RunArgs {
    fn config(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut set = |key: &str, value: Option<String>| -> CliResult<()> {
            match value {
                Some(v) => cfg.set(key, &v).map_err(Failure::from),
                None => Ok(()),
            }
        };
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        set("dataset", show(&self.input))?;
        set("top_k_generate", self.top_k.map(|k| k.to_string()))?;
        set("top_k_rerank", self.top_k_rerank.map(|k| k.to_string()))?;
        set("threshold", self.threshold.map(|t| t.to_string()))?;
        set("policy", self.policy.clone())?;
        set("confidence_source", self.confidence_source.clone())?;
        set("rerank_source", self.rerank_source.clone())?;
        set("weight_source", self.weight_source.clone())?;
        set("grouping", self.grouping.clone())?;
        set("generation_style", self.generation_style.clone())?;
        set("thorough", self.thorough.then(|| "true".into()))?;
        set("sweep", self.sweep.then(|| "true".into()))?;
        set("seed", self.seed.map(|s| s.to_string()))?;
        set("jobs", self.jobs.map(|j| j.to_string()))?;
        set("cache_dir", show(&self.cache_dir))?;
        set("format", self.format.clone())?;
        // A larger generation set implies judging at least as many contexts.
        if self.top_k_rerank.is_none() {
            cfg.top_k_rerank = cfg.top_k_rerank.max(cfg.top_k_generate);
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_overrides(&text)?;
        }
        if cfg.dataset.as_os_str().is_empty() {
            return Err(Failure::usage("no dataset given; pass --input or set `dataset` in --config"));
        }
        Ok(cfg)
    }

    fn backends(&self, cfg: &RunConfig) -> CliResult<Backends> {
        match self.backend {
            BackendKind::Mock => {
                let mut generator = MockGenerator::new(cfg.seed);
                if let Some(path) = &self.parametric_knowledge {
                    generator = generator.with_knowledge(read_knowledge(path)?);
                }
                let generator: Arc<dyn GeneratorBackend> = Arc::new(generator);
                Ok(Backends {
                    relevance: Some(Arc::new(MockJudge::new(cfg.seed))),
                    generator: Some(generator.clone()),
                    parametric: Some(generator),
                })
            }
            BackendKind::Http => {
                let model = self
                    .model
                    .clone()
                    .ok_or_else(|| Failure::usage("the http backend needs --model (or RERAG_MODEL)"))?;
                let http_config = |model: &str| {
                    let mut c = HttpConfig::from_env(model);
                    if let Some(base) = &self.api_base {
                        c.base_url = base.clone();
                    }
                    c.supports_scoring = self.supports_scoring;
                    c
                };
                // Responses are cached by the pipeline, not by the client.
                let gen_client = HttpClient::new(http_config(&model), None)?;
                let judge_model = self.judge_model.as_deref().unwrap_or(&model);
                let judge_client = HttpClient::new(http_config(judge_model), None)?;
                let generator: Arc<dyn GeneratorBackend> = Arc::new(HttpGenerator::new(gen_client));
                Ok(Backends {
                    relevance: Some(Arc::new(HttpJudge::new(judge_client))),
                    generator: Some(generator.clone()),
                    parametric: Some(generator),
                })
            }
        }
    }

    fn pipeline(&self) -> CliResult<Pipeline> {
        let cfg = self.config()?;
        let backends = self.backends(&cfg)?;
        log::info!("backends: {backends:?}");
        Ok(Pipeline::new(cfg, backends)?)
    }
}

fn read_knowledge(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::from(Error::Parse(format!("cannot read {}: {e}", path.display()))))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: expected a JSON object of question -> answer: {e}", path.display())).into())
}

fn wrote(path: &Path) {
    log::info!("wrote {}", path.display());
    println!("{}", path.display());
}

fn eval(args: &RunArgs) -> CliResult<()> {
    let pipeline = args.pipeline()?;
    let report = pipeline.run_eval()?;
    log_failures(&report);
    wrote(&emit_report(&report, pipeline.config().format, &args.output_dir)?);
    Ok(())
}

fn log_failures(report: &EvalReport) {
    for f in &report.failures {
        log::warn!("question {} ({}) failed: {}", f.index, f.id, f.message);
    }
}

fn rerank(args: &RunArgs) -> CliResult<()> {
    let pipeline = args.pipeline()?;
    std::fs::create_dir_all(&args.output_dir)
        .map_err(|e| Failure::from(Error::Parse(format!("cannot create {}: {e}", args.output_dir.display()))))?;
    let dataset = args.output_dir.join("reranked.json");
    let report = pipeline.run_rerank(&dataset)?;
    wrote(&dataset);
    wrote(&emit_rerank_report(&report, pipeline.config().format, &args.output_dir)?);
    Ok(())
}

fn classify(args: &ClassifyArgs) -> CliResult<()> {
    let pipeline = args.run.pipeline()?;
    let dev = match &args.dev {
        Some(path) => Some(load_dataset(path, Some(pipeline.config().top_k_rerank))?),
        None if args.search => Some(pipeline.load_dataset()?),
        None => None,
    };
    let report = pipeline.run_classify(dev.as_deref())?;
    wrote(&emit_classify_report(&report, pipeline.config().format, &args.run.output_dir)?);
    Ok(())
}

fn mixed(args: &MixedArgs) -> CliResult<()> {
    let pipeline = args.run.pipeline()?;
    let report = pipeline.run_mixed(args.compare_baseline)?;
    log_failures(&report);
    wrote(&emit_report(&report, pipeline.config().format, &args.run.output_dir)?);
    Ok(())
}

fn check_grad(args: &CheckGradArgs) -> CliResult<()> {
    if args.min_contexts > args.max_contexts {
        return Err(Failure::usage("--min-contexts exceeds --max-contexts"));
    }
    let mut worst = 0.0f64;
    let mut worst_tokens = 0.0f64;
    for seed in 0..args.seeds {
        for n in args.min_contexts..=args.max_contexts {
            let g = check_gradients(seed, n, args.step)?;
            worst = worst.max(g.max_rel_error);
            worst_tokens = worst_tokens.max(g.max_rel_error_tokens);
        }
    }
    let pass = worst.max(worst_tokens) <= args.max_rel_error;
    println!("max relative error (relevance logits): {worst:.3e}");
    println!("max relative error (token logits):     {worst_tokens:.3e}");
    println!("{} (threshold {:.1e})", if pass { "PASS" } else { "FAIL" }, args.max_rel_error);
    if pass {
        Ok(())
    } else {
        Err(Failure { code: 4, message: "gradient check failed".into() })
    }
}

fn stats(args: &StatsArgs) -> CliResult<()> {
    let records = load_dataset(&args.input, args.top_k)?;
    let s = dataset_stats(&records)?;
    println!("questions           {}", s.n_questions);
    println!("contexts per q      {:.2} (min {}, max {})", s.mean_contexts, s.min_contexts, s.max_contexts);
    println!("answerable          {:.1}%", 100.0 * s.answerable_fraction);
    Ok(())
}

fn report(args: &ReportArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| Failure::from(Error::Parse(format!("cannot read {}: {e}", args.input.display()))))?;
    let report = EvalReport::from_json(&text)?;
    check_consistency(&report)?;
    wrote(&emit_report(&report, args.format.into(), &args.output_dir)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Rerank(a) => rerank(a),
        Command::Eval(a) => eval(a),
        Command::Classify(a) => classify(a),
        Command::Mixed(a) => mixed(a),
        Command::CheckGrad(a) => check_grad(a),
        Command::Stats(a) => stats(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{}", f.message);
            ExitCode::from(f.code)
        }
    }
}
