//! `folklore`: runs the lemma pipeline over a workdir and builds the
//! benchmark, evaluation reports and audit samples from it.

mod config;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use folklore_core::bench::{self, AuditLabel, AuditSample, AuditScope, BenchInstance, EvalRecord, FunnelCounts, Scope};
use folklore_core::lean::{HttpVerifier, LeanChecker, ScriptedVerifier, Verifier, VerifierScript, DEFAULT_TIMEOUT_S};
use folklore_core::llm::{ChatBackend, HttpChatBackend, Script, ScriptedBackend};
use folklore_core::model::{StageConfig, StageKind};
use folklore_core::pipeline::{Agent, Pipeline, PipelineError, Prompts, RunContext, RunSummary, StageSet};
use folklore_core::store::{ArtifactLayout, FaultPlan, RunMeta, Store, StoreError, SystemClock};
use folklore_core::util::{write_atomic, JsonlLog};

use config::{ConfigError, LoadedConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
/// Exit status of a run killed by the hidden crash switch.
const EXIT_CRASHED: i32 = 137;

#[derive(Parser)]
#[command(name = "folklore", version, about = "Mine, formalize and prove missing library lemmas")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, env = "FOLKLORE_CONFIG")]
    config: Option<PathBuf>,
    /// Artifact root; overrides the config's `workdir`.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Replay LLM responses from a script file instead of calling endpoints.
    #[arg(long, global = true)]
    mock_llm: Option<PathBuf>,
    /// Answer verification requests from a script file instead of a server.
    #[arg(long, global = true)]
    mock_lean: Option<PathBuf>,
    #[arg(long, global = true)]
    concurrency_discovery: Option<usize>,
    #[arg(long, global = true)]
    concurrency_judge: Option<usize>,
    #[arg(long, global = true)]
    concurrency_formalize: Option<usize>,
    #[arg(long, global = true)]
    concurrency_prove: Option<usize>,
    /// Simulates a kill after this many store operations.
    #[arg(long, global = true, hide = true)]
    crash_after_ops: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Brainstorm candidates from every seed not yet processed.
    Discover,
    /// Drain the judge queue.
    Judge,
    /// Drain the formalization queue.
    Formalize,
    /// Drain the proving queue.
    Prove,
    /// All four stages, resuming whatever is pending.
    Run,
    /// Write the benchmark (one JSON instance per line).
    ExportBench {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the configured models on a benchmark file.
    Eval {
        #[arg(long)]
        bench: Option<PathBuf>,
        /// Output directory; defaults to `<workdir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a summary table.
    Stats {
        #[arg(long, value_enum, default_value_t = TableKind::Funnel)]
        table: TableKind,
        /// Funnel counts (JSON array) to use instead of the workdir.
        #[arg(long)]
        counts: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Draw instances for human audit.
    AuditSample {
        #[arg(long)]
        bench: PathBuf,
        #[arg(long, default_value_t = 2)]
        per_seed: usize,
        #[arg(long, value_enum, default_value_t = AuditScopeArg::Unproved)]
        scope: AuditScopeArg,
        /// Evaluation records (JSONL); instances solved there are excluded
        /// from the `unproved` scope.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        prng_seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tally human audit labels over a sample.
    AuditTally {
        #[arg(long)]
        sample: PathBuf,
        /// JSONL of `{"instance_id", "human_proved"}`.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Check one Lean file. Exit status 0 if accepted.
    Verify {
        file: PathBuf,
        /// Apply the proof acceptance rule (no errors, no sorry).
        #[arg(long)]
        proof: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TableKind {
    Funnel,
}

#[derive(Clone, Copy, ValueEnum)]
enum AuditScopeArg {
    Unproved,
    All,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failure(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(format!("config error: {e}"))
    }
}

impl From<bench::BenchError> for CliError {
    fn from(e: bench::BenchError) -> Self {
        match e {
            bench::BenchError::Input(m) => CliError::Usage(m),
            bench::BenchError::Store(StoreError::Crashed)
            | bench::BenchError::Pipeline(PipelineError::Store(StoreError::Crashed)) => crash_exit(),
            other => CliError::Failure(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Store(StoreError::Crashed) => crash_exit(),
            PipelineError::Template(m) => CliError::Usage(format!("prompt template: {m}")),
            other => CliError::Failure(other.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        PipelineError::Store(e).into()
    }
}

fn crash_exit() -> ! {
    eprintln!("simulated crash");
    std::process::exit(EXIT_CRASHED)
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Failure(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn run(cli: &Cli) -> CliResult<ExitCode> {
    match &cli.command {
        Command::Stats { table: TableKind::Funnel, counts, json } => stats(cli, counts.as_deref(), *json),
        Command::AuditSample { bench, per_seed, scope, records, prng_seed, out } => {
            audit(cli, bench, *per_seed, *scope, records.as_deref(), *prng_seed, out.as_deref())
        }
        Command::AuditTally { sample, labels, json } => tally(sample, labels, *json),
        Command::Verify { file, proof } => verify(cli, file, *proof),
        Command::ExportBench { out } => export(cli, out.as_deref()),
        Command::Eval { bench, out } => eval(cli, bench.as_deref(), out.as_deref()),
        Command::Discover => pipeline_cmd(cli, None),
        Command::Judge => pipeline_cmd(cli, Some(StageKind::Judge)),
        Command::Formalize => pipeline_cmd(cli, Some(StageKind::Formalize)),
        Command::Prove => pipeline_cmd(cli, Some(StageKind::Prove)),
        Command::Run => pipeline_cmd(cli, Some(StageKind::Discovery)),
    }
}

fn load_config(cli: &Cli) -> CliResult<LoadedConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("no configuration given (use --config or FOLKLORE_CONFIG)".into()))?;
    Ok(config::load(path)?)
}

fn workdir(cli: &Cli, cfg: Option<&LoadedConfig>) -> CliResult<PathBuf> {
    if let Some(w) = &cli.workdir {
        return Ok(w.clone());
    }
    cfg.and_then(|c| c.config.workdir.as_ref().map(|w| c.resolve(w)))
        .ok_or_else(|| CliError::Usage("no workdir (set `workdir` in the config or pass --workdir)".into()))
}

fn open_log(dir: &Path, name: &str) -> CliResult<Arc<JsonlLog>> {
    let path = dir.join(name);
    JsonlLog::open(&path).map(Arc::new).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

fn checker(cli: &Cli, cfg: Option<&LoadedConfig>, logs: Option<&Path>) -> CliResult<LeanChecker> {
    if let Some(path) = &cli.mock_lean {
        let script = VerifierScript::load(path).map_err(CliError::Usage)?;
        let timeout = cfg.and_then(|c| c.config.lean_server.as_ref()).map_or(DEFAULT_TIMEOUT_S, |l| l.timeout_s);
        return Ok(LeanChecker::new(Arc::new(ScriptedVerifier::new(script)), timeout));
    }
    let server = cfg
        .and_then(|c| c.config.lean_server.as_ref())
        .ok_or_else(|| CliError::Usage("config error: lean_server: required unless --mock-lean is given".into()))?;
    let mut v = HttpVerifier::new(server);
    if let Some(dir) = logs {
        v = v.with_log(open_log(dir, "lean.jsonl")?);
    }
    let v: Arc<dyn Verifier> = Arc::new(v);
    Ok(LeanChecker::new(v, server.timeout_s))
}

/// One shared client per endpoint name; under `--mock-llm` every name maps
/// to the same scripted backend.
struct Backends<'a> {
    cfg: &'a LoadedConfig,
    mock: Option<Arc<dyn ChatBackend>>,
    log: Option<Arc<JsonlLog>>,
    made: BTreeMap<String, Arc<dyn ChatBackend>>,
}

impl<'a> Backends<'a> {
    fn new(cli: &Cli, cfg: &'a LoadedConfig, log: Option<Arc<JsonlLog>>) -> CliResult<Self> {
        let mock = match &cli.mock_llm {
            Some(path) => {
                let script = Script::load(path).map_err(CliError::Usage)?;
                Some(Arc::new(ScriptedBackend::new(script)) as Arc<dyn ChatBackend>)
            }
            None => None,
        };
        Ok(Backends { cfg, mock, log, made: BTreeMap::new() })
    }

    fn get(&mut self, name: &str, stage_concurrency: usize) -> CliResult<Arc<dyn ChatBackend>> {
        if let Some(m) = &self.mock {
            return Ok(m.clone());
        }
        if let Some(b) = self.made.get(name) {
            return Ok(b.clone());
        }
        let spec = self
            .cfg
            .config
            .llm_endpoints
            .get(name)
            .ok_or_else(|| ConfigError::new("llm_endpoints", format!("unknown endpoint {name:?}")))?;
        let endpoint = spec.endpoint();
        let secret = match &endpoint.auth_env_var {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ConfigError::new(
                    format!("llm_endpoints.{name}.auth_env_var"),
                    format!("environment variable {var} is not set"),
                )
            })?),
            None => None,
        };
        let mut b = HttpChatBackend::new(&endpoint, secret, spec.max_concurrent.unwrap_or(stage_concurrency));
        if let Some(log) = &self.log {
            b = b.with_log(log.clone());
        }
        let b: Arc<dyn ChatBackend> = Arc::new(b);
        self.made.insert(name.to_string(), b.clone());
        Ok(b)
    }

    fn agent(&mut self, endpoint: &str, cfg: StageConfig, prompts: &Prompts) -> CliResult<Agent> {
        let backend = self.get(endpoint, cfg.concurrency)?;
        Ok(Agent { template: prompts.get(cfg.stage).clone(), cfg, backend })
    }
}

fn prompts(cfg: &LoadedConfig) -> CliResult<Prompts> {
    match &cfg.config.prompt_dir {
        Some(dir) => Ok(Prompts::load_dir(&cfg.resolve(dir))?),
        None => Ok(Prompts::default()),
    }
}

/// First Ctrl-C asks workers to stop after their current item; a second one
/// exits at once.
fn install_interrupt(cancel: Arc<AtomicBool>) {
    let presses = AtomicUsize::new(0);
    let _ = ctrlc::set_handler(move || {
        if presses.fetch_add(1, Ordering::SeqCst) > 0 {
            std::process::exit(130);
        }
        eprintln!("interrupt: finishing in-flight items (press again to exit now)");
        cancel.store(true, Ordering::SeqCst);
    });
}

fn overrides(cli: &Cli) -> StageSet<Option<usize>> {
    StageSet {
        discovery: cli.concurrency_discovery,
        judge: cli.concurrency_judge,
        formalize: cli.concurrency_formalize,
        prove: cli.concurrency_prove,
    }
}

/// `first`: `None` for discovery only, `Some(Discovery)` for a full run,
/// otherwise the single queue stage to drain.
fn pipeline_cmd(cli: &Cli, first: Option<StageKind>) -> CliResult<ExitCode> {
    let cfg = load_config(cli)?;
    if cfg.config.llm_endpoints.is_empty() {
        return Err(ConfigError::new("llm_endpoints", "at least one endpoint is required").into());
    }
    for (flag, v) in [
        ("--concurrency-discovery", cli.concurrency_discovery),
        ("--concurrency-judge", cli.concurrency_judge),
        ("--concurrency-formalize", cli.concurrency_formalize),
        ("--concurrency-prove", cli.concurrency_prove),
    ] {
        if v == Some(0) {
            return Err(CliError::Usage(format!("{flag} must be positive")));
        }
    }
    let stages = cfg.stage_configs(&overrides(cli))?;
    let seeds = if matches!(first, None | Some(StageKind::Discovery)) { cfg.seeds()? } else { Vec::new() };
    let prompts = prompts(&cfg)?;
    let root = workdir(cli, Some(&cfg))?;
    let layout = ArtifactLayout::new(&root);
    let logs = layout.logs_dir();
    let checker = checker(cli, Some(&cfg), Some(&logs))?;
    let mut backends = Backends::new(cli, &cfg, Some(open_log(&logs, "llm.jsonl")?))?;
    let agents = StageSet {
        discovery: backends.agent(&stages.discovery.0, stages.discovery.1.clone(), &prompts)?,
        judge: backends.agent(&stages.judge.0, stages.judge.1.clone(), &prompts)?,
        formalize: backends.agent(&stages.formalize.0, stages.formalize.1.clone(), &prompts)?,
        prove: backends.agent(&stages.prove.0, stages.prove.1.clone(), &prompts)?,
    };
    let faults = cli.crash_after_ops.map_or_else(FaultPlan::never, FaultPlan::crash_after);
    let store = Arc::new(Store::open_with(&root, Arc::new(SystemClock), Arc::new(faults))?);
    let toolchain = cfg.config.lean_server.as_ref().map_or_else(|| "unknown".to_string(), |l| l.toolchain.clone());
    store.write_run_meta(&RunMeta {
        config_hash: cfg.hash.clone(),
        toolchain,
        prng: bench::AUDIT_PRNG.into(),
        prng_seed: cfg.config.prng_seed,
        t_repair: cfg.config.t_repair,
        k_repairs: cfg.config.k_repairs,
        started_at: chrono::Utc::now(),
        previous_config_hashes: Vec::new(),
    })?;

    let mut run = RunContext::new(checker);
    run.log = Some(open_log(&logs, "pipeline.jsonl")?);
    install_interrupt(run.cancel.clone());
    let mut pipeline = Pipeline::new(store.clone(), agents, run);
    pipeline.lease_s = cfg.config.lease_s;

    let summary = match first {
        Some(StageKind::Discovery) => pipeline.run_all(&seeds)?,
        None => {
            store.reclaim_orphans()?;
            let n = pipeline.run_discovery_all(&seeds)?;
            pipeline.finish_summary(RunSummary { seeds_processed: n, ..Default::default() })?
        }
        Some(kind) => {
            store.reclaim_orphans()?;
            let r = pipeline.run_stage(kind)?;
            pipeline.finish_summary(RunSummary {
                processed: vec![(kind, r.processed)],
                stale_acks: r.stale_acks,
                ..Default::default()
            })?
        }
    };
    print_summary(&summary);
    Ok(if summary.outage.is_some() || summary.interrupted { ExitCode::from(EXIT_FAILURE) } else { ExitCode::SUCCESS })
}

fn print_summary(s: &RunSummary) {
    if s.seeds_processed > 0 || s.discovery_failures > 0 {
        println!("discovery: {} seeds processed, {} failed", s.seeds_processed, s.discovery_failures);
    }
    for (kind, n) in &s.processed {
        println!("{kind}: {n} candidates processed");
    }
    if s.stale_acks > 0 {
        println!("stale acknowledgements dropped: {}", s.stale_acks);
    }
    print!("{}", bench::render_funnel_table(&bench::funnel_stats(&s.funnel)));
    for f in &s.funnel {
        println!(
            "{}: trivial {}, proved {}, unproved {}, pending {}",
            f.domain, f.trivial, f.proved, f.unproved, f.pending
        );
    }
    if let Some(reason) = &s.outage {
        eprintln!("stopped: backend outage ({reason}); rerun to resume");
    } else if s.interrupted {
        eprintln!("stopped: interrupted; rerun to resume");
    }
}

fn export(cli: &Cli, out: Option<&Path>) -> CliResult<ExitCode> {
    let cfg = load_config(cli)?;
    let root = workdir(cli, Some(&cfg))?;
    let layout = ArtifactLayout::new(&root);
    let checker = checker(cli, Some(&cfg), Some(&layout.logs_dir()))?;
    let injection = if cfg.config.llm_endpoints.is_empty() {
        Vec::new()
    } else {
        cfg.stage_config(StageKind::Formalize, None)?.1.injection_preamble
    };
    let out = out.map_or_else(|| root.join("bench.jsonl"), Path::to_path_buf);
    let report = bench::export_bench(&layout, &checker, &injection, &out)?;
    println!("wrote {} instances to {}", report.written, out.display());
    for (id, why) in &report.skipped {
        eprintln!("skipped {id}: {why}");
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(cli: &Cli, bench_path: Option<&Path>, out: Option<&Path>) -> CliResult<ExitCode> {
    let cfg = load_config(cli)?;
    if cfg.config.eval_models.is_empty() {
        return Err(ConfigError::new("eval_models", "no models to evaluate").into());
    }
    let root = workdir(cli, Some(&cfg))?;
    let layout = ArtifactLayout::new(&root);
    let bench_path = bench_path.map_or_else(|| root.join("bench.jsonl"), Path::to_path_buf);
    let instances = bench::load_bench(&bench_path)?;
    let out = out.map_or_else(|| root.join("eval"), Path::to_path_buf);
    let logs = layout.logs_dir();
    let mut run = RunContext::new(checker(cli, Some(&cfg), Some(&logs))?);
    run.log = Some(open_log(&logs, "pipeline.jsonl")?);
    install_interrupt(run.cancel.clone());
    let prompts = prompts(&cfg)?;
    let mut backends = Backends::new(cli, &cfg, Some(open_log(&logs, "llm.jsonl")?))?;
    let mut records: Vec<EvalRecord> = Vec::new();
    for (i, m) in cfg.config.eval_models.iter().enumerate() {
        let (endpoint, mut stage) = cfg.eval_config(i)?;
        if let Some(c) = cli.concurrency_prove {
            stage.concurrency = c.max(1);
        }
        let agent = backends.agent(&endpoint, stage, &prompts)?;
        match bench::evaluate_model(&instances, &m.name, &agent, &run, &out.join("records")) {
            Ok(r) => records.extend(r),
            Err(bench::BenchError::Pipeline(PipelineError::Outage(reason))) => {
                eprintln!("stopped: backend outage ({reason}); rerun to resume");
                return Ok(ExitCode::from(EXIT_FAILURE));
            }
            Err(e) => return Err(e.into()),
        }
        if run.cancel.load(Ordering::SeqCst) {
            eprintln!("stopped: interrupted; rerun to resume");
            return Ok(ExitCode::from(EXIT_FAILURE));
        }
    }
    let funnel = if layout.stage_dir(folklore_core::model::Stage::Raw).is_dir() {
        bench::funnel_stats(&bench::funnel_counts(&layout)?)
    } else {
        Vec::new()
    };
    let report = bench::build_report(&records, &instances, cfg.config.k_repairs, funnel)?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    let text = bench::render_report_text(&report);
    write_out(&out.join("records.jsonl"), lines.as_bytes())?;
    write_out(
        &out.join("report.json"),
        (serde_json::to_string_pretty(&report).expect("report serializes") + "\n").as_bytes(),
    )?;
    write_out(&out.join("report.txt"), text.as_bytes())?;
    for s in Scope::all() {
        let name = format!("success_{}.svg", s.label().to_ascii_lowercase());
        write_out(&out.join("plots").join(name), bench::render_svg(&report, s).as_bytes())?;
    }
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn write_out(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Failure(format!("{}: {e}", parent.display())))?;
    }
    write_atomic(path, bytes).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn stats(cli: &Cli, counts: Option<&Path>, json: bool) -> CliResult<ExitCode> {
    let counts: Vec<FunnelCounts> = match counts {
        Some(p) => read_json(p)?,
        None => {
            let cfg = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
            let root = workdir(cli, cfg.as_ref())?;
            let layout = ArtifactLayout::new(&root);
            if !layout.stage_dir(folklore_core::model::Stage::Raw).is_dir() {
                return Err(CliError::Usage(format!("{} is not a pipeline workdir", root.display())));
            }
            bench::funnel_counts(&layout)?
        }
    };
    let rows = bench::funnel_stats(&counts);
    if json {
        println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"));
    } else {
        print!("{}", bench::render_funnel_table(&rows));
    }
    Ok(ExitCode::SUCCESS)
}

fn audit(
    cli: &Cli,
    bench_path: &Path,
    per_seed: usize,
    scope: AuditScopeArg,
    records: Option<&Path>,
    prng_seed: Option<u64>,
    out: Option<&Path>,
) -> CliResult<ExitCode> {
    let instances: Vec<BenchInstance> = bench::load_bench(bench_path)?;
    let scope = match scope {
        AuditScopeArg::Unproved => AuditScope::Unproved,
        AuditScopeArg::All => AuditScope::All,
    };
    if scope == AuditScope::Unproved && records.is_none() {
        return Err(CliError::Usage("--scope unproved needs --records".into()));
    }
    let solved: HashSet<String> = match records {
        Some(p) => bench::load_records(p)?
            .into_iter()
            .filter(|r| matches!(r.outcome, bench::Outcome::SolvedAt { .. }))
            .map(|r| r.instance_id)
            .collect(),
        None => HashSet::new(),
    };
    let seed = match prng_seed {
        Some(s) => s,
        None => match &cli.config {
            Some(_) => load_config(cli)?.config.prng_seed,
            None => 0,
        },
    };
    let sample = bench::audit_sample(&instances, &solved, per_seed, scope, seed)?;
    for s in &sample.shortfalls {
        eprintln!("seed {}: only {} eligible of {} requested", s.seed_id, s.eligible, s.requested);
    }
    let text = serde_json::to_string_pretty(&sample).expect("sample serializes") + "\n";
    match out {
        Some(p) => {
            write_out(p, text.as_bytes())?;
            println!("sampled {} instances into {}", sample.instances.len(), p.display());
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn tally(sample: &Path, labels: &Path, json: bool) -> CliResult<ExitCode> {
    let sample: AuditSample = read_json(sample)?;
    let text = std::fs::read_to_string(labels).map_err(|e| CliError::Usage(format!("{}: {e}", labels.display())))?;
    let labels: Vec<AuditLabel> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("{}: {e}", labels.display())))?;
    let rows = bench::audit_tally(&sample.instances, &labels);
    if json {
        println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"));
    } else {
        print!("{}", bench::render_tally(&rows));
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(cli: &Cli, file: &Path, proof: bool) -> CliResult<ExitCode> {
    let cfg = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
    let checker = checker(cli, cfg.as_ref(), None)?;
    let code = std::fs::read_to_string(file).map_err(|e| CliError::Usage(format!("{}: {e}", file.display())))?;
    if code.trim().is_empty() {
        return Err(CliError::Usage(format!("{} is empty", file.display())));
    }
    let (result, accepted) = if proof { checker.check_proof(&code) } else { checker.check_statement(&code) };
    if result.is_transport_failure() {
        return Err(CliError::Failure("Lean server unreachable".into()));
    }
    for d in &result.diagnostics {
        println!("{}:{}:{}: {}: {}", file.display(), d.line.unwrap_or(0), d.col.unwrap_or(0), d.severity, d.message);
    }
    println!("{}", if accepted { "accepted" } else { "rejected" });
    Ok(if accepted { ExitCode::SUCCESS } else { ExitCode::from(EXIT_FAILURE) })
}
