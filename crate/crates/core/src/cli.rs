//! Command-line surface: `simulate`, `run`, `report`, `resubmit`, `example`.
//!
//! Exit codes depend only on the outcome class: 0 success, 1 execution
//! problem (engine error, unresolved task failures, unusable log), 2 bad
//! configuration or input.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::engine::{
    self, detail_field, EngineError, EventKind, EventLog, FailureModel, Fault, RuntimeDist,
    RuntimeModel, SimConfig,
};
use crate::generate::{generate_example, ExampleParams};
use crate::metrics::{self, Format, RateSummary};
use crate::platform::{max_walltime_for, PlatformConfig};
use crate::pst::{validate_workflow, WorkflowSpec};
use crate::resilience::{self, Allocation, RetryOutcome};

#[derive(Debug, Parser)]
#[command(
    name = "ensemblekit",
    version,
    about = "Run and analyze ensemble workflows"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a workflow on the simulated cluster backend.
    Simulate(SimulateArgs),
    /// Run a workflow as local subprocesses.
    Run(RunArgs),
    /// Compute utilization, concurrency and rate exports from an event log.
    Report(ReportArgs),
    /// Turn the failures in an event log into a retry workflow.
    Resubmit(ResubmitArgs),
    /// Write a generated example workflow.
    Example(ExampleArgs),
}

#[derive(Debug, Args, Clone)]
pub struct WorkflowSource {
    /// Workflow JSON (one pipeline object or an array of them).
    #[arg(long, conflicts_with = "example")]
    pub workflow: Option<PathBuf>,
    /// Generate the workflow instead: additivefoam, exaca, exaconstit, uq-stage1, toy.
    #[arg(long)]
    pub example: Option<String>,
    #[command(flatten)]
    pub shape: ShapeArgs,
}

#[derive(Debug, Args, Clone)]
pub struct ShapeArgs {
    /// Ensemble size (exaconstit) or tasks per stage (toy).
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Melt-pool cases.
    #[arg(long)]
    pub cases: Option<usize>,
    /// Microstructure UQ parameter sets.
    #[arg(long)]
    pub params: Option<usize>,
    /// Stage count (toy).
    #[arg(long)]
    pub stages: Option<usize>,
    /// Seconds each mock payload sleeps.
    #[arg(long)]
    pub mock_sleep: Option<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct PlatformArgs {
    /// Platform config file or profile name.
    #[arg(long)]
    pub platform: Option<String>,
    /// Profile name (built-in or from $ENSEMBLEKIT_PROFILE_DIR).
    #[arg(long, conflicts_with = "platform")]
    pub profile: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Sim,
    Local,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: WorkflowSource,
    #[command(flatten)]
    pub platform: PlatformArgs,
    #[arg(long, value_enum, default_value = "sim")]
    pub backend: Backend,
    /// Allocation size; defaults to the whole machine.
    #[arg(long)]
    pub nodes: Option<u32>,
    /// Job walltime in seconds; defaults to the policy maximum.
    #[arg(long)]
    pub walltime: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub max_attempts: u32,
    /// Launches per second.
    #[arg(long)]
    pub launch_rate_cap: Option<f64>,
    /// Seconds between placement and launch.
    #[arg(long, default_value_t = 0.0)]
    pub launch_delay: f64,
    /// Task runtimes: `expected`, `fixed:SECONDS` or `uniform:LO:HI`.
    #[arg(long, default_value = "expected")]
    pub runtime: String,
    /// Injected fault: `persistent:NODE:TS`, `transient:NODE:TS` or `task:UID:FRACTION`.
    #[arg(long = "fault")]
    pub faults: Vec<String>,
    /// Resubmit walltime-canceled tasks too.
    #[arg(long)]
    pub retry_canceled: bool,
    /// Stop placing tasks on nodes after a persistent fault.
    #[arg(long)]
    pub quarantine: bool,
    #[arg(long, default_value = "ensemblekit-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: WorkflowSource,
    #[command(flatten)]
    pub platform: PlatformArgs,
    #[arg(long, value_enum, default_value = "local")]
    pub backend: Backend,
    /// Concurrent subprocess limit; defaults to the host core count.
    #[arg(long)]
    pub max_parallel: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub max_attempts: u32,
    #[arg(long, default_value = "ensemblekit-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Event log (JSON lines).
    pub log: PathBuf,
    #[command(flatten)]
    pub platform: PlatformArgs,
    /// Allocation size; defaults to the value recorded in JOB_START.
    #[arg(long)]
    pub nodes: Option<u32>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Debug, Args)]
pub struct ResubmitArgs {
    /// Event log of the finished job.
    pub log: PathBuf,
    /// The workflow that produced the log.
    #[command(flatten)]
    pub source: WorkflowSource,
    #[command(flatten)]
    pub platform: PlatformArgs,
    /// Original allocation; defaults to the value recorded in JOB_START.
    #[arg(long)]
    pub nodes: Option<u32>,
    #[arg(long)]
    pub retry_canceled: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output workflow path; a `.plan.json` sidecar is written next to it.
    #[arg(long, default_value = "resubmit.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExampleArgs {
    #[arg(long)]
    pub example: String,
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "workflow.json")]
    pub out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Execution(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Execution(_) => 1,
        }
    }
}

fn config(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn execution(e: impl std::fmt::Display) -> Failure {
    Failure::Execution(e.to_string())
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        if e.is_config() {
            config(e)
        } else {
            execution(e)
        }
    }
}

impl From<resilience::ResilienceError> for Failure {
    fn from(e: resilience::ResilienceError) -> Self {
        match e {
            resilience::ResilienceError::Engine(e) => e.into(),
            resilience::ResilienceError::Platform(e) => config(e),
            resilience::ResilienceError::NoAttempts => config(e),
            other => execution(other),
        }
    }
}

/// Parses `std::env::args` and runs; returns the process exit code.
pub fn main() -> i32 {
    run(std::env::args_os())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Resubmit(a) => cmd_resubmit(&a),
        Command::Example(a) => cmd_example(&a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("error: {m}"),
                Failure::Execution(m) => eprintln!("error: {m}"),
            }
            f.code()
        }
    }
}

fn example_params(shape: &ShapeArgs, seed: u64) -> ExampleParams {
    let d = ExampleParams::default();
    ExampleParams {
        tasks: shape.tasks.unwrap_or(d.tasks),
        cases: shape.cases.unwrap_or(d.cases),
        params: shape.params.unwrap_or(d.params),
        stages: shape.stages.unwrap_or(d.stages),
        mock_sleep_s: shape.mock_sleep.unwrap_or(d.mock_sleep_s),
        seed,
        ..d
    }
}

fn load_workflows(src: &WorkflowSource, seed: u64) -> Result<Vec<WorkflowSpec>, Failure> {
    let specs = match (&src.workflow, &src.example) {
        (Some(path), _) => {
            if !path.is_file() {
                return Err(config(format!(
                    "workflow file {} not found",
                    path.display()
                )));
            }
            WorkflowSpec::load(path).map_err(config)?
        }
        (None, Some(shape)) => {
            vec![generate_example(shape, &example_params(&src.shape, seed)).map_err(config)?]
        }
        (None, None) => return Err(config("one of --workflow or --example is required")),
    };
    let problems: Vec<String> = specs
        .iter()
        .flat_map(validate_workflow)
        .map(|v| v.0)
        .collect();
    if !problems.is_empty() {
        return Err(config(format!("invalid workflow: {}", problems.join("; "))));
    }
    Ok(specs)
}

fn load_platform(args: &PlatformArgs, default: &str) -> Result<PlatformConfig, Failure> {
    match (&args.platform, &args.profile) {
        (Some(p), _) => PlatformConfig::resolve(p),
        (None, Some(name)) => PlatformConfig::profile(name),
        (None, None) => PlatformConfig::profile(default),
    }
    .map_err(config)
}

fn parse_runtime(spec: &str, seed: u64) -> Result<RuntimeModel, Failure> {
    let parts: Vec<&str> = spec.split(':').collect();
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| config(format!("bad runtime value {s}")))
    };
    let default = match parts.as_slice() {
        ["expected"] => RuntimeDist::FromExpected,
        ["fixed", s] => RuntimeDist::Fixed { seconds: num(s)? },
        ["uniform", lo, hi] => RuntimeDist::Uniform {
            lo_s: num(lo)?,
            hi_s: num(hi)?,
        },
        _ => return Err(config(format!("bad --runtime {spec}"))),
    };
    Ok(RuntimeModel {
        default,
        classes: Default::default(),
        seed,
    })
}

fn parse_fault(spec: &str) -> Result<Fault, Failure> {
    let bad = || config(format!("bad --fault {spec}"));
    let parts: Vec<&str> = spec.splitn(3, ':').collect();
    match parts.as_slice() {
        [kind @ ("persistent" | "transient"), node, ts] => {
            let node_id = node.parse().map_err(|_| bad())?;
            let at_ts = ts.parse().map_err(|_| bad())?;
            Ok(if *kind == "persistent" {
                Fault::PersistentNode { node_id, at_ts }
            } else {
                Fault::TransientNode { node_id, at_ts }
            })
        }
        ["task", rest @ ..] if rest.len() == 2 => {
            // uid may itself contain ':'; the fraction is after the last one.
            let joined = rest.join(":");
            let (uid, frac) = joined.rsplit_once(':').ok_or_else(bad)?;
            Ok(Fault::TaskFault {
                uid: uid.to_string(),
                at_fraction: frac.parse().map_err(|_| bad())?,
            })
        }
        _ => Err(bad()),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| execution(format!("{}: {e}", dir.display())))
}

fn log_path(out: &Path, attempt: usize) -> PathBuf {
    out.join(format!("attempt-{attempt}.events.jsonl"))
}

/// Persists every log and plan of a retry chain.
fn write_outcome(out: &Path, outcome: &RetryOutcome) -> Result<(), Failure> {
    for (i, log) in outcome.logs.iter().enumerate() {
        log.write(&log_path(out, i + 1)).map_err(execution)?;
    }
    for plan in &outcome.plans {
        let parent = log_path(out, plan.attempt as usize - 1);
        plan.save(
            &out.join(format!("attempt-{}.workflow.json", plan.attempt)),
            &out.join(format!("attempt-{}.plan.json", plan.attempt)),
            &parent.display().to_string(),
        )
        .map_err(execution)?;
    }
    Ok(())
}

fn counts(log: &EventLog) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for e in log.terminal_events() {
        match e.kind {
            EventKind::TaskDone => c.0 += 1,
            EventKind::TaskFailed => c.1 += 1,
            _ => c.2 += 1,
        }
    }
    c
}

fn summarize(outcome: &RetryOutcome, platform: &PlatformConfig, nodes: &[u32]) -> i32 {
    let mut total_done = 0;
    for (i, log) in outcome.logs.iter().enumerate() {
        let (done, failed, canceled) = counts(log);
        total_done += done;
        let util = metrics::compute_utilization(log, platform, nodes[i])
            .map(|s| format!("{:.4}", s.nodes.utilization_fraction))
            .unwrap_or_else(|_| "n/a".into());
        println!(
            "attempt={} nodes={} done={done} failed={failed} canceled={canceled} makespan={:.1}s utilization={util}",
            i + 1,
            nodes[i],
            log.job_end_ts().unwrap_or(0.0),
        );
    }
    println!(
        "summary: tasks done={total_done} unresolved={} attempts={}",
        outcome.unresolved.len(),
        outcome.logs.len()
    );
    if outcome.unresolved.is_empty() {
        0
    } else {
        for r in &outcome.unresolved {
            println!(
                "unresolved: {} (stage {}, {:?})",
                r.uid, r.stage_name, r.kind
            );
        }
        1
    }
}

fn cmd_simulate(a: &SimulateArgs) -> Result<i32, Failure> {
    if a.backend == Backend::Local {
        return Err(config(
            "simulate uses the sim backend; use `run` for local execution",
        ));
    }
    let specs = load_workflows(&a.source, a.seed)?;
    let platform = load_platform(&a.platform, "frontier-sim")?;
    let nodes = a.nodes.unwrap_or(platform.node_count);
    let walltime = match a.walltime {
        Some(w) => w,
        None => max_walltime_for(&platform.policy, nodes).map_err(config)?,
    };
    if a.max_attempts == 0 {
        return Err(config("--max-attempts must be ≥ 1"));
    }
    let mut cfg = SimConfig::new(nodes, walltime, parse_runtime(&a.runtime, a.seed)?);
    cfg.failures = FailureModel {
        faults: a
            .faults
            .iter()
            .map(|f| parse_fault(f))
            .collect::<Result<_, _>>()?,
        seed: a.seed,
    };
    cfg.launch_rate_cap = a.launch_rate_cap;
    cfg.launch_delay_s = a.launch_delay;
    cfg.quarantine_failed_nodes = a.quarantine;
    // Surface configuration problems before any output is written.
    engine::Simulation::new(&specs, &platform, &cfg)?;
    ensure_dir(&a.out)?;
    let outcome = resilience::retry_loop_simulated(
        &specs,
        &platform,
        &cfg,
        a.max_attempts,
        a.retry_canceled,
    )?;
    write_outcome(&a.out, &outcome)?;
    let mut alloc = vec![nodes];
    alloc.extend(outcome.plans.iter().map(|p| p.allocation.nodes));
    Ok(summarize(&outcome, &platform, &alloc))
}

fn cmd_run(a: &RunArgs) -> Result<i32, Failure> {
    if a.backend == Backend::Sim {
        return Err(config(
            "run uses the local backend; use `simulate` for the simulator",
        ));
    }
    let specs = load_workflows(&a.source, 0)?;
    let platform = load_platform(&a.platform, "local")?;
    let max_parallel = a
        .max_parallel
        .unwrap_or_else(|| platform.usable_cores() as usize)
        .max(1);
    if a.max_attempts == 0 {
        return Err(config("--max-attempts must be ≥ 1"));
    }
    ensure_dir(&a.out)?;
    let out = a.out.clone();
    let allocation = Allocation {
        nodes: 1,
        walltime_s: f64::INFINITY,
    };
    let outcome = resilience::retry_loop(
        &specs,
        &platform,
        allocation,
        a.max_attempts,
        false,
        |wfs, _, _| engine::run_local(wfs, &platform, max_parallel, &out),
    )?;
    write_outcome(&a.out, &outcome)?;
    let nodes = vec![1; outcome.logs.len()];
    Ok(summarize(&outcome, &platform, &nodes))
}

fn job_start_field<'a>(log: &'a EventLog, key: &str) -> Option<&'a str> {
    log.job_start().and_then(|e| detail_field(&e.detail, key))
}

fn log_platform(args: &PlatformArgs, log: &EventLog) -> Result<PlatformConfig, Failure> {
    if args.platform.is_some() || args.profile.is_some() {
        return load_platform(args, "");
    }
    let name = job_start_field(log, "platform")
        .ok_or_else(|| config("log does not name its platform; pass --platform"))?;
    PlatformConfig::profile(name).map_err(config)
}

fn log_nodes(explicit: Option<u32>, log: &EventLog) -> Result<u32, Failure> {
    explicit
        .or_else(|| job_start_field(log, "nodes").and_then(|v| v.parse().ok()))
        .ok_or_else(|| config("log does not record its allocation; pass --nodes"))
}

fn read_log(path: &Path) -> Result<EventLog, Failure> {
    if !path.is_file() {
        return Err(config(format!("log {} not found", path.display())));
    }
    EventLog::read(path).map_err(execution)
}

fn cmd_report(a: &ReportArgs) -> Result<i32, Failure> {
    let log = read_log(&a.log)?;
    if log.job_end_ts().is_none() {
        return Err(execution(metrics::MetricsError::IncompleteLog));
    }
    let platform = log_platform(&a.platform, &log)?;
    let nodes = log_nodes(a.nodes, &log)?;
    let stack = metrics::compute_utilization(&log, &platform, nodes).map_err(execution)?;
    let series = metrics::concurrency_series(&log).map_err(execution)?;
    let rates = match metrics::throughput(&log) {
        Ok(r) => r,
        Err(metrics::MetricsError::InsufficientData(_)) => RateSummary {
            scheduling_rate_tasks_per_s: None,
            launching_rate_tasks_per_s: None,
            ramp_start_s: 0.0,
            ramp_end_s: 0.0,
            scheduled_in_ramp: 0,
            launched_in_ramp: 0,
        },
        Err(e) => return Err(execution(e)),
    };
    ensure_dir(&a.out)?;
    let format: Format = a.format.into();
    let ext = format.extension();
    metrics::export(&stack, format, &a.out.join(format!("utilization.{ext}")))
        .map_err(execution)?;
    metrics::export(&series, format, &a.out.join(format!("concurrency.{ext}")))
        .map_err(execution)?;
    metrics::export(&rates, format, &a.out.join(format!("rates.{ext}"))).map_err(execution)?;
    let fmt_rate = |r: Option<f64>| r.map_or("n/a".to_string(), |v| format!("{v:.2}"));
    println!(
        "runtime={:.1}s ovh={:.1}s ttx={:.1}s node_utilization={:.4} core_utilization={:.4} gpu_utilization={:.4} peak_running={} scheduling_rate={} launching_rate={}",
        stack.job_runtime_s,
        stack.ovh_s,
        stack.ttx_s,
        stack.nodes.utilization_fraction,
        stack.cores.utilization_fraction,
        stack.gpus.utilization_fraction,
        series.max_running(),
        fmt_rate(rates.scheduling_rate_tasks_per_s),
        fmt_rate(rates.launching_rate_tasks_per_s),
    );
    Ok(0)
}

fn cmd_resubmit(a: &ResubmitArgs) -> Result<i32, Failure> {
    let log = read_log(&a.log)?;
    let specs = load_workflows(&a.source, a.seed)?;
    let platform = log_platform(&a.platform, &log)?;
    let nodes = log_nodes(a.nodes, &log)?;
    let attempt = job_start_field(&log, "attempt")
        .and_then(|v| v.parse::<u32>().ok())
        .unwrap_or(1);
    let mut records = Vec::new();
    for spec in &specs {
        records.extend(resilience::collect_failures(&log, spec, a.retry_canceled)?);
    }
    if records.is_empty() {
        println!("no failed tasks; nothing to resubmit");
        return Ok(0);
    }
    let plan = resilience::plan_resubmission(&records, &specs, &platform, nodes, attempt + 1)?;
    let sidecar = a.out.with_extension("plan.json");
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    plan.save(&a.out, &sidecar, &a.log.display().to_string())
        .map_err(execution)?;
    println!(
        "resubmit: {} tasks in {} stages, nodes={} walltime={}s -> {}",
        plan.task_uids().len(),
        plan.workflows.iter().map(|w| w.stages.len()).sum::<usize>(),
        plan.allocation.nodes,
        plan.allocation.walltime_s,
        a.out.display()
    );
    Ok(0)
}

fn cmd_example(a: &ExampleArgs) -> Result<i32, Failure> {
    let wf = generate_example(&a.example, &example_params(&a.shape, a.seed)).map_err(config)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    wf.save(&a.out).map_err(execution)?;
    println!(
        "{}: {} stages, {} tasks -> {}",
        wf.name,
        wf.stages.len(),
        wf.task_count(),
        a.out.display()
    );
    Ok(0)
}
