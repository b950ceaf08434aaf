//! Command-line entry point. Artifact paths go to stdout; logs and the
//! single-line JSON error go to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use futures::StreamExt;
use serde::Serialize;

use crate::backends::{BackendClient, BackendEndpoint, BackendError, SharedBudget};
use crate::cache::{resolve_cache_dir, ResponseCache};
use crate::digest::sha256_hex;
use crate::domain::{parse_records_jsonl, records_to_jsonl, to_canonical_json};
use crate::ingest::{load_dataset, sample_subset, write_dataset, DatasetManifest};
use crate::metrics::{
    adaptive_ece, calibration_table, fit_temperature, temperature_scale, CoverageDenominator,
    TemperatureGrid,
};
use crate::probe::{probe_stream, InstanceFailure, ProbeConfig, ProbeError, DEFAULT_K, DEFAULT_TOP_P};
use crate::report::{
    emit_calibration_table, emit_run_manifest, summarize, write_evaluation, BackendSummary,
    BudgetSummary, CacheSummary, FileDigest, RunManifest,
};
use crate::simbench::{make_world, spawn_server, Regime};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_BACKEND: u8 = 2;
pub const EXIT_BUDGET: u8 = 3;
pub const EXIT_DATA: u8 = 4;
/// Interrupted by Ctrl-C after writing partial outputs.
pub const EXIT_INTERRUPTED: u8 = 130;

#[derive(Debug, Parser)]
#[command(name = "consistency-probe", version, about = "Black-box selective prediction for VQA via rephrasing consistency")]
pub struct Cli {
    /// Log verbosity on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

// Parsed once per process, so the size spread is irrelevant.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Probe every dataset instance against the VQA and generation backends.
    Probe(ProbeArgs),
    /// Risk-coverage tables and consistency breakdowns from a records file.
    Evaluate(EvaluateArgs),
    /// Fit a temperature and emit the calibration table.
    Calibrate(CalibrateArgs),
    /// Write a simulated world as dataset files.
    Simulate(SimulateArgs),
    /// Serve a simulated world over the wire protocol.
    ServeSim(ServeSimArgs),
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub vqa_url: String,
    #[arg(long)]
    pub vqg_url: String,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: u32,
    #[arg(long, default_value_t = DEFAULT_TOP_P)]
    pub top_p: f64,
    /// Base seed; each instance uses seed XOR hash(instance_id).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Global cap on backend calls across both endpoints (unlimited if unset).
    #[arg(long)]
    pub max_calls: Option<u64>,
    /// Instances in flight, and per-endpoint request concurrency.
    #[arg(long, default_value_t = crate::backends::DEFAULT_PARALLELISM)]
    pub parallelism: usize,
    /// Response cache directory (no caching if unset; CONSISTENCY_PROBE_CACHE overrides).
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Output records file (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// Run manifest path [default: <out>.manifest.json].
    #[arg(long)]
    pub manifest_out: Option<PathBuf>,
    /// Stop at the first failed instance.
    #[arg(long)]
    pub fail_fast: bool,
    /// Probe a seeded random subset of this many instances.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub sample_seed: u64,
    #[arg(long, default_value = "vqa")]
    pub vqa_id: String,
    #[arg(long, default_value = "vqg")]
    pub vqg_id: String,
    #[arg(long, default_value_t = 30_000)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
    /// Requests per second per endpoint (unlimited if unset).
    #[arg(long)]
    pub rate_limit: Option<f64>,
    /// Bearer token passed to the VQA endpoint.
    #[arg(long, hide_default_value = true)]
    pub vqa_token: Option<String>,
    /// Bearer token passed to the generation endpoint.
    #[arg(long, hide_default_value = true)]
    pub vqg_token: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Risk levels in percent.
    #[arg(long, value_delimiter = ',', default_value = "10,15,20,30,40")]
    pub risk_levels: Vec<f64>,
    #[arg(long, default_value = "slice")]
    pub coverage_denominator: CoverageDenominator,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Temperature grid lo:hi:step.
    #[arg(long, default_value = "1:100:0.1")]
    pub grid: TemperatureGrid,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Output CSV; a JSON twin is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// in_distribution | ood | adversarial
    #[arg(long, default_value = "in_distribution")]
    pub regime: Regime,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeSimArgs {
    #[arg(long, default_value = "in_distribution")]
    pub regime: Regime,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Port to bind on 127.0.0.1 (0 picks a free port).
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// World size; instances do not depend on it, so any n covering the
    /// dataset serves identical answers.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
}

/// A failure with its exit code and machine-readable kind.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(code: u8, kind: &'static str, message: impl ToString) -> Self {
        Self {
            code,
            kind,
            message: message.to_string(),
        }
    }

    fn data(message: impl ToString) -> Self {
        Self::new(EXIT_DATA, "data", message)
    }

    fn usage(message: impl ToString) -> Self {
        Self::new(EXIT_USAGE, "usage", message)
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::data(format!("{}: {e}", path.display()))
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            exit_code: u8,
            kind: &'a str,
        }
        to_canonical_json(&Line {
            error: &self.message,
            exit_code: self.code,
            kind: self.kind,
        })
        .unwrap_or_else(|_| format!("{{\"error\":\"unserializable\",\"exit_code\":{}}}", self.code))
    }
}

fn from_backend(e: &BackendError) -> CliError {
    match e {
        BackendError::BudgetExhausted(b) => CliError::new(EXIT_BUDGET, "budget_exhausted", b),
        BackendError::InvalidRequest(m) => CliError::usage(m),
        BackendError::Cache(m) => CliError::data(format!("cache: {m}")),
        other => CliError::new(EXIT_BACKEND, "backend", other),
    }
}

fn from_probe(e: &ProbeError) -> CliError {
    match e {
        ProbeError::Backend(b) => from_backend(b),
        ProbeError::Partial(p) => match p.errors.first() {
            Some((_, b)) => {
                let mut err = from_backend(b);
                err.message = e.to_string();
                err
            }
            None => CliError::new(EXIT_BACKEND, "backend", e),
        },
        ProbeError::Config(m) => CliError::usage(m),
        ProbeError::NoInstances | ProbeError::InvalidInstance { .. } | ProbeError::Metrics(_) => {
            CliError::data(e)
        }
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", CliError::usage(first.trim_start_matches("error: ")).to_json_line());
            return ExitCode::from(EXIT_USAGE);
        }
    };
    init_logging(cli.verbose);
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}", CliError::new(EXIT_BACKEND, "runtime", e).to_json_line());
            return ExitCode::from(EXIT_BACKEND);
        }
    };
    match runtime.block_on(run(cli.command)) {
        Ok(outputs) => {
            for p in outputs {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.code)
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_target(false)
        .try_init();
}

/// Runs one command; returns artifact paths to print.
pub async fn run(command: Command) -> Result<Vec<PathBuf>, CliError> {
    match command {
        Command::Probe(a) => probe(a).await,
        Command::Evaluate(a) => evaluate(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Simulate(a) => simulate(a),
        Command::ServeSim(a) => serve_sim(a).await,
    }
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, content).map_err(|e| CliError::io(path, e))
}

fn endpoint(url: &str, id: &str, a: &ProbeArgs, token: Option<&String>) -> BackendEndpoint {
    let mut ep = BackendEndpoint::new(url, id);
    ep.timeout_ms = a.timeout_ms;
    ep.max_retries = a.max_retries;
    ep.rate_limit = a.rate_limit;
    ep.parallelism = a.parallelism.max(1);
    ep.bearer_token = token.cloned();
    ep
}

async fn probe(a: ProbeArgs) -> Result<Vec<PathBuf>, CliError> {
    let config = ProbeConfig {
        k: a.k,
        top_p: a.top_p,
        base_seed: a.seed,
        parallelism: a.parallelism,
        fail_fast: a.fail_fast,
    };
    config.validate().map_err(CliError::usage)?;
    if a.vqa_id == a.vqg_id {
        return Err(CliError::usage("--vqa-id and --vqg-id must differ"));
    }

    let manifest = DatasetManifest::load(&a.dataset).map_err(CliError::data)?;
    let mut instances = load_dataset(&manifest).map_err(CliError::data)?;
    if let Some(n) = a.sample {
        instances = sample_subset(&instances, n, a.sample_seed).map_err(CliError::usage)?;
    }
    if instances.is_empty() {
        return Err(CliError::data(ProbeError::NoInstances));
    }
    let mut dataset_files = vec![FileDigest::of(&a.dataset).map_err(CliError::data)?];
    for f in manifest.files() {
        dataset_files.push(FileDigest::of(f).map_err(CliError::data)?);
    }

    let cache = match resolve_cache_dir(a.cache_dir.clone()) {
        Some(dir) => Some(Arc::new(ResponseCache::open(&dir).map_err(CliError::data)?)),
        None => None,
    };
    let budget = SharedBudget::new(a.max_calls);
    let vqa_ep = endpoint(&a.vqa_url, &a.vqa_id, &a, a.vqa_token.as_ref());
    let vqg_ep = endpoint(&a.vqg_url, &a.vqg_id, &a, a.vqg_token.as_ref());
    let backends = vec![BackendSummary::from(&vqa_ep), BackendSummary::from(&vqg_ep)];
    let vqa = BackendClient::http(vqa_ep, budget.clone(), cache.clone()).map_err(|e| from_backend(&e))?;
    let vqg = BackendClient::http(vqg_ep, budget.clone(), cache.clone()).map_err(|e| from_backend(&e))?;

    let mut records = Vec::with_capacity(instances.len());
    let mut failures = Vec::new();
    let mut fatal: Option<CliError> = None;
    let mut first_failure: Option<CliError> = None;
    {
        let mut stream = std::pin::pin!(probe_stream(&instances, &vqa, &vqg, &config));
        let mut interrupt = std::pin::pin!(tokio::signal::ctrl_c());
        loop {
            tokio::select! {
                biased;
                _ = &mut interrupt => {
                    fatal = Some(CliError::new(EXIT_INTERRUPTED, "interrupted", "interrupted; partial outputs written"));
                    break;
                }
                item = stream.next() => {
                    let Some((i, result)) = item else { break };
                    let e = match result {
                        Ok(r) => {
                            records.push(r);
                            continue;
                        }
                        Err(e) => e,
                    };
                    tracing::warn!(instance = %instances[i].instance_id, error = %e, "instance failed");
                    failures.push(InstanceFailure {
                        instance_id: instances[i].instance_id.clone(),
                        error: e.to_string(),
                    });
                    if e.is_fatal() || config.fail_fast {
                        fatal = Some(from_probe(&e));
                        break;
                    }
                    first_failure.get_or_insert_with(|| from_probe(&e));
                }
            }
        }
    }
    let stop = fatal.or_else(|| {
        first_failure.map(|mut e| {
            e.message = format!("{} instance(s) failed; first: {}", failures.len(), e.message);
            e
        })
    });

    let jsonl = records_to_jsonl(&records).map_err(CliError::data)?;
    write_file(&a.out, &jsonl)?;
    let partial = records.len() < instances.len();
    let run_manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        dataset_name: manifest.name.clone(),
        dataset_manifest: a.dataset.display().to_string(),
        dataset_files,
        instances: instances.len(),
        config,
        backends,
        budget: BudgetSummary::from(&budget.snapshot()),
        cache: CacheSummary {
            dir: cache.as_ref().and_then(|c| c.dir()).map(|d| d.display().to_string()),
            hits: cache.as_ref().map_or(0, |c| c.hits()),
            misses: cache.as_ref().map_or(0, |c| c.misses()),
        },
        records_path: a.out.display().to_string(),
        records_written: records.len(),
        records_sha256: Some(sha256_hex(jsonl.as_bytes())),
        failures,
        partial,
        stop_reason: stop.as_ref().map(|s| s.message.clone()),
    };
    let manifest_path = a.manifest_out.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".manifest.json");
        PathBuf::from(p)
    });
    write_file(&manifest_path, &emit_run_manifest(&run_manifest).map_err(CliError::data)?)?;
    tracing::info!(
        records = records.len(),
        calls = budget.total(),
        "probe finished"
    );
    match stop {
        Some(e) => {
            println!("{}", a.out.display());
            println!("{}", manifest_path.display());
            Err(e)
        }
        None => Ok(vec![a.out, manifest_path]),
    }
}

fn read_records(path: &Path) -> Result<Vec<crate::domain::EvaluationRecord>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let records = parse_records_jsonl(&text).map_err(|e| CliError::io(path, e))?;
    if records.is_empty() {
        return Err(CliError::data(format!("{}: no records", path.display())));
    }
    Ok(records)
}

fn evaluate(a: EvaluateArgs) -> Result<Vec<PathBuf>, CliError> {
    if a.risk_levels.is_empty() || a.risk_levels.iter().any(|r| !(0.0..=100.0).contains(r)) {
        return Err(CliError::usage("risk levels must be percentages in [0, 100]"));
    }
    let levels: Vec<f64> = a.risk_levels.iter().map(|r| r / 100.0).collect();
    let records = read_records(&a.records)?;
    let summary = summarize(&records, &levels, a.coverage_denominator).map_err(CliError::data)?;
    write_evaluation(&summary, &a.out_dir).map_err(CliError::data)
}

#[derive(Serialize)]
struct CalibrationJson<'a> {
    temperature: f64,
    grid: &'a TemperatureGrid,
    bins: usize,
    ece_raw: f64,
    ece_scaled: f64,
    table: &'a crate::metrics::CalibrationTable,
}

fn calibrate(a: CalibrateArgs) -> Result<Vec<PathBuf>, CliError> {
    let records = read_records(&a.records)?;
    let conf: Vec<f64> = records.iter().map(|r| r.confidence()).collect();
    let scores: Vec<f64> = records.iter().map(|r| r.soft_score.value()).collect();
    let tau = fit_temperature(&conf, &scores, &a.grid, a.bins).map_err(CliError::data)?;
    let table = calibration_table(&conf, &scores, tau, a.bins).map_err(CliError::data)?;
    let scaled: Vec<f64> = conf.iter().map(|&c| temperature_scale(c, tau)).collect();
    let json = CalibrationJson {
        temperature: tau.value(),
        grid: &a.grid,
        bins: a.bins,
        ece_raw: adaptive_ece(&conf, &scores, a.bins).map_err(CliError::data)?,
        ece_scaled: adaptive_ece(&scaled, &scores, a.bins).map_err(CliError::data)?,
        table: &table,
    };
    let csv = emit_calibration_table(&table).map_err(CliError::data)?;
    write_file(&a.out, &csv)?;
    let json_path = a.out.with_extension("json");
    let mut body = to_canonical_json(&json).map_err(CliError::data)?;
    body.push('\n');
    write_file(&json_path, &body)?;
    Ok(vec![a.out, json_path])
}

fn simulate(a: SimulateArgs) -> Result<Vec<PathBuf>, CliError> {
    let world = make_world(a.seed, a.n, a.regime).map_err(CliError::usage)?;
    let written = write_dataset(&world, &a.out_dir).map_err(CliError::data)?;
    Ok(vec![written.manifest])
}

async fn serve_sim(a: ServeSimArgs) -> Result<Vec<PathBuf>, CliError> {
    let world = Arc::new(make_world(a.seed, a.n, a.regime).map_err(CliError::usage)?);
    let addr = std::net::SocketAddr::from(([127, 0, 0, 1], a.port));
    let (local, handle) = spawn_server(world, addr)
        .await
        .map_err(|e| CliError::new(EXIT_BACKEND, "bind", format!("{addr}: {e}")))?;
    println!("http://{local}");
    tracing::info!(%local, regime = %a.regime, seed = a.seed, "serving simulated backends");
    tokio::select! {
        r = handle => match r {
            Ok(Ok(())) => Ok(Vec::new()),
            Ok(Err(e)) => Err(CliError::new(EXIT_BACKEND, "server", e)),
            Err(e) => Err(CliError::new(EXIT_BACKEND, "server", e)),
        },
        _ = tokio::signal::ctrl_c() => Ok(Vec::new()),
    }
}
