use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use medvar::data::{ingest_csv, summarize, ColumnMapping, MediatorKind, Summary};
use medvar::error::{Error, Result};
use medvar::model_spec::{Family, HospitalEffects};
use medvar::par::with_threads;
use medvar::pipeline::{run_decompose, MechanismArg, RunConfig};
use medvar::report::{render_table, Report, SCHEMA_VERSION};
use medvar::simulation::{
    draw_parameters, generate, oracle_truth, run_scenario, OracleResult, ScenarioFile, ScenarioSummary,
    SimulationConfig, TrueParameters,
};
use medvar::uncertainty::{RandomEffectResampling, DEFAULT_DRAWS};

#[derive(Debug, Parser)]
#[command(
    name = "medvar",
    version,
    about = "Mediation decomposition of between-hospital variance"
)]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the models and decompose the between-hospital variance.
    Decompose(DecomposeArgs),
    /// Run replications of a simulation scenario.
    Simulate(SimulateArgs),
    /// Evaluate the true components of a simulation scenario.
    Oracle(OracleArgs),
    /// Per-hospital counts, mediator rates and outcome means.
    Summarize(SummarizeArgs),
    /// Render a report as a text table.
    Table(TableArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Patient-level CSV with a header row.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "outcome")]
    outcome: String,
    #[arg(long, default_value = "mediator")]
    mediator: String,
    #[arg(long, default_value = "hospital")]
    hospital: String,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// binary or continuous.
    #[arg(long, default_value = "binary", value_parser = parse_kind)]
    mediator_kind: MediatorKind,
}

impl DataArgs {
    fn mapping(&self) -> ColumnMapping {
        ColumnMapping {
            outcome: self.outcome.clone(),
            mediator: self.mediator.clone(),
            hospital: self.hospital.clone(),
            covariates: self.covariates.clone(),
            mediator_kind: self.mediator_kind,
        }
    }
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// gaussian or binomial.
    #[arg(long, default_value = "gaussian", value_parser = parse_family)]
    outcome_family: Family,
    /// fixed or random hospital effects in the outcome model.
    #[arg(long, default_value = "fixed", value_parser = parse_effects)]
    outcome_effects: HospitalEffects,
    /// fixed or random hospital effects in the mediator model.
    #[arg(long, default_value = "fixed", value_parser = parse_effects)]
    mediator_effects: HospitalEffects,
    /// Hospital-by-mediator interaction in the outcome model.
    #[arg(long)]
    interaction: bool,
    /// Hospitals below this size get intercept-only assignment terms.
    #[arg(long, default_value_t = 40)]
    small_hospital_threshold: usize,
    /// observed, uniform or custom:<path>.
    #[arg(long, default_value = "observed", value_parser = parse_mechanism)]
    mechanism: MechanismArg,
    /// Posterior draws for credible intervals (0 = none).
    #[arg(long, default_value_t = DEFAULT_DRAWS)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Hold random intercepts at their modes in posterior draws.
    #[arg(long)]
    fix_modes: bool,
    /// Write the posterior draws as CSV.
    #[arg(long)]
    keep_draws: Option<PathBuf>,
    /// Write the per-patient potential-outcome grid as CSV.
    #[arg(long)]
    emit_grid: Option<PathBuf>,
    /// Report path (default stdout).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Also print the text table to stderr.
    #[arg(long)]
    table: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario JSON (config, replications, settings).
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the replication count.
    #[arg(long)]
    replications: Option<usize>,
    /// Per-replication estimates as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Summary JSON path (default stdout).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Also write the first replication's dataset as CSV.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    /// Scenario JSON, either a full scenario or a bare simulation config.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo draws over the covariates.
    #[arg(long, default_value_t = 1_000_000)]
    draws: usize,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SummarizeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TableArgs {
    /// Report JSON written by `decompose`.
    #[arg(long)]
    report: PathBuf,
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_effects(s: &str) -> std::result::Result<HospitalEffects, String> {
    match s {
        "fixed" => Ok(HospitalEffects::Fixed),
        "random" => Ok(HospitalEffects::Random),
        _ => Err(format!("expected fixed or random, got `{s}`")),
    }
}

fn parse_kind(s: &str) -> std::result::Result<MediatorKind, String> {
    match s {
        "binary" => Ok(MediatorKind::Binary),
        "continuous" => Ok(MediatorKind::Continuous),
        _ => Err(format!("expected binary or continuous, got `{s}`")),
    }
}

fn parse_mechanism(s: &str) -> std::result::Result<MechanismArg, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Serialize)]
struct Elapsed {
    total_seconds: f64,
}

#[derive(Serialize)]
struct SimulationReport<'a> {
    schema_version: u32,
    software_version: &'static str,
    seed: u64,
    summary: &'a ScenarioSummary,
    timing: Elapsed,
}

#[derive(Serialize)]
struct OracleReport<'a> {
    schema_version: u32,
    software_version: &'static str,
    seed: u64,
    config: &'a SimulationConfig,
    parameters: &'a TrueParameters,
    oracle: &'a OracleResult,
    timing: Elapsed,
}

#[derive(Serialize)]
struct SummaryReport<'a> {
    schema_version: u32,
    software_version: &'static str,
    seed: u64,
    n: usize,
    q: usize,
    rejected_rows: usize,
    summary: &'a Summary,
}

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn read_scenario(path: &Path) -> Result<ScenarioFile> {
    let text = read_text(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn decompose_cmd(a: DecomposeArgs) -> Result<()> {
    let mut cfg = RunConfig::new(a.data.input.clone(), a.data.mapping());
    cfg.outcome_family = a.outcome_family;
    cfg.outcome_effects = a.outcome_effects;
    cfg.mediator_effects = a.mediator_effects;
    cfg.interaction = a.interaction;
    cfg.small_hospital_threshold = a.small_hospital_threshold;
    cfg.mechanism = a.mechanism;
    cfg.bootstrap = a.bootstrap;
    cfg.seed = a.seed;
    cfg.level = a.level;
    if a.fix_modes {
        cfg.random_effects = RandomEffectResampling::Modes;
    }
    cfg.keep_draws = a.keep_draws;
    cfg.emit_grid = a.emit_grid;
    let report = run_decompose(&cfg)?;
    if a.table {
        eprint!("{}", render_table(&report));
    }
    write_output(a.output.as_deref(), &report.to_json()?)
}

fn simulate_cmd(a: SimulateArgs) -> Result<()> {
    let start = Instant::now();
    let mut scenario = read_scenario(&a.scenario)?;
    if let Some(seed) = a.seed {
        scenario.config.seed = seed;
    }
    let reps = a.replications.unwrap_or(scenario.replications);
    if let Some(path) = &a.dataset {
        let (ds, _) = generate(&scenario.config)?;
        ds.write_csv(create(path)?)?;
    }
    let out = run_scenario(&scenario.config, reps, &scenario.settings)?;
    if let Some(path) = &a.csv {
        out.write_csv(create(path)?)?;
    }
    let report = SimulationReport {
        schema_version: SCHEMA_VERSION,
        software_version: VERSION,
        seed: scenario.config.seed,
        summary: &out.summary,
        timing: Elapsed {
            total_seconds: start.elapsed().as_secs_f64(),
        },
    };
    write_output(a.output.as_deref(), &to_json(&report)?)
}

fn oracle_cmd(a: OracleArgs) -> Result<()> {
    let start = Instant::now();
    let text = read_text(&a.scenario)?;
    let mut config: SimulationConfig = match serde_json::from_str::<ScenarioFile>(&text) {
        Ok(s) => s.config,
        Err(_) => serde_json::from_str(&text)?,
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    let params = draw_parameters(&config, 0);
    let oracle = oracle_truth(&config, &params, a.draws)?;
    let report = OracleReport {
        schema_version: SCHEMA_VERSION,
        software_version: VERSION,
        seed: config.seed,
        config: &config,
        parameters: &params,
        oracle: &oracle,
        timing: Elapsed {
            total_seconds: start.elapsed().as_secs_f64(),
        },
    };
    write_output(a.output.as_deref(), &to_json(&report)?)
}

fn summarize_cmd(a: SummarizeArgs) -> Result<()> {
    let ingested = ingest_csv(&a.data.input, &a.data.mapping())?;
    let ds = &ingested.dataset;
    let summary = summarize(ds);
    let report = SummaryReport {
        schema_version: SCHEMA_VERSION,
        software_version: VERSION,
        seed: a.seed,
        n: ds.n(),
        q: ds.q(),
        rejected_rows: ingested.rejected_rows,
        summary: &summary,
    };
    write_output(a.output.as_deref(), &to_json(&report)?)
}

fn table_cmd(a: TableArgs) -> Result<()> {
    let report = Report::from_json(&read_text(&a.report)?)?;
    write_output(None, &render_table(&report))
}

#[derive(Serialize)]
struct ErrorMessage<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    info!("medvar {VERSION}");
    let threads = cli.threads;
    let result = with_threads(threads, move || match cli.command {
        Command::Decompose(a) => decompose_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Oracle(a) => oracle_cmd(a),
        Command::Summarize(a) => summarize_cmd(a),
        Command::Table(a) => table_cmd(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let msg = ErrorMessage {
                error: e.kind(),
                message: e.to_string(),
                exit_code: code,
            };
            eprintln!("{}", serde_json::to_string(&msg).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(code as u8)
        }
    }
}
