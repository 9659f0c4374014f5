//! `edgeloop`: runs the ball-and-beam scenarios from a TOML config.
//!
//! Exit codes: 0 success, 2 config error, 3 invariant breach or failed
//! check, 4 I/O error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use edgeloop::des::RngStream;
use edgeloop::net::{NetModel, ProfileTable};
use edgeloop::scenarios::{
    self, calibrate_remote_overhead, emit_csv, summarize, Column, RunOutput, ScenarioConfig, ScenarioError,
};
use edgeloop::stats::BoxStats;
use serde::Serialize;

use config::{ConfigError, RunConfig};

const OUTPUT_ENV: &str = "EDGELOOP_OUTPUT_DIR";
const DEFAULT_OUTPUT: &str = "edgeloop-out";
const CALIBRATION_SAMPLES: usize = 10_000;
const CALIBRATION_TOL: f64 = 0.05;

#[derive(Parser)]
#[command(name = "edgeloop", version, about = "Networked MPC ball-and-beam simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Overrides {
    /// MPC node (plant, edge, erdc, aws) or `all`.
    #[arg(long)]
    placement: Option<String>,
    /// Master seed; repeat or comma-separate for a sweep.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Dotted field override, e.g. `--set scenario.duration=60`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn pairs(&self) -> Result<Vec<(String, String)>, ConfigError> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Override(s.clone()))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(p) = &self.placement {
            out.push(("scenario.placement".into(), format!("\"{p}\"")));
        }
        if !self.seed.is_empty() {
            let list: Vec<String> = self.seed.iter().map(u64::to_string).collect();
            out.push(("seeds".into(), format!("[{}]", list.join(","))));
        }
        Ok(out)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured scenario for every seed and placement.
    Run {
        /// Config file or a run summary to reproduce; defaults apply without one.
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory (default: the config's `output_dir`, then
        /// $EDGELOOP_OUTPUT_DIR, then ./edgeloop-out).
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Check a config's invariants without simulating.
    Validate {
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare sampled link delays with the profile boxes, and optionally
    /// refit the remote per-hop overhead on one placement.
    Calibrate {
        /// Profile CSV (default: built-in table).
        #[arg(long)]
        profiles: Option<PathBuf>,
        /// Refit the remote overhead so this placement hits its latency target.
        #[arg(long)]
        fit_overhead: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Seconds per calibration run.
        #[arg(long, default_value_t = 600.0)]
        duration: f64,
        /// Write the refitted table here.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Write the built-in profile table as CSV.
    ExportProfiles {
        /// Destination file (stdout if omitted).
        path: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Breach(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(ConfigError::Io { .. }) | CliError::Io { .. } => 4,
            CliError::Config(_) => 2,
            CliError::Breach(_) => 3,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Io { path, source } => CliError::Io { path, source },
            e if e.is_invariant_breach() => CliError::Breach(e.to_string()),
            e => CliError::Config(ConfigError::Invalid(e.to_string())),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    summary_version: u32,
    code_version: &'static str,
    seed: u64,
    placement: &'a str,
    config_hash: String,
    records: usize,
    ticks: u64,
    solver_failures: usize,
    migrations: usize,
    off_beam_at_s: Option<f64>,
    csv: String,
    stats: std::collections::BTreeMap<&'static str, BoxStats>,
    /// Resolved config for this single run; `edgeloop run <summary>` replays it.
    config: &'a RunConfig,
}

fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
}

fn write_outputs(dir: &Path, single: &RunConfig, out: &RunOutput) -> Result<PathBuf, CliError> {
    let sc = &single.scenario;
    let kind = toml::Value::try_from(sc.kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
    let stem = format!("{kind}-{}-seed{}", sc.placement.to_ascii_lowercase(), sc.master_seed);
    let csv = dir.join(format!("{stem}.csv"));
    emit_csv(&out.records, &out.node_names, &csv)?;
    let mut stats = std::collections::BTreeMap::new();
    for col in Column::ALL {
        if let Ok(s) = summarize(&out.records, col) {
            stats.insert(col.name(), s);
        }
    }
    let summary = RunSummary {
        summary_version: 1,
        code_version: env!("CARGO_PKG_VERSION"),
        seed: sc.master_seed,
        placement: &sc.placement,
        config_hash: format!("{:016x}", single.hash()),
        records: out.records.len(),
        ticks: out.ticks,
        solver_failures: out.solver_failures(),
        migrations: out.migrations.len(),
        off_beam_at_s: out.off_beam_at.map(|t| t.as_secs_f64()),
        csv: csv.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        stats,
        config: single,
    };
    let text = toml::to_string(&summary).map_err(|e| CliError::Breach(format!("summary serialization: {e}")))?;
    let path = dir.join(format!("{stem}.summary.toml"));
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(csv)
}

fn cmd_run(config: Option<PathBuf>, overrides: &Overrides, out_flag: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = config::load(config.as_deref(), &overrides.pairs()?)?;
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(ConfigError::Invalid(violations.join("\n")).into());
    }
    let setup = cfg.setup()?;
    let dir = output_dir(out_flag, &cfg);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for placement in cfg.placements()? {
        for &seed in &cfg.seeds {
            let mut single = cfg.clone();
            single.seeds = vec![seed];
            single.output_dir = None;
            single.scenario = ScenarioConfig { placement: placement.clone(), master_seed: seed, ..cfg.scenario.clone() };
            let out = scenarios::run(&single.scenario, &setup)?;
            let csv = write_outputs(&dir, &single, &out)?;
            let lat = summarize(&out.records, Column::LatencyMs).map(|s| format!("{:.2} ms", s.median)).unwrap_or("-".into());
            println!(
                "{placement} seed {seed}: {} records, latency median {lat}, {} solver failures{} -> {}",
                out.records.len(),
                out.solver_failures(),
                out.off_beam_at.map_or(String::new(), |t| format!(", ball lost at {:.2} s", t.as_secs_f64())),
                csv.display()
            );
        }
    }
    Ok(())
}

fn cmd_validate(config: Option<PathBuf>, overrides: &Overrides) -> Result<(), CliError> {
    let cfg = config::load(config.as_deref(), &overrides.pairs()?)?;
    let violations = cfg.violations();
    if violations.is_empty() {
        println!("ok (config hash {:016x})", cfg.hash());
        Ok(())
    } else {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        Err(ConfigError::Invalid(format!("{} violation(s)", violations.len())).into())
    }
}

fn cmd_calibrate(
    profiles: Option<PathBuf>,
    fit: Option<String>,
    seeds: &[u64],
    duration: f64,
    write: Option<PathBuf>,
) -> Result<(), CliError> {
    let table = match &profiles {
        Some(p) => ProfileTable::load(p).map_err(|e| ConfigError::Invalid(e.to_string()))?,
        None => ProfileTable::builtin(),
    };
    let cfg = RunConfig::default();
    let net =
        NetModel::from_table(&table, cfg.mpc.max_iter_cap, cfg.net.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let plant = net.plant();
    let mut all_ok = true;
    println!(
        "{:<8} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}  result",
        "link", "median", "target", "q1", "target", "q3", "target"
    );
    for (i, node) in net.nodes().iter().enumerate() {
        let link = net.link(plant, edgeloop::net::NodeId(i));
        let target = table.box_of(&format!("rtt/{}", node.name)).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut rng = RngStream::new(1, &format!("calibrate.{}", node.name));
        let draws: Vec<f64> = (0..CALIBRATION_SAMPLES).map(|_| link.sample_rtt_ms(&mut rng)).collect();
        let got = BoxStats::from_values(&draws).map_err(|e| CliError::Breach(e.to_string()))?;
        let close = |g: f64, t: f64| if t == 0.0 { g == 0.0 } else { (g / t - 1.0).abs() <= CALIBRATION_TOL };
        let ok = close(got.median, target.median) && close(got.q1, target.q1) && close(got.q3, target.q3);
        all_ok &= ok;
        println!(
            "{:<8} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>10.3}  {}",
            node.name,
            got.median,
            target.median,
            got.q1,
            target.q1,
            got.q3,
            target.q3,
            if ok { "pass" } else { "FAIL" }
        );
    }
    for n in net.nodes() {
        println!(
            "node {:<6} compute scale {:.4}, iteration cost {:.3} µs, capped solve {:.1} ms",
            n.name,
            n.compute_scale,
            n.iter_cost * 1e6,
            n.iter_cost * net.iter_cap() as f64 * 1e3
        );
    }
    if let Some(placement) = fit {
        let target = table.get(&format!("latency/{placement}"), "median").map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let setup = scenarios::Setup { profiles: table.clone(), ..cfg.setup()? };
        let (fitted, cal) = calibrate_remote_overhead(&setup, &placement, target, seeds, duration, 0.05, 12)?;
        println!(
            "remote overhead median {:.5} ms gives {placement} latency {:.3} ms (target {:.3}) after {} rounds",
            cal.remote_median_ms, cal.achieved_ms, cal.target_ms, cal.rounds
        );
        if let Some(path) = write {
            std::fs::write(&path, fitted.profiles.to_csv()).map_err(io_err(&path))?;
        }
    }
    if all_ok {
        Ok(())
    } else {
        Err(CliError::Breach(format!("sampled link statistics outside {:.0}% of the profile", CALIBRATION_TOL * 100.0)))
    }
}

fn cmd_export(path: Option<PathBuf>) -> Result<(), CliError> {
    let text = ProfileTable::builtin().to_csv();
    match path {
        Some(p) => std::fs::write(&p, text).map_err(io_err(&p)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run { config, overrides, output_dir } => cmd_run(config, &overrides, output_dir),
        Cmd::Validate { config, overrides } => cmd_validate(config, &overrides),
        Cmd::Calibrate { profiles, fit_overhead, seeds, duration, write } => {
            cmd_calibrate(profiles, fit_overhead, &seeds, duration, write)
        }
        Cmd::ExportProfiles { path } => cmd_export(path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
