//! The three experiments: a fixed-placement baseline, random live migration
//! of the controller, and a tightly constrained far set-point.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{ControlError, Mpc, MpcConfig};
use crate::des::{EventFailure, RngStream, SimTime};
use crate::net::{NetConfig, NetError, NetModel, NodeId, ProfileTable};
use crate::plant::{PlantParams, PlantProcess, PlantState};
use crate::runtime::{
    AppGraph, AppParams, ConnStats, MetricRecord, MigrationReport, OffBeamPolicy, Runtime, RuntimeConfig, RuntimeError,
};
use crate::stats::{fmt_sig9, BoxStats, StatsError};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Event(#[from] EventFailure<RuntimeError>),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl ScenarioError {
    /// True when the failure is a broken runtime or controller invariant
    /// rather than bad input.
    pub fn is_invariant_breach(&self) -> bool {
        matches!(self, ScenarioError::Runtime(_) | ScenarioError::Event(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Baseline,
    Migration,
    Constrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    /// Node hosting the MPC (initial node for migration runs).
    pub placement: String,
    /// Seconds of clock ticks.
    pub duration: f64,
    pub master_seed: u64,
    pub setpoint_low: f64,
    pub setpoint_high: f64,
    /// Seconds between set-point switches.
    pub setpoint_period: f64,
    /// Seconds between forced migrations.
    pub migration_period: f64,
    /// Input bound of constrained runs, replacing the controller's bounds.
    pub u_bound_tight: f64,
    /// Seconds before a lost ball is put back (baseline and migration).
    pub respawn_delay: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

impl ScenarioConfig {
    pub fn baseline() -> Self {
        ScenarioConfig {
            kind: ScenarioKind::Baseline,
            placement: "edge".into(),
            duration: 600.0,
            master_seed: 1,
            setpoint_low: 0.0,
            setpoint_high: 0.30,
            setpoint_period: 60.0,
            migration_period: 10.0,
            u_bound_tight: 0.5,
            respawn_delay: 5.0,
        }
    }

    pub fn migration() -> Self {
        ScenarioConfig { kind: ScenarioKind::Migration, duration: 800.0, ..Self::baseline() }
    }

    pub fn constrained() -> Self {
        ScenarioConfig {
            kind: ScenarioKind::Constrained,
            duration: 80.0,
            setpoint_high: 0.50,
            setpoint_period: 15.0,
            ..Self::baseline()
        }
    }

    pub fn for_kind(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::Baseline => Self::baseline(),
            ScenarioKind::Migration => Self::migration(),
            ScenarioKind::Constrained => Self::constrained(),
        }
    }

    /// Every violated rule, as readable messages.
    pub fn violations(&self, plant: &PlantParams, mpc: &MpcConfig) -> Vec<String> {
        let mut out = Vec::new();
        let half = plant.half_length();
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            out.push(format!("duration must be a finite non-negative number of seconds, got {}", self.duration));
        }
        if !(self.setpoint_period > 0.0) {
            out.push(format!("setpoint_period must be positive, got {}", self.setpoint_period));
        }
        if !(self.setpoint_low <= self.setpoint_high) {
            out.push(format!("bounds ordering: setpoint_low {} exceeds setpoint_high {}", self.setpoint_low, self.setpoint_high));
        }
        let extreme = self.setpoint_low.abs().max(self.setpoint_high.abs());
        match self.kind {
            ScenarioKind::Baseline | ScenarioKind::Migration => {
                if extreme > half - 0.15 + 1e-12 {
                    out.push(format!(
                        "margin: set-points must stay at least 0.15 m from the beam end (|setpoint| <= {:.3} m), got {extreme} m",
                        half - 0.15
                    ));
                }
            }
            ScenarioKind::Constrained => {
                if self.setpoint_high.abs() > half {
                    out.push(format!("margin: setpoint_high {} lies off the beam (half length {half} m)", self.setpoint_high));
                } else if self.setpoint_high.abs() < half - 0.05 - 1e-12 {
                    out.push(format!(
                        "margin: constrained setpoint_high must be within 0.05 m of the beam end (>= {:.3} m), got {}",
                        half - 0.05,
                        self.setpoint_high
                    ));
                }
                if !(self.u_bound_tight > 0.0) || self.u_bound_tight >= mpc.u_max.min(-mpc.u_min) {
                    out.push(format!(
                        "u_bound_tight must be positive and tighter than the controller bounds [{}, {}], got {}",
                        mpc.u_min, mpc.u_max, self.u_bound_tight
                    ));
                }
            }
        }
        if self.kind == ScenarioKind::Migration && !(self.migration_period > 0.0) {
            out.push(format!("migration_period must be positive, got {}", self.migration_period));
        }
        if !(self.respawn_delay >= 0.0) {
            out.push(format!("respawn_delay must be non-negative, got {}", self.respawn_delay));
        }
        out
    }

    pub fn validate(&self, plant: &PlantParams, mpc: &MpcConfig) -> Result<(), ScenarioError> {
        let v = self.violations(plant, mpc);
        if v.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(v.join("; ")))
        }
    }
}

/// Everything a scenario run needs besides the scenario itself.
#[derive(Clone, Debug)]
pub struct Setup {
    pub plant: PlantParams,
    pub mpc: MpcConfig,
    pub profiles: ProfileTable,
    pub net: NetConfig,
}

impl Default for Setup {
    fn default() -> Self {
        Setup {
            plant: PlantParams::default(),
            mpc: MpcConfig::default(),
            profiles: ProfileTable::builtin(),
            net: NetConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<MetricRecord>,
    pub migrations: Vec<MigrationReport>,
    pub conn_stats: Vec<ConnStats>,
    pub node_names: Vec<String>,
    pub ticks: u64,
    /// When the ball first left the beam, if it did.
    pub off_beam_at: Option<SimTime>,
    /// Set-point switch instants.
    pub setpoint_changes: Vec<SimTime>,
}

impl RunOutput {
    pub fn solver_failures(&self) -> usize {
        self.records.iter().filter(|r| !r.solved).count()
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.node_names[id.0]
    }
}

pub fn run(cfg: &ScenarioConfig, setup: &Setup) -> Result<RunOutput, ScenarioError> {
    let mut mpc_cfg = setup.mpc.clone();
    cfg.validate(&setup.plant, &mpc_cfg)?;
    if cfg.kind == ScenarioKind::Constrained {
        mpc_cfg.u_min = -cfg.u_bound_tight;
        mpc_cfg.u_max = cfg.u_bound_tight;
    }
    let net = NetModel::from_table(&setup.profiles, mpc_cfg.max_iter_cap, setup.net.clone())?;
    let placement = net.node_id(&cfg.placement)?;
    let plant_name = net.node(net.plant()).name.clone();
    let graph = AppGraph::ball_and_beam(&plant_name, &net.node(placement).name);
    let mpc = Mpc::new(mpc_cfg.clone(), &setup.plant)?;
    let period = SimTime::from_secs_f64(mpc_cfg.sample_period);
    let stop_at = SimTime::from_secs_f64(cfg.duration);
    let sp_period = SimTime::from_secs_f64(cfg.setpoint_period);
    let rt_cfg = RuntimeConfig {
        app: AppParams {
            sample_period: period,
            stop_at,
            setpoint_low: cfg.setpoint_low,
            setpoint_high: cfg.setpoint_high,
            setpoint_period: sp_period,
        },
        off_beam: match cfg.kind {
            ScenarioKind::Constrained => OffBeamPolicy::Stop,
            _ => OffBeamPolicy::Respawn(SimTime::from_secs_f64(cfg.respawn_delay)),
        },
        record_firings: false,
        record_mpc_trace: false,
        run_id: cfg.master_seed,
    };
    let node_names: Vec<String> = net.nodes().iter().map(|n| n.name.clone()).collect();
    let node_count = net.node_count();
    let plant = PlantProcess::new(setup.plant.clone(), PlantState::default());
    let mut rt = Runtime::deploy(&graph, net, mpc, plant, rt_cfg, cfg.master_seed)?;

    if cfg.kind == ScenarioKind::Migration {
        let mpc_id = rt.actor_id("mpc").expect("graph has an mpc");
        let mut pick = RngStream::new(cfg.master_seed, "migration.target");
        let step = SimTime::from_secs_f64(cfg.migration_period);
        let mut t = step;
        while t < stop_at {
            rt.run_until(t)?;
            if !rt.is_migrating(mpc_id) {
                let here = rt.actor_node(mpc_id);
                let mut dest = NodeId(pick.below(node_count - 1));
                if dest >= here {
                    dest = NodeId(dest.0 + 1);
                }
                rt.start_migration(mpc_id, dest)?;
                rt.check_conservation()?;
            }
            t += step;
        }
    }
    rt.run_to_completion()?;
    rt.check_conservation()?;
    let off_beam_at = rt.records().iter().find(|r| r.off_beam).map(|r| r.t).or(rt.plant().off_beam_at());
    let n_changes = if sp_period > SimTime::ZERO { stop_at.as_nanos().div_ceil(sp_period.as_nanos()) } else { 0 };
    let setpoint_changes = (1..n_changes).map(|k| SimTime::from_nanos(k * sp_period.as_nanos())).collect();
    Ok(RunOutput {
        conn_stats: rt.conn_stats(),
        migrations: rt.migration_reports().to_vec(),
        ticks: rt.ticks(),
        records: rt.take_records(),
        node_names,
        off_beam_at,
        setpoint_changes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    ExecMs,
    LatencyMs,
    U,
    USq,
    Position,
    Iterations,
}

impl Column {
    pub const ALL: [Column; 6] =
        [Column::ExecMs, Column::LatencyMs, Column::U, Column::USq, Column::Position, Column::Iterations];

    pub fn name(self) -> &'static str {
        match self {
            Column::ExecMs => "exec_ms",
            Column::LatencyMs => "latency_ms",
            Column::U => "u",
            Column::USq => "u_sq",
            Column::Position => "position_m",
            Column::Iterations => "iterations",
        }
    }

    pub fn value(self, r: &MetricRecord) -> f64 {
        match self {
            Column::ExecMs => r.exec.as_millis_f64(),
            Column::LatencyMs => r.latency.as_millis_f64(),
            Column::U => r.u,
            Column::USq => r.u_sq,
            Column::Position => r.position,
            Column::Iterations => r.iterations as f64,
        }
    }
}

/// Tukey box statistics of one column, skipping samples taken while the
/// ball was off the beam or settling after a respawn.
pub fn summarize(records: &[MetricRecord], column: Column) -> Result<BoxStats, ScenarioError> {
    let values: Vec<f64> = records.iter().filter(|r| !r.respawn).map(|r| column.value(r)).collect();
    Ok(BoxStats::from_values(&values)?)
}

pub const CSV_HEADER: &str = "t_ns,node,exec_ms,latency_ms,u,u_sq,position_m,setpoint_m,solved,off_beam,migrate_from,migrate_to";

/// Writes one row per record with a fixed column order.
pub fn write_csv<W: std::io::Write>(out: W, records: &[MetricRecord], node_names: &[String]) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for r in records {
        let (mf, mt) = match r.migration {
            Some((a, b)) => (node_names[a.0].as_str(), node_names[b.0].as_str()),
            None => ("", ""),
        };
        w.write_record([
            r.t.as_nanos().to_string().as_str(),
            &node_names[r.mpc_node.0],
            &fmt_sig9(r.exec.as_millis_f64()),
            &fmt_sig9(r.latency.as_millis_f64()),
            &fmt_sig9(r.u),
            &fmt_sig9(r.u_sq),
            &fmt_sig9(r.position),
            &fmt_sig9(r.setpoint),
            if r.solved { "true" } else { "false" },
            if r.off_beam { "true" } else { "false" },
            mf,
            mt,
        ])?;
    }
    w.flush()
}

pub fn emit_csv(records: &[MetricRecord], node_names: &[String], path: &Path) -> Result<(), ScenarioError> {
    let io = |source| ScenarioError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut buf = std::io::BufWriter::new(file);
    write_csv(&mut buf, records, node_names).map_err(io)?;
    buf.flush().map_err(io)
}

/// Seed-averaged median control latency of one placement.
pub fn mean_latency_median(setup: &Setup, placement: &str, seeds: &[u64], duration: f64) -> Result<f64, ScenarioError> {
    let mut sum = 0.0;
    for &seed in seeds {
        let cfg = ScenarioConfig { placement: placement.into(), duration, master_seed: seed, ..ScenarioConfig::baseline() };
        sum += summarize(&run(&cfg, setup)?.records, Column::LatencyMs)?.median;
    }
    Ok(sum / seeds.len() as f64)
}

/// Result of fitting the remote per-hop overhead to one placement's latency.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverheadCalibration {
    pub placement: String,
    pub target_ms: f64,
    /// Median of the remote overhead after calibration.
    pub remote_median_ms: f64,
    pub achieved_ms: f64,
    pub rounds: usize,
}

/// Rescales the `overhead/remote` box (keeping its quartile ratios) until
/// the seed-averaged latency median of `placement` is within `tol_ms` of
/// `target_ms`. Each remote hop pays the overhead once and a control loop
/// crosses two hops in series, hence the secant start slope of 2.
pub fn calibrate_remote_overhead(
    setup: &Setup,
    placement: &str,
    target_ms: f64,
    seeds: &[u64],
    duration: f64,
    tol_ms: f64,
    max_rounds: usize,
) -> Result<(Setup, OverheadCalibration), ScenarioError> {
    let mut s = setup.clone();
    let q1r = s.profiles.get("overhead/remote", "q1")? / s.profiles.get("overhead/remote", "median")?;
    let q3r = s.profiles.get("overhead/remote", "q3")? / s.profiles.get("overhead/remote", "median")?;
    let set = |s: &mut Setup, m: f64| {
        s.profiles.set("overhead/remote", "median", m);
        s.profiles.set("overhead/remote", "q1", m * q1r);
        s.profiles.set("overhead/remote", "q3", m * q3r);
    };
    let mut m = s.profiles.get("overhead/remote", "median")?;
    let mut achieved = mean_latency_median(&s, placement, seeds, duration)?;
    let mut slope = 2.0;
    let mut rounds = 0;
    while (achieved - target_ms).abs() > tol_ms && rounds < max_rounds {
        let next = (m + (target_ms - achieved) / slope).max(1e-3);
        set(&mut s, next);
        let a = mean_latency_median(&s, placement, seeds, duration)?;
        if (a - achieved).abs() > 1e-9 && (next - m).abs() > 1e-12 {
            slope = ((a - achieved) / (next - m)).clamp(0.5, 4.0);
        }
        m = next;
        achieved = a;
        rounds += 1;
    }
    let cal = OverheadCalibration { placement: placement.into(), target_ms, remote_median_ms: m, achieved_ms: achieved, rounds };
    Ok((s, cal))
}
