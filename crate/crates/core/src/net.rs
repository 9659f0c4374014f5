//! Latency and compute-speed model of the four compute tiers.
//!
//! Everything is driven by a profile table of box statistics in
//! milliseconds (see `data/profiles.csv`). Link delays are log-normal fits
//! to round-trip statistics, clamped to the measured whiskers and halved for
//! one direction. Compute speed is the ratio of a node's median MPC
//! execution time to the edge node's.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::des::{RngStream, SimTime};

/// `Φ⁻¹(0.75)`: quartiles of a standard normal sit at `±Z75`.
pub const Z75: f64 = 0.674_489_750_196_081_7;

/// The node hosting the physical process.
pub const PLANT: &str = "plant";

/// The compute-speed reference node.
pub const REFERENCE: &str = "edge";

const DEFAULT_TABLE: &str = include_str!("../data/profiles.csv");

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("quartiles out of order: q1={q1}, median={median}, q3={q3}")]
    Unordered { median: f64, q1: f64, q3: f64 },
    #[error("log-normal fit needs positive statistics, got median={0}")]
    NonPositive(f64),
    #[error("profile table has no value for {entity}/{stat}")]
    Missing { entity: String, stat: String },
    #[error("profile table line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("unknown node '{name}'; valid nodes: {valid}")]
    UnknownNode { name: String, valid: String },
    #[error("invalid profile: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Index of a node in a [`NetModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormal {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormal {
    pub fn median(&self) -> f64 {
        self.mu.exp()
    }

    /// Value at `z` standard deviations in log space.
    pub fn at_z(&self, z: f64) -> f64 {
        (self.mu + self.sigma * z).exp()
    }

    pub fn q1(&self) -> f64 {
        self.at_z(-Z75)
    }

    pub fn q3(&self) -> f64 {
        self.at_z(Z75)
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        if self.sigma == 0.0 {
            self.median()
        } else {
            self.at_z(rng.standard_normal())
        }
    }
}

/// Fits a log-normal to a median and quartiles.
///
/// `mu = ln(median)`; `sigma` minimizes the squared log-space error of both
/// quartiles, which gives `sigma = ln(q3/q1) / (2·Z75)`.
pub fn fit_lognormal(median: f64, q1: f64, q3: f64) -> Result<LogNormal, NetError> {
    if !(q1 <= median && median <= q3) {
        return Err(NetError::Unordered { median, q1, q3 });
    }
    if !(median > 0.0) || !median.is_finite() {
        return Err(NetError::NonPositive(median));
    }
    if q1 == q3 {
        return Ok(LogNormal { mu: median.ln(), sigma: 0.0 });
    }
    if !(q1 > 0.0) || !q3.is_finite() {
        return Err(NetError::NonPositive(q1));
    }
    Ok(LogNormal { mu: median.ln(), sigma: (q3 / q1).ln() / (2.0 * Z75) })
}

/// Box statistics of one profile entity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileBox {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub lo: f64,
    pub hi: f64,
}

impl ProfileBox {
    fn scaled(&self, f: f64) -> ProfileBox {
        ProfileBox { median: self.median * f, q1: self.q1 * f, q3: self.q3 * f, lo: self.lo * f, hi: self.hi * f }
    }
}

/// Ordered `(entity, stat) → value_ms` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileTable {
    rows: Vec<(String, String, f64)>,
}

#[derive(Deserialize)]
struct CsvRow {
    entity: String,
    stat: String,
    value_ms: f64,
}

impl ProfileTable {
    /// The checked-in table mirroring the reference measurements.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_TABLE).expect("built-in profile table parses")
    }

    pub fn parse(text: &str) -> Result<Self, NetError> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut table = ProfileTable { rows: Vec::new() };
        for rec in reader.deserialize::<CsvRow>() {
            let row = rec.map_err(|e| NetError::Parse { line: e.position().map_or(0, |p| p.line()), msg: e.to_string() })?;
            if !row.value_ms.is_finite() {
                return Err(NetError::Parse { line: 0, msg: format!("{}/{} is not finite", row.entity, row.stat) });
            }
            table.set(&row.entity, &row.stat, row.value_ms);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let text = std::fs::read_to_string(path).map_err(|source| NetError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(["entity", "stat", "value_ms"]).expect("in-memory write");
        for (e, s, v) in &self.rows {
            w.write_record([e.as_str(), s.as_str(), &crate::stats::fmt_sig9(*v)]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn get(&self, entity: &str, stat: &str) -> Result<f64, NetError> {
        self.rows
            .iter()
            .find(|(e, s, _)| e == entity && s == stat)
            .map(|r| r.2)
            .ok_or_else(|| NetError::Missing { entity: entity.to_owned(), stat: stat.to_owned() })
    }

    /// Inserts or overwrites one value, keeping the position of existing rows.
    pub fn set(&mut self, entity: &str, stat: &str, value: f64) {
        match self.rows.iter_mut().find(|(e, s, _)| e == entity && s == stat) {
            Some(row) => row.2 = value,
            None => self.rows.push((entity.to_owned(), stat.to_owned(), value)),
        }
    }

    pub fn box_of(&self, entity: &str) -> Result<ProfileBox, NetError> {
        Ok(ProfileBox {
            median: self.get(entity, "median")?,
            q1: self.get(entity, "q1")?,
            q3: self.get(entity, "q3")?,
            lo: self.get(entity, "lo")?,
            hi: self.get(entity, "hi")?,
        })
    }

    fn fit(&self, entity: &str) -> Result<LogNormal, NetError> {
        fit_lognormal(self.get(entity, "median")?, self.get(entity, "q1")?, self.get(entity, "q3")?)
    }

    /// Node names in table order, taken from the `exec/<node>` rows.
    pub fn node_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for (e, _, _) in &self.rows {
            if let Some(n) = e.strip_prefix("exec/") {
                if !names.iter().any(|x| x == n) {
                    names.push(n.to_owned());
                }
            }
        }
        names
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeProfile {
    pub name: String,
    /// Multiplier on actor compute time, 1.0 on the reference node.
    pub compute_scale: f64,
    /// Time of one solver iteration on this node (s).
    pub iter_cost: f64,
}

/// One-way delay model of a node pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinkProfile {
    /// Round-trip statistics the fit was made from; `None` for a zero-delay link.
    pub rtt: Option<ProfileBox>,
    pub fit: Option<LogNormal>,
}

impl LinkProfile {
    pub fn zero() -> Self {
        LinkProfile { rtt: None, fit: None }
    }

    pub fn from_rtt(rtt: ProfileBox) -> Result<Self, NetError> {
        if rtt.median == 0.0 && rtt.hi == 0.0 {
            return Ok(Self::zero());
        }
        if !(rtt.lo <= rtt.q1 && rtt.q3 <= rtt.hi) {
            return Err(NetError::Invalid(format!("whiskers [{}, {}] do not enclose the quartiles", rtt.lo, rtt.hi)));
        }
        let fit = fit_lognormal(rtt.median, rtt.q1, rtt.q3)?;
        Ok(LinkProfile { rtt: Some(rtt), fit: Some(fit) })
    }

    pub fn is_zero(&self) -> bool {
        self.fit.is_none()
    }

    /// Round-trip sample in ms, clamped to the whiskers.
    pub fn sample_rtt_ms(&self, rng: &mut RngStream) -> f64 {
        match (&self.rtt, &self.fit) {
            (Some(b), Some(f)) => f.sample(rng).clamp(b.lo, b.hi),
            _ => 0.0,
        }
    }

    /// One-way bounds in ms.
    pub fn one_way_bounds_ms(&self) -> (f64, f64) {
        self.rtt.map_or((0.0, 0.0), |b| (b.lo / 2.0, b.hi / 2.0))
    }
}

pub fn sample_one_way(link: &LinkProfile, rng: &mut RngStream) -> SimTime {
    SimTime::from_millis_f64(link.sample_rtt_ms(rng) / 2.0)
}

/// Runtime delays that are not network transit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverheadProfile {
    /// Extra delay of a token crossing nodes (ms).
    pub remote: LogNormal,
    /// Dispatch delay between actors on one node, at reference speed (ms).
    pub local: LogNormal,
    /// Jitter added to every MPC execution, at reference speed (ms).
    pub exec_jitter: LogNormal,
    /// One-way link traversals a remote token costs before it can be consumed
    /// (data plus acknowledgement).
    pub transport_legs: u32,
}

/// Knobs of the network model that are not box statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub transport_legs: u32,
    /// Fixed handling time added to a migration's state transfer (ms).
    pub migration_handling_ms: f64,
    /// Base compute time of non-MPC actors at reference speed (ms).
    pub actor_cost_ms: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { transport_legs: 2, migration_handling_ms: 5.0, actor_cost_ms: 0.1 }
    }
}

#[derive(Clone, Debug)]
pub struct NetModel {
    nodes: Vec<NodeProfile>,
    links: Vec<Vec<LinkProfile>>,
    overhead: OverheadProfile,
    plant: NodeId,
    cfg: NetConfig,
    iter_cap: usize,
}

impl NetModel {
    /// Builds the model; `iter_cap` is the solver cap whose cost on the
    /// reference node equals `solver/edge,cap_time`.
    pub fn from_table(table: &ProfileTable, iter_cap: usize, cfg: NetConfig) -> Result<Self, NetError> {
        if iter_cap == 0 {
            return Err(NetError::Invalid("iteration cap must be positive".into()));
        }
        let names = table.node_names();
        let plant = names.iter().position(|n| n == PLANT).ok_or_else(|| NetError::Invalid("no plant node".into()))?;
        let ref_exec = table.get(&format!("exec/{REFERENCE}"), "median")?;
        let cap_ms = table.get(&format!("solver/{REFERENCE}"), "cap_time")?;
        if !(ref_exec > 0.0 && cap_ms > 0.0) {
            return Err(NetError::Invalid("reference execution statistics must be positive".into()));
        }
        let ref_iter = cap_ms * 1e-3 / iter_cap as f64;
        let mut nodes = Vec::new();
        for n in &names {
            let scale = table.get(&format!("exec/{n}"), "median")? / ref_exec;
            if !(scale > 0.0) || !scale.is_finite() {
                return Err(NetError::Invalid(format!("compute scale of {n} must be positive")));
            }
            nodes.push(NodeProfile { name: n.clone(), compute_scale: scale, iter_cost: ref_iter * scale });
        }

        let mut rtts: BTreeMap<usize, ProfileBox> = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            rtts.insert(i, table.box_of(&format!("rtt/{n}"))?);
        }
        let k = names.len();
        let mut links = vec![vec![LinkProfile::zero(); k]; k];
        for a in 0..k {
            for b in 0..k {
                if a == b {
                    continue;
                }
                links[a][b] = if a == plant {
                    LinkProfile::from_rtt(rtts[&b])?
                } else if b == plant {
                    LinkProfile::from_rtt(rtts[&a])?
                } else {
                    LinkProfile::from_rtt(derived_rtt(&rtts[&a], &rtts[&b]))?
                };
            }
        }
        let overhead = OverheadProfile {
            remote: table.fit("overhead/remote")?,
            local: table.fit("overhead/local")?,
            exec_jitter: table.fit("overhead/exec")?,
            transport_legs: cfg.transport_legs,
        };
        if !(cfg.migration_handling_ms >= 0.0 && cfg.actor_cost_ms >= 0.0) {
            return Err(NetError::Invalid("handling and actor costs must be non-negative".into()));
        }
        Ok(NetModel { nodes, links, overhead, plant: NodeId(plant), cfg, iter_cap })
    }

    pub fn builtin(iter_cap: usize) -> Self {
        Self::from_table(&ProfileTable::builtin(), iter_cap, NetConfig::default()).expect("default profiles are valid")
    }

    pub fn nodes(&self) -> &[NodeProfile] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &NodeProfile {
        &self.nodes[id.0]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn plant(&self) -> NodeId {
        self.plant
    }

    pub fn iter_cap(&self) -> usize {
        self.iter_cap
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn overhead(&self) -> &OverheadProfile {
        &self.overhead
    }

    pub fn node_id(&self, name: &str) -> Result<NodeId, NetError> {
        self.nodes.iter().position(|n| n.name.eq_ignore_ascii_case(name)).map(NodeId).ok_or_else(|| NetError::UnknownNode {
            name: name.to_owned(),
            valid: self.nodes.iter().map(|n| n.name.as_str()).collect::<Vec<_>>().join(", "),
        })
    }

    pub fn link(&self, a: NodeId, b: NodeId) -> &LinkProfile {
        &self.links[a.0][b.0]
    }

    pub fn sample_one_way(&self, a: NodeId, b: NodeId, rng: &mut RngStream) -> SimTime {
        sample_one_way(self.link(a, b), rng)
    }

    /// Delay of one token delivery, split into network transit and runtime
    /// overhead. Local deliveries only pay the dispatch overhead, scaled by
    /// the node's compute speed.
    pub fn hop(&self, a: NodeId, b: NodeId, rng: &mut RngStream) -> (SimTime, SimTime) {
        if a == b {
            let ms = self.overhead.local.sample(rng) * self.node(a).compute_scale;
            return (SimTime::ZERO, SimTime::from_millis_f64(ms));
        }
        let link = self.link(a, b);
        let mut net = SimTime::ZERO;
        for _ in 0..self.overhead.transport_legs {
            net += sample_one_way(link, rng);
        }
        (net, SimTime::from_millis_f64(self.overhead.remote.sample(rng)))
    }

    /// Time to ship a migrating actor's state from `a` to `b`.
    pub fn state_transfer(&self, a: NodeId, b: NodeId, rng: &mut RngStream) -> SimTime {
        self.sample_one_way(a, b, rng) + SimTime::from_millis_f64(self.cfg.migration_handling_ms)
    }

    /// Compute time of a non-MPC actor firing on `node`.
    pub fn actor_cost(&self, node: NodeId) -> SimTime {
        SimTime::from_millis_f64(self.cfg.actor_cost_ms * self.node(node).compute_scale)
    }

    /// `iterations × iter_cost` plus log-normal jitter scaled by node speed.
    pub fn mpc_exec_time(&self, node: NodeId, iterations: usize, rng: &mut RngStream) -> SimTime {
        let n = self.node(node);
        let jitter_ms = self.overhead.exec_jitter.sample(rng) * n.compute_scale;
        SimTime::from_secs_f64(iterations.max(1) as f64 * n.iter_cost) + SimTime::from_millis_f64(jitter_ms)
    }
}

// Neither endpoint is the plant: paths share the plant's uplink, so the pair
// sees the difference of their plant RTTs (at least 1 ms), with the spread of
// the farther node.
fn derived_rtt(a: &ProfileBox, b: &ProfileBox) -> ProfileBox {
    let far = if a.median >= b.median { a } else { b };
    let near = if a.median >= b.median { b } else { a };
    if far.median == 0.0 {
        return *far;
    }
    let median = (far.median - near.median).max(1.0);
    far.scaled(median / far.median)
}
