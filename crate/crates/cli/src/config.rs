//! Run configuration: a versioned TOML document plus dotted overrides.
//!
//! ```toml
//! schema_version = 1
//! seeds = [1, 2, 3]
//! profiles = "builtin"          # or a CSV path, relative to this file
//! output_dir = "out"             # optional
//!
//! [scenario]                     # kind, placement, duration, set-points, ...
//! [plant]                        # physical and sensor parameters
//! [mpc]                          # horizon, weights, bounds, iteration cap
//! [net]                          # transport legs, handling and actor costs
//! ```
//!
//! Every table is optional and every field defaults. A run summary written by
//! `edgeloop run` embeds the resolved config under `[config]` and can be fed
//! back to `run` as is.

use std::path::{Path, PathBuf};

use edgeloop::control::{Mpc, MpcConfig};
use edgeloop::net::{NetConfig, NetModel, ProfileTable};
use edgeloop::plant::PlantParams;
use edgeloop::scenarios::{ScenarioConfig, ScenarioKind, Setup};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const BUILTIN: &str = "builtin";
/// Condition numbers of the condensed Hessian beyond this make the solver's
/// iteration counts meaningless.
const MAX_CONDITION: f64 = 1e10;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("override `{0}`: expected --key=value")]
    Override(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    /// `builtin` or a profile CSV path.
    pub profiles: String,
    pub output_dir: Option<PathBuf>,
    pub scenario: ScenarioConfig,
    pub plant: PlantParams,
    pub mpc: MpcConfig,
    pub net: NetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seeds: vec![1],
            profiles: BUILTIN.into(),
            output_dir: None,
            scenario: ScenarioConfig::baseline(),
            plant: PlantParams::default(),
            mpc: MpcConfig::default(),
            net: NetConfig::default(),
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.into())),
        Err(_) => toml::Value::String(value.into()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(ConfigError::Override(key.into()));
        }
        if parts.peek().is_none() {
            cur.insert(part.into(), value);
            return Ok(());
        }
        let entry = cur.entry(part).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError::Invalid(format!("override `{key}`: `{part}` is not a table")))?;
    }
    Err(ConfigError::Override(key.into()))
}

/// Fills unset scenario fields from the defaults of the chosen kind, so
/// `kind = "constrained"` alone gets the constrained set-points.
fn kind_defaults(table: &mut toml::Table) -> Result<(), String> {
    let Some(toml::Value::Table(scenario)) = table.get_mut("scenario") else {
        return Ok(());
    };
    let Some(kind) = scenario.get("kind") else {
        return Ok(());
    };
    let kind: ScenarioKind = kind.clone().try_into().map_err(|e: toml::de::Error| format!("scenario.kind: {e}"))?;
    let defaults = toml::Table::try_from(ScenarioConfig::for_kind(kind)).map_err(|e| e.to_string())?;
    for (k, v) in defaults {
        scenario.entry(k).or_insert(v);
    }
    Ok(())
}

/// Loads a config (or a run summary) and applies `key=value` overrides.
/// Relative profile paths resolve against the config file's directory.
pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let (mut table, base, label) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?;
            let mut t: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| ConfigError::Parse { path: p.display().to_string(), message: e.to_string() })?;
            // A run summary carries its config in a sub-table.
            if let Some(toml::Value::Table(inner)) = t.remove("config") {
                if t.contains_key("summary_version") {
                    t = inner;
                } else {
                    t.insert("config".into(), toml::Value::Table(inner));
                }
            }
            (t, p.parent().map(Path::to_path_buf), p.display().to_string())
        }
        None => (toml::Table::new(), None, "<defaults>".to_string()),
    };
    for (k, v) in overrides {
        set_dotted(&mut table, k, parse_value(v))?;
    }
    kind_defaults(&mut table).map_err(|message| ConfigError::Parse { path: label.clone(), message })?;
    let mut cfg: RunConfig =
        table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse { path: label, message: e.to_string() })?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(ConfigError::Invalid(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            cfg.schema_version
        )));
    }
    if cfg.profiles != BUILTIN {
        let mut p = PathBuf::from(&cfg.profiles);
        if p.is_relative() {
            if let Some(b) = base.filter(|b| !b.as_os_str().is_empty()) {
                p = b.join(p);
            }
        }
        // Absolute, so a summary written elsewhere still finds the table.
        cfg.profiles = std::fs::canonicalize(&p).unwrap_or(p).display().to_string();
    }
    Ok(cfg)
}

impl RunConfig {
    pub fn profile_table(&self) -> Result<ProfileTable, ConfigError> {
        if self.profiles == BUILTIN {
            return Ok(ProfileTable::builtin());
        }
        ProfileTable::load(Path::new(&self.profiles)).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn setup(&self) -> Result<Setup, ConfigError> {
        Ok(Setup { plant: self.plant.clone(), mpc: self.mpc.clone(), profiles: self.profile_table()?, net: self.net.clone() })
    }

    /// Placements a `placement = "all"` run expands to.
    pub fn placements(&self) -> Result<Vec<String>, ConfigError> {
        if !self.scenario.placement.eq_ignore_ascii_case("all") {
            return Ok(vec![self.scenario.placement.clone()]);
        }
        if self.scenario.kind == ScenarioKind::Constrained {
            return Ok(vec!["plant".into(), "edge".into(), "aws".into()]);
        }
        Ok(self.profile_table()?.node_names())
    }

    /// Every violated invariant, without simulating.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.seeds.is_empty() {
            out.push("seeds: at least one seed is required".into());
        }
        out.extend(self.scenario.violations(&self.plant, &self.mpc).into_iter().map(|v| format!("scenario: {v}")));
        if let Err(e) = self.mpc.validate() {
            out.push(format!("mpc: {e}"));
        } else {
            match Mpc::new(self.mpc.clone(), &self.plant) {
                Ok(m) => {
                    let c = m.condensed();
                    let kappa = c.lipschitz / c.mu;
                    if !(kappa <= MAX_CONDITION) {
                        out.push(format!(
                            "mpc: horizon conditioning: condensed Hessian condition number {kappa:.3e} exceeds {MAX_CONDITION:e}"
                        ));
                    }
                }
                Err(e) => out.push(format!("mpc: {e}")),
            }
        }
        match self.profile_table() {
            Err(e) => out.push(format!("profiles: {e}")),
            Ok(table) => match NetModel::from_table(&table, self.mpc.max_iter_cap.max(1), self.net.clone()) {
                Err(e) => out.push(format!("profiles: {e}")),
                Ok(net) => {
                    if let Ok(ps) = self.placements() {
                        for p in ps {
                            if let Err(e) = net.node_id(&p) {
                                out.push(format!("scenario.placement: {e}"));
                            }
                        }
                    }
                }
            },
        }
        out
    }

    /// FNV-1a of the canonical TOML rendering.
    pub fn hash(&self) -> u64 {
        edgeloop::des::fnv1a(toml::to_string(self).expect("config serializes").as_bytes())
    }
}
