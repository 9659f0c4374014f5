//! Dataflow actor runtime multiplexed onto the event engine.
//!
//! Actors live on nodes and exchange tokens over port-to-port connections.
//! Each node fires its resident actors in rounds: within a round every actor
//! whose required input ports all hold a token fires at most once, in actor
//! id order, and firings on one node never overlap in virtual time. A firing
//! consumes its inputs at start and emits its outputs when its compute time
//! has elapsed.
//!
//! Every connection numbers its tokens. The receiving port keeps a hold-back
//! buffer keyed by that number, so tokens are consumed in emission order even
//! when a migration sends later tokens down a shorter path.
//!
//! Migration of an actor: pause, snapshot its state to canonical bytes, ship
//! the bytes and its queued tokens over the link, point every input
//! connection at the destination, forward tokens that still reach the old
//! node, and resume once the state has arrived and decoded to the same bytes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::control::{ControlError, ControllerState, Mpc};
use crate::des::{Engine, EventFailure, RngStream, SimTime};
use crate::net::{NetError, NetModel, NodeId};
use crate::plant::{self, Measurement, PlantError, PlantProcess};

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("duplicate actor name '{0}'")]
    DuplicateActor(String),
    #[error("unknown actor '{0}'")]
    UnknownActor(String),
    #[error("actor '{actor}' ({kind:?}) has no port '{port}'")]
    UnknownPort { actor: String, kind: ActorKind, port: String },
    #[error("endpoint '{0}' is not of the form actor.port")]
    BadEndpoint(String),
    #[error("input port {0} already has a connection")]
    PortTaken(String),
    #[error("actor '{actor}' must run on '{required}' but is placed on '{placed}'")]
    Affinity { actor: String, required: String, placed: String },
    #[error("self-loop on '{0}' is only allowed from a timer output to its trigger input")]
    BadSelfLoop(String),
    #[error("connection graph has a cycle through '{0}'")]
    Cycle(String),
    #[error("actor '{0}' is already migrating")]
    AlreadyMigrating(String),
    #[error("duplicate token seq {seq} on connection {conn}")]
    DuplicateToken { conn: usize, seq: u64 },
    #[error("connection {conn} consumed seq {got}, expected {expected}")]
    OutOfOrder { conn: usize, got: u64, expected: u64 },
    #[error("state of '{0}' changed across migration")]
    StateMismatch(String),
    #[error("join mismatch at '{actor}': position tick {pos}, angle tick {ang}")]
    JoinMismatch { actor: String, pos: u64, ang: u64 },
    #[error("unexpected payload on {0}")]
    BadPayload(String),
    #[error("token conservation broken on connection {conn}: emitted {emitted} != consumed {consumed} + in flight {in_flight} + queued {queued}")]
    Conservation { conn: usize, emitted: u64, consumed: u64, in_flight: u64, queued: u64 },
    #[error("negative latency component in sample {0}")]
    NegativeQueueing(u64),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorKind {
    Clock,
    AdcPosition,
    AdcAngle,
    Setpoint,
    Mpc,
    Dac,
}

impl ActorKind {
    /// Input ports and whether each must hold a token for the actor to fire.
    pub fn in_ports(self) -> &'static [(&'static str, bool)] {
        match self {
            ActorKind::Clock | ActorKind::Setpoint => &[("trigger", true)],
            ActorKind::AdcPosition | ActorKind::AdcAngle => &[("tick", true)],
            ActorKind::Mpc => &[("pos", true), ("ang", true), ("y_ref", false)],
            ActorKind::Dac => &[("u", true)],
        }
    }

    pub fn out_ports(self) -> &'static [&'static str] {
        match self {
            ActorKind::Clock => &["tick", "loop"],
            ActorKind::Setpoint => &["y_ref", "loop"],
            ActorKind::AdcPosition | ActorKind::AdcAngle => &["y"],
            ActorKind::Mpc => &["u"],
            ActorKind::Dac => &[],
        }
    }

    /// Sensor and actuator actors are bound to the plant's node.
    pub fn needs_plant(self) -> bool {
        matches!(self, ActorKind::AdcPosition | ActorKind::AdcAngle | ActorKind::Dac)
    }

    fn is_timer(self) -> bool {
        matches!(self, ActorKind::Clock | ActorKind::Setpoint)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorSpec {
    pub name: String,
    pub kind: ActorKind,
    /// Initial placement.
    pub node: String,
    /// Node the actor may never leave.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affinity: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnSpec {
    /// `actor.port` of an output port.
    pub from: String,
    /// `actor.port` of an input port.
    pub to: String,
}

/// Declarative application: actors with placement and port connections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppGraph {
    #[serde(default)]
    pub actors: Vec<ActorSpec>,
    #[serde(default)]
    pub connections: Vec<ConnSpec>,
}

impl AppGraph {
    /// Clock, two ADCs, set-point generator, MPC and DAC; everything but the
    /// MPC sits on the plant node.
    pub fn ball_and_beam(plant: &str, mpc_node: &str) -> AppGraph {
        let actor = |name: &str, kind, node: &str, affinity: Option<&str>| ActorSpec {
            name: name.into(),
            kind,
            node: node.into(),
            affinity: affinity.map(Into::into),
        };
        let conn = |from: &str, to: &str| ConnSpec { from: from.into(), to: to.into() };
        AppGraph {
            actors: vec![
                actor("clock", ActorKind::Clock, plant, None),
                actor("adc_pos", ActorKind::AdcPosition, plant, Some(plant)),
                actor("adc_ang", ActorKind::AdcAngle, plant, Some(plant)),
                actor("setpoint", ActorKind::Setpoint, plant, None),
                actor("mpc", ActorKind::Mpc, mpc_node, None),
                actor("dac", ActorKind::Dac, plant, Some(plant)),
            ],
            connections: vec![
                conn("clock.loop", "clock.trigger"),
                conn("clock.tick", "adc_pos.tick"),
                conn("clock.tick", "adc_ang.tick"),
                conn("adc_pos.y", "mpc.pos"),
                conn("adc_ang.y", "mpc.ang"),
                conn("setpoint.loop", "setpoint.trigger"),
                conn("setpoint.y_ref", "mpc.y_ref"),
                conn("mpc.u", "dac.u"),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActorId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnId(pub usize);

/// Control decision travelling from the MPC to the DAC.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlMsg {
    pub index: u64,
    pub u: f64,
    pub setpoint: f64,
    pub read_at: SimTime,
    pub iterations: usize,
    pub converged: bool,
    pub exec: SimTime,
    pub mpc_node: NodeId,
    /// Network and overhead delay of the position token that fed this decision.
    pub upstream_net: SimTime,
    pub upstream_overhead: SimTime,
    /// Set on the first decision after the MPC arrived on a new node.
    pub migration: Option<(NodeId, NodeId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Timer { due: SimTime, index: u64 },
    Tick { index: u64 },
    Reading { index: u64, value: f64, read_at: SimTime },
    Setpoint { value: f64 },
    Control(Box<ControlMsg>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceHop {
    pub node: NodeId,
    pub enqueued: SimTime,
    pub dequeued: Option<SimTime>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub payload: Payload,
    pub produced_at: SimTime,
    pub seq: u64,
    pub trace: Vec<TraceHop>,
    /// Accumulated link transit.
    pub net: SimTime,
    /// Accumulated runtime overhead.
    pub overhead: SimTime,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MigrationReport {
    pub actor: String,
    pub from: NodeId,
    pub to: NodeId,
    pub initiated_at: SimTime,
    pub completed_at: SimTime,
    pub tokens_forwarded: u64,
    pub state_bytes: usize,
}

impl MigrationReport {
    pub fn downtime(&self) -> SimTime {
        self.completed_at - self.initiated_at
    }
}

/// One applied control decision.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    /// Instant the DAC applied the input.
    pub t: SimTime,
    pub index: u64,
    pub mpc_node: NodeId,
    pub exec: SimTime,
    /// Position read to input applied.
    pub latency: SimTime,
    pub net: SimTime,
    pub overhead: SimTime,
    /// Everything else: actor compute of ADC and DAC, waiting for ports and the node.
    pub queueing: SimTime,
    pub u: f64,
    pub u_sq: f64,
    pub position: f64,
    pub setpoint: f64,
    pub iterations: usize,
    pub solved: bool,
    pub off_beam: bool,
    /// Inside the window between losing the ball and the end of respawn settling.
    pub respawn: bool,
    pub migration: Option<(NodeId, NodeId)>,
}

/// What the MPC saw and decided, for replaying its decisions offline.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcTraceEntry {
    pub index: u64,
    pub node: NodeId,
    pub measurement: Measurement,
    pub setpoint: f64,
    pub u: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FiringRecord {
    pub node: NodeId,
    pub actor: ActorId,
    pub start: SimTime,
    pub end: SimTime,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub rounds: u64,
    pub firings: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConnStats {
    pub id: ConnId,
    pub emitted: u64,
    pub consumed: u64,
    pub in_flight: u64,
    pub queued: u64,
    /// Tokens that arrived ahead of an earlier one and waited in hold-back.
    pub held_back: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OffBeamPolicy {
    /// Put the ball back in the centre after this delay and keep running.
    Respawn(SimTime),
    /// Stop the clock; the run drains and ends.
    Stop,
    /// Leave the ball where it fell.
    Continue,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AppParams {
    pub sample_period: SimTime,
    /// Timers stop emitting once their due time reaches this instant.
    pub stop_at: SimTime,
    pub setpoint_low: f64,
    pub setpoint_high: f64,
    pub setpoint_period: SimTime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuntimeConfig {
    pub app: AppParams,
    pub off_beam: OffBeamPolicy,
    pub record_firings: bool,
    pub record_mpc_trace: bool,
    pub run_id: u64,
}

struct InPort {
    required: bool,
    conn: Option<ConnId>,
    next_expected: u64,
    held: BTreeMap<u64, Token>,
    queue: VecDeque<Token>,
}

enum ActorState {
    Stateless,
    Setpoint { toggles: u64 },
    Mpc(Box<ControllerState>),
}

impl ActorState {
    fn to_bytes(&self) -> Vec<u8> {
        match self {
            ActorState::Stateless => Vec::new(),
            ActorState::Setpoint { toggles } => toggles.to_le_bytes().to_vec(),
            ActorState::Mpc(cs) => cs.to_bytes(),
        }
    }

    fn decode(kind: ActorKind, bytes: &[u8]) -> Result<ActorState, RuntimeError> {
        Ok(match kind {
            ActorKind::Mpc => ActorState::Mpc(Box::new(ControllerState::from_bytes(bytes)?)),
            ActorKind::Setpoint => {
                let arr: [u8; 8] = bytes.try_into().map_err(|_| RuntimeError::BadPayload("setpoint state".into()))?;
                ActorState::Setpoint { toggles: u64::from_le_bytes(arr) }
            }
            _ => ActorState::Stateless,
        })
    }
}

struct InTransit {
    from: NodeId,
    to: NodeId,
    initiated_at: SimTime,
    snapshot: Option<Vec<u8>>,
    carried: Vec<(BTreeMap<u64, Token>, VecDeque<Token>)>,
    early: Vec<(usize, Token)>,
    tokens_forwarded: u64,
}

struct Actor {
    name: String,
    kind: ActorKind,
    node: NodeId,
    affinity: Option<NodeId>,
    in_ports: Vec<InPort>,
    out_conns: Vec<Vec<ConnId>>,
    state: ActorState,
    paused: bool,
    transit: Option<InTransit>,
    arrived_from: Option<(NodeId, NodeId)>,
}

struct Connection {
    from: (ActorId, usize),
    to: (ActorId, usize),
    route: NodeId,
    timer: bool,
    emitted: u64,
    consumed: u64,
    in_flight: u64,
    held_back: u64,
}

struct Firing {
    actor: ActorId,
    start: SimTime,
    outputs: Vec<(usize, Payload)>,
    apply: Option<Box<ControlMsg>>,
}

#[derive(Default)]
struct NodeRt {
    residents: BTreeSet<ActorId>,
    round: VecDeque<ActorId>,
    firing: Option<Firing>,
    stats: NodeStats,
}

enum Ev {
    Arrive { conn: ConnId, token: Token, node: NodeId },
    Done { node: NodeId },
    StateArrive { actor: ActorId },
    Respawn,
}

struct World {
    cfg: RuntimeConfig,
    net: NetModel,
    mpc: Mpc,
    plant: PlantProcess,
    actors: Vec<Actor>,
    conns: Vec<Connection>,
    nodes: Vec<NodeRt>,
    stop_at: SimTime,
    off_beam_since: Option<SimTime>,
    settle_until: Option<SimTime>,
    rng_net: RngStream,
    rng_exec: RngStream,
    rng_pos: RngStream,
    rng_ang: RngStream,
    rng_process: RngStream,
    records: Vec<MetricRecord>,
    reports: Vec<MigrationReport>,
    firings: Vec<FiringRecord>,
    mpc_trace: Vec<MpcTraceEntry>,
    ticks: u64,
}

/// A deployed application bound to its engine.
pub struct Runtime {
    engine: Engine<Ev>,
    world: World,
}

fn split_endpoint(s: &str) -> Result<(&str, &str), RuntimeError> {
    s.split_once('.').ok_or_else(|| RuntimeError::BadEndpoint(s.to_owned()))
}

impl Runtime {
    /// Instantiates `graph` and primes its timers at t = 0.
    pub fn deploy(
        graph: &AppGraph,
        net: NetModel,
        mpc: Mpc,
        plant: PlantProcess,
        cfg: RuntimeConfig,
        seed: u64,
    ) -> Result<Runtime, RuntimeError> {
        let mut actors: Vec<Actor> = Vec::new();
        let mut names: BTreeMap<&str, ActorId> = BTreeMap::new();
        for spec in &graph.actors {
            if names.insert(spec.name.as_str(), ActorId(actors.len())).is_some() {
                return Err(RuntimeError::DuplicateActor(spec.name.clone()));
            }
            let node = net.node_id(&spec.node)?;
            let mut affinity = spec.affinity.as_deref().map(|a| net.node_id(a)).transpose()?;
            if spec.kind.needs_plant() {
                if affinity.is_some_and(|a| a != net.plant()) {
                    return Err(RuntimeError::Affinity {
                        actor: spec.name.clone(),
                        required: net.node(net.plant()).name.clone(),
                        placed: spec.affinity.clone().unwrap_or_default(),
                    });
                }
                affinity = Some(net.plant());
            }
            if let Some(a) = affinity {
                if a != node {
                    return Err(RuntimeError::Affinity {
                        actor: spec.name.clone(),
                        required: net.node(a).name.clone(),
                        placed: net.node(node).name.clone(),
                    });
                }
            }
            let state = match spec.kind {
                ActorKind::Mpc => ActorState::Mpc(Box::new(mpc.initial_state(cfg.app.setpoint_low, cfg.run_id))),
                ActorKind::Setpoint => ActorState::Setpoint { toggles: 0 },
                _ => ActorState::Stateless,
            };
            actors.push(Actor {
                name: spec.name.clone(),
                kind: spec.kind,
                node,
                affinity,
                in_ports: spec
                    .kind
                    .in_ports()
                    .iter()
                    .map(|&(_, required)| InPort {
                        required,
                        conn: None,
                        next_expected: 0,
                        held: BTreeMap::new(),
                        queue: VecDeque::new(),
                    })
                    .collect(),
                out_conns: vec![Vec::new(); spec.kind.out_ports().len()],
                state,
                paused: false,
                transit: None,
                arrived_from: None,
            });
        }

        let mut conns: Vec<Connection> = Vec::new();
        for c in &graph.connections {
            let (fa, fp) = split_endpoint(&c.from)?;
            let (ta, tp) = split_endpoint(&c.to)?;
            let from = *names.get(fa).ok_or_else(|| RuntimeError::UnknownActor(fa.to_owned()))?;
            let to = *names.get(ta).ok_or_else(|| RuntimeError::UnknownActor(ta.to_owned()))?;
            let fk = actors[from.0].kind;
            let tk = actors[to.0].kind;
            let out_idx = fk.out_ports().iter().position(|p| *p == fp).ok_or_else(|| RuntimeError::UnknownPort {
                actor: fa.to_owned(),
                kind: fk,
                port: fp.to_owned(),
            })?;
            let in_idx = tk.in_ports().iter().position(|p| p.0 == tp).ok_or_else(|| RuntimeError::UnknownPort {
                actor: ta.to_owned(),
                kind: tk,
                port: tp.to_owned(),
            })?;
            let timer = from == to;
            if timer && !(fk.is_timer() && fp == "loop" && tp == "trigger") {
                return Err(RuntimeError::BadSelfLoop(fa.to_owned()));
            }
            if !timer && fk.is_timer() && fp == "loop" {
                return Err(RuntimeError::BadSelfLoop(fa.to_owned()));
            }
            let id = ConnId(conns.len());
            if actors[to.0].in_ports[in_idx].conn.replace(id).is_some() {
                return Err(RuntimeError::PortTaken(c.to.clone()));
            }
            actors[from.0].out_conns[out_idx].push(id);
            conns.push(Connection {
                from: (from, out_idx),
                to: (to, in_idx),
                route: actors[to.0].node,
                timer,
                emitted: 0,
                consumed: 0,
                in_flight: 0,
                held_back: 0,
            });
        }
        check_acyclic(&actors, &conns)?;

        let mut nodes: Vec<NodeRt> = (0..net.node_count()).map(|_| NodeRt::default()).collect();
        for (i, a) in actors.iter().enumerate() {
            nodes[a.node.0].residents.insert(ActorId(i));
        }
        let stop_at = cfg.app.stop_at;
        let mut rt = Runtime {
            engine: Engine::new(seed),
            world: World {
                net,
                mpc,
                plant,
                actors,
                conns,
                nodes,
                stop_at,
                off_beam_since: None,
                settle_until: None,
                rng_net: RngStream::new(seed, "net"),
                rng_exec: RngStream::new(seed, "exec"),
                rng_pos: RngStream::new(seed, "sensor.position"),
                rng_ang: RngStream::new(seed, "sensor.angle"),
                rng_process: RngStream::new(seed, "plant.process"),
                records: Vec::new(),
                reports: Vec::new(),
                firings: Vec::new(),
                mpc_trace: Vec::new(),
                ticks: 0,
                cfg,
            },
        };
        let timers: Vec<ConnId> = (0..rt.world.conns.len()).filter(|&i| rt.world.conns[i].timer).map(ConnId).collect();
        for c in timers {
            rt.world.send(&mut rt.engine, c, Payload::Timer { due: SimTime::ZERO, index: 0 }, rt.world.conns[c.0].route);
        }
        Ok(rt)
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    /// Processes all events up to and including `t`.
    pub fn run_until(&mut self, t: SimTime) -> Result<(), EventFailure<RuntimeError>> {
        let Runtime { engine, world } = self;
        engine.run_until(t, |eng, ev| world.handle(eng, ev))?;
        Ok(())
    }

    /// Runs until no events remain (timers stop at `stop_at`).
    pub fn run_to_completion(&mut self) -> Result<(), EventFailure<RuntimeError>> {
        self.run_until(SimTime::MAX)
    }

    pub fn is_idle(&self) -> bool {
        self.engine.is_idle()
    }

    pub fn net(&self) -> &NetModel {
        &self.world.net
    }

    pub fn actor_id(&self, name: &str) -> Option<ActorId> {
        self.world.actors.iter().position(|a| a.name == name).map(ActorId)
    }

    pub fn actor_count(&self) -> usize {
        self.world.actors.len()
    }

    pub fn actor_node(&self, id: ActorId) -> NodeId {
        self.world.actors[id.0].node
    }

    pub fn actor_kind(&self, id: ActorId) -> ActorKind {
        self.world.actors[id.0].kind
    }

    pub fn is_migrating(&self, id: ActorId) -> bool {
        self.world.actors[id.0].transit.is_some()
    }

    pub fn controller_state(&self, id: ActorId) -> Option<&ControllerState> {
        match &self.world.actors[id.0].state {
            ActorState::Mpc(cs) => Some(cs),
            _ => None,
        }
    }

    /// Canonical bytes of an actor's state.
    pub fn state_bytes(&self, id: ActorId) -> Vec<u8> {
        self.world.actors[id.0].state.to_bytes()
    }

    /// Queued (not yet consumed) tokens across an actor's input ports.
    pub fn queued_inputs(&self, id: ActorId) -> usize {
        self.world.actors[id.0].in_ports.iter().map(|p| p.held.len() + p.queue.len()).sum()
    }

    /// Starts moving `actor` to `dest`. Returns the report at once for a
    /// no-op move to the current node; otherwise the report is appended to
    /// [`Runtime::migration_reports`] when the move completes.
    pub fn start_migration(&mut self, actor: ActorId, dest: NodeId) -> Result<Option<MigrationReport>, RuntimeError> {
        let Runtime { engine, world } = self;
        world.start_migration(engine, actor, dest)
    }

    /// Migrates and keeps simulating until the actor runs on `dest`.
    pub fn migrate(&mut self, actor: ActorId, dest: NodeId) -> Result<MigrationReport, RuntimeError> {
        if let Some(r) = self.start_migration(actor, dest)? {
            return Ok(r);
        }
        let done = self.world.reports.len();
        while self.world.reports.len() == done {
            let Some(t) = self.engine.next_event_time() else {
                unreachable!("state transfer is always scheduled");
            };
            self.run_until(t).map_err(|e| e.source)?;
        }
        Ok(self.world.reports.last().expect("just pushed").clone())
    }

    /// Points `conn` at `node`; tokens already travelling the old path are
    /// forwarded on arrival.
    pub fn reroute(&mut self, conn: ConnId, node: NodeId) {
        self.world.conns[conn.0].route = node;
    }

    /// Input connections of an actor.
    pub fn inputs_of(&self, id: ActorId) -> Vec<ConnId> {
        self.world.actors[id.0].in_ports.iter().filter_map(|p| p.conn).collect()
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.world.records
    }

    pub fn take_records(&mut self) -> Vec<MetricRecord> {
        std::mem::take(&mut self.world.records)
    }

    pub fn migration_reports(&self) -> &[MigrationReport] {
        &self.world.reports
    }

    pub fn firing_log(&self) -> &[FiringRecord] {
        &self.world.firings
    }

    pub fn mpc_trace(&self) -> &[MpcTraceEntry] {
        &self.world.mpc_trace
    }

    pub fn node_stats(&self, node: NodeId) -> NodeStats {
        self.world.nodes[node.0].stats
    }

    /// Clock ticks emitted so far.
    pub fn ticks(&self) -> u64 {
        self.world.ticks
    }

    pub fn plant(&self) -> &PlantProcess {
        &self.world.plant
    }

    /// Per-connection token accounting.
    pub fn conn_stats(&self) -> Vec<ConnStats> {
        (0..self.world.conns.len()).map(|i| self.world.conn_stats(ConnId(i))).collect()
    }

    /// Checks `emitted = consumed + in flight + queued` on every connection.
    pub fn check_conservation(&self) -> Result<(), RuntimeError> {
        for s in self.conn_stats() {
            if s.emitted != s.consumed + s.in_flight + s.queued {
                return Err(RuntimeError::Conservation {
                    conn: s.id.0,
                    emitted: s.emitted,
                    consumed: s.consumed,
                    in_flight: s.in_flight,
                    queued: s.queued,
                });
            }
        }
        Ok(())
    }
}

fn check_acyclic(actors: &[Actor], conns: &[Connection]) -> Result<(), RuntimeError> {
    let n = actors.len();
    let mut indeg = vec![0usize; n];
    let mut adj = vec![Vec::new(); n];
    for c in conns.iter().filter(|c| !c.timer) {
        adj[c.from.0 .0].push(c.to.0 .0);
        indeg[c.to.0 .0] += 1;
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = ready.pop() {
        seen += 1;
        for &j in &adj[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                ready.push(j);
            }
        }
    }
    if seen < n {
        let stuck = (0..n).find(|&i| indeg[i] > 0).expect("some actor left");
        return Err(RuntimeError::Cycle(actors[stuck].name.clone()));
    }
    Ok(())
}

impl World {
    fn handle(&mut self, eng: &mut Engine<Ev>, ev: Ev) -> Result<(), RuntimeError> {
        match ev {
            Ev::Arrive { conn, token, node } => self.arrive(eng, conn, token, node),
            Ev::Done { node } => self.done(eng, node),
            Ev::StateArrive { actor } => self.state_arrive(eng, actor),
            Ev::Respawn => {
                let now = eng.now();
                self.plant.advance_to(now, &mut self.rng_process)?;
                self.plant.respawn();
                self.off_beam_since = None;
                if let OffBeamPolicy::Respawn(d) = self.cfg.off_beam {
                    self.settle_until = Some(now + d);
                }
                Ok(())
            }
        }
    }

    fn conn_stats(&self, id: ConnId) -> ConnStats {
        let c = &self.conns[id.0];
        let (actor, port) = c.to;
        let a = &self.actors[actor.0];
        let p = &a.in_ports[port];
        let mut queued = (p.held.len() + p.queue.len()) as u64;
        if let Some(t) = &a.transit {
            if let Some((held, queue)) = t.carried.get(port) {
                queued += (held.len() + queue.len()) as u64;
            }
            queued += t.early.iter().filter(|(i, _)| *i == port).count() as u64;
        }
        ConnStats { id, emitted: c.emitted, consumed: c.consumed, in_flight: c.in_flight, queued, held_back: c.held_back }
    }

    fn send(&mut self, eng: &mut Engine<Ev>, conn: ConnId, payload: Payload, from_node: NodeId) {
        let now = eng.now();
        let c = &mut self.conns[conn.0];
        let seq = c.emitted;
        c.emitted += 1;
        c.in_flight += 1;
        let route = c.route;
        let mut token = Token { payload, produced_at: now, seq, trace: Vec::new(), net: SimTime::ZERO, overhead: SimTime::ZERO };
        let at = if c.timer {
            match token.payload {
                Payload::Timer { due, .. } => due.max(now),
                _ => now,
            }
        } else {
            let (net, ov) = self.net.hop(from_node, route, &mut self.rng_net);
            token.net = net;
            token.overhead = ov;
            now + net + ov
        };
        eng.schedule_at(at, Ev::Arrive { conn, token, node: route });
    }

    fn forward(&mut self, eng: &mut Engine<Ev>, conn: ConnId, mut token: Token, from: NodeId, to: NodeId) {
        let now = eng.now();
        token.trace.push(TraceHop { node: from, enqueued: now, dequeued: Some(now) });
        let (net, ov) =
            if self.conns[conn.0].timer { (SimTime::ZERO, SimTime::ZERO) } else { self.net.hop(from, to, &mut self.rng_net) };
        token.net += net;
        token.overhead += ov;
        self.conns[conn.0].in_flight += 1;
        eng.schedule_at(now + net + ov, Ev::Arrive { conn, token, node: to });
    }

    fn arrive(&mut self, eng: &mut Engine<Ev>, conn: ConnId, token: Token, node: NodeId) -> Result<(), RuntimeError> {
        self.conns[conn.0].in_flight -= 1;
        let (aid, port) = self.conns[conn.0].to;
        let actor = &mut self.actors[aid.0];
        match &mut actor.transit {
            Some(t) if t.snapshot.is_some() => {
                if node == t.to {
                    t.early.push((port, token));
                    Ok(())
                } else {
                    t.tokens_forwarded += 1;
                    let to = t.to;
                    self.forward(eng, conn, token, node, to);
                    Ok(())
                }
            }
            _ if node == actor.node => {
                if enqueue(&mut actor.in_ports[port], conn, token, node, eng.now())? {
                    self.conns[conn.0].held_back += 1;
                }
                self.try_fire(eng, node)
            }
            _ => {
                let to = actor.node;
                self.forward(eng, conn, token, node, to);
                Ok(())
            }
        }
    }

    fn fireable(&self, id: ActorId, node: NodeId) -> bool {
        let a = &self.actors[id.0];
        a.node == node && !a.paused && a.in_ports.iter().all(|p| !p.required || !p.queue.is_empty())
    }

    fn try_fire(&mut self, eng: &mut Engine<Ev>, node: NodeId) -> Result<(), RuntimeError> {
        if self.nodes[node.0].firing.is_some() {
            return Ok(());
        }
        loop {
            if self.nodes[node.0].round.is_empty() {
                let residents: Vec<ActorId> = self.nodes[node.0].residents.iter().copied().collect();
                if !residents.iter().any(|&a| self.fireable(a, node)) {
                    return Ok(());
                }
                let n = &mut self.nodes[node.0];
                n.round = residents.into();
                n.stats.rounds += 1;
            }
            while let Some(a) = self.nodes[node.0].round.pop_front() {
                if self.fireable(a, node) {
                    return self.start_firing(eng, node, a);
                }
            }
        }
    }

    fn consume(&mut self, actor: ActorId, port: usize, now: SimTime) -> Result<Token, RuntimeError> {
        let p = &mut self.actors[actor.0].in_ports[port];
        let mut token = p.queue.pop_front().expect("fireable port has a token");
        let conn = p.conn.expect("queued port is connected");
        let c = &mut self.conns[conn.0];
        if token.seq != c.consumed {
            return Err(RuntimeError::OutOfOrder { conn: conn.0, got: token.seq, expected: c.consumed });
        }
        c.consumed += 1;
        if let Some(h) = token.trace.last_mut() {
            h.dequeued = Some(now);
        }
        Ok(token)
    }

    fn start_firing(&mut self, eng: &mut Engine<Ev>, node: NodeId, id: ActorId) -> Result<(), RuntimeError> {
        let now = eng.now();
        let kind = self.actors[id.0].kind;
        let mut outputs = Vec::new();
        let mut apply = None;
        let mut cost = self.net.actor_cost(node);
        match kind {
            ActorKind::Clock | ActorKind::Setpoint => {
                let t = self.consume(id, 0, now)?;
                let Payload::Timer { due, index } = t.payload else {
                    return Err(RuntimeError::BadPayload(format!("{}.trigger", self.actors[id.0].name)));
                };
                if due < self.stop_at {
                    let period = if kind == ActorKind::Clock { self.cfg.app.sample_period } else { self.cfg.app.setpoint_period };
                    if kind == ActorKind::Clock {
                        self.ticks += 1;
                        outputs.push((0, Payload::Tick { index }));
                    } else {
                        let ActorState::Setpoint { toggles } = &mut self.actors[id.0].state else { unreachable!() };
                        let value = if *toggles % 2 == 0 { self.cfg.app.setpoint_low } else { self.cfg.app.setpoint_high };
                        *toggles += 1;
                        outputs.push((0, Payload::Setpoint { value }));
                    }
                    outputs.push((1, Payload::Timer { due: due + period, index: index + 1 }));
                }
            }
            ActorKind::AdcPosition | ActorKind::AdcAngle => {
                let t = self.consume(id, 0, now)?;
                let Payload::Tick { index } = t.payload else {
                    return Err(RuntimeError::BadPayload(format!("{}.tick", self.actors[id.0].name)));
                };
                self.advance_plant(eng)?;
                let s = *self.plant.state();
                let value = if kind == ActorKind::AdcPosition {
                    plant::read_position(&self.plant.params, &s, &mut self.rng_pos)
                } else {
                    plant::read_angle(&self.plant.params, &s, &mut self.rng_ang)
                };
                outputs.push((0, Payload::Reading { index, value, read_at: now }));
            }
            ActorKind::Mpc => {
                let pos = self.consume(id, 0, now)?;
                let ang = self.consume(id, 1, now)?;
                let mut new_setpoint = None;
                while !self.actors[id.0].in_ports[2].queue.is_empty() {
                    if let Payload::Setpoint { value } = self.consume(id, 2, now)?.payload {
                        new_setpoint = Some(value);
                    }
                }
                let (Payload::Reading { index, value: pv, read_at }, Payload::Reading { index: ai, value: av, .. }) =
                    (&pos.payload, &ang.payload)
                else {
                    return Err(RuntimeError::BadPayload(format!("{}.pos/ang", self.actors[id.0].name)));
                };
                if index != ai {
                    return Err(RuntimeError::JoinMismatch { actor: self.actors[id.0].name.clone(), pos: *index, ang: *ai });
                }
                let meas = Measurement { pos_reading: *pv, ang_reading: *av, stamp: *read_at };
                let actor = &mut self.actors[id.0];
                let migration = actor.arrived_from.take();
                let ActorState::Mpc(cs) = &mut actor.state else { unreachable!() };
                if let Some(sp) = new_setpoint {
                    cs.setpoint = sp;
                }
                let rep = self.mpc.step(cs, &meas)?;
                let exec = self.net.mpc_exec_time(node, rep.iterations, &mut self.rng_exec);
                cost = exec;
                if self.cfg.record_mpc_trace {
                    self.mpc_trace.push(MpcTraceEntry {
                        index: *index,
                        node,
                        measurement: meas,
                        setpoint: cs.setpoint,
                        u: rep.u,
                    });
                }
                outputs.push((
                    0,
                    Payload::Control(Box::new(ControlMsg {
                        index: *index,
                        u: rep.u,
                        setpoint: cs.setpoint,
                        read_at: *read_at,
                        iterations: rep.iterations,
                        converged: rep.converged,
                        exec,
                        mpc_node: node,
                        upstream_net: pos.net,
                        upstream_overhead: pos.overhead,
                        migration,
                    })),
                ));
            }
            ActorKind::Dac => {
                let t = self.consume(id, 0, now)?;
                let Payload::Control(msg) = t.payload else {
                    return Err(RuntimeError::BadPayload(format!("{}.u", self.actors[id.0].name)));
                };
                let mut msg = msg;
                msg.upstream_net += t.net;
                msg.upstream_overhead += t.overhead;
                apply = Some(msg);
            }
        }
        let n = &mut self.nodes[node.0];
        n.firing = Some(Firing { actor: id, start: now, outputs, apply });
        n.stats.firings += 1;
        eng.schedule_at(now + cost, Ev::Done { node });
        Ok(())
    }

    fn advance_plant(&mut self, eng: &mut Engine<Ev>) -> Result<(), RuntimeError> {
        let now = eng.now();
        self.plant.advance_to(now, &mut self.rng_process)?;
        if self.off_beam_since.is_none() {
            if let Some(t) = self.plant.off_beam_at() {
                self.off_beam_since = Some(t);
                match self.cfg.off_beam {
                    OffBeamPolicy::Respawn(d) => {
                        eng.schedule_at(t + d, Ev::Respawn);
                    }
                    OffBeamPolicy::Stop => self.stop_at = self.stop_at.min(now),
                    OffBeamPolicy::Continue => {}
                }
            }
        }
        Ok(())
    }

    fn done(&mut self, eng: &mut Engine<Ev>, node: NodeId) -> Result<(), RuntimeError> {
        let now = eng.now();
        let f = self.nodes[node.0].firing.take().expect("a firing is in progress");
        if self.cfg.record_firings {
            self.firings.push(FiringRecord { node, actor: f.actor, start: f.start, end: now });
        }
        if let Some(msg) = f.apply {
            self.advance_plant(eng)?;
            let u = plant::apply_actuation(&self.plant.params, msg.u)?;
            self.plant.set_input(u)?;
            let latency = now - msg.read_at;
            let known = msg.upstream_net + msg.upstream_overhead + msg.exec;
            if known > latency {
                return Err(RuntimeError::NegativeQueueing(msg.index));
            }
            let off_beam = self.plant.state().off_beam;
            let respawn = self.off_beam_since.is_some() || self.settle_until.is_some_and(|s| now < s);
            self.records.push(MetricRecord {
                t: now,
                index: msg.index,
                mpc_node: msg.mpc_node,
                exec: msg.exec,
                latency,
                net: msg.upstream_net,
                overhead: msg.upstream_overhead,
                queueing: latency - known,
                u,
                u_sq: u * u,
                position: self.plant.state().p,
                setpoint: msg.setpoint,
                iterations: msg.iterations,
                solved: msg.converged,
                off_beam,
                respawn,
                migration: msg.migration,
            });
        }
        for (port, payload) in f.outputs {
            let targets = self.actors[f.actor.0].out_conns[port].clone();
            for c in targets {
                self.send(eng, c, payload.clone(), node);
            }
        }
        let pending_snapshot = self.actors[f.actor.0].transit.as_ref().is_some_and(|t| t.snapshot.is_none());
        if pending_snapshot {
            self.snapshot(eng, f.actor);
        }
        self.try_fire(eng, node)
    }

    fn start_migration(
        &mut self,
        eng: &mut Engine<Ev>,
        id: ActorId,
        dest: NodeId,
    ) -> Result<Option<MigrationReport>, RuntimeError> {
        if dest.0 >= self.net.node_count() {
            return Err(NetError::UnknownNode {
                name: format!("#{}", dest.0),
                valid: self.net.nodes().iter().map(|n| n.name.as_str()).collect::<Vec<_>>().join(", "),
            }
            .into());
        }
        let a = &mut self.actors[id.0];
        if let Some(req) = a.affinity {
            if req != dest {
                return Err(RuntimeError::Affinity {
                    actor: a.name.clone(),
                    required: self.net.node(req).name.clone(),
                    placed: self.net.node(dest).name.clone(),
                });
            }
        }
        if a.transit.is_some() {
            return Err(RuntimeError::AlreadyMigrating(a.name.clone()));
        }
        let now = eng.now();
        if dest == a.node {
            return Ok(Some(MigrationReport {
                actor: a.name.clone(),
                from: dest,
                to: dest,
                initiated_at: now,
                completed_at: now,
                tokens_forwarded: 0,
                state_bytes: 0,
            }));
        }
        a.paused = true;
        a.transit = Some(InTransit {
            from: a.node,
            to: dest,
            initiated_at: now,
            snapshot: None,
            carried: Vec::new(),
            early: Vec::new(),
            tokens_forwarded: 0,
        });
        let busy = self.nodes[a.node.0].firing.as_ref().is_some_and(|f| f.actor == id);
        if !busy {
            self.snapshot(eng, id);
        }
        Ok(None)
    }

    fn snapshot(&mut self, eng: &mut Engine<Ev>, id: ActorId) {
        let a = &mut self.actors[id.0];
        let bytes = a.state.to_bytes();
        let t = a.transit.as_mut().expect("migration in progress");
        let mut carried_count = 0u64;
        for p in &mut a.in_ports {
            let held = std::mem::take(&mut p.held);
            let queue = std::mem::take(&mut p.queue);
            carried_count += (held.len() + queue.len()) as u64;
            t.carried.push((held, queue));
        }
        t.tokens_forwarded += carried_count;
        t.snapshot = Some(bytes);
        let (from, to) = (t.from, t.to);
        for p in &a.in_ports {
            if let Some(c) = p.conn {
                self.conns[c.0].route = to;
            }
        }
        let delay = self.net.state_transfer(from, to, &mut self.rng_net);
        eng.schedule(delay, Ev::StateArrive { actor: id });
    }

    fn state_arrive(&mut self, eng: &mut Engine<Ev>, id: ActorId) -> Result<(), RuntimeError> {
        let now = eng.now();
        let a = &mut self.actors[id.0];
        let t = a.transit.take().expect("migration in progress");
        let bytes = t.snapshot.expect("snapshot taken before transfer");
        let restored = ActorState::decode(a.kind, &bytes)?;
        if restored.to_bytes() != bytes || a.state.to_bytes() != bytes {
            return Err(RuntimeError::StateMismatch(a.name.clone()));
        }
        a.state = restored;
        for (p, (held, queue)) in a.in_ports.iter_mut().zip(t.carried) {
            p.held = held;
            p.queue = queue;
        }
        for (port, token) in t.early {
            let conn = a.in_ports[port].conn.expect("connected port");
            if enqueue(&mut a.in_ports[port], conn, token, t.to, now)? {
                self.conns[conn.0].held_back += 1;
            }
        }
        a.node = t.to;
        a.paused = false;
        a.arrived_from = Some((t.from, t.to));
        self.nodes[t.from.0].residents.remove(&id);
        self.nodes[t.to.0].residents.insert(id);
        self.reports.push(MigrationReport {
            actor: a.name.clone(),
            from: t.from,
            to: t.to,
            initiated_at: t.initiated_at,
            completed_at: now,
            tokens_forwarded: t.tokens_forwarded,
            state_bytes: bytes.len(),
        });
        self.try_fire(eng, t.to)?;
        self.try_fire(eng, t.from)
    }
}

/// Files `token` under its sequence number and releases the in-order prefix.
/// Returns whether the token has to wait for an earlier one.
fn enqueue(port: &mut InPort, conn: ConnId, mut token: Token, node: NodeId, now: SimTime) -> Result<bool, RuntimeError> {
    if token.seq < port.next_expected || port.held.contains_key(&token.seq) {
        return Err(RuntimeError::DuplicateToken { conn: conn.0, seq: token.seq });
    }
    let early = token.seq != port.next_expected;
    token.trace.push(TraceHop { node, enqueued: now, dequeued: None });
    port.held.insert(token.seq, token);
    while let Some(t) = port.held.remove(&port.next_expected) {
        port.queue.push_back(t);
        port.next_expected += 1;
    }
    Ok(early)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn port() -> InPort {
        InPort { required: true, conn: Some(ConnId(0)), next_expected: 0, held: BTreeMap::new(), queue: VecDeque::new() }
    }

    fn tok(seq: u64) -> Token {
        Token {
            payload: Payload::Tick { index: seq },
            produced_at: SimTime::ZERO,
            seq,
            trace: Vec::new(),
            net: SimTime::ZERO,
            overhead: SimTime::ZERO,
        }
    }

    fn queued(p: &InPort) -> Vec<u64> {
        p.queue.iter().map(|t| t.seq).collect()
    }

    #[test]
    fn hold_back_releases_in_sequence() {
        let mut p = port();
        let t = SimTime::from_millis(1);
        for s in 0..5 {
            assert!(!enqueue(&mut p, ConnId(0), tok(s), NodeId(0), t).unwrap());
        }
        assert!(enqueue(&mut p, ConnId(0), tok(6), NodeId(0), t).unwrap());
        assert_eq!(queued(&p), [0, 1, 2, 3, 4]);
        assert_eq!(p.held.len(), 1);
        assert!(!enqueue(&mut p, ConnId(0), tok(5), NodeId(0), t).unwrap());
        assert_eq!(queued(&p), [0, 1, 2, 3, 4, 5, 6]);
        assert!(p.held.is_empty());
        assert_eq!(p.queue[5].trace, vec![TraceHop { node: NodeId(0), enqueued: t, dequeued: None }]);
    }

    #[test]
    fn duplicates_are_refused() {
        let mut p = port();
        enqueue(&mut p, ConnId(3), tok(0), NodeId(0), SimTime::ZERO).unwrap();
        enqueue(&mut p, ConnId(3), tok(2), NodeId(0), SimTime::ZERO).unwrap();
        for s in [0, 2] {
            assert!(matches!(
                enqueue(&mut p, ConnId(3), tok(s), NodeId(0), SimTime::ZERO),
                Err(RuntimeError::DuplicateToken { conn: 3, seq }) if seq == s
            ));
        }
    }

    #[test]
    fn timer_loop_must_feed_its_own_trigger() {
        let net = NetModel::builtin(100);
        let plant = crate::plant::PlantParams::default();
        let mpc = Mpc::new(crate::control::MpcConfig::default(), &plant).unwrap();
        let mut g = AppGraph::ball_and_beam("plant", "plant");
        g.actors.push(ActorSpec { name: "adc3".into(), kind: ActorKind::AdcPosition, node: "plant".into(), affinity: None });
        g.connections.push(ConnSpec { from: "clock.loop".into(), to: "adc3.tick".into() });
        let cfg = RuntimeConfig {
            app: AppParams {
                sample_period: SimTime::from_millis(50),
                stop_at: SimTime::from_secs(1),
                setpoint_low: 0.0,
                setpoint_high: 0.0,
                setpoint_period: SimTime::from_secs(1),
            },
            off_beam: OffBeamPolicy::Continue,
            record_firings: false,
            record_mpc_trace: false,
            run_id: 0,
        };
        let process = PlantProcess::new(plant, crate::plant::PlantState::default());
        assert!(matches!(Runtime::deploy(&g, net, mpc, process, cfg, 1), Err(RuntimeError::BadSelfLoop(_))));
    }
}
