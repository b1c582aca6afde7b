//! Discrete-event simulation of overlay nodes on a physical topology.
//!
//! One event loop per run, driven by a seeded RNG; the same parameters and
//! seed always give the same event sequence and trace digest.

mod engine;

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::{Backoff, ConnectivityConfig, HeartbeatLedger};
use crate::delivery::{DeliveryAccounting, DeliveryReport};
use crate::ids::{HostId, MessageId, NodeId, TunnelId};
use crate::membership::MembershipConfig;
use crate::overlay::{ContactOutcome, Direction, Overlay, OverlayConfig, ReconfigEvent};
use crate::time::SimTime;
use crate::topology::{LinkId, PathCache, PathInfo, PhysicalTopology};
use crate::tree::{Arrival, OverlayMessage, Payload, Send, TreeConfig, TreeState, TreeTimers};

pub use engine::{EventQueue, Trace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Per-hop processing delay before a message leaves a node, milliseconds.
    pub proc_delay: f64,
    /// Keepalive period on every tunnel, milliseconds.
    pub keepalive_period: f64,
    /// Missed keepalives before a tunnel is declared dead.
    pub keepalive_misses: u32,
    /// Wait before giving up on an unreachable contact, milliseconds.
    pub contact_timeout: f64,
    /// First and largest retry delay when every contact failed, seconds.
    pub backoff_initial: f64,
    pub backoff_max: f64,
    /// Check degree bounds and tunnel symmetry after every event.
    pub check_invariants: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            proc_delay: 0.0,
            keepalive_period: 1000.0,
            keepalive_misses: 3,
            contact_timeout: 1000.0,
            backoff_initial: 1.0,
            backoff_max: 60.0,
            check_invariants: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.proc_delay < 0.0 {
            return Err("proc_delay must be non-negative".into());
        }
        if !(self.keepalive_period > 0.0 && self.contact_timeout > 0.0) || self.keepalive_misses == 0 {
            return Err("keepalive_period, keepalive_misses and contact_timeout must be positive".into());
        }
        if !(self.backoff_initial > 0.0 && self.backoff_max >= self.backoff_initial) {
            return Err("backoff_initial must be positive and not above backoff_max".into());
        }
        Ok(())
    }
}

/// Everything a node needs to run the protocol.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub overlay: OverlayConfig,
    pub membership: MembershipConfig,
    pub tree: TreeConfig,
    pub connectivity: ConnectivityConfig,
    pub engine: EngineConfig,
}

impl SimParams {
    pub fn validate(&self) -> Result<(), String> {
        self.overlay.validate()?;
        self.tree.validate()?;
        self.connectivity.validate()?;
        self.engine.validate()?;
        if self.membership.cache_size == 0 {
            return Err("cache_size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChurnModel {
    /// Median node lifetime in seconds; absent means nodes never fail.
    pub median_lifetime: Option<f64>,
    /// Seconds between a crash and the join of its replacement.
    pub rejoin_delay: f64,
}

impl Default for ChurnModel {
    fn default() -> Self {
        ChurnModel { median_lifetime: None, rejoin_delay: 10.0 }
    }
}

impl ChurnModel {
    pub fn draw_lifetime(&self, rng: &mut impl Rng) -> Option<SimTime> {
        let median = self.median_lifetime?;
        let rate = std::f64::consts::LN_2 / median;
        let u: f64 = rng.random::<f64>();
        Some(SimTime::from_secs_f64(-(1.0 - u).ln() / rate))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workload {
    /// Seconds between application messages of one node.
    pub message_period: f64,
    pub message_size: u32,
    /// Generation window, seconds.
    pub start: f64,
    pub stop: Option<f64>,
}

impl Default for Workload {
    fn default() -> Self {
        Workload { message_period: 5.0, message_size: 64, start: 0.0, stop: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Joining,
    Active,
    Dead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ContactMode {
    Join,
    Repair,
}

struct Runtime {
    host: HostId,
    tree: TreeState,
    ledger: Option<HeartbeatLedger>,
    status: Status,
    keepalive_phase: SimTime,
    contacts: VecDeque<NodeId>,
    tried: HashSet<NodeId>,
    mode: Option<ContactMode>,
    backoff: Backoff,
    repair_scheduled: bool,
    check_scheduled: bool,
    infrastructure: bool,
}

#[derive(Clone, Debug)]
enum Event {
    Join,
    Crash(NodeId),
    Depart { from: NodeId, to: NodeId, tunnel: TunnelId, msg: OverlayMessage },
    Deliver { from: NodeId, to: NodeId, tunnel: TunnelId, msg: OverlayMessage },
    Detect { at: NodeId, peer: NodeId, tunnel: TunnelId },
    Contact(NodeId),
    Optimize(NodeId),
    Heartbeat(NodeId),
    Sweep(NodeId),
    Check(NodeId),
    Repair(NodeId),
    DrainEnd { a: NodeId, b: NodeId, tunnel: TunnelId },
    App(NodeId),
    Partition(Vec<u8>),
    Heal,
}

impl Event {
    fn name(&self) -> &'static str {
        match self {
            Event::Join => "join",
            Event::Crash(_) => "crash",
            Event::Depart { .. } => "depart",
            Event::Deliver { .. } => "deliver",
            Event::Detect { .. } => "detect",
            Event::Contact(_) => "contact",
            Event::Optimize(_) => "optimize",
            Event::Heartbeat(_) => "heartbeat",
            Event::Sweep(_) => "sweep",
            Event::Check(_) => "check",
            Event::Repair(_) => "repair",
            Event::DrainEnd { .. } => "drain_end",
            Event::App(_) => "app",
            Event::Partition(_) => "partition",
            Event::Heal => "heal",
        }
    }
}

/// One tunnel crossing of one message.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransmissionRecord {
    pub message: MessageId,
    pub from: NodeId,
    pub to: NodeId,
    pub tunnel: TunnelId,
    pub links: Vec<LinkId>,
    pub send_time: SimTime,
    pub delivery_time: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PongRecord {
    pub ping: MessageId,
    pub replier: NodeId,
    pub sent: SimTime,
    pub returned: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RepairRecord {
    pub node: NodeId,
    /// When the node found itself disconnected.
    pub detected: SimTime,
    /// When it started contacting (after the random wait).
    pub started: Option<SimTime>,
    pub completed: Option<SimTime>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DetectionRecord {
    pub at: NodeId,
    pub peer: NodeId,
    pub tunnel: TunnelId,
    pub failed: SimTime,
    pub detected: SimTime,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Counters {
    pub events: u64,
    pub data_originated: u64,
    pub data_delivered: u64,
    pub heartbeats_originated: u64,
    pub duplicates: u64,
    pub drop_routes: u64,
    pub resets_originated: u64,
    pub transmissions: u64,
    pub data_transmissions: u64,
    pub control_transmissions: u64,
    pub lost_in_queue: u64,
    pub lost_dead_receiver: u64,
    pub lost_partition: u64,
    pub lost_no_tunnel: u64,
    pub joins: u64,
    pub crashes: u64,
    pub rejected_crashes: u64,
    pub failures_detected: u64,
    pub repairs_started: u64,
    pub repairs_completed: u64,
    pub reconfigurations: u64,
    pub contacts: u64,
    pub max_filters: usize,
    pub max_idstore: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("invariant violated at {time}: {msg}")]
    Invariant { time: SimTime, msg: String },
    #[error("{0}")]
    Rejected(String),
    #[error("trace output: {0}")]
    Io(#[from] std::io::Error),
}

pub struct Simulation {
    params: SimParams,
    overlay: Overlay,
    rt: Vec<Runtime>,
    queue: EventQueue<Event>,
    now: SimTime,
    rng: ChaCha8Rng,
    timers: TreeTimers,
    proc_delay: SimTime,
    host_used: Vec<bool>,
    heartbeat_sources: Vec<NodeId>,
    bootstrap: NodeId,
    churn: ChurnModel,
    workload: Option<Workload>,
    delivery: Option<DeliveryAccounting>,
    optimizer_on: bool,
    control_on: bool,
    pending_crash: HashSet<NodeId>,
    pending_detect: HashSet<TunnelId>,
    partition_since: Option<SimTime>,
    tracked: HashSet<MessageId>,
    stress: HashMap<MessageId, BTreeMap<LinkId, u32>>,
    tracked_dups: HashMap<MessageId, u32>,
    records: Vec<TransmissionRecord>,
    ping_sent: HashMap<MessageId, SimTime>,
    pongs: Vec<PongRecord>,
    reconfigs: Vec<ReconfigEvent>,
    repairs: Vec<RepairRecord>,
    detections: Vec<DetectionRecord>,
    crash_times: HashMap<NodeId, SimTime>,
    counters: Counters,
    trace: Trace,
    violation: Option<SimError>,
}

impl Simulation {
    pub fn new(topo: Arc<PhysicalTopology>, params: SimParams, seed: u64) -> Result<Self, SimError> {
        params.validate().map_err(SimError::Params)?;
        let hosts = topo.hosts().len();
        let paths = PathCache::new(topo);
        let mut overlay = Overlay::new(params.overlay.clone(), params.membership.clone(), paths);
        if params.connectivity.heartbeat_sources > 0 {
            overlay.set_heartbeat_window(Some(params.connectivity.pin_window()));
        }
        let timers = TreeTimers {
            idstore: SimTime::from_secs_f64(params.tree.idstore_timeout),
            filter: params.overlay.filter_ttl(),
        };
        let proc_delay = SimTime::from_millis_f64(params.engine.proc_delay);
        Ok(Simulation {
            overlay,
            rt: Vec::new(),
            queue: EventQueue::new(),
            now: SimTime::ZERO,
            rng: ChaCha8Rng::seed_from_u64(seed),
            timers,
            proc_delay,
            host_used: vec![false; hosts],
            heartbeat_sources: Vec::new(),
            bootstrap: NodeId(0),
            churn: ChurnModel::default(),
            workload: None,
            delivery: None,
            optimizer_on: true,
            control_on: true,
            pending_crash: HashSet::new(),
            pending_detect: HashSet::new(),
            partition_since: None,
            tracked: HashSet::new(),
            stress: HashMap::new(),
            tracked_dups: HashMap::new(),
            records: Vec::new(),
            ping_sent: HashMap::new(),
            pongs: Vec::new(),
            reconfigs: Vec::new(),
            repairs: Vec::new(),
            detections: Vec::new(),
            crash_times: HashMap::new(),
            counters: Counters::default(),
            trace: Trace::default(),
            violation: None,
            params,
        })
    }

    pub fn set_trace_sink(&mut self, sink: Box<dyn Write + std::marker::Send>) {
        self.trace = Trace::with_sink(sink);
    }

    pub fn set_churn(&mut self, churn: ChurnModel) {
        self.churn = churn;
    }

    pub fn set_workload(&mut self, workload: Workload) {
        self.workload = Some(workload);
    }

    /// Starts delivery accounting for messages generated in `[from, to)`.
    pub fn set_delivery_window(&mut self, t_prop: SimTime, from: SimTime, to: SimTime, bucket: SimTime) {
        let mut acc = DeliveryAccounting::new(t_prop, from, to, bucket);
        for (i, r) in self.rt.iter().enumerate() {
            if r.status != Status::Dead {
                acc.on_join(NodeId(i as u32), self.now);
            }
        }
        self.delivery = Some(acc);
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn overlay(&self) -> &Overlay {
        &self.overlay
    }

    pub fn topology(&self) -> &Arc<PhysicalTopology> {
        self.overlay.paths().topology()
    }

    pub fn tree_state(&self, n: NodeId) -> &TreeState {
        &self.rt[n.index()].tree
    }

    pub fn ledger(&self, n: NodeId) -> Option<&HeartbeatLedger> {
        self.rt.get(n.index()).and_then(|r| r.ledger.as_ref())
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn reconfigurations(&self) -> &[ReconfigEvent] {
        &self.reconfigs
    }

    pub fn repairs(&self) -> &[RepairRecord] {
        &self.repairs
    }

    pub fn detections(&self) -> &[DetectionRecord] {
        &self.detections
    }

    pub fn transmissions(&self) -> &[TransmissionRecord] {
        &self.records
    }

    pub fn pongs(&self) -> &[PongRecord] {
        &self.pongs
    }

    pub fn heartbeat_sources(&self) -> &[NodeId] {
        &self.heartbeat_sources
    }

    pub fn bootstrap(&self) -> NodeId {
        self.bootstrap
    }

    pub fn trace_hash(&self) -> String {
        self.trace.digest()
    }

    pub fn trace_events(&self) -> u64 {
        self.trace.count()
    }

    pub fn finish_trace(&mut self) -> Result<(), SimError> {
        Ok(self.trace.finish()?)
    }

    pub fn delivery_report(&self) -> Option<DeliveryReport> {
        self.delivery.as_ref().map(|d| d.report())
    }

    pub fn delivery(&self) -> Option<&DeliveryAccounting> {
        self.delivery.as_ref()
    }

    pub fn is_alive(&self, n: NodeId) -> bool {
        self.rt.get(n.index()).is_some_and(|r| r.status != Status::Dead)
    }

    pub fn is_active(&self, n: NodeId) -> bool {
        self.rt.get(n.index()).is_some_and(|r| r.status == Status::Active)
    }

    pub fn alive_nodes(&self) -> Vec<NodeId> {
        (0..self.rt.len() as u32).map(NodeId).filter(|&n| self.is_alive(n)).collect()
    }

    pub fn node_count(&self) -> usize {
        self.rt.len()
    }

    /// Per-link copy counts of a tracked message.
    pub fn link_stress(&self, id: MessageId) -> Option<&BTreeMap<LinkId, u32>> {
        self.stress.get(&id)
    }

    pub fn tracked_duplicates(&self, id: MessageId) -> u32 {
        self.tracked_dups.get(&id).copied().unwrap_or(0)
    }

    /// Changes the hop limit of failure announcements from now on.
    pub fn set_reset_ttl(&mut self, ttl: u32) {
        self.params.tree.reset_ttl = ttl;
    }

    pub fn set_optimizer(&mut self, on: bool) {
        self.optimizer_on = on;
    }

    /// Heartbeats and partition checks. Re-enabling grants every node a
    /// fresh grace window.
    pub fn set_control_plane(&mut self, on: bool) {
        let was = self.control_on;
        self.control_on = on;
        if on && !was {
            let now = self.now;
            for i in 0..self.rt.len() {
                let n = NodeId(i as u32);
                if self.rt[i].status != Status::Active {
                    continue;
                }
                if let Some(l) = self.rt[i].ledger.as_mut() {
                    l.rearm(now);
                }
                self.schedule_check(n);
                if self.heartbeat_sources.contains(&n) {
                    self.queue.push(now, Event::Heartbeat(n));
                }
            }
        }
    }

    /// Joins `count` nodes, one every `spacing`, starting now. The first
    /// joiner becomes the bootstrap node and the first few the heartbeat sources.
    pub fn schedule_initial_joins(&mut self, count: usize, spacing: SimTime) {
        for i in 0..count {
            self.queue.push(self.now + spacing * i as u64, Event::Join);
        }
    }

    pub fn schedule_join(&mut self, at: SimTime) {
        self.queue.push(at.max(self.now), Event::Join);
    }

    pub fn schedule_crash(&mut self, n: NodeId, at: SimTime) -> Result<(), SimError> {
        if n.index() < self.rt.len() && !self.is_alive(n) {
            return Err(SimError::Rejected(format!("{n} is already dead")));
        }
        if !self.pending_crash.insert(n) {
            return Err(SimError::Rejected(format!("{n} already has a crash scheduled")));
        }
        self.queue.push(at.max(self.now), Event::Crash(n));
        Ok(())
    }

    /// Separates nodes by group label from `at` until `heal_at`.
    pub fn schedule_partition(&mut self, groups: Vec<u8>, at: SimTime, heal_at: Option<SimTime>) {
        self.queue.push(at.max(self.now), Event::Partition(groups));
        if let Some(h) = heal_at {
            self.queue.push(h.max(at), Event::Heal);
        }
    }

    pub fn run_until(&mut self, end: SimTime) -> Result<(), SimError> {
        while let Some((t, ev)) = self.queue.pop_until(end) {
            debug_assert!(t >= self.now);
            self.now = t;
            self.counters.events += 1;
            self.dispatch(ev);
            if let Some(e) = self.violation.take() {
                return Err(e);
            }
        }
        self.now = self.now.max(end);
        Ok(())
    }

    /// Originates a multicast at `n` right now. Tracked messages keep
    /// per-link stress and a transmission log.
    pub fn multicast(&mut self, n: NodeId, payload: Payload, track: bool) -> Option<MessageId> {
        if !self.is_alive(n) {
            return None;
        }
        let links = self.overlay.links(n);
        let ttl = self.params.tree.data_ttl;
        let (msg, sends) = self.rt[n.index()].tree.originate(n, payload, ttl, self.now, &links, self.timers);
        if track {
            self.tracked.insert(msg.id);
            self.stress.entry(msg.id).or_default();
        }
        match payload {
            Payload::Data => {
                self.counters.data_originated += 1;
                if let Some(d) = self.delivery.as_mut() {
                    d.on_generate(msg.id, self.now);
                }
            }
            Payload::Heartbeat => self.counters.heartbeats_originated += 1,
            Payload::Ping => {
                self.ping_sent.insert(msg.id, self.now);
            }
            _ => {}
        }
        let now = self.now;
        self.trace.record(now, "originate", n.0, [msg.id.seq, 0, 0], || format!("msg={} kind={}", msg.id, payload.name()));
        for s in sends {
            self.transmit(n, s);
        }
        Some(msg.id)
    }

    /// Number of tunnels `n` currently holds, for test and report code.
    pub fn degree(&self, n: NodeId) -> usize {
        self.overlay.node(n).degree()
    }

    // ---- event handling ----

    fn dispatch(&mut self, ev: Event) {
        let now = self.now;
        let (node, words) = match &ev {
            Event::Join => (self.rt.len() as u32, [0, 0, 0]),
            Event::Crash(n)
            | Event::Contact(n)
            | Event::Optimize(n)
            | Event::Heartbeat(n)
            | Event::Sweep(n)
            | Event::Check(n)
            | Event::Repair(n)
            | Event::App(n) => (n.0, [0, 0, 0]),
            Event::Depart { from, to, tunnel, msg } => (from.0, [to.0 as u64, tunnel.0, msg.id.seq ^ ((msg.id.source.0 as u64) << 40)]),
            Event::Deliver { from, to, tunnel, msg } => (to.0, [from.0 as u64, tunnel.0, msg.id.seq ^ ((msg.id.source.0 as u64) << 40)]),
            Event::Detect { at, peer, tunnel } => (at.0, [peer.0 as u64, tunnel.0, 0]),
            Event::DrainEnd { a, b, tunnel } => (a.0, [b.0 as u64, tunnel.0, 0]),
            Event::Partition(g) => (0, [g.iter().filter(|&&x| x != 0).count() as u64, 0, 0]),
            Event::Heal => (0, [0, 0, 0]),
        };
        let detail = || match &ev {
            Event::Deliver { from, tunnel, msg, .. } | Event::Depart { to: from, tunnel, msg, .. } => {
                format!("msg={} kind={} peer={} tunnel={} ttl={}", msg.id, msg.payload.name(), from, tunnel, msg.ttl)
            }
            Event::Detect { peer, tunnel, .. } => format!("peer={peer} tunnel={tunnel}"),
            Event::DrainEnd { b, tunnel, .. } => format!("peer={b} tunnel={tunnel}"),
            _ => String::new(),
        };
        self.trace.record(now, ev.name(), node, words, detail);
        match ev {
            Event::Join => self.on_join(),
            Event::Crash(n) => self.on_crash(n),
            Event::Depart { from, to, tunnel, msg } => self.on_depart(from, to, tunnel, msg),
            Event::Deliver { from, to, tunnel, msg } => self.on_deliver(from, to, tunnel, msg),
            Event::Detect { at, peer, tunnel } => self.on_detect(at, peer, tunnel),
            Event::Contact(n) => self.on_contact(n),
            Event::Optimize(n) => self.on_optimize(n),
            Event::Heartbeat(n) => self.on_heartbeat(n),
            Event::Sweep(n) => self.on_sweep(n),
            Event::Check(n) => self.on_check(n),
            Event::Repair(n) => self.on_repair(n),
            Event::DrainEnd { a, b, tunnel } => self.on_drain_end(a, b, tunnel),
            Event::App(n) => self.on_app(n),
            Event::Partition(groups) => {
                self.overlay.set_partition(Some(groups));
                self.partition_since = Some(now);
                self.schedule_partition_detection();
            }
            Event::Heal => {
                self.overlay.set_partition(None);
                self.partition_since = None;
            }
        }
        if self.params.engine.check_invariants && self.violation.is_none() {
            let pending = &self.pending_detect;
            if let Err(msg) = self.overlay.check_invariants(|t| pending.contains(&t)) {
                self.violation = Some(SimError::Invariant { time: now, msg });
            }
        }
    }

    fn on_join(&mut self) {
        let now = self.now;
        let free: Vec<usize> = (0..self.host_used.len()).filter(|&h| !self.host_used[h]).collect();
        if free.is_empty() {
            self.violation = Some(SimError::Rejected("no free host for a joining node".into()));
            return;
        }
        let host = HostId(free[self.rng.random_range(0..free.len())] as u32);
        self.host_used[host.index()] = true;
        let n = self.overlay.add_node(host);
        let k = SimTime::from_millis_f64(self.params.engine.keepalive_period);
        let phase = SimTime::from_micros(self.rng.random_range(0..k.as_micros().max(1)));
        let want_sources = self.params.connectivity.heartbeat_sources;
        let infrastructure = n == self.bootstrap || self.heartbeat_sources.len() < want_sources;
        if self.heartbeat_sources.len() < want_sources {
            self.heartbeat_sources.push(n);
        }
        self.rt.push(Runtime {
            host,
            tree: TreeState::new(),
            ledger: None,
            status: Status::Joining,
            keepalive_phase: phase,
            contacts: VecDeque::new(),
            tried: HashSet::new(),
            mode: None,
            backoff: Backoff::new(
                SimTime::from_secs_f64(self.params.engine.backoff_initial),
                SimTime::from_secs_f64(self.params.engine.backoff_max),
            ),
            repair_scheduled: false,
            check_scheduled: false,
            infrastructure,
        });
        self.counters.joins += 1;
        if let Some(d) = self.delivery.as_mut() {
            d.on_join(n, now);
        }
        if !infrastructure {
            if let Some(life) = self.churn.draw_lifetime(&mut self.rng) {
                self.pending_crash.insert(n);
                self.queue.push(now + life, Event::Crash(n));
            }
        }
        if let Some(w) = self.workload.clone() {
            let period = SimTime::from_secs_f64(w.message_period);
            let phase = SimTime::from_micros(self.rng.random_range(0..period.as_micros().max(1)));
            let start = SimTime::from_secs_f64(w.start).max(now);
            self.queue.push(start + phase, Event::App(n));
        }
        if n == self.bootstrap {
            self.activate(n);
        } else {
            self.begin_contacts(n, ContactMode::Join, vec![self.bootstrap]);
        }
    }

    fn activate(&mut self, n: NodeId) {
        let now = self.now;
        self.rt[n.index()].status = Status::Active;
        let cfg = &self.params;
        let opt_period = cfg.overlay.optimizer_interval();
        let sweep = SimTime::from_secs_f64(cfg.tree.sweep_period);
        let opt_phase = SimTime::from_micros(self.rng.random_range(0..opt_period.as_micros().max(1)));
        let sweep_phase = SimTime::from_micros(self.rng.random_range(0..sweep.as_micros().max(1)));
        self.queue.push(now + opt_phase, Event::Optimize(n));
        self.queue.push(now + sweep_phase, Event::Sweep(n));
        if !self.heartbeat_sources.is_empty() || self.params.connectivity.heartbeat_sources > 0 {
            let sources = self.expected_sources();
            self.rt[n.index()].ledger = Some(HeartbeatLedger::new(sources, now, self.params.connectivity.window()));
            self.schedule_check(n);
        }
        if self.heartbeat_sources.contains(&n) {
            let p = self.params.connectivity.period();
            let phase = SimTime::from_micros(self.rng.random_range(0..p.as_micros().max(1)));
            self.queue.push(now + phase, Event::Heartbeat(n));
        }
    }

    /// Heartbeat sources are the first joiners; until they exist the
    /// ledger names the ids they will get.
    fn expected_sources(&self) -> Vec<NodeId> {
        (0..self.params.connectivity.heartbeat_sources as u32).map(NodeId).collect()
    }

    fn schedule_check(&mut self, n: NodeId) {
        let r = &mut self.rt[n.index()];
        if r.check_scheduled || r.status == Status::Dead {
            return;
        }
        if let Some(d) = r.ledger.as_ref().and_then(|l| l.deadline()) {
            r.check_scheduled = true;
            let at = d.max(self.now);
            self.queue.push(at, Event::Check(n));
        }
    }

    fn on_crash(&mut self, n: NodeId) {
        self.pending_crash.remove(&n);
        if !self.is_alive(n) {
            self.counters.rejected_crashes += 1;
            return;
        }
        let now = self.now;
        self.counters.crashes += 1;
        self.crash_times.insert(n, now);
        let host = self.rt[n.index()].host;
        self.host_used[host.index()] = false;
        let r = &mut self.rt[n.index()];
        r.status = Status::Dead;
        r.tree.clear();
        r.ledger = None;
        r.contacts.clear();
        let tunnels = self.overlay.crash(n);
        for (peer, tunnel, latency) in tunnels {
            let at = self.detection_time(n, latency, now);
            self.pending_detect.insert(tunnel);
            self.queue.push(at, Event::Detect { at: peer, peer: n, tunnel });
        }
        if let Some(d) = self.delivery.as_mut() {
            d.on_crash(n, now);
        }
        if self.churn.median_lifetime.is_some() && !self.rt[n.index()].infrastructure {
            let delay = SimTime::from_secs_f64(self.churn.rejoin_delay);
            self.queue.push(now + delay, Event::Join);
        }
    }

    /// When a watcher notices that `silent` stopped sending keepalives at `t`.
    fn detection_time(&self, silent: NodeId, latency: SimTime, t: SimTime) -> SimTime {
        let k = SimTime::from_millis_f64(self.params.engine.keepalive_period);
        let phase = self.rt[silent.index()].keepalive_phase;
        let last = if t >= phase {
            let periods = (t - phase).as_micros() / k.as_micros();
            phase + k * periods
        } else {
            t
        };
        let at = last + latency + k * self.params.engine.keepalive_misses as u64;
        at.max(t + SimTime::from_micros(1))
    }

    fn schedule_partition_detection(&mut self) {
        let now = self.now;
        let mut pending = Vec::new();
        for (a, b, t) in self.overlay.edges() {
            if !self.overlay.same_side(a, b) {
                pending.push((a, b, t.id, t.latency()));
            }
        }
        for (a, b, id, lat) in pending {
            self.pending_detect.insert(id);
            let ta = self.detection_time(b, lat, now);
            let tb = self.detection_time(a, lat, now);
            self.queue.push(ta, Event::Detect { at: a, peer: b, tunnel: id });
            self.queue.push(tb, Event::Detect { at: b, peer: a, tunnel: id });
        }
    }

    fn on_detect(&mut self, at: NodeId, peer: NodeId, tunnel: TunnelId) {
        if !self.is_alive(at) {
            return;
        }
        let holds = self.overlay.node(at).tunnels.get(&peer).is_some_and(|t| t.id == tunnel);
        if !holds {
            self.settle_detect(tunnel);
            return;
        }
        let peer_holds = self.is_alive(peer) && self.overlay.node(peer).tunnels.get(&at).is_some_and(|t| t.id == tunnel);
        if peer_holds && self.overlay.reachable(at, peer) {
            // Keepalives got through again before the deadline.
            self.settle_detect(tunnel);
            return;
        }
        let now = self.now;
        self.overlay.remove_failed(at, peer, tunnel);
        self.settle_detect(tunnel);
        self.counters.failures_detected += 1;
        let failed = self.crash_times.get(&peer).copied().or(self.partition_since).unwrap_or(now);
        self.detections.push(DetectionRecord { at, peer, tunnel, failed, detected: now });
        let links = self.overlay.links(at);
        let ttl = self.params.tree.reset_ttl;
        let sends = self.rt[at.index()].tree.on_failed_connection(at, tunnel, ttl, now, &links, self.timers);
        self.counters.resets_originated += 1;
        for s in sends {
            self.transmit(at, s);
        }
        if self.overlay.node(at).degree() == 0 && self.rt[at.index()].mode.is_none() && at != self.bootstrap {
            self.counters.repairs_started += 1;
            self.repairs.push(RepairRecord { node: at, detected: now, started: Some(now), completed: None });
            self.begin_contacts(at, ContactMode::Repair, vec![self.bootstrap]);
        }
    }

    fn settle_detect(&mut self, tunnel: TunnelId) {
        let any_half = self
            .overlay
            .nodes()
            .iter()
            .any(|n| n.alive && n.tunnels.values().any(|t| t.id == tunnel));
        let both_halves = self
            .overlay
            .nodes()
            .iter()
            .filter(|n| n.alive && n.tunnels.values().any(|t| t.id == tunnel))
            .count()
            == 2;
        if !any_half || both_halves {
            self.pending_detect.remove(&tunnel);
        }
    }

    fn begin_contacts(&mut self, n: NodeId, mode: ContactMode, contacts: Vec<NodeId>) {
        let r = &mut self.rt[n.index()];
        r.mode = Some(mode);
        r.contacts = contacts.into_iter().filter(|&c| c != n).collect();
        r.tried.clear();
        let now = self.now;
        self.queue.push(now, Event::Contact(n));
    }

    fn on_contact(&mut self, n: NodeId) {
        if !self.is_alive(n) {
            return;
        }
        let Some(mode) = self.rt[n.index()].mode else { return };
        let now = self.now;
        let next = loop {
            match self.rt[n.index()].contacts.pop_front() {
                Some(c) if c == n || self.overlay.node(n).tunnels.contains_key(&c) => continue,
                Some(c) => break Some(c),
                None => break None,
            }
        };
        let Some(c) = next else {
            // Every contact failed: back off, then start over at the bootstrap node.
            let delay = self.rt[n.index()].backoff.next_delay();
            let r = &mut self.rt[n.index()];
            r.tried.clear();
            if n != self.bootstrap {
                r.contacts.push_back(self.bootstrap);
            }
            self.queue.push(now + delay, Event::Contact(n));
            return;
        };
        self.rt[n.index()].tried.insert(c);
        self.counters.contacts += 1;
        if mode == ContactMode::Repair {
            self.make_room(n, c);
        }
        let outcome = self.overlay.contact(n, c, now, &mut self.rng);
        let now = self.now;
        self.trace.record(now, "contact_result", n.0, [c.0 as u64, 0, 0], || format!("contact={c} outcome={outcome:?}"));
        match outcome {
            ContactOutcome::Accepted(_) => {
                let r = &mut self.rt[n.index()];
                r.mode = None;
                r.contacts.clear();
                r.backoff.reset();
                match mode {
                    ContactMode::Join => {
                        if r.status == Status::Joining {
                            self.activate(n);
                        }
                    }
                    ContactMode::Repair => {
                        self.counters.repairs_completed += 1;
                        if let Some(rec) = self.repairs.iter_mut().rev().find(|r| r.node == n && r.completed.is_none()) {
                            rec.completed = Some(now);
                        }
                        if let Some(l) = self.rt[n.index()].ledger.as_mut() {
                            l.rearm(now);
                        }
                        if self.rt[n.index()].status == Status::Joining {
                            self.activate(n);
                        } else {
                            self.schedule_check(n);
                        }
                    }
                }
                self.check_node(n);
            }
            ContactOutcome::Refused { candidates, .. } => {
                let r = &mut self.rt[n.index()];
                for cand in candidates {
                    if cand != n && !r.tried.contains(&cand) && !r.contacts.contains(&cand) {
                        r.contacts.push_back(cand);
                    }
                }
                let rtt = self.overlay.host_latency(n, c) * 2;
                self.queue.push(now + rtt, Event::Contact(n));
            }
            ContactOutcome::Unreachable => {
                let wait = SimTime::from_millis_f64(self.params.engine.contact_timeout);
                self.queue.push(now + wait, Event::Contact(n));
            }
        }
    }

    /// A repairing node with no free initiated slot gives one up, as long as
    /// `c` would take the new tunnel.
    fn make_room(&mut self, n: NodeId, c: NodeId) {
        let cfg = self.overlay.config();
        let node = self.overlay.node(n);
        if node.initiated() < cfg.max_initiated || !self.overlay.reachable(n, c) {
            return;
        }
        if self.overlay.node(c).accepted() >= cfg.max_accepted || node.tunnels.contains_key(&c) {
            return;
        }
        let now = self.now;
        let victim = node
            .tunnels
            .values()
            .filter(|t| t.direction == Direction::Initiated && self.overlay.can_drop(n, t.peer, now))
            .max_by(|a, b| a.est_delay_ms.total_cmp(&b.est_delay_ms).then(a.peer.cmp(&b.peer)))
            .map(|t| t.peer);
        if let Some(peer) = victim {
            self.deliberate_drop(n, peer);
        }
    }

    fn deliberate_drop(&mut self, a: NodeId, b: NodeId) {
        let now = self.now;
        if let Some((tunnel, until)) = self.overlay.drop_tunnel(a, b, now) {
            self.after_drop(a, b, tunnel, until);
        }
    }

    /// Both ends of a deliberately dropped tunnel reset their one-hop
    /// neighbourhood so any subtree that hung off it is fed again.
    fn after_drop(&mut self, a: NodeId, b: NodeId, tunnel: TunnelId, until: SimTime) {
        let now = self.now;
        for x in [a, b] {
            if !self.is_alive(x) {
                continue;
            }
            let links = self.overlay.links(x);
            let ttl = self.params.tree.reset_ttl;
            let sends = self.rt[x.index()].tree.announce_reset(x, ttl, now, &links, self.timers);
            self.counters.resets_originated += 1;
            for s in sends {
                self.transmit(x, s);
            }
        }
        for x in [a, b] {
            if self.is_active(x) && x != self.bootstrap && self.overlay.node(x).degree() == 0 && self.rt[x.index()].mode.is_none() {
                // Orphaned by the drop: look for a new neighbour while the old tunnel drains.
                self.counters.repairs_started += 1;
                self.repairs.push(RepairRecord { node: x, detected: now, started: Some(now), completed: None });
                self.begin_contacts(x, ContactMode::Repair, vec![self.bootstrap]);
            }
        }
        if until > now {
            self.queue.push(until, Event::DrainEnd { a, b, tunnel });
        } else {
            self.on_drain_end(a, b, tunnel);
        }
    }

    fn on_drain_end(&mut self, a: NodeId, b: NodeId, tunnel: TunnelId) {
        self.overlay.finish_drain(a, b, tunnel);
        for x in [a, b] {
            if self.is_alive(x) {
                self.rt[x.index()].tree.purge_tunnel(tunnel);
            }
        }
    }

    fn on_optimize(&mut self, n: NodeId) {
        if !self.is_active(n) {
            return;
        }
        let now = self.now;
        let period = self.params.overlay.optimizer_interval();
        self.queue.push(now + period, Event::Optimize(n));
        if !self.optimizer_on || self.rt[n.index()].mode.is_some() {
            return;
        }
        let events = self.overlay.optimizer_iteration(n, now, &mut self.rng);
        for ev in &events {
            if let (Some(peer), Some(tunnel)) = (ev.dropped_peer, ev.dropped) {
                let until = now + self.params.overlay.drain();
                self.after_drop(n, peer, tunnel, until);
            }
            self.counters.reconfigurations += 1;
            let (kind, added, dropped) = (ev.kind, ev.added_peer, ev.dropped_peer);
            self.trace.record(now, "reconfig", n.0, [added.0 as u64, dropped.map_or(u64::MAX, |d| d.0 as u64), 0], || {
                format!("kind={kind:?} added={added} dropped={dropped:?}")
            });
        }
        self.reconfigs.extend(events);
        self.check_node(n);
    }

    fn check_node(&mut self, n: NodeId) {
        if !self.params.engine.check_invariants || self.violation.is_some() {
            return;
        }
        let cfg = self.overlay.config();
        let node = self.overlay.node(n);
        if node.initiated() > cfg.max_initiated || node.accepted() > cfg.max_accepted {
            self.violation = Some(SimError::Invariant {
                time: self.now,
                msg: format!("{n} exceeds its degree bounds"),
            });
        }
    }

    fn on_heartbeat(&mut self, n: NodeId) {
        if !self.is_active(n) || !self.control_on {
            return;
        }
        let now = self.now;
        self.queue.push(now + self.params.connectivity.period(), Event::Heartbeat(n));
        if let Some(l) = self.rt[n.index()].ledger.as_mut() {
            l.heard(n, now);
        }
        self.multicast(n, Payload::Heartbeat, false);
    }

    fn on_sweep(&mut self, n: NodeId) {
        if !self.is_alive(n) {
            return;
        }
        let now = self.now;
        let tree = &mut self.rt[n.index()].tree;
        tree.sweep(now);
        let (ids, f, fl) = tree.store_sizes(now);
        self.counters.max_idstore = self.counters.max_idstore.max(ids);
        self.counters.max_filters = self.counters.max_filters.max(f.max(fl));
        let period = SimTime::from_secs_f64(self.params.tree.sweep_period);
        self.queue.push(now + period, Event::Sweep(n));
    }

    fn on_check(&mut self, n: NodeId) {
        if !self.is_alive(n) {
            return;
        }
        self.rt[n.index()].check_scheduled = false;
        if !self.control_on {
            return;
        }
        let now = self.now;
        let r = &self.rt[n.index()];
        let Some(ledger) = r.ledger.as_ref() else { return };
        if ledger.connected(now) {
            self.schedule_check(n);
            return;
        }
        if r.repair_scheduled || r.mode.is_some() {
            return;
        }
        let jitter = self.params.connectivity.jitter();
        let wait = SimTime::from_micros(self.rng.random_range(0..=jitter.as_micros()));
        self.rt[n.index()].repair_scheduled = true;
        self.repairs.push(RepairRecord { node: n, detected: now, started: None, completed: None });
        self.queue.push(now + wait, Event::Repair(n));
    }

    fn on_repair(&mut self, n: NodeId) {
        if !self.is_alive(n) {
            return;
        }
        let now = self.now;
        self.rt[n.index()].repair_scheduled = false;
        if let Some(rec) = self.repairs.iter_mut().rev().find(|r| r.node == n && r.started.is_none()) {
            rec.started = Some(now);
        }
        self.counters.repairs_started += 1;
        self.overlay.node_mut(n).membership.flush();
        let mut contacts = self.rt[n.index()].ledger.as_ref().map(|l| l.unheard(now)).unwrap_or_default();
        contacts.push(self.bootstrap);
        self.begin_contacts(n, ContactMode::Repair, contacts);
    }

    fn on_app(&mut self, n: NodeId) {
        if !self.is_alive(n) {
            return;
        }
        let Some(w) = self.workload.clone() else { return };
        let now = self.now;
        if w.stop.is_some_and(|s| now.as_secs_f64() >= s) {
            return;
        }
        self.multicast(n, Payload::Data, false);
        self.queue.push(now + SimTime::from_secs_f64(w.message_period), Event::App(n));
    }

    // ---- transport ----

    fn transmit(&mut self, from: NodeId, s: Send) {
        if self.proc_delay == SimTime::ZERO {
            self.put_on_wire(from, s.peer, s.tunnel, s.msg);
        } else {
            let at = self.now + self.proc_delay;
            self.queue.push(at, Event::Depart { from, to: s.peer, tunnel: s.tunnel, msg: s.msg });
        }
    }

    fn on_depart(&mut self, from: NodeId, to: NodeId, tunnel: TunnelId, msg: OverlayMessage) {
        if !self.is_alive(from) {
            self.counters.lost_in_queue += 1;
            return;
        }
        self.put_on_wire(from, to, tunnel, msg);
    }

    fn put_on_wire(&mut self, from: NodeId, to: NodeId, tunnel: TunnelId, msg: OverlayMessage) {
        let Some((peer, path)) = self.overlay.link_path(from, tunnel) else {
            self.counters.lost_no_tunnel += 1;
            return;
        };
        debug_assert_eq!(peer, to);
        let now = self.now;
        let arrive = now + path.latency;
        self.counters.transmissions += 1;
        if msg.payload.is_multicast() {
            self.counters.data_transmissions += 1;
        } else {
            self.counters.control_transmissions += 1;
        }
        if self.tracked.contains(&msg.id) {
            self.record_transmission(from, to, tunnel, msg.id, &path, arrive);
        }
        self.queue.push(arrive, Event::Deliver { from, to, tunnel, msg });
    }

    fn record_transmission(&mut self, from: NodeId, to: NodeId, tunnel: TunnelId, id: MessageId, path: &Arc<PathInfo>, arrive: SimTime) {
        let stress = self.stress.entry(id).or_default();
        for &l in &path.links {
            *stress.entry(l).or_insert(0) += 1;
        }
        let now = self.now;
        let links = path.links.clone();
        self.trace.record(now, "send", from.0, [to.0 as u64, tunnel.0, id.seq], || {
            let ls: Vec<String> = links.iter().map(|l| l.to_string()).collect();
            format!("msg={} peer={} tunnel={} links={}", id, to, tunnel, ls.join(","))
        });
        self.records.push(TransmissionRecord {
            message: id,
            from,
            to,
            tunnel,
            links: path.links.clone(),
            send_time: now,
            delivery_time: arrive,
        });
    }

    fn on_deliver(&mut self, from: NodeId, to: NodeId, tunnel: TunnelId, msg: OverlayMessage) {
        if !self.is_alive(to) {
            self.counters.lost_dead_receiver += 1;
            return;
        }
        if !self.overlay.same_side(from, to) {
            self.counters.lost_partition += 1;
            return;
        }
        let now = self.now;
        let link = self.overlay.link_to(to, from, tunnel);
        match msg.payload {
            Payload::Data | Payload::Heartbeat | Payload::Ping => {
                let links = self.overlay.links(to);
                let out = self.rt[to.index()].tree.on_data(to, msg, from, tunnel, link, now, &links, self.timers);
                if out.duplicate {
                    self.counters.duplicates += 1;
                    if self.tracked.contains(&msg.id) {
                        *self.tracked_dups.entry(msg.id).or_insert(0) += 1;
                    }
                }
                if out.drop_route_sent {
                    self.counters.drop_routes += 1;
                }
                if out.deliver {
                    self.on_app_deliver(to, from, link.is_some_and(|l| l.active), msg);
                }
                for s in out.sends {
                    self.transmit(to, s);
                }
            }
            Payload::DropRoute { source } => {
                self.rt[to.index()].tree.on_drop_route(source, tunnel, now, self.timers);
            }
            Payload::ResetRoute => {
                let links = self.overlay.links(to);
                let sends = self.rt[to.index()].tree.on_reset_route(msg, link, now, &links, self.timers);
                for s in sends {
                    self.transmit(to, s);
                }
            }
            Payload::Pong { ping, replier } => {
                if ping.source == to {
                    if let Some(&sent) = self.ping_sent.get(&ping) {
                        self.pongs.push(PongRecord { ping, replier, sent, returned: now });
                    }
                } else {
                    self.forward_pong(to, msg);
                }
            }
        }
    }

    fn on_app_deliver(&mut self, at: NodeId, from: NodeId, active: bool, msg: OverlayMessage) {
        let now = self.now;
        match msg.payload {
            Payload::Data => {
                self.counters.data_delivered += 1;
                if let Some(d) = self.delivery.as_mut() {
                    d.on_deliver(msg.id, at, now);
                }
            }
            Payload::Heartbeat => {
                if let Some(l) = self.rt[at.index()].ledger.as_mut() {
                    l.heard(msg.source(), now);
                }
                if active {
                    self.overlay.mark_heartbeat(at, from, msg.source(), now);
                }
            }
            Payload::Ping => {
                let pong = OverlayMessage {
                    id: self.rt[at.index()].tree.next_id(at),
                    payload: Payload::Pong { ping: msg.id, replier: at },
                    ttl: self.params.tree.data_ttl,
                };
                self.forward_pong(at, pong);
            }
            _ => {}
        }
    }

    fn forward_pong(&mut self, at: NodeId, pong: OverlayMessage) {
        let Payload::Pong { ping, .. } = pong.payload else { return };
        if let Some(Arrival::Tunnel(peer, tunnel)) = self.rt[at.index()].tree.reverse_hop(ping, self.now) {
            self.transmit(at, Send { peer, tunnel, msg: pong });
        }
    }
}

#[cfg(test)]
mod tests;
