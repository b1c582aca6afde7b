//! Base overlay: per-node tunnel tables, degree limits, path measurement and
//! the incremental short/long tunnel optimizer.
//!
//! Tunnel setup and teardown are applied to both endpoints atomically; the
//! negotiation round trip is not modelled. A deliberately dropped tunnel can
//! linger in a draining state so in-flight tree traffic is not cut abruptly.

mod optimizer;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ids::{HostId, NodeId, TunnelId};
use crate::membership::{exchange_membership, MembershipCache, MembershipConfig};
use crate::time::SimTime;
use crate::topology::{PathCache, PathInfo};

pub use optimizer::{ReconfigEvent, ReconfigKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlayConfig {
    pub max_initiated: usize,
    pub max_accepted: usize,
    /// Fraction of initiated slots reserved for short tunnels.
    pub p_short: f64,
    /// Latency separating short from long tunnels, milliseconds.
    pub d_short: f64,
    /// Minimum delay improvement for replacing a short tunnel, milliseconds.
    pub delay_threshold: f64,
    /// Minimum relative bandwidth gain for replacing a long tunnel.
    pub bw_threshold: f64,
    /// Seconds between optimizer iterations at one node.
    pub optimizer_period: f64,
    pub candidates_per_iter: usize,
    /// Seconds a route filter lives without refresh.
    pub filter_timeout: f64,
    /// Weight of the newest sample in the path estimate EWMA.
    pub ewma_alpha: f64,
    /// Multiplicative uniform measurement noise; 0.1 means ±10%.
    pub measurement_noise: f64,
    /// Allow only one replacement per iteration instead of one short plus one long.
    pub single_replacement: bool,
    /// Milliseconds a dropped tunnel keeps forwarding tree traffic before it is torn down.
    pub drain_period: f64,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        OverlayConfig {
            max_initiated: 5,
            max_accepted: 7,
            p_short: 0.5,
            d_short: 10.0,
            delay_threshold: 2.0,
            bw_threshold: 0.5,
            optimizer_period: 30.0,
            candidates_per_iter: 10,
            filter_timeout: 600.0,
            ewma_alpha: 0.5,
            measurement_noise: 0.0,
            single_replacement: false,
            drain_period: 2000.0,
        }
    }
}

impl OverlayConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_initiated == 0 || self.max_accepted == 0 {
            return Err("max_initiated and max_accepted must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_short) {
            return Err("p_short must lie in [0, 1]".into());
        }
        for (name, v) in [
            ("d_short", self.d_short),
            ("optimizer_period", self.optimizer_period),
            ("filter_timeout", self.filter_timeout),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.delay_threshold < 0.0 || self.bw_threshold < 0.0 || self.drain_period < 0.0 {
            return Err("thresholds and drain_period must be non-negative".into());
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return Err("ewma_alpha must lie in (0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.measurement_noise) {
            return Err("measurement_noise must lie in [0, 1)".into());
        }
        if self.candidates_per_iter == 0 {
            return Err("candidates_per_iter must be positive".into());
        }
        Ok(())
    }

    /// Initiated slots managed as short tunnels.
    pub fn short_slots(&self) -> usize {
        ((self.p_short * self.max_initiated as f64).ceil() as usize).min(self.max_initiated)
    }

    pub fn long_slots(&self) -> usize {
        self.max_initiated - self.short_slots()
    }

    pub fn filter_ttl(&self) -> SimTime {
        SimTime::from_secs_f64(self.filter_timeout)
    }

    pub fn optimizer_interval(&self) -> SimTime {
        SimTime::from_secs_f64(self.optimizer_period)
    }

    pub fn drain(&self) -> SimTime {
        SimTime::from_millis_f64(self.drain_period)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Initiated,
    Accepted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TunnelClass {
    Short,
    Long,
}

/// Smoothed path estimate towards another node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub delay_ms: f64,
    pub bw_bps: f64,
    pub samples: u32,
}

impl Estimate {
    pub fn fold(prev: Option<Estimate>, delay_ms: f64, bw_bps: f64, alpha: f64) -> Estimate {
        match prev {
            None => Estimate { delay_ms, bw_bps, samples: 1 },
            Some(p) => Estimate {
                delay_ms: alpha * delay_ms + (1.0 - alpha) * p.delay_ms,
                bw_bps: alpha * bw_bps + (1.0 - alpha) * p.bw_bps,
                samples: p.samples + 1,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tunnel {
    pub id: TunnelId,
    pub peer: NodeId,
    pub direction: Direction,
    pub class: TunnelClass,
    pub est_delay_ms: f64,
    pub est_bw_bps: f64,
    /// Physical route; its latency is what messages actually experience.
    pub path: Arc<PathInfo>,
    pub established: SimTime,
    /// Last time a heartbeat from each source arrived first over this tunnel.
    pub heartbeats: Vec<(NodeId, SimTime)>,
}

impl Tunnel {
    pub fn latency(&self) -> SimTime {
        self.path.latency
    }

    pub fn carries_heartbeat_since(&self, since: SimTime) -> bool {
        self.heartbeats.iter().any(|&(_, t)| t >= since)
    }
}

#[derive(Clone, Debug)]
pub struct DrainingTunnel {
    pub id: TunnelId,
    pub peer: NodeId,
    pub path: Arc<PathInfo>,
    pub until: SimTime,
}

#[derive(Clone, Debug)]
pub struct OverlayNode {
    pub id: NodeId,
    pub host: HostId,
    pub alive: bool,
    pub tunnels: BTreeMap<NodeId, Tunnel>,
    pub draining: Vec<DrainingTunnel>,
    pub membership: MembershipCache,
    pub estimates: HashMap<NodeId, Estimate>,
}

impl OverlayNode {
    pub fn initiated(&self) -> usize {
        self.tunnels.values().filter(|t| t.direction == Direction::Initiated).count()
    }

    pub fn accepted(&self) -> usize {
        self.tunnels.values().filter(|t| t.direction == Direction::Accepted).count()
    }

    pub fn degree(&self) -> usize {
        self.tunnels.len()
    }

    pub fn tunnel_by_id(&self, id: TunnelId) -> Option<&Tunnel> {
        self.tunnels.values().find(|t| t.id == id)
    }

    pub fn is_draining_peer(&self, peer: NodeId) -> bool {
        self.draining.iter().any(|d| d.peer == peer)
    }
}

/// A tunnel as seen by the tree protocol: usable for forwarding, and whether
/// it is still a live (non-draining) member of the overlay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkView {
    pub id: TunnelId,
    pub peer: NodeId,
    pub active: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Refusal {
    /// Same node, or a tunnel between the pair already exists.
    Duplicate,
    InitiatorFull,
    AcceptorFull,
    Unreachable,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ContactOutcome {
    Accepted(TunnelId),
    Refused { reason: Refusal, candidates: Vec<NodeId> },
    Unreachable,
}

pub struct Overlay {
    cfg: OverlayConfig,
    membership_cfg: MembershipConfig,
    paths: PathCache,
    nodes: Vec<OverlayNode>,
    next_tunnel: u64,
    partition: Option<Vec<u8>>,
    heartbeat_window: Option<SimTime>,
}

impl Overlay {
    pub fn new(cfg: OverlayConfig, membership_cfg: MembershipConfig, paths: PathCache) -> Self {
        Overlay {
            cfg,
            membership_cfg,
            paths,
            nodes: Vec::new(),
            next_tunnel: 0,
            partition: None,
            heartbeat_window: None,
        }
    }

    pub fn config(&self) -> &OverlayConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut OverlayConfig {
        &mut self.cfg
    }

    pub fn membership_config(&self) -> &MembershipConfig {
        &self.membership_cfg
    }

    pub fn paths(&self) -> &PathCache {
        &self.paths
    }

    pub fn add_node(&mut self, host: HostId) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(OverlayNode {
            id,
            host,
            alive: true,
            tunnels: BTreeMap::new(),
            draining: Vec::new(),
            membership: MembershipCache::new(id, self.membership_cfg.cache_size),
            estimates: HashMap::new(),
        });
        id
    }

    pub fn node(&self, id: NodeId) -> &OverlayNode {
        &self.nodes[id.index()]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut OverlayNode {
        &mut self.nodes[id.index()]
    }

    pub fn nodes(&self) -> &[OverlayNode] {
        &self.nodes
    }

    pub fn alive_nodes(&self) -> impl Iterator<Item = &OverlayNode> {
        self.nodes.iter().filter(|n| n.alive)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tunnels must not be dropped while a heartbeat crossed them within
    /// `window`. `None` disables the protection.
    pub fn set_heartbeat_window(&mut self, window: Option<SimTime>) {
        self.heartbeat_window = window;
    }

    /// Splits the network: nodes in different groups cannot exchange anything.
    pub fn set_partition(&mut self, groups: Option<Vec<u8>>) {
        self.partition = groups;
    }

    pub fn same_side(&self, a: NodeId, b: NodeId) -> bool {
        match &self.partition {
            None => true,
            Some(g) => g.get(a.index()).copied().unwrap_or(0) == g.get(b.index()).copied().unwrap_or(0),
        }
    }

    pub fn reachable(&self, a: NodeId, b: NodeId) -> bool {
        a != b && self.nodes[a.index()].alive && self.nodes[b.index()].alive && self.same_side(a, b)
    }

    /// Latency of the physical route between two nodes' hosts.
    pub fn host_latency(&self, a: NodeId, b: NodeId) -> SimTime {
        self.paths.latency(self.nodes[a.index()].host, self.nodes[b.index()].host)
    }

    /// Probes the path from `n` to `target` and folds the sample into `n`'s estimate.
    pub fn evaluate_potential_connection(&mut self, n: NodeId, target: NodeId, rng: &mut impl Rng) -> Option<Estimate> {
        if !self.reachable(n, target) {
            return None;
        }
        let path = self
            .paths
            .shortest_path(self.nodes[n.index()].host, self.nodes[target.index()].host)
            .ok()?;
        let eps = self.cfg.measurement_noise;
        let mut delay = path.latency.as_millis_f64();
        let mut bw = path.bottleneck_bw as f64;
        if eps > 0.0 {
            delay *= 1.0 + rng.random_range(-eps..=eps);
            bw *= 1.0 + rng.random_range(-eps..=eps);
        }
        let node = &mut self.nodes[n.index()];
        let est = Estimate::fold(node.estimates.get(&target).copied(), delay, bw, self.cfg.ewma_alpha);
        node.estimates.insert(target, est);
        Some(est)
    }

    pub fn classify(&self, est_delay_ms: f64) -> TunnelClass {
        if est_delay_ms <= self.cfg.d_short {
            TunnelClass::Short
        } else {
            TunnelClass::Long
        }
    }

    /// Two nodes talk: they swap membership samples.
    pub fn contact_exchange(&mut self, a: NodeId, b: NodeId, rng: &mut impl Rng) {
        if a == b {
            return;
        }
        let subset = self.membership_cfg.exchange_size;
        let (x, y) = two_mut(&mut self.nodes, a.index(), b.index());
        exchange_membership(&mut x.membership, &mut y.membership, subset, rng);
    }

    /// Negotiates a new tunnel initiated by `a` towards `b`.
    pub fn establish_tunnel(&mut self, a: NodeId, b: NodeId, now: SimTime, rng: &mut impl Rng) -> Result<TunnelId, Refusal> {
        if a == b || self.nodes[a.index()].tunnels.contains_key(&b) {
            return Err(Refusal::Duplicate);
        }
        if !self.reachable(a, b) {
            return Err(Refusal::Unreachable);
        }
        self.contact_exchange(a, b, rng);
        if self.nodes[a.index()].initiated() >= self.cfg.max_initiated {
            return Err(Refusal::InitiatorFull);
        }
        self.try_accept(a, b, now, rng)
    }

    /// Acceptor-side admission only; the caller has already made room at `a`.
    fn try_accept(&mut self, a: NodeId, b: NodeId, now: SimTime, rng: &mut impl Rng) -> Result<TunnelId, Refusal> {
        if a == b || self.nodes[a.index()].tunnels.contains_key(&b) || self.nodes[a.index()].is_draining_peer(b) {
            return Err(Refusal::Duplicate);
        }
        if !self.reachable(a, b) {
            return Err(Refusal::Unreachable);
        }
        if self.nodes[b.index()].accepted() >= self.cfg.max_accepted {
            return Err(Refusal::AcceptorFull);
        }
        let est = match self.nodes[a.index()].estimates.get(&b).copied() {
            Some(e) => e,
            None => self.evaluate_potential_connection(a, b, rng).ok_or(Refusal::Unreachable)?,
        };
        let path = self
            .paths
            .shortest_path(self.nodes[a.index()].host, self.nodes[b.index()].host)
            .map_err(|_| Refusal::Unreachable)?;
        let class = self.classify(est.delay_ms);
        let id = TunnelId(self.next_tunnel);
        self.next_tunnel += 1;
        let mk = |peer, direction| Tunnel {
            id,
            peer,
            direction,
            class,
            est_delay_ms: est.delay_ms,
            est_bw_bps: est.bw_bps,
            path: path.clone(),
            established: now,
            heartbeats: Vec::new(),
        };
        self.nodes[a.index()].tunnels.insert(b, mk(b, Direction::Initiated));
        self.nodes[b.index()].tunnels.insert(a, mk(a, Direction::Accepted));
        Ok(id)
    }

    /// One join/repair contact round: try to open a tunnel to `contact`, and
    /// collect its suggestions if it declines.
    pub fn contact(&mut self, n: NodeId, contact: NodeId, now: SimTime, rng: &mut impl Rng) -> ContactOutcome {
        if !self.reachable(n, contact) {
            self.nodes[n.index()].membership.remove(contact);
            return ContactOutcome::Unreachable;
        }
        match self.establish_tunnel(n, contact, now, rng) {
            Ok(id) => ContactOutcome::Accepted(id),
            Err(Refusal::Unreachable) => ContactOutcome::Unreachable,
            Err(reason) => {
                let e = self.membership_cfg.exchange_size;
                let candidates = self.nodes[contact.index()]
                    .membership
                    .random_candidates(e, |id| id != n, rng);
                ContactOutcome::Refused { reason, candidates }
            }
        }
    }

    /// Whether either endpoint saw a heartbeat over the tunnel recently.
    pub fn carries_heartbeat(&self, a: NodeId, b: NodeId, now: SimTime) -> bool {
        let Some(window) = self.heartbeat_window else {
            return false;
        };
        let since = now.saturating_sub(window);
        let side = |x: NodeId, y: NodeId| {
            self.nodes[x.index()]
                .tunnels
                .get(&y)
                .is_some_and(|t| t.carries_heartbeat_since(since))
        };
        side(a, b) || side(b, a)
    }

    pub fn can_drop(&self, a: NodeId, b: NodeId, now: SimTime) -> bool {
        self.nodes[a.index()].tunnels.contains_key(&b) && !self.carries_heartbeat(a, b, now)
    }

    /// Deliberate teardown. With a non-zero drain period the tunnel moves to
    /// the draining list at both ends and is finalized by [`Overlay::finish_drain`].
    pub fn drop_tunnel(&mut self, a: NodeId, b: NodeId, now: SimTime) -> Option<(TunnelId, SimTime)> {
        if !self.can_drop(a, b, now) {
            return None;
        }
        let ta = self.nodes[a.index()].tunnels.remove(&b)?;
        self.nodes[b.index()].tunnels.remove(&a);
        let until = now + self.cfg.drain();
        if until > now {
            for (x, y) in [(a, b), (b, a)] {
                self.nodes[x.index()].draining.push(DrainingTunnel {
                    id: ta.id,
                    peer: y,
                    path: ta.path.clone(),
                    until,
                });
            }
        }
        Some((ta.id, until))
    }

    /// Removes a draining tunnel; returns the endpoints that still held it.
    pub fn finish_drain(&mut self, a: NodeId, b: NodeId, id: TunnelId) {
        for x in [a, b] {
            self.nodes[x.index()].draining.retain(|d| d.id != id);
        }
    }

    /// Removes a tunnel from one endpoint after a detected failure.
    pub fn remove_failed(&mut self, at: NodeId, peer: NodeId, id: TunnelId) -> bool {
        let node = &mut self.nodes[at.index()];
        match node.tunnels.get(&peer) {
            Some(t) if t.id == id => {
                node.tunnels.remove(&peer);
                node.membership.remove(peer);
                true
            }
            _ => false,
        }
    }

    /// Marks a node dead. Its own tables are cleared; peers keep their half
    /// of every tunnel until their failure detector fires.
    pub fn crash(&mut self, n: NodeId) -> Vec<(NodeId, TunnelId, SimTime)> {
        let node = &mut self.nodes[n.index()];
        node.alive = false;
        let out = node.tunnels.values().map(|t| (t.peer, t.id, t.latency())).collect();
        node.tunnels.clear();
        node.draining.clear();
        node.membership.flush();
        node.estimates.clear();
        out
    }

    pub fn mark_heartbeat(&mut self, n: NodeId, peer: NodeId, source: NodeId, now: SimTime) {
        if let Some(t) = self.nodes[n.index()].tunnels.get_mut(&peer) {
            match t.heartbeats.iter_mut().find(|(s, _)| *s == source) {
                Some(slot) => slot.1 = now,
                None => t.heartbeats.push((source, now)),
            }
        }
    }

    /// Tunnels the tree protocol may send on, ordered by peer id with
    /// draining tunnels last.
    pub fn links(&self, n: NodeId) -> Vec<LinkView> {
        let node = &self.nodes[n.index()];
        let mut out: Vec<LinkView> = node
            .tunnels
            .values()
            .map(|t| LinkView { id: t.id, peer: t.peer, active: true })
            .collect();
        out.extend(node.draining.iter().map(|d| LinkView { id: d.id, peer: d.peer, active: false }));
        out
    }

    /// Looks up a tunnel at `n` towards `peer` by id, active or draining.
    pub fn link_to(&self, n: NodeId, peer: NodeId, id: TunnelId) -> Option<LinkView> {
        let node = &self.nodes[n.index()];
        if let Some(t) = node.tunnels.get(&peer) {
            if t.id == id {
                return Some(LinkView { id, peer, active: true });
            }
        }
        node.draining
            .iter()
            .find(|d| d.id == id)
            .map(|d| LinkView { id, peer: d.peer, active: false })
    }

    pub fn link_path(&self, n: NodeId, id: TunnelId) -> Option<(NodeId, Arc<PathInfo>)> {
        let node = &self.nodes[n.index()];
        node.tunnels
            .values()
            .find(|t| t.id == id)
            .map(|t| (t.peer, t.path.clone()))
            .or_else(|| node.draining.iter().find(|d| d.id == id).map(|d| (d.peer, d.path.clone())))
    }

    /// Every active tunnel once, as `(lower id, higher id, tunnel)`.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, &Tunnel)> {
        self.nodes.iter().filter(|n| n.alive).flat_map(|n| {
            n.tunnels
                .values()
                .filter(move |t| n.id < t.peer)
                .map(move |t| (n.id, t.peer, t))
        })
    }

    /// Checks degree bounds and tunnel symmetry. Tunnels for which `pending`
    /// holds are half torn down and exempt from the symmetry check.
    pub fn check_invariants(&self, pending: impl Fn(TunnelId) -> bool) -> Result<(), String> {
        for n in self.alive_nodes() {
            if n.initiated() > self.cfg.max_initiated {
                return Err(format!("{} initiated {} tunnels", n.id, n.initiated()));
            }
            if n.accepted() > self.cfg.max_accepted {
                return Err(format!("{} accepted {} tunnels", n.id, n.accepted()));
            }
            for (peer, t) in &n.tunnels {
                let other = self.nodes[peer.index()].tunnels.get(&n.id);
                match other {
                    Some(o) if o.id == t.id && o.direction != t.direction => {}
                    _ if !self.nodes[peer.index()].alive || pending(t.id) => {}
                    _ => return Err(format!("tunnel {}-{} is not symmetric", n.id, peer)),
                }
            }
        }
        Ok(())
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

#[cfg(test)]
mod tests;
