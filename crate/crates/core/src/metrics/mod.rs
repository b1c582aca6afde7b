//! Tree snapshots, RDP and stress measurement, and the global-knowledge
//! yardsticks the protocol is compared against.

mod baselines;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use crate::ids::{HostId, MessageId, NodeId};
use crate::overlay::Overlay;
use crate::sim::{PongRecord, Simulation};
use crate::time::SimTime;
use crate::topology::PathCache;

pub use baselines::{best_base_overlay, opt_degree_limited_tree, optimal_tree_base, random_tree_baseline, OptKey};

/// Undirected overlay graph with tunnel latencies.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OverlaySnapshot {
    pub hosts: BTreeMap<NodeId, HostId>,
    pub adj: BTreeMap<NodeId, BTreeMap<NodeId, SimTime>>,
}

impl OverlaySnapshot {
    pub fn new(hosts: BTreeMap<NodeId, HostId>) -> Self {
        let adj = hosts.keys().map(|&n| (n, BTreeMap::new())).collect();
        OverlaySnapshot { hosts, adj }
    }

    /// Active tunnels between alive nodes.
    pub fn from_overlay(overlay: &Overlay) -> Self {
        let hosts = overlay.alive_nodes().map(|n| (n.id, n.host)).collect();
        let mut s = OverlaySnapshot::new(hosts);
        for (a, b, t) in overlay.edges() {
            if s.hosts.contains_key(&b) && overlay.node(b).tunnels.get(&a).is_some_and(|o| o.id == t.id) {
                s.add_edge(a, b, t.latency());
            }
        }
        s
    }

    pub fn add_edge(&mut self, a: NodeId, b: NodeId, latency: SimTime) {
        self.adj.entry(a).or_default().insert(b, latency);
        self.adj.entry(b).or_default().insert(a, latency);
    }

    pub fn remove_edge(&mut self, a: NodeId, b: NodeId) {
        if let Some(m) = self.adj.get_mut(&a) {
            m.remove(&b);
        }
        if let Some(m) = self.adj.get_mut(&b) {
            m.remove(&a);
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.adj.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn degree(&self, n: NodeId) -> usize {
        self.adj.get(&n).map_or(0, |m| m.len())
    }

    pub fn edges(&self) -> Vec<(NodeId, NodeId, SimTime)> {
        self.adj
            .iter()
            .flat_map(|(&a, m)| m.iter().filter(move |(&b, _)| a < b).map(move |(&b, &l)| (a, b, l)))
            .collect()
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<NodeId>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for n in self.nodes() {
            if seen.contains(&n) {
                continue;
            }
            let mut comp = Vec::new();
            let mut q = VecDeque::from([n]);
            seen.insert(n);
            while let Some(x) = q.pop_front() {
                comp.push(x);
                for &y in self.adj[&x].keys() {
                    if seen.insert(y) {
                        q.push_back(y);
                    }
                }
            }
            comp.sort();
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }

    /// Longest shortest path in hops, over the component of each node.
    pub fn hop_diameter(&self) -> usize {
        let mut best = 0;
        for s in self.nodes() {
            let mut dist = BTreeMap::from([(s, 0usize)]);
            let mut q = VecDeque::from([s]);
            while let Some(x) = q.pop_front() {
                let d = dist[&x];
                best = best.max(d);
                for &y in self.adj[&x].keys() {
                    if !dist.contains_key(&y) {
                        dist.insert(y, d + 1);
                        q.push_back(y);
                    }
                }
            }
        }
        best
    }
}

/// A source-rooted dissemination tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeSnapshot {
    pub root: NodeId,
    pub parent: BTreeMap<NodeId, NodeId>,
    /// Overlay latency from the root to every covered node, root included.
    pub latency: BTreeMap<NodeId, SimTime>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("source {0} is not an overlay member")]
    UnknownRoot(NodeId),
    #[error("unfiltered edges do not form a tree: {edges} edges over {nodes} reachable nodes")]
    NotATree { edges: usize, nodes: usize },
}

impl TreeSnapshot {
    /// Builds a tree from parent pointers and per-edge latencies.
    pub fn from_parents(root: NodeId, parent: BTreeMap<NodeId, NodeId>, edge_latency: impl Fn(NodeId, NodeId) -> SimTime) -> Self {
        let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for (&c, &p) in &parent {
            children.entry(p).or_default().push(c);
        }
        let mut latency = BTreeMap::from([(root, SimTime::ZERO)]);
        let mut q = VecDeque::from([root]);
        while let Some(x) = q.pop_front() {
            for &c in children.get(&x).map(|v| v.as_slice()).unwrap_or(&[]) {
                latency.insert(c, latency[&x] + edge_latency(x, c));
                q.push_back(c);
            }
        }
        TreeSnapshot { root, parent, latency }
    }

    pub fn edges(&self) -> BTreeSet<(NodeId, NodeId)> {
        self.parent.iter().map(|(&c, &p)| (p, c)).collect()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.latency.keys().copied()
    }

    pub fn out_degree(&self, n: NodeId) -> usize {
        self.parent.values().filter(|&&p| p == n).count()
    }

    /// Every parent chain reaches the root, and edges number nodes − 1.
    pub fn validate(&self) -> Result<(), String> {
        if self.parent.contains_key(&self.root) {
            return Err("root has a parent".into());
        }
        if self.latency.len() != self.parent.len() + 1 {
            return Err(format!("{} nodes but {} edges", self.latency.len(), self.parent.len()));
        }
        for &n in self.parent.keys() {
            let mut x = n;
            let mut steps = 0;
            while x != self.root {
                x = *self.parent.get(&x).ok_or_else(|| format!("{n} does not reach the root"))?;
                steps += 1;
                if steps > self.parent.len() {
                    return Err(format!("cycle through {n}"));
                }
            }
        }
        Ok(())
    }
}

/// The tree a source's messages currently follow: active tunnels minus
/// those filtered for the source at either end.
pub fn extract_tree(sim: &Simulation, source: NodeId) -> Result<TreeSnapshot, TreeError> {
    let overlay = sim.overlay();
    if !sim.is_alive(source) {
        return Err(TreeError::UnknownRoot(source));
    }
    let now = sim.now();
    let mut adj: BTreeMap<NodeId, Vec<(NodeId, SimTime)>> = BTreeMap::new();
    for (a, b, t) in overlay.edges() {
        if !sim.is_alive(b) {
            continue;
        }
        let fa = sim.tree_state(a).is_filtered(source, t.id, now);
        let fb = sim.tree_state(b).is_filtered(source, t.id, now);
        if fa || fb {
            continue;
        }
        adj.entry(a).or_default().push((b, t.latency()));
        adj.entry(b).or_default().push((a, t.latency()));
    }
    let mut parent = BTreeMap::new();
    let mut lat = BTreeMap::from([(source, SimTime::ZERO)]);
    let mut q = VecDeque::from([source]);
    let mut inner_edges = 0;
    while let Some(x) = q.pop_front() {
        let dx = lat[&x];
        for &(y, l) in adj.get(&x).map(|v| v.as_slice()).unwrap_or(&[]) {
            inner_edges += 1;
            if let std::collections::btree_map::Entry::Vacant(e) = lat.entry(y) {
                e.insert(dx + l);
                parent.insert(y, x);
                q.push_back(y);
            }
        }
    }
    let inner_edges = inner_edges / 2;
    if inner_edges != lat.len() - 1 {
        return Err(TreeError::NotATree { edges: inner_edges, nodes: lat.len() });
    }
    Ok(TreeSnapshot { root: source, parent, latency: lat })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RdpSample {
    pub source: NodeId,
    pub dest: NodeId,
    pub overlay_ms: f64,
    pub ip_ms: f64,
    pub rdp: f64,
}

/// RDP of every destination covered by `tree`, against the IP shortest path.
pub fn rdp_offline(tree: &TreeSnapshot, paths: &PathCache, hosts: &BTreeMap<NodeId, HostId>) -> Vec<RdpSample> {
    let src_host = hosts[&tree.root];
    tree.latency
        .iter()
        .filter(|(&d, _)| d != tree.root)
        .map(|(&d, &l)| {
            let ip = paths.latency(src_host, hosts[&d]).as_millis_f64();
            let o = l.as_millis_f64();
            RdpSample { source: tree.root, dest: d, overlay_ms: o, ip_ms: ip, rdp: o / ip }
        })
        .collect()
}

/// RDP from ping round trips: half the measured round trip over the IP latency.
pub fn rdp_online(pongs: &[PongRecord], ping: MessageId, paths: &PathCache, hosts: &BTreeMap<NodeId, HostId>) -> Vec<RdpSample> {
    let src = ping.source;
    let mut seen = BTreeSet::new();
    let mut out: Vec<RdpSample> = pongs
        .iter()
        .filter(|p| p.ping == ping && seen.insert(p.replier))
        .filter_map(|p| {
            let dh = hosts.get(&p.replier)?;
            let ip = paths.latency(hosts[&src], *dh).as_millis_f64();
            let o = (p.returned - p.sent).as_millis_f64() / 2.0;
            Some(RdpSample { source: src, dest: p.replier, overlay_ms: o, ip_ms: ip, rdp: o / ip })
        })
        .collect();
    out.sort_by_key(|s| s.dest);
    out
}

/// Nearest-rank percentile; `p` in (0, 1].
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    let (_, x, _) = v.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    Some(*x)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub p95: f64,
    pub max: f64,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Distribution::default();
        }
        Distribution {
            count: values.len(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            median: percentile(values, 0.5).unwrap_or(0.0),
            p90: percentile(values, 0.9).unwrap_or(0.0),
            p95: percentile(values, 0.95).unwrap_or(0.0),
            max: values.iter().copied().fold(f64::MIN, f64::max),
        }
    }
}

/// Cost of self-organization relative to the BESTBASE value, split into the
/// base-overlay layer (BASE over BESTBASE) and the tree layer (UMM over
/// BASE). Integer parts per billion, so the layers add up to the total exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub total_ppb: i64,
    pub overlay_ppb: i64,
    pub tree_ppb: i64,
}

impl LayerCost {
    pub fn of(umm: f64, base: f64, bestbase: f64) -> Self {
        let ppb = |x: f64| ((x / bestbase - 1.0) * 1e9).round() as i64;
        let total_ppb = ppb(umm);
        let overlay_ppb = ppb(base);
        LayerCost { total_ppb, overlay_ppb, tree_ppb: total_ppb - overlay_ppb }
    }

    pub fn fractions(self) -> (f64, f64, f64) {
        let f = |v: i64| v as f64 / 1e9;
        (f(self.total_ppb), f(self.overlay_ppb), f(self.tree_ppb))
    }
}

/// Per-link copies of a tracked message and the largest count.
pub fn link_stress(sim: &Simulation, id: MessageId) -> (BTreeMap<usize, u32>, u32) {
    let map = sim.link_stress(id).cloned().unwrap_or_default();
    let max = map.values().copied().max().unwrap_or(0);
    (map, max)
}
