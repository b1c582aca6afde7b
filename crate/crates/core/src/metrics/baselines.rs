use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{OverlaySnapshot, TreeSnapshot};
use crate::ids::{HostId, NodeId};
use crate::time::SimTime;
use crate::topology::PathCache;

/// Shortest-path tree over the overlay. Equal-latency alternatives resolve
/// the way the simulator's event order does: the first relaxation wins, and
/// neighbours are relaxed in ascending id order.
pub fn optimal_tree_base(snap: &OverlaySnapshot, source: NodeId) -> TreeSnapshot {
    let mut dist: BTreeMap<NodeId, SimTime> = BTreeMap::from([(source, SimTime::ZERO)]);
    let mut parent = BTreeMap::new();
    let mut done = BTreeMap::new();
    let mut heap = BinaryHeap::from([Reverse((SimTime::ZERO, 0u64, source))]);
    let mut counter = 1u64;
    while let Some(Reverse((d, _, u))) = heap.pop() {
        if done.insert(u, ()).is_some() || dist.get(&u) != Some(&d) {
            continue;
        }
        for (&v, &w) in snap.adj.get(&u).into_iter().flatten() {
            let nd = d + w;
            if done.contains_key(&v) {
                continue;
            }
            if dist.get(&v).is_none_or(|&old| nd < old) {
                dist.insert(v, nd);
                parent.insert(v, u);
                heap.push(Reverse((nd, counter, v)));
                counter += 1;
            }
        }
    }
    TreeSnapshot { root: source, parent, latency: dist }
}

/// Globally planned overlay: every node opens tunnels to its nearest
/// neighbours under the same initiate/accept limits as the protocol, then
/// random local rewiring joins leftover components.
pub fn best_base_overlay(
    paths: &PathCache,
    hosts: &BTreeMap<NodeId, HostId>,
    max_initiated: usize,
    max_accepted: usize,
    rng: &mut impl Rng,
) -> OverlaySnapshot {
    let ids: Vec<NodeId> = hosts.keys().copied().collect();
    let lat = |a: NodeId, b: NodeId| paths.latency(hosts[&a], hosts[&b]);
    let by_distance: BTreeMap<NodeId, Vec<(SimTime, NodeId)>> = ids
        .iter()
        .map(|&a| {
            let mut v: Vec<_> = ids.iter().filter(|&&b| b != a).map(|&b| (lat(a, b), b)).collect();
            v.sort();
            (a, v)
        })
        .collect();
    let mut snap = OverlaySnapshot::new(hosts.clone());
    let mut initiated: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    let mut accepted: BTreeMap<NodeId, usize> = BTreeMap::new();
    for &a in &ids {
        for &(l, b) in &by_distance[&a] {
            if initiated.get(&a).map_or(0, |v| v.len()) >= max_initiated {
                break;
            }
            if snap.adj[&a].contains_key(&b) || accepted.get(&b).copied().unwrap_or(0) >= max_accepted {
                continue;
            }
            snap.add_edge(a, b, l);
            initiated.entry(a).or_default().push(b);
            *accepted.entry(b).or_default() += 1;
        }
    }
    let cap = 50 * ids.len().max(1);
    let mut steps = 0;
    loop {
        let comps = snap.components();
        if comps.len() <= 1 {
            break;
        }
        if steps >= cap {
            // Rewiring did not converge; bridge components directly.
            bridge_components(&mut snap, &comps, &lat);
            continue;
        }
        steps += 1;
        let main = (0..comps.len()).max_by_key(|&i| (comps[i].len(), Reverse(i))).unwrap_or(0);
        let small: Vec<NodeId> = comps
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != main)
            .flat_map(|(_, c)| c.iter().copied())
            .collect();
        let a = small[rng.random_range(0..small.len())];
        let mine = initiated.entry(a).or_default();
        if let Some(pos) = (0..mine.len()).max_by_key(|&i| (lat(a, mine[i]), mine[i])) {
            let worst = mine.remove(pos);
            snap.remove_edge(a, worst);
            *accepted.get_mut(&worst).unwrap() -= 1;
        }
        let worst_kept = snap.adj[&a].keys().map(|&b| lat(a, b)).max().unwrap_or(SimTime::ZERO);
        let next = by_distance[&a]
            .iter()
            .find(|&&(l, b)| l >= worst_kept && !snap.adj[&a].contains_key(&b) && accepted.get(&b).copied().unwrap_or(0) < max_accepted);
        if let Some(&(l, b)) = next {
            snap.add_edge(a, b, l);
            initiated.entry(a).or_default().push(b);
            *accepted.entry(b).or_default() += 1;
        }
    }
    snap
}

fn bridge_components(snap: &mut OverlaySnapshot, comps: &[Vec<NodeId>], lat: &impl Fn(NodeId, NodeId) -> SimTime) {
    let first = &comps[0];
    let mut best: Option<(SimTime, NodeId, NodeId)> = None;
    for other in &comps[1..] {
        for &a in first {
            for &b in other {
                let cand = (lat(a, b), a, b);
                if best.is_none_or(|x| cand < x) {
                    best = Some(cand);
                }
            }
        }
    }
    if let Some((l, a, b)) = best {
        snap.add_edge(a, b, l);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKey {
    /// Prim order: the shortest tunnel that reaches a new node.
    Edge,
    /// The new node with the smallest delay from the root.
    #[default]
    RootDelay,
}

/// Greedy single-source tree over the complete latency graph, with at most
/// `max_out` children per node.
pub fn opt_degree_limited_tree(
    paths: &PathCache,
    hosts: &BTreeMap<NodeId, HostId>,
    root: NodeId,
    max_out: usize,
    key: OptKey,
) -> TreeSnapshot {
    let ids: Vec<NodeId> = hosts.keys().copied().collect();
    let lat = |a: NodeId, b: NodeId| paths.latency(hosts[&a], hosts[&b]);
    let mut in_tree = vec![root];
    let mut dist = BTreeMap::from([(root, SimTime::ZERO)]);
    let mut children: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut parent = BTreeMap::new();
    let mut outside: Vec<NodeId> = ids.into_iter().filter(|&n| n != root).collect();
    while !outside.is_empty() {
        let mut best: Option<(SimTime, NodeId, NodeId)> = None;
        for &u in &in_tree {
            if children.get(&u).copied().unwrap_or(0) >= max_out {
                continue;
            }
            for &v in &outside {
                let w = lat(u, v);
                let k = match key {
                    OptKey::Edge => w,
                    OptKey::RootDelay => dist[&u] + w,
                };
                let cand = (k, v, u);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
        }
        let Some((_, v, u)) = best else { break };
        parent.insert(v, u);
        dist.insert(v, dist[&u] + lat(u, v));
        *children.entry(u).or_default() += 1;
        in_tree.push(v);
        outside.retain(|&x| x != v);
    }
    TreeSnapshot { root, parent, latency: dist }
}

/// Random spanning tree ignoring the topology: nodes attach in random order
/// to a random tree member with spare degree.
pub fn random_tree_baseline(
    paths: &PathCache,
    hosts: &BTreeMap<NodeId, HostId>,
    root: NodeId,
    max_degree: usize,
    rng: &mut impl Rng,
) -> TreeSnapshot {
    let max_degree = max_degree.max(2);
    let mut order: Vec<NodeId> = hosts.keys().copied().filter(|&n| n != root).collect();
    order.shuffle(rng);
    let mut members = vec![root];
    let mut degree: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut parent = BTreeMap::new();
    for v in order {
        let open: Vec<NodeId> = members.iter().copied().filter(|m| degree.get(m).copied().unwrap_or(0) < max_degree).collect();
        let u = open[rng.random_range(0..open.len())];
        parent.insert(v, u);
        *degree.entry(u).or_default() += 1;
        *degree.entry(v).or_default() += 1;
        members.push(v);
    }
    TreeSnapshot::from_parents(root, parent, |a, b| paths.latency(hosts[&a], hosts[&b]))
}
