use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ids::{MessageId, NodeId};
use crate::metrics::{
    best_base_overlay, extract_tree, opt_degree_limited_tree, optimal_tree_base, random_tree_baseline, rdp_offline,
    rdp_online, Distribution, OptKey, OverlaySnapshot, TreeSnapshot,
};
use crate::sim::{Counters, SimError, SimParams, Simulation};
use crate::time::SimTime;
use crate::topology::{PathCache, PhysicalTopology};
use crate::tree::Payload;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EfficiencyParams {
    /// Milliseconds between consecutive initial joins.
    pub join_spacing: f64,
    /// Seconds the optimizer runs before the overlay is frozen.
    pub optimize_for: f64,
    /// Sources whose trees are measured; 0 means every node.
    pub sampled_sources: usize,
    pub opt_key: OptKey,
    /// Send a ping from every sampled source to measure RDP online.
    pub ping: bool,
}

impl Default for EfficiencyParams {
    fn default() -> Self {
        EfficiencyParams { join_spacing: 200.0, optimize_for: 900.0, sampled_sources: 20, opt_key: OptKey::RootDelay, ping: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SourceOutcome {
    pub source: NodeId,
    /// The extracted tree's edge set equals the shortest-path tree's.
    pub matches_base: bool,
    pub extract_error: Option<String>,
    pub transmissions: usize,
    pub duplicates: u32,
    pub max_stress: u32,
    pub umm_p90: f64,
    pub base_p90: f64,
    pub opt_p90: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RdpSet {
    pub umm: Vec<f64>,
    pub base: Vec<f64>,
    pub bestbase: Vec<f64>,
    pub opt: Vec<f64>,
    pub random: Vec<f64>,
    pub offline_pairs: Vec<f64>,
    pub online_pairs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EfficiencyResult {
    pub overlay_size: usize,
    pub sources: Vec<SourceOutcome>,
    pub rdp: RdpSet,
    pub mean_degree: f64,
    pub hop_diameter: usize,
    pub connected: bool,
    pub max_link_stress: u32,
    pub counters: Counters,
    pub trace_hash: String,
}

impl EfficiencyResult {
    pub fn dist(values: &[f64]) -> Distribution {
        Distribution::of(values)
    }
}

fn pooled(trees: &[TreeSnapshot], paths: &PathCache, snap: &OverlaySnapshot) -> Vec<f64> {
    trees.iter().flat_map(|t| rdp_offline(t, paths, &snap.hosts)).map(|s| s.rdp).collect()
}

/// Grows an overlay, lets it optimize, then measures trees and RDP against
/// the global-knowledge yardsticks.
pub fn run_efficiency(
    topo: Arc<PhysicalTopology>,
    params: &SimParams,
    eff: &EfficiencyParams,
    overlay_size: usize,
    seed: u64,
    trace: Option<Box<dyn std::io::Write + Send>>,
) -> Result<EfficiencyResult, SimError> {
    let mut sim = Simulation::new(topo.clone(), params.clone(), seed)?;
    if let Some(t) = trace {
        sim.set_trace_sink(t);
    }
    sim.schedule_initial_joins(overlay_size, SimTime::from_millis_f64(eff.join_spacing));
    let mut t = SimTime::from_secs_f64(eff.optimize_for);
    sim.run_until(t)?;

    // Freeze and wait out every filter so all trees are rebuilt from scratch.
    sim.set_optimizer(false);
    sim.set_control_plane(false);
    t = t + params.overlay.filter_ttl() + params.overlay.drain() + SimTime::from_secs(10);
    sim.run_until(t)?;

    let snap = OverlaySnapshot::from_overlay(sim.overlay());
    let members: Vec<NodeId> = snap.nodes().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5a_u64);
    let sources: Vec<NodeId> = if eff.sampled_sources == 0 || eff.sampled_sources >= members.len() {
        members.clone()
    } else {
        let mut idx = sample(&mut rng, members.len(), eff.sampled_sources).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| members[i]).collect()
    };
    let round = SimTime::from_secs(5);
    for &s in &sources {
        sim.multicast(s, Payload::Data, false);
    }
    t = t + round;
    sim.run_until(t)?;
    let mut tracked: Vec<(NodeId, MessageId)> = Vec::new();
    for &s in &sources {
        if let Some(id) = sim.multicast(s, Payload::Data, true) {
            tracked.push((s, id));
        }
    }
    t = t + round;
    sim.run_until(t)?;

    let paths = PathCache::new(topo);
    let maxdeg = params.overlay.max_initiated + params.overlay.max_accepted;
    let best = best_base_overlay(&paths, &snap.hosts, params.overlay.max_initiated, params.overlay.max_accepted, &mut rng);
    let mut outcomes = Vec::new();
    let (mut umm_trees, mut base_trees, mut best_trees, mut opt_trees, mut rnd_trees) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut max_stress = 0;
    for &(s, id) in &tracked {
        let base = optimal_tree_base(&snap, s);
        let extracted = extract_tree(&sim, s);
        let stress = sim.link_stress(id).map(|m| m.values().copied().max().unwrap_or(0)).unwrap_or(0);
        max_stress = max_stress.max(stress);
        let transmissions = sim.transmissions().iter().filter(|r| r.message == id).count();
        let opt = opt_degree_limited_tree(&paths, &snap.hosts, s, maxdeg, eff.opt_key);
        let p90 = |t: &TreeSnapshot| Distribution::of(&pooled(std::slice::from_ref(t), &paths, &snap)).p90;
        let (matches, err, umm_p90) = match &extracted {
            Ok(tree) => (tree.edges() == base.edges(), None, p90(tree)),
            Err(e) => (false, Some(e.to_string()), f64::NAN),
        };
        outcomes.push(SourceOutcome {
            source: s,
            matches_base: matches,
            extract_error: err,
            transmissions,
            duplicates: sim.tracked_duplicates(id),
            max_stress: stress,
            umm_p90,
            base_p90: p90(&base),
            opt_p90: p90(&opt),
        });
        if let Ok(tree) = extracted {
            umm_trees.push(tree);
        }
        best_trees.push(optimal_tree_base(&best, s));
        rnd_trees.push(random_tree_baseline(&paths, &snap.hosts, s, maxdeg, &mut rng));
        opt_trees.push(opt);
        base_trees.push(base);
    }
    let mut rdp = RdpSet {
        umm: pooled(&umm_trees, &paths, &snap),
        base: pooled(&base_trees, &paths, &snap),
        bestbase: pooled(&best_trees, &paths, &snap),
        opt: pooled(&opt_trees, &paths, &snap),
        random: pooled(&rnd_trees, &paths, &snap),
        ..RdpSet::default()
    };

    if eff.ping {
        let mut pings = Vec::new();
        for &s in &sources {
            if let Some(id) = sim.multicast(s, Payload::Ping, false) {
                pings.push(id);
            }
        }
        t = t + round;
        sim.run_until(t)?;
        let by_source: BTreeMap<NodeId, &TreeSnapshot> = umm_trees.iter().map(|t| (t.root, t)).collect();
        for id in pings {
            let online = rdp_online(sim.pongs(), id, &paths, &snap.hosts);
            let Some(tree) = by_source.get(&id.source) else { continue };
            let offline: BTreeMap<NodeId, f64> = rdp_offline(tree, &paths, &snap.hosts).into_iter().map(|s| (s.dest, s.rdp)).collect();
            for s in online {
                if let Some(&off) = offline.get(&s.dest) {
                    rdp.offline_pairs.push(off);
                    rdp.online_pairs.push(s.rdp);
                }
            }
        }
    }
    sim.finish_trace()?;
    let mean_degree = if snap.is_empty() { 0.0 } else { 2.0 * snap.edges().len() as f64 / snap.len() as f64 };
    Ok(EfficiencyResult {
        overlay_size: members.len(),
        sources: outcomes,
        rdp,
        mean_degree,
        hop_diameter: snap.hop_diameter(),
        connected: snap.is_connected(),
        max_link_stress: max_stress,
        counters: sim.counters().clone(),
        trace_hash: sim.trace_hash(),
    })
}
