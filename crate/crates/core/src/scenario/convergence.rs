use std::sync::Arc;

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ids::{HostId, NodeId};
use crate::membership::MembershipConfig;
use crate::metrics::{optimal_tree_base, percentile, rdp_offline, OverlaySnapshot};
use crate::overlay::{ContactOutcome, Direction, Overlay, OverlayConfig, TunnelClass};
use crate::time::SimTime;
use crate::topology::{PathCache, PhysicalTopology};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceParams {
    /// Synchronous optimizer rounds to run.
    pub steps: usize,
    /// Steps averaged when deciding that the overlay has settled.
    pub window: usize,
    /// Sources sampled for the RDP of the final overlay.
    pub rdp_sources: usize,
}

impl Default for ConvergenceParams {
    fn default() -> Self {
        ConvergenceParams { steps: 150, window: 5, rdp_sources: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub overlay_size: usize,
    pub events_per_step: Vec<usize>,
    pub short_delay_per_step: Vec<f64>,
    pub long_bw_per_step: Vec<f64>,
    pub steps_to_stability: Option<usize>,
    pub total_events: usize,
    pub short_delay_ms: f64,
    pub long_bw_bps: f64,
    pub rdp_p90: f64,
    pub rdp_median: f64,
}

/// First step from which the mean event count over `window` steps drops below one.
pub fn steps_to_stability(events: &[usize], window: usize) -> Option<usize> {
    let w = window.max(1);
    (0..events.len().saturating_sub(w - 1)).find(|&s| (events[s..s + w].iter().sum::<usize>() as f64) < w as f64)
}

fn class_averages(overlay: &Overlay) -> (f64, f64) {
    let (mut ds, mut nd, mut bs, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for node in overlay.alive_nodes() {
        for t in node.tunnels.values().filter(|t| t.direction == Direction::Initiated) {
            match t.class {
                TunnelClass::Short => {
                    ds += t.est_delay_ms;
                    nd += 1;
                }
                TunnelClass::Long => {
                    bs += t.est_bw_bps;
                    nb += 1;
                }
            }
        }
    }
    let avg = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    (avg(ds, nd), avg(bs, nb))
}

/// Bootstraps `size` nodes into a random overlay, then runs synchronized
/// optimizer rounds and tracks how quickly reconfigurations die out.
pub fn run_convergence(
    topo: Arc<PhysicalTopology>,
    overlay_cfg: &OverlayConfig,
    membership_cfg: &MembershipConfig,
    params: &ConvergenceParams,
    size: usize,
    seed: u64,
) -> Result<ConvergenceReport, String> {
    let hosts_total = topo.hosts().len();
    if size > hosts_total {
        return Err(format!("{size} nodes need at least as many hosts, topology has {hosts_total}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = overlay_cfg.clone();
    cfg.drain_period = 0.0;
    let mut overlay = Overlay::new(cfg, membership_cfg.clone(), PathCache::new(topo));
    let mut hosts = sample(&mut rng, hosts_total, size).into_vec();
    hosts.sort_unstable();
    hosts.shuffle(&mut rng);
    let ids: Vec<NodeId> = hosts.iter().map(|&h| overlay.add_node(HostId(h as u32))).collect();
    let t0 = SimTime::ZERO;
    for &n in ids.iter().skip(1) {
        let mut queue = vec![ids[0]];
        let mut tries = 0;
        while let Some(c) = queue.pop() {
            tries += 1;
            match overlay.contact(n, c, t0, &mut rng) {
                ContactOutcome::Accepted(_) => break,
                ContactOutcome::Refused { candidates, .. } => queue.extend(candidates.into_iter().rev()),
                ContactOutcome::Unreachable => {}
            }
            if queue.is_empty() || tries > 4 * size {
                // Fall back to a random earlier joiner with spare room.
                let pick = ids[rng.random_range(0..n.index().max(1))];
                if overlay.establish_tunnel(n, pick, t0, &mut rng).is_ok() || tries > 8 * size {
                    break;
                }
            }
        }
    }

    // The starting overlay is random: every node fills its initiated slots
    // with arbitrary peers that still have room.
    let max_init = overlay.config().max_initiated;
    for &n in &ids {
        let mut tries = 0;
        while overlay.node(n).initiated() < max_init && tries < 4 * size {
            tries += 1;
            let pick = ids[rng.random_range(0..ids.len())];
            let _ = overlay.establish_tunnel(n, pick, t0, &mut rng);
        }
    }

    let period = overlay.config().optimizer_interval();
    let mut events_per_step = Vec::with_capacity(params.steps);
    let mut short_delay_per_step = Vec::with_capacity(params.steps);
    let mut long_bw_per_step = Vec::with_capacity(params.steps);
    let mut order = ids.clone();
    for step in 0..params.steps {
        let now = period * (step as u64 + 1);
        order.shuffle(&mut rng);
        let mut count = 0;
        for &n in &order {
            count += overlay.optimizer_iteration(n, now, &mut rng).len();
        }
        events_per_step.push(count);
        let (d, b) = class_averages(&overlay);
        short_delay_per_step.push(d);
        long_bw_per_step.push(b);
    }

    let snap = OverlaySnapshot::from_overlay(&overlay);
    let k = params.rdp_sources.min(ids.len());
    let mut rdp = Vec::new();
    let mut srcs = sample(&mut rng, ids.len(), k).into_vec();
    srcs.sort_unstable();
    for i in srcs {
        let tree = optimal_tree_base(&snap, ids[i]);
        rdp.extend(rdp_offline(&tree, overlay.paths(), &snap.hosts).into_iter().map(|s| s.rdp));
    }
    let (short_delay_ms, long_bw_bps) = class_averages(&overlay);
    Ok(ConvergenceReport {
        overlay_size: size,
        steps_to_stability: steps_to_stability(&events_per_step, params.window),
        total_events: events_per_step.iter().sum(),
        events_per_step,
        short_delay_per_step,
        long_bw_per_step,
        short_delay_ms,
        long_bw_bps,
        rdp_p90: percentile(&rdp, 0.9).unwrap_or(f64::NAN),
        rdp_median: percentile(&rdp, 0.5).unwrap_or(f64::NAN),
    })
}
