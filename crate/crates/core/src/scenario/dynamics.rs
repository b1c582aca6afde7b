use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::delivery::DeliveryReport;
use crate::ids::NodeId;
use crate::metrics::OverlaySnapshot;
use crate::sim::{ChurnModel, Counters, SimError, SimParams, Simulation, Workload};
use crate::time::SimTime;
use crate::topology::PhysicalTopology;

type Sink = Option<Box<dyn std::io::Write + Send>>;

fn start(topo: Arc<PhysicalTopology>, params: &SimParams, seed: u64, trace: Sink) -> Result<Simulation, SimError> {
    let mut sim = Simulation::new(topo, params.clone(), seed)?;
    if let Some(t) = trace {
        sim.set_trace_sink(t);
    }
    Ok(sim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeliveryParams {
    pub join_spacing: f64,
    /// Seconds before delivery accounting starts.
    pub warmup: f64,
    /// Seconds of generation that are accounted.
    pub measure: f64,
    /// Extra seconds simulated so the last messages can arrive.
    pub tail: f64,
    pub t_prop: f64,
    pub bucket: f64,
    #[serde(skip)]
    pub churn: ChurnModel,
    #[serde(skip)]
    pub workload: Workload,
}

impl Default for DeliveryParams {
    fn default() -> Self {
        DeliveryParams {
            join_spacing: 200.0,
            warmup: 300.0,
            measure: 600.0,
            tail: 30.0,
            t_prop: 5.0,
            bucket: 10.0,
            churn: ChurnModel::default(),
            workload: Workload::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeliveryResult {
    pub overlay_size: usize,
    pub report: DeliveryReport,
    pub alive_at_end: usize,
    pub counters: Counters,
    pub trace_hash: String,
}

/// Every node sends periodically while crashes and replacement joins
/// follow the churn model; reports delivered over expected messages.
pub fn run_delivery(
    topo: Arc<PhysicalTopology>,
    params: &SimParams,
    dp: &DeliveryParams,
    overlay_size: usize,
    seed: u64,
    trace: Sink,
) -> Result<DeliveryResult, SimError> {
    let mut sim = start(topo, params, seed, trace)?;
    sim.set_churn(dp.churn.clone());
    sim.set_workload(dp.workload.clone());
    sim.schedule_initial_joins(overlay_size, SimTime::from_millis_f64(dp.join_spacing));
    let from = SimTime::from_secs_f64(dp.warmup);
    let to = from + SimTime::from_secs_f64(dp.measure);
    sim.run_until(from)?;
    sim.set_delivery_window(SimTime::from_secs_f64(dp.t_prop), from, to, SimTime::from_secs_f64(dp.bucket));
    sim.run_until(to + SimTime::from_secs_f64(dp.tail))?;
    sim.finish_trace()?;
    Ok(DeliveryResult {
        overlay_size,
        report: sim.delivery_report().unwrap_or_default(),
        alive_at_end: sim.alive_nodes().len(),
        counters: sim.counters().clone(),
        trace_hash: sim.trace_hash(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FailureParams {
    pub join_spacing: f64,
    /// Seconds before the first crash may happen.
    pub converge: f64,
    pub crashes: usize,
    /// Crashes are spread uniformly over this many seconds.
    pub crash_window: f64,
    /// Seconds between the end of the crash window and the first rejoin.
    pub rejoin_after: f64,
    pub rejoin_window: f64,
    /// Seconds simulated after the rejoin window.
    pub observe: f64,
    /// Hop limit of failure announcements; absent means the overlay's hop
    /// diameter when the crashes start.
    pub reset_ttl: Option<u32>,
    /// Delivery ratio that counts as recovered.
    pub target: f64,
    pub t_prop: f64,
    pub bucket: f64,
    #[serde(skip)]
    pub workload: Workload,
}

impl Default for FailureParams {
    fn default() -> Self {
        FailureParams {
            join_spacing: 200.0,
            converge: 900.0,
            crashes: 10,
            crash_window: 120.0,
            rejoin_after: 780.0,
            rejoin_window: 120.0,
            observe: 600.0,
            reset_ttl: None,
            target: 0.99,
            t_prop: 5.0,
            bucket: 10.0,
            workload: Workload::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FailureResult {
    pub overlay_size: usize,
    pub reset_ttl: u32,
    pub crashed: Vec<NodeId>,
    pub last_crash: f64,
    pub last_rejoin: f64,
    /// Seconds from the last crash until delivery stays at target, measured
    /// to the end of the first good bucket.
    pub crash_recovery: Option<f64>,
    pub rejoin_recovery: Option<f64>,
    pub alive_at_end: usize,
    pub report: DeliveryReport,
    pub counters: Counters,
    pub trace_hash: String,
}

/// End of the first bucket starting at or after `after` from which every
/// bucket up to `until` meets `target`, relative to `after`.
pub fn recovery_time(series: &[(f64, u64, u64)], bucket: f64, after: f64, until: f64, target: f64) -> Option<f64> {
    let window: Vec<_> = series.iter().filter(|b| b.0 + bucket > after && b.0 + bucket <= until).collect();
    let ok = |b: &(f64, u64, u64)| b.1 == 0 || b.2 as f64 >= target * b.1 as f64;
    let mut first = None;
    for b in &window {
        if ok(b) {
            first.get_or_insert(b.0);
        } else {
            first = None;
        }
    }
    first.map(|s| (s + bucket - after).max(0.0))
}

/// Crashes a batch of nodes on a converged overlay, lets it heal, then has
/// the same number of fresh nodes join.
pub fn run_failure_recovery(
    topo: Arc<PhysicalTopology>,
    params: &SimParams,
    fp: &FailureParams,
    overlay_size: usize,
    seed: u64,
    trace: Sink,
) -> Result<FailureResult, SimError> {
    let mut sim = start(topo, params, seed, trace)?;
    sim.set_workload(fp.workload.clone());
    sim.schedule_initial_joins(overlay_size, SimTime::from_millis_f64(fp.join_spacing));
    let t0 = SimTime::from_secs_f64(fp.converge);
    sim.run_until(t0)?;
    let reset_ttl = fp
        .reset_ttl
        .unwrap_or_else(|| OverlaySnapshot::from_overlay(sim.overlay()).hop_diameter().max(1) as u32);
    sim.set_reset_ttl(reset_ttl);
    let crash_end = t0 + SimTime::from_secs_f64(fp.crash_window);
    let rejoin_start = crash_end + SimTime::from_secs_f64(fp.rejoin_after);
    let rejoin_end = rejoin_start + SimTime::from_secs_f64(fp.rejoin_window);
    let end = rejoin_end + SimTime::from_secs_f64(fp.observe);
    sim.set_delivery_window(SimTime::from_secs_f64(fp.t_prop), t0, end, SimTime::from_secs_f64(fp.bucket));

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfa11);
    let protected: BTreeSet<NodeId> = sim.heartbeat_sources().iter().copied().chain([sim.bootstrap()]).collect();
    let pool: Vec<NodeId> = sim.alive_nodes().into_iter().filter(|n| !protected.contains(n)).collect();
    let k = fp.crashes.min(pool.len());
    let mut crashed: Vec<NodeId> = sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    crashed.sort_unstable();
    let span = (crash_end - t0).as_micros().max(1);
    let mut last_crash = t0;
    for &n in &crashed {
        let at = t0 + SimTime::from_micros(rng.random_range(0..span));
        last_crash = last_crash.max(at);
        sim.schedule_crash(n, at)?;
    }
    let jspan = (rejoin_end - rejoin_start).as_micros().max(1);
    let mut last_rejoin = rejoin_start;
    for _ in 0..k {
        let at = rejoin_start + SimTime::from_micros(rng.random_range(0..jspan));
        last_rejoin = last_rejoin.max(at);
        sim.schedule_join(at);
    }
    sim.run_until(end + SimTime::from_secs_f64(fp.t_prop))?;
    sim.finish_trace()?;
    let report = sim.delivery_report().unwrap_or_default();
    let (lc, lr) = (last_crash.as_secs_f64(), last_rejoin.as_secs_f64());
    Ok(FailureResult {
        overlay_size,
        reset_ttl,
        crash_recovery: recovery_time(&report.series, fp.bucket, lc, rejoin_start.as_secs_f64(), fp.target),
        rejoin_recovery: recovery_time(&report.series, fp.bucket, lr, end.as_secs_f64(), fp.target),
        crashed,
        last_crash: lc,
        last_rejoin: lr,
        alive_at_end: sim.alive_nodes().len(),
        report,
        counters: sim.counters().clone(),
        trace_hash: sim.trace_hash(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionParams {
    pub join_spacing: f64,
    pub converge: f64,
    /// Share of the ordinary nodes cut off from every heartbeat source.
    pub minority: f64,
    /// Seconds until the network heals.
    pub heal_after: f64,
    /// Seconds after the split at which the overlay must be whole again.
    pub observe: f64,
}

impl Default for PartitionParams {
    fn default() -> Self {
        PartitionParams { join_spacing: 200.0, converge: 900.0, minority: 0.25, heal_after: 20.0, observe: 120.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionResult {
    pub overlay_size: usize,
    pub minority: Vec<NodeId>,
    /// Seconds from the split until each minority node started its repair;
    /// absent if it never did.
    pub trigger_delays: Vec<Option<f64>>,
    pub trigger_bound: f64,
    /// Seconds from the split until the overlay was one component again.
    pub reconnected_after: Option<f64>,
    pub connected_at_end: bool,
    pub counters: Counters,
    pub trace_hash: String,
}

/// Splits the network so that no heartbeat source is on the minority side,
/// heals it shortly after, and watches the minority find its way back.
pub fn run_partition(
    topo: Arc<PhysicalTopology>,
    params: &SimParams,
    pp: &PartitionParams,
    overlay_size: usize,
    seed: u64,
    trace: Sink,
) -> Result<PartitionResult, SimError> {
    let mut sim = start(topo, params, seed, trace)?;
    sim.schedule_initial_joins(overlay_size, SimTime::from_millis_f64(pp.join_spacing));
    let t0 = SimTime::from_secs_f64(pp.converge);
    sim.run_until(t0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5711);
    let protected: BTreeSet<NodeId> = sim.heartbeat_sources().iter().copied().chain([sim.bootstrap()]).collect();
    let pool: Vec<NodeId> = sim.alive_nodes().into_iter().filter(|n| !protected.contains(n)).collect();
    let k = ((pool.len() as f64 * pp.minority).round() as usize).clamp(1, pool.len().max(1)).min(pool.len());
    let mut minority: Vec<NodeId> = sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    minority.sort_unstable();
    let mut groups = vec![0u8; sim.node_count()];
    for n in &minority {
        groups[n.index()] = 1;
    }
    let heal = t0 + SimTime::from_secs_f64(pp.heal_after);
    sim.schedule_partition(groups, t0, Some(heal));
    let end = t0 + SimTime::from_secs_f64(pp.observe);
    let mut reconnected_after = None;
    let mut t = t0;
    let step = SimTime::from_secs(1);
    while t < end {
        t = t + step;
        sim.run_until(t)?;
        let snap = OverlaySnapshot::from_overlay(sim.overlay());
        if t > heal && snap.is_connected() {
            if reconnected_after.is_none() {
                reconnected_after = Some((t - t0).as_secs_f64());
            }
        } else {
            reconnected_after = None;
        }
    }
    let trigger_delays = minority
        .iter()
        .map(|&n| {
            sim.repairs()
                .iter()
                .filter(|r| r.node == n && r.detected >= t0)
                .filter_map(|r| r.started)
                .min()
                .map(|s| (s - t0).as_secs_f64())
        })
        .collect();
    let c = &params.connectivity;
    let connected_at_end = OverlaySnapshot::from_overlay(sim.overlay()).is_connected();
    sim.finish_trace()?;
    Ok(PartitionResult {
        overlay_size,
        minority,
        trigger_delays,
        trigger_bound: c.miss_multiple as f64 * c.t_heartbeat + c.repair_jitter,
        reconnected_after,
        connected_at_end,
        counters: sim.counters().clone(),
        trace_hash: sim.trace_hash(),
    })
}
