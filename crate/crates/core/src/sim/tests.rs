use std::sync::Arc;

use super::*;
use crate::ids::RouterId;
use crate::topology::{generate_topology, Endpoint, Host, LinkClass, PhysLink, TopologyParams};

fn star(access_ms: &[f64]) -> Arc<PhysicalTopology> {
    let links = access_ms
        .iter()
        .enumerate()
        .map(|(i, &ms)| PhysLink {
            a: Endpoint::Host(HostId(i as u32)),
            b: Endpoint::Router(RouterId(0)),
            latency: SimTime::from_millis_f64(ms),
            bandwidth: 10_000_000,
            class: LinkClass::ClientStub,
        })
        .collect();
    let hosts = (0..access_ms.len()).map(|i| Host { id: HostId(i as u32), router: RouterId(0) }).collect();
    Arc::new(PhysicalTopology::new(1, links, hosts).unwrap())
}

fn generated(hosts: u32, seed: u64) -> Arc<PhysicalTopology> {
    Arc::new(generate_topology(&TopologyParams { hosts, ..TopologyParams::default() }, seed).unwrap())
}

fn quiet() -> SimParams {
    let mut p = SimParams::default();
    p.connectivity.heartbeat_sources = 0;
    p
}

fn access_link(sim: &Simulation, n: NodeId) -> LinkId {
    let h = sim.overlay().node(n).host;
    sim.topology().links().iter().position(|l| l.a == Endpoint::Host(h)).unwrap()
}

#[test]
fn empty_run_only_advances_the_clock() {
    let mut sim = Simulation::new(star(&[1.0, 1.0]), quiet(), 1).unwrap();
    sim.run_until(SimTime::from_millis(100)).unwrap();
    assert_eq!(sim.now(), SimTime::from_millis(100));
    assert_eq!(sim.counters().events, 0);
    assert_eq!(sim.trace_events(), 0);
}

#[test]
fn tunnel_latency_sets_delivery_time() {
    let mut sim = Simulation::new(star(&[3.0, 4.0]), quiet(), 1).unwrap();
    sim.schedule_initial_joins(2, SimTime::from_millis(10));
    sim.run_until(SimTime::from_millis(100)).unwrap();
    let src = NodeId(0);
    let id = sim.multicast(src, Payload::Data, true).unwrap();
    sim.run_until(SimTime::from_millis(200)).unwrap();
    let r = &sim.transmissions()[0];
    assert_eq!(r.message, id);
    assert_eq!(r.send_time, SimTime::from_millis(100));
    assert_eq!(r.delivery_time, SimTime::from_millis(107));
    assert_eq!(sim.counters().data_delivered, 1);
}

#[test]
fn crash_loses_queued_copies_but_not_wire_copies() {
    let mut p = quiet();
    p.engine.proc_delay = 5.0;
    let mut sim = Simulation::new(star(&[3.0, 4.0]), p, 1).unwrap();
    sim.schedule_initial_joins(2, SimTime::from_millis(10));
    sim.run_until(SimTime::from_millis(100)).unwrap();
    sim.multicast(NodeId(0), Payload::Data, true).unwrap();
    sim.schedule_crash(NodeId(0), SimTime::from_millis(103)).unwrap();
    sim.run_until(SimTime::from_millis(200)).unwrap();
    assert_eq!(sim.counters().lost_in_queue, 1);
    assert_eq!(sim.counters().data_delivered, 0);

    let mut sim = Simulation::new(star(&[3.0, 4.0]), quiet(), 1).unwrap();
    sim.schedule_initial_joins(2, SimTime::from_millis(10));
    sim.run_until(SimTime::from_millis(100)).unwrap();
    sim.multicast(NodeId(0), Payload::Data, true).unwrap();
    sim.schedule_crash(NodeId(0), SimTime::from_millis(103)).unwrap();
    sim.run_until(SimTime::from_millis(200)).unwrap();
    assert_eq!(sim.counters().data_delivered, 1);
}

#[test]
fn message_to_a_dead_node_is_dropped_quietly() {
    let mut sim = Simulation::new(star(&[3.0, 4.0]), quiet(), 1).unwrap();
    sim.schedule_initial_joins(2, SimTime::from_millis(10));
    sim.run_until(SimTime::from_millis(100)).unwrap();
    sim.multicast(NodeId(0), Payload::Data, false).unwrap();
    sim.schedule_crash(NodeId(1), SimTime::from_millis(105)).unwrap();
    sim.run_until(SimTime::from_millis(200)).unwrap();
    assert_eq!(sim.counters().lost_dead_receiver, 1);
}

#[test]
fn shared_access_link_carries_two_copies() {
    let mut sim = Simulation::new(star(&[1.0, 2.0, 3.0]), quiet(), 4).unwrap();
    sim.set_optimizer(false);
    sim.schedule_initial_joins(3, SimTime::from_millis(10));
    sim.run_until(SimTime::from_secs(1)).unwrap();
    assert_eq!(sim.degree(NodeId(0)), 2);
    let id = sim.multicast(NodeId(0), Payload::Data, true).unwrap();
    sim.run_until(SimTime::from_secs(2)).unwrap();
    let stress = sim.link_stress(id).unwrap();
    assert_eq!(stress[&access_link(&sim, NodeId(0))], 2);
    assert_eq!(stress[&access_link(&sim, NodeId(1))], 1);
    // recount from the transmission log
    let mut recount = BTreeMap::new();
    for r in sim.transmissions().iter().filter(|r| r.message == id) {
        for &l in &r.links {
            *recount.entry(l).or_insert(0u32) += 1;
        }
    }
    assert_eq!(&recount, stress);
}

#[test]
fn double_crash_is_rejected() {
    let mut sim = Simulation::new(star(&[1.0, 1.0, 1.0]), quiet(), 1).unwrap();
    sim.schedule_initial_joins(3, SimTime::from_millis(10));
    sim.run_until(SimTime::from_secs(1)).unwrap();
    sim.schedule_crash(NodeId(2), SimTime::from_secs(2)).unwrap();
    assert!(sim.schedule_crash(NodeId(2), SimTime::from_secs(3)).is_err());
    sim.run_until(SimTime::from_secs(4)).unwrap();
    assert!(sim.schedule_crash(NodeId(2), SimTime::from_secs(5)).is_err());
}

fn run_once(seed: u64) -> (String, Counters) {
    let mut sim = Simulation::new(generated(64, 2), SimParams::default(), seed).unwrap();
    sim.schedule_initial_joins(24, SimTime::from_millis(200));
    sim.set_workload(Workload::default());
    sim.set_churn(ChurnModel { median_lifetime: Some(120.0), rejoin_delay: 10.0 });
    sim.run_until(SimTime::from_secs(120)).unwrap();
    (sim.trace_hash(), sim.counters().clone())
}

#[test]
fn same_seed_same_trace() {
    let a = run_once(9);
    assert_eq!(a, run_once(9));
    assert_ne!(a.0, run_once(10).0);
}

#[test]
fn failure_is_detected_within_the_keepalive_timeout() {
    let mut sim = Simulation::new(generated(64, 3), SimParams::default(), 3).unwrap();
    sim.schedule_initial_joins(20, SimTime::from_millis(200));
    sim.run_until(SimTime::from_secs(60)).unwrap();
    let victim = NodeId(12);
    let peers: Vec<(NodeId, SimTime)> = sim.overlay().node(victim).tunnels.values().map(|t| (t.peer, t.latency())).collect();
    assert!(!peers.is_empty());
    sim.schedule_crash(victim, SimTime::from_secs(61)).unwrap();
    sim.run_until(SimTime::from_secs(70)).unwrap();
    let k = SimTime::from_millis_f64(sim.params().engine.keepalive_period);
    let misses = sim.params().engine.keepalive_misses as u64;
    for (peer, latency) in peers {
        let d = sim.detections().iter().find(|d| d.at == peer && d.peer == victim).expect("detected");
        assert_eq!(d.failed, SimTime::from_secs(61));
        assert!(d.detected <= d.failed + k * misses + latency, "{d:?}");
        assert!(d.detected > d.failed + k * (misses - 1), "{d:?}");
        assert!(!sim.overlay().node(peer).tunnels.contains_key(&victim));
    }
}

#[test]
fn churn_replaces_every_crashed_node() {
    let mut sim = Simulation::new(generated(128, 5), SimParams::default(), 5).unwrap();
    sim.schedule_initial_joins(40, SimTime::ZERO);
    sim.set_churn(ChurnModel { median_lifetime: Some(60.0), rejoin_delay: 10.0 });
    let mut crashes = vec![0u64];
    for t in 1..=300 {
        sim.run_until(SimTime::from_secs(t)).unwrap();
        crashes.push(sim.counters().crashes);
        // a crash in the last ten seconds still waits for its replacement
        let waiting = crashes[t as usize] - crashes[(t as usize).saturating_sub(10)];
        assert_eq!(sim.alive_nodes().len() as u64, 40 - waiting, "t={t}");
    }
    assert!(sim.counters().crashes > 20);
}

#[test]
fn degree_bounds_hold_under_churn() {
    let mut p = SimParams::default();
    p.engine.check_invariants = true;
    let mut sim = Simulation::new(generated(96, 6), p, 6).unwrap();
    sim.schedule_initial_joins(48, SimTime::from_millis(100));
    sim.set_workload(Workload::default());
    sim.set_churn(ChurnModel { median_lifetime: Some(90.0), rejoin_delay: 10.0 });
    sim.run_until(SimTime::from_secs(400)).unwrap();
    assert!(sim.counters().crashes > 0);
}

#[test]
fn joiner_without_bootstrap_keeps_backing_off() {
    let mut sim = Simulation::new(star(&[1.0, 1.0, 1.0]), quiet(), 1).unwrap();
    sim.schedule_initial_joins(1, SimTime::ZERO);
    sim.schedule_crash(NodeId(0), SimTime::from_secs(1)).unwrap();
    sim.schedule_join(SimTime::from_secs(2));
    sim.run_until(SimTime::from_secs(300)).unwrap();
    assert!(!sim.is_active(NodeId(1)));
    let tries = sim.counters().contacts;
    assert!((4..30).contains(&tries), "{tries} contacts");
}

#[test]
fn full_contact_redirects_the_joiner() {
    let mut p = quiet();
    p.overlay.max_accepted = 1;
    let mut sim = Simulation::new(star(&[1.0; 6]), p, 2).unwrap();
    sim.set_optimizer(false);
    sim.schedule_initial_joins(4, SimTime::from_secs(1));
    sim.run_until(SimTime::from_secs(10)).unwrap();
    for i in 1..4 {
        assert!(sim.is_active(NodeId(i)), "n{i}");
        assert!(sim.degree(NodeId(i)) >= 1);
    }
    assert_eq!(sim.overlay().node(NodeId(0)).accepted(), 1);
}

#[test]
fn exponential_lifetimes_have_the_configured_median() {
    let churn = ChurnModel { median_lifetime: Some(300.0), rejoin_delay: 10.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut v: Vec<f64> = (0..20_001).map(|_| churn.draw_lifetime(&mut rng).unwrap().as_secs_f64()).collect();
    v.sort_by(f64::total_cmp);
    assert!((v[10_000] / 300.0 - 1.0).abs() < 0.05, "{}", v[10_000]);
    assert!(ChurnModel::default().draw_lifetime(&mut rng).is_none());
}
