use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ids::RouterId;
use crate::topology::{Endpoint, Host, LinkClass, PhysLink, PhysicalTopology};

// One router, host i hanging off it; a host pair's latency is the sum of the
// two access latencies and its bandwidth the smaller access bandwidth.
fn star(access: &[(f64, u64)]) -> PathCache {
    let links = access
        .iter()
        .enumerate()
        .map(|(i, &(ms, bw))| PhysLink {
            a: Endpoint::Host(HostId(i as u32)),
            b: Endpoint::Router(RouterId(0)),
            latency: SimTime::from_millis_f64(ms),
            bandwidth: bw,
            class: LinkClass::ClientStub,
        })
        .collect();
    let hosts = (0..access.len()).map(|i| Host { id: HostId(i as u32), router: RouterId(0) }).collect();
    PathCache::new(Arc::new(PhysicalTopology::new(1, links, hosts).unwrap()))
}

fn overlay(cfg: OverlayConfig, access: &[(f64, u64)]) -> Overlay {
    let mut o = Overlay::new(cfg, MembershipConfig::default(), star(access));
    for i in 0..access.len() {
        o.add_node(HostId(i as u32));
    }
    o
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

const T0: SimTime = SimTime::ZERO;
const MBPS: u64 = 1_000_000;

#[test]
fn ewma_of_eight_then_twelve_is_ten() {
    let e = Estimate::fold(None, 8.0, 1.0, 0.5);
    let e = Estimate::fold(Some(e), 12.0, 1.0, 0.5);
    assert_eq!(e.delay_ms, 10.0);
    assert_eq!(e.samples, 2);
}

#[test]
fn exact_measurement_is_ground_truth() {
    let mut o = overlay(OverlayConfig::default(), &[(1.5, 3 * MBPS), (2.0, 9 * MBPS)]);
    let e = o.evaluate_potential_connection(NodeId(0), NodeId(1), &mut rng()).unwrap();
    assert_eq!(e.delay_ms, 3.5);
    assert_eq!(e.bw_bps, (3 * MBPS) as f64);
}

#[test]
fn noisy_ewma_stays_near_truth() {
    let cfg = OverlayConfig { measurement_noise: 0.2, ewma_alpha: 0.05, ..OverlayConfig::default() };
    for seed in 0..20 {
        let mut o = overlay(cfg.clone(), &[(10.0, 10 * MBPS), (10.0, 10 * MBPS)]);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut e = None;
        for _ in 0..50 {
            e = o.evaluate_potential_connection(NodeId(0), NodeId(1), &mut r);
        }
        let e = e.unwrap();
        assert!((e.delay_ms / 20.0 - 1.0).abs() < 0.05, "seed {seed}: {}", e.delay_ms);
        assert!((e.bw_bps / 1e7 - 1.0).abs() < 0.05, "seed {seed}: {}", e.bw_bps);
    }
}

#[test]
fn unreachable_candidate_yields_no_measurement() {
    let mut o = overlay(OverlayConfig::default(), &[(1.0, MBPS), (1.0, MBPS)]);
    o.crash(NodeId(1));
    assert!(o.evaluate_potential_connection(NodeId(0), NodeId(1), &mut rng()).is_none());
}

#[test]
fn three_ms_tunnel_is_short() {
    let mut o = overlay(OverlayConfig::default(), &[(1.0, MBPS), (2.0, MBPS)]);
    o.establish_tunnel(NodeId(0), NodeId(1), T0, &mut rng()).unwrap();
    let t = &o.node(NodeId(0)).tunnels[&NodeId(1)];
    assert_eq!(t.class, TunnelClass::Short);
    assert_eq!(t.direction, Direction::Initiated);
    assert_eq!(o.node(NodeId(1)).tunnels[&NodeId(0)].direction, Direction::Accepted);
}

#[test]
fn acceptor_with_seven_incoming_refuses_with_candidates() {
    let mut o = overlay(OverlayConfig::default(), &[(1.0, MBPS); 10]);
    let mut r = rng();
    for i in 1..=7 {
        o.establish_tunnel(NodeId(i), NodeId(0), T0, &mut r).unwrap();
    }
    match o.contact(NodeId(8), NodeId(0), T0, &mut r) {
        ContactOutcome::Refused { reason: Refusal::AcceptorFull, candidates } => {
            assert!(!candidates.is_empty());
            assert!(!candidates.contains(&NodeId(8)));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(o.node(NodeId(0)).accepted(), 7);
}

#[test]
fn initiator_with_five_outgoing_does_not_open_more() {
    let mut o = overlay(OverlayConfig::default(), &[(1.0, MBPS); 8]);
    let mut r = rng();
    for i in 1..=5 {
        o.establish_tunnel(NodeId(0), NodeId(i), T0, &mut r).unwrap();
    }
    assert_eq!(o.establish_tunnel(NodeId(0), NodeId(6), T0, &mut r), Err(Refusal::InitiatorFull));
    assert_eq!(o.establish_tunnel(NodeId(0), NodeId(1), T0, &mut r), Err(Refusal::Duplicate));
    assert_eq!(o.establish_tunnel(NodeId(1), NodeId(0), T0, &mut r), Err(Refusal::Duplicate));
}

fn one_slot(p_short: f64, d_short: f64) -> OverlayConfig {
    OverlayConfig { max_initiated: 1, p_short, d_short, ..OverlayConfig::default() }
}

fn learn(o: &mut Overlay, n: u32, others: &[u32]) {
    let mut r = rng();
    for &x in others {
        o.node_mut(NodeId(n)).membership.insert(NodeId(x), &mut r);
    }
}

#[test]
fn short_improvement_below_threshold_is_ignored() {
    // 0-1 is 15 ms, 0-2 is 14 ms
    let mut o = overlay(one_slot(1.0, 20.0), &[(1.0, MBPS), (14.0, MBPS), (13.0, MBPS)]);
    o.establish_tunnel(NodeId(0), NodeId(1), T0, &mut rng()).unwrap();
    learn(&mut o, 0, &[2]);
    assert!(o.optimizer_iteration(NodeId(0), T0, &mut rng()).is_empty());
    assert!(o.node(NodeId(0)).tunnels.contains_key(&NodeId(1)));
}

#[test]
fn short_improvement_above_threshold_replaces() {
    // 0-1 is 15 ms, 0-2 is 12.5 ms
    let mut o = overlay(one_slot(1.0, 20.0), &[(1.0, MBPS), (14.0, MBPS), (11.5, MBPS)]);
    o.establish_tunnel(NodeId(0), NodeId(1), T0, &mut rng()).unwrap();
    learn(&mut o, 0, &[2]);
    let ev = o.optimizer_iteration(NodeId(0), T0, &mut rng());
    assert_eq!(ev.len(), 1);
    assert_eq!((ev[0].kind, ev[0].added_peer, ev[0].dropped_peer), (ReconfigKind::Short, NodeId(2), Some(NodeId(1))));
    assert_eq!((ev[0].old_value, ev[0].new_value), (15.0, 12.5));
}

#[test]
fn long_bandwidth_gain_over_half_replaces() {
    let mut o = overlay(one_slot(0.0, 0.1), &[(5.0, 100 * MBPS), (5.0, 4 * MBPS), (5.0, 6_500_000)]);
    o.establish_tunnel(NodeId(0), NodeId(1), T0, &mut rng()).unwrap();
    learn(&mut o, 0, &[2]);
    let ev = o.optimizer_iteration(NodeId(0), T0, &mut rng());
    assert_eq!(ev.len(), 1);
    assert_eq!(ev[0].kind, ReconfigKind::Long);
    assert_eq!(ev[0].added_peer, NodeId(2));
}

#[test]
fn long_bandwidth_gain_under_half_is_ignored() {
    let mut o = overlay(one_slot(0.0, 0.1), &[(5.0, 100 * MBPS), (5.0, 4 * MBPS), (5.0, 5_900_000)]);
    o.establish_tunnel(NodeId(0), NodeId(1), T0, &mut rng()).unwrap();
    learn(&mut o, 0, &[2]);
    assert!(o.optimizer_iteration(NodeId(0), T0, &mut rng()).is_empty());
}

#[test]
fn empty_slots_are_always_filled() {
    let mut o = overlay(OverlayConfig { d_short: 5.0, ..OverlayConfig::default() }, &[(1.0, MBPS), (50.0, 1000), (1.0, MBPS)]);
    learn(&mut o, 0, &[1, 2]);
    let ev = o.optimizer_iteration(NodeId(0), T0, &mut rng());
    let kinds: Vec<_> = ev.iter().map(|e| (e.kind, e.added_peer, e.dropped_peer)).collect();
    assert_eq!(kinds, vec![(ReconfigKind::Short, NodeId(2), None), (ReconfigKind::Long, NodeId(1), None)]);
}

#[test]
fn full_candidate_aborts_replacement_without_side_effects() {
    let cfg = OverlayConfig { max_accepted: 1, ..one_slot(1.0, 20.0) };
    let mut o = overlay(cfg, &[(1.0, MBPS), (14.0, MBPS), (1.0, MBPS), (1.0, MBPS)]);
    let mut r = rng();
    o.establish_tunnel(NodeId(0), NodeId(1), T0, &mut r).unwrap();
    o.establish_tunnel(NodeId(3), NodeId(2), T0, &mut r).unwrap();
    learn(&mut o, 0, &[2]);
    assert!(o.optimizer_iteration(NodeId(0), T0, &mut r).is_empty());
    assert!(o.node(NodeId(0)).tunnels.contains_key(&NodeId(1)));
    assert!(o.node(NodeId(0)).draining.is_empty());
}

#[test]
fn heartbeat_carrying_tunnel_cannot_be_dropped() {
    let mut o = overlay(OverlayConfig::default(), &[(1.0, MBPS); 3]);
    let mut r = rng();
    o.establish_tunnel(NodeId(0), NodeId(1), T0, &mut r).unwrap();
    o.set_heartbeat_window(Some(SimTime::from_secs(2)));
    let now = SimTime::from_secs(10);
    o.mark_heartbeat(NodeId(1), NodeId(0), NodeId(2), now);
    assert!(!o.can_drop(NodeId(0), NodeId(1), now));
    assert!(o.drop_tunnel(NodeId(0), NodeId(1), now).is_none());
    assert!(o.can_drop(NodeId(0), NodeId(1), now + SimTime::from_secs(3)));
}

#[test]
fn drop_drains_at_both_ends() {
    let mut o = overlay(OverlayConfig::default(), &[(1.0, MBPS); 2]);
    let id = o.establish_tunnel(NodeId(0), NodeId(1), T0, &mut rng()).unwrap();
    let (dropped, until) = o.drop_tunnel(NodeId(1), NodeId(0), T0).unwrap();
    assert_eq!((dropped, until), (id, SimTime::from_secs(2)));
    for (n, peer) in [(0, 1), (1, 0)] {
        assert_eq!(o.links(NodeId(n)), vec![LinkView { id, peer: NodeId(peer), active: false }]);
    }
    o.finish_drain(NodeId(0), NodeId(1), id);
    assert!(o.links(NodeId(0)).is_empty() && o.links(NodeId(1)).is_empty());
}

#[test]
fn static_network_stops_reconfiguring() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let access: Vec<(f64, u64)> = (0..30).map(|_| (r.random_range(0.5..12.0), r.random_range(1..100) * MBPS)).collect();
    let mut o = overlay(OverlayConfig::default(), &access);
    for i in 0..30 {
        learn(&mut o, i, &(0..30).filter(|&j| j != i).collect::<Vec<_>>());
    }
    let mut per_round = Vec::new();
    for round in 0..120 {
        let mut n = 0;
        for i in 0..30 {
            for e in o.optimizer_iteration(NodeId(i), SimTime::from_secs(round), &mut r) {
                match e.kind {
                    ReconfigKind::Short => assert!(e.new_value < e.old_value - 2.0),
                    ReconfigKind::Long => assert!(e.new_value > e.old_value * 1.5),
                }
                n += 1;
            }
            let ids: Vec<_> = o.node(NodeId(i)).draining.iter().map(|d| (d.peer, d.id)).collect();
            for (peer, id) in ids {
                o.finish_drain(NodeId(i), peer, id);
            }
        }
        per_round.push(n);
    }
    assert!(per_round[..10].iter().sum::<usize>() > 0);
    assert_eq!(per_round[60..].iter().sum::<usize>(), 0, "{per_round:?}");
}

#[derive(Clone, Debug)]
enum Op {
    Establish(u32, u32),
    Drop(u32, u32),
    Optimize(u32),
    Crash(u32),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..12u32, 0..12u32).prop_map(|(a, b)| Op::Establish(a, b)),
        (0..12u32, 0..12u32).prop_map(|(a, b)| Op::Drop(a, b)),
        (0..12u32).prop_map(Op::Optimize),
        (0..12u32).prop_map(Op::Crash),
    ]
}

proptest! {
    #[test]
    fn degree_bounds_and_symmetry_hold(ops in prop::collection::vec(op(), 1..120), seed in 0u64..1000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let access: Vec<(f64, u64)> = (0..12).map(|i| (1.0 + i as f64, (1 + i) * MBPS)).collect();
        let cfg = OverlayConfig { max_initiated: 3, max_accepted: 2, drain_period: 0.0, ..OverlayConfig::default() };
        let mut o = overlay(cfg, &access);
        for i in 0..12 {
            learn(&mut o, i, &(0..12).filter(|&j| j != i).collect::<Vec<_>>());
        }
        let mut dead = vec![false; 12];
        for (step, op) in ops.into_iter().enumerate() {
            let now = SimTime::from_secs(step as u64);
            match op {
                Op::Establish(a, b) => { let _ = o.establish_tunnel(NodeId(a), NodeId(b), now, &mut r); }
                Op::Drop(a, b) => { let _ = o.drop_tunnel(NodeId(a), NodeId(b), now); }
                Op::Optimize(a) => {
                    let ev = o.optimizer_iteration(NodeId(a), now, &mut r);
                    prop_assert!(ev.iter().filter(|e| e.kind == ReconfigKind::Short).count() <= 1);
                    prop_assert!(ev.iter().filter(|e| e.kind == ReconfigKind::Long).count() <= 1);
                }
                Op::Crash(a) => {
                    if !dead[a as usize] {
                        dead[a as usize] = true;
                        for (peer, id, _) in o.crash(NodeId(a)) {
                            o.remove_failed(peer, NodeId(a), id);
                        }
                    }
                }
            }
            prop_assert_eq!(o.check_invariants(|_| false), Ok(()));
            for n in o.alive_nodes() {
                prop_assert!(!n.tunnels.contains_key(&n.id));
            }
        }
    }
}
