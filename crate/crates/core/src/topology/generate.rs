use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Endpoint, Host, LinkClass, PhysLink, PhysicalTopology, TopologyError};
use crate::ids::{HostId, RouterId};
use crate::time::SimTime;

/// Closed interval `[min, max]` sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRange {
    pub min: f64,
    pub max: f64,
}

impl ClassRange {
    pub const fn new(min: f64, max: f64) -> Self {
        ClassRange { min, max }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

/// Parameters of the transit-stub generator.
///
/// The transit core is a random connected graph. Each transit router owns
/// `stubs_per_transit` stub routers, every one of which hangs off the transit
/// router and is linked to its neighbours in a ring. Hosts attach to uniformly
/// chosen stub routers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyParams {
    pub transit_routers: u32,
    pub stubs_per_transit: u32,
    pub hosts: u32,
    /// Probability of each extra transit-transit edge beyond the spanning tree.
    pub transit_edge_prob: f64,
    /// Latency ranges in milliseconds.
    pub client_stub_ms: ClassRange,
    pub stub_stub_ms: ClassRange,
    pub stub_transit_ms: ClassRange,
    pub transit_transit_ms: ClassRange,
    /// Bandwidth ranges in Mbit/s.
    pub client_stub_mbps: ClassRange,
    pub stub_stub_mbps: ClassRange,
    pub stub_transit_mbps: ClassRange,
    pub transit_transit_mbps: ClassRange,
}

impl Default for TopologyParams {
    fn default() -> Self {
        TopologyParams {
            transit_routers: 8,
            stubs_per_transit: 24,
            hosts: 512,
            transit_edge_prob: 0.2,
            client_stub_ms: ClassRange::new(0.1, 2.0),
            stub_stub_ms: ClassRange::new(1.0, 5.0),
            stub_transit_ms: ClassRange::new(2.0, 10.0),
            transit_transit_ms: ClassRange::new(5.0, 20.0),
            client_stub_mbps: ClassRange::new(2.0, 8.0),
            stub_stub_mbps: ClassRange::new(4.0, 10.0),
            stub_transit_mbps: ClassRange::new(5.0, 10.0),
            transit_transit_mbps: ClassRange::new(10.0, 20.0),
        }
    }
}

impl TopologyParams {
    pub fn latency_range(&self, class: LinkClass) -> ClassRange {
        match class {
            LinkClass::ClientStub => self.client_stub_ms,
            LinkClass::StubStub => self.stub_stub_ms,
            LinkClass::StubTransit => self.stub_transit_ms,
            LinkClass::TransitTransit => self.transit_transit_ms,
        }
    }

    pub fn bandwidth_range_mbps(&self, class: LinkClass) -> ClassRange {
        match class {
            LinkClass::ClientStub => self.client_stub_mbps,
            LinkClass::StubStub => self.stub_stub_mbps,
            LinkClass::StubTransit => self.stub_transit_mbps,
            LinkClass::TransitTransit => self.transit_transit_mbps,
        }
    }

    pub fn router_count(&self) -> u32 {
        self.transit_routers * (1 + self.stubs_per_transit)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let err = |m: &str| Err(TopologyError::Params(m.to_string()));
        if self.transit_routers == 0 {
            return err("at least one transit router is required to connect stub domains");
        }
        if self.hosts > 0 && self.stubs_per_transit == 0 {
            return err("hosts need stub routers to attach to");
        }
        if !(0.0..=1.0).contains(&self.transit_edge_prob) {
            return err("transit_edge_prob must lie in [0, 1]");
        }
        for class in LinkClass::ALL {
            let l = self.latency_range(class);
            if !(l.min > 0.0 && l.max >= l.min) {
                return Err(TopologyError::Params(format!("{class} latency range must be positive and ordered")));
            }
            let b = self.bandwidth_range_mbps(class);
            if !(b.min > 0.0 && b.max >= b.min) {
                return Err(TopologyError::Params(format!("{class} bandwidth range must be positive and ordered")));
            }
        }
        Ok(())
    }
}

/// Generates a connected transit-stub topology. Deterministic in `(params, seed)`.
pub fn generate_topology(params: &TopologyParams, seed: u64) -> Result<PhysicalTopology, TopologyError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = params.transit_routers;
    let s = params.stubs_per_transit;
    let mut links = Vec::new();

    let mut link = |rng: &mut ChaCha8Rng, a: Endpoint, b: Endpoint, class: LinkClass| {
        let lat = params.latency_range(class);
        let bw = params.bandwidth_range_mbps(class);
        let latency = SimTime::from_millis_f64(rng.random_range(lat.min..=lat.max)).max(SimTime::from_micros(1));
        let lo = (bw.min * 1e6).round() as u64;
        let hi = (bw.max * 1e6).round() as u64;
        let bandwidth = rng.random_range(lo..=hi).max(1);
        links.push(PhysLink { a, b, latency, bandwidth, class });
    };

    let router = |i: u32| Endpoint::Router(RouterId(i));

    // transit core: random spanning tree plus extra edges
    let mut adjacent = vec![vec![false; t as usize]; t as usize];
    for i in 1..t {
        let j = rng.random_range(0..i);
        adjacent[i as usize][j as usize] = true;
        adjacent[j as usize][i as usize] = true;
        link(&mut rng, router(j), router(i), LinkClass::TransitTransit);
    }
    for i in 0..t {
        for j in (i + 1)..t {
            if !adjacent[i as usize][j as usize] && rng.random_bool(params.transit_edge_prob) {
                link(&mut rng, router(i), router(j), LinkClass::TransitTransit);
            }
        }
    }

    // stub domains
    for tr in 0..t {
        let first = t + tr * s;
        for k in 0..s {
            link(&mut rng, router(first + k), router(tr), LinkClass::StubTransit);
        }
        if s == 2 {
            link(&mut rng, router(first), router(first + 1), LinkClass::StubStub);
        } else if s >= 3 {
            for k in 0..s {
                link(&mut rng, router(first + k), router(first + (k + 1) % s), LinkClass::StubStub);
            }
        }
    }

    let mut hosts = Vec::with_capacity(params.hosts as usize);
    for h in 0..params.hosts {
        let r = RouterId(t + rng.random_range(0..t * s));
        hosts.push(Host { id: HostId(h), router: r });
        link(&mut rng, Endpoint::Host(HostId(h)), Endpoint::Router(r), LinkClass::ClientStub);
    }

    PhysicalTopology::new(params.router_count(), links, hosts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandwidths_stay_in_class_ranges() {
        let params = TopologyParams::default();
        let topo = generate_topology(&params, 7).unwrap();
        for l in topo.links() {
            let r = params.bandwidth_range_mbps(l.class);
            let mbps = l.bandwidth as f64 / 1e6;
            assert!(r.contains(mbps), "{:?} {} outside {:?}", l.class, mbps, r);
            let lr = params.latency_range(l.class);
            assert!(lr.contains(l.latency.as_millis_f64()), "{:?} latency", l.class);
        }
    }

    #[test]
    fn minimal_topology_is_a_four_vertex_tree() {
        let params = TopologyParams {
            transit_routers: 1,
            stubs_per_transit: 1,
            hosts: 2,
            ..TopologyParams::default()
        };
        let topo = generate_topology(&params, 1).unwrap();
        assert_eq!(topo.router_count() as usize + topo.hosts().len(), 4);
        assert_eq!(topo.links().len(), 3);
    }

    #[test]
    fn rejects_parameter_sets_without_transit() {
        let params = TopologyParams {
            transit_routers: 0,
            ..TopologyParams::default()
        };
        assert!(matches!(generate_topology(&params, 1), Err(TopologyError::Params(_))));
        let params = TopologyParams {
            stubs_per_transit: 0,
            ..TopologyParams::default()
        };
        assert!(matches!(generate_topology(&params, 1), Err(TopologyError::Params(_))));
    }

    #[test]
    fn default_router_count_is_desk_scale() {
        assert_eq!(TopologyParams::default().router_count(), 200);
    }
}
