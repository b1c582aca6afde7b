use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::rc::Rc;
use std::sync::Arc;

use super::{LinkId, PhysLink, PhysicalTopology, TopologyError};
use crate::ids::HostId;
use crate::time::SimTime;

/// A minimum-latency physical route between two hosts.
#[derive(Clone, Debug, PartialEq)]
pub struct PathInfo {
    /// Link ids ordered from the lower-numbered host to the higher-numbered one.
    pub links: Vec<LinkId>,
    pub latency: SimTime,
    /// Minimum bandwidth over the links, bits per second.
    pub bottleneck_bw: u64,
}

impl PathInfo {
    pub fn phys_links<'a>(&'a self, topo: &'a PhysicalTopology) -> impl Iterator<Item = &'a PhysLink> + 'a {
        self.links.iter().map(move |&l| topo.link(l))
    }
}

struct SpTree {
    dist: Vec<u64>,
    pred: Vec<Option<(usize, LinkId)>>,
}

/// Memoizing shortest-path oracle over a topology.
///
/// A pair is always solved from its lower-numbered host so both directions
/// share one route and report identical latency and bottleneck.
pub struct PathCache {
    topo: Arc<PhysicalTopology>,
    trees: RefCell<HashMap<HostId, Rc<SpTree>>>,
    paths: RefCell<HashMap<(HostId, HostId), Arc<PathInfo>>>,
}

impl PathCache {
    pub fn new(topo: Arc<PhysicalTopology>) -> Self {
        PathCache {
            topo,
            trees: RefCell::new(HashMap::new()),
            paths: RefCell::new(HashMap::new()),
        }
    }

    pub fn topology(&self) -> &Arc<PhysicalTopology> {
        &self.topo
    }

    pub fn shortest_path(&self, a: HostId, b: HostId) -> Result<Arc<PathInfo>, TopologyError> {
        if a == b {
            return Err(TopologyError::SameHost(a));
        }
        for h in [a, b] {
            if self.topo.host(h).is_none() {
                return Err(TopologyError::UnknownHost(h));
            }
        }
        let key = if a < b { (a, b) } else { (b, a) };
        if let Some(p) = self.paths.borrow().get(&key) {
            return Ok(p.clone());
        }
        let tree = self.tree(key.0);
        let target = self.topo.host_vertex(key.1);
        let mut links = Vec::new();
        let mut v = target;
        while let Some((prev, link)) = tree.pred[v] {
            links.push(link);
            v = prev;
        }
        links.reverse();
        let bottleneck_bw = links.iter().map(|&l| self.topo.link(l).bandwidth).min().unwrap_or(u64::MAX);
        let info = Arc::new(PathInfo {
            links,
            latency: SimTime::from_micros(tree.dist[target]),
            bottleneck_bw,
        });
        self.paths.borrow_mut().insert(key, info.clone());
        Ok(info)
    }

    /// Convenience for callers that already know `a != b`.
    pub fn latency(&self, a: HostId, b: HostId) -> SimTime {
        if a == b {
            return SimTime::ZERO;
        }
        self.shortest_path(a, b).map(|p| p.latency).unwrap_or(SimTime::MAX)
    }

    fn tree(&self, src: HostId) -> Rc<SpTree> {
        if let Some(t) = self.trees.borrow().get(&src) {
            return t.clone();
        }
        let topo = &self.topo;
        let n = topo.vertex_count();
        let mut dist = vec![u64::MAX; n];
        let mut pred = vec![None; n];
        let start = topo.host_vertex(src);
        dist[start] = 0;
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((0u64, start)));
        while let Some(Reverse((d, v))) = heap.pop() {
            if d > dist[v] {
                continue;
            }
            for &(w, link) in topo.adjacency(v) {
                let nd = d + topo.link(link).latency.as_micros();
                if nd < dist[w] {
                    dist[w] = nd;
                    pred[w] = Some((v, link));
                    heap.push(Reverse((nd, w)));
                }
            }
        }
        let tree = Rc::new(SpTree { dist, pred });
        self.trees.borrow_mut().insert(src, tree.clone());
        tree
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{Endpoint, Host, LinkClass};
    use crate::ids::RouterId;

    fn line_topology() -> PhysicalTopology {
        // h0 - r0 - r1 - h1 with latencies 1, 2, 3 ms
        let links = vec![
            PhysLink { a: Endpoint::Host(HostId(0)), b: Endpoint::Router(RouterId(0)), latency: SimTime::from_millis(1), bandwidth: 5, class: LinkClass::ClientStub },
            PhysLink { a: Endpoint::Router(RouterId(0)), b: Endpoint::Router(RouterId(1)), latency: SimTime::from_millis(2), bandwidth: 3, class: LinkClass::StubStub },
            PhysLink { a: Endpoint::Host(HostId(1)), b: Endpoint::Router(RouterId(1)), latency: SimTime::from_millis(3), bandwidth: 7, class: LinkClass::ClientStub },
        ];
        let hosts = vec![Host { id: HostId(0), router: RouterId(0) }, Host { id: HostId(1), router: RouterId(1) }];
        PhysicalTopology::new(2, links, hosts).unwrap()
    }

    #[test]
    fn line_latency_is_sum() {
        let cache = PathCache::new(Arc::new(line_topology()));
        let p = cache.shortest_path(HostId(0), HostId(1)).unwrap();
        assert_eq!(p.latency, SimTime::from_millis(6));
        assert_eq!(p.bottleneck_bw, 3);
        assert_eq!(p.links, vec![0, 1, 2]);
    }

    #[test]
    fn same_host_is_rejected() {
        let cache = PathCache::new(Arc::new(line_topology()));
        assert_eq!(cache.shortest_path(HostId(1), HostId(1)).unwrap_err(), TopologyError::SameHost(HostId(1)));
    }

    #[test]
    fn symmetric() {
        let cache = PathCache::new(Arc::new(line_topology()));
        let ab = cache.shortest_path(HostId(0), HostId(1)).unwrap();
        let ba = cache.shortest_path(HostId(1), HostId(0)).unwrap();
        assert_eq!(ab, ba);
    }

    // Independent relaxation over the raw link list.
    fn bellman_ford(topo: &PhysicalTopology, src: Endpoint) -> std::collections::HashMap<Endpoint, u64> {
        let mut dist = std::collections::HashMap::from([(src, 0u64)]);
        loop {
            let mut changed = false;
            for l in topo.links() {
                for (x, y) in [(l.a, l.b), (l.b, l.a)] {
                    if let Some(&dx) = dist.get(&x) {
                        let cand = dx + l.latency.as_micros();
                        if dist.get(&y).is_none_or(|&dy| cand < dy) {
                            dist.insert(y, cand);
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                return dist;
            }
        }
    }

    #[test]
    fn latencies_match_bellman_ford() {
        use rand::{Rng, SeedableRng};
        use crate::topology::{generate_topology, TopologyParams};
        let params = TopologyParams { transit_routers: 5, stubs_per_transit: 9, hosts: 80, ..TopologyParams::default() };
        assert_eq!(params.router_count(), 50);
        let topo = Arc::new(generate_topology(&params, 17).unwrap());
        let cache = PathCache::new(topo.clone());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 100 {
            let (a, b) = (HostId(rng.random_range(0..80)), HostId(rng.random_range(0..80)));
            if a == b {
                continue;
            }
            let oracle = bellman_ford(&topo, Endpoint::Host(a))[&Endpoint::Host(b)];
            let p = cache.shortest_path(a, b).unwrap();
            assert_eq!(p.latency.as_micros(), oracle);
            let summed: u64 = p.phys_links(&topo).map(|l| l.latency.as_micros()).sum();
            assert_eq!(summed, oracle);
            let bottleneck = p.phys_links(&topo).map(|l| l.bandwidth).min().unwrap();
            assert_eq!(p.bottleneck_bw, bottleneck);
            checked += 1;
        }
    }
}
