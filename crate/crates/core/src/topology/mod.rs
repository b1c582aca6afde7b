//! Physical network model: routers, end hosts and typed links.
//!
//! The topology is the ground truth for message latency, for the IP-layer
//! denominator of relative delay penalty, and for link stress accounting. It
//! is immutable once built and can be shared across concurrent runs.

mod format;
mod generate;
mod paths;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{HostId, RouterId};
use crate::time::SimTime;

pub use generate::{generate_topology, ClassRange, TopologyParams};
pub use paths::{PathCache, PathInfo};

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid topology: {0}")]
    Invalid(String),
    #[error("invalid generator parameters: {0}")]
    Params(String),
    #[error("shortest path requested between a host and itself ({0})")]
    SameHost(HostId),
    #[error("unknown host {0}")]
    UnknownHost(HostId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LinkClass {
    ClientStub,
    StubStub,
    StubTransit,
    TransitTransit,
}

impl LinkClass {
    pub const ALL: [LinkClass; 4] = [
        LinkClass::ClientStub,
        LinkClass::StubStub,
        LinkClass::StubTransit,
        LinkClass::TransitTransit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LinkClass::ClientStub => "ClientStub",
            LinkClass::StubStub => "StubStub",
            LinkClass::StubTransit => "StubTransit",
            LinkClass::TransitTransit => "TransitTransit",
        }
    }
}

impl fmt::Display for LinkClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LinkClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        LinkClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown link class `{s}`"))
    }
}

/// One end of a physical link.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Router(RouterId),
    Host(HostId),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Router(r) => r.fmt(f),
            Endpoint::Host(h) => h.fmt(f),
        }
    }
}

/// Index of a link in [`PhysicalTopology::links`].
pub type LinkId = usize;

/// A symmetric physical link.
///
/// By convention a `StubTransit` link lists the stub router first and a
/// `ClientStub` link lists the host first.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysLink {
    pub a: Endpoint,
    pub b: Endpoint,
    pub latency: SimTime,
    /// Bits per second.
    pub bandwidth: u64,
    pub class: LinkClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Host {
    pub id: HostId,
    pub router: RouterId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalTopology {
    routers: u32,
    links: Vec<PhysLink>,
    hosts: Vec<Host>,
    // vertex index -> (neighbour vertex, link)
    adjacency: Vec<Vec<(usize, LinkId)>>,
}

impl PhysicalTopology {
    /// Builds and validates a topology. Hosts must be numbered `0..hosts.len()`
    /// in order.
    pub fn new(routers: u32, links: Vec<PhysLink>, hosts: Vec<Host>) -> Result<Self, TopologyError> {
        let mut topo = PhysicalTopology {
            routers,
            links,
            hosts,
            adjacency: Vec::new(),
        };
        topo.validate()?;
        topo.adjacency = vec![Vec::new(); topo.vertex_count()];
        for (id, link) in topo.links.iter().enumerate() {
            let a = topo.vertex(link.a);
            let b = topo.vertex(link.b);
            topo.adjacency[a].push((b, id));
            topo.adjacency[b].push((a, id));
        }
        Ok(topo)
    }

    pub fn router_count(&self) -> u32 {
        self.routers
    }

    pub fn links(&self) -> &[PhysLink] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> &PhysLink {
        &self.links[id]
    }

    pub fn hosts(&self) -> &[Host] {
        &self.hosts
    }

    pub fn host(&self, id: HostId) -> Option<&Host> {
        self.hosts.get(id.index())
    }

    pub(crate) fn vertex_count(&self) -> usize {
        self.routers as usize + self.hosts.len()
    }

    pub(crate) fn vertex(&self, e: Endpoint) -> usize {
        match e {
            Endpoint::Router(r) => r.index(),
            Endpoint::Host(h) => self.routers as usize + h.index(),
        }
    }

    pub(crate) fn host_vertex(&self, h: HostId) -> usize {
        self.routers as usize + h.index()
    }

    pub(crate) fn adjacency(&self, v: usize) -> &[(usize, LinkId)] {
        &self.adjacency[v]
    }

    /// Routers that terminate a transit-level link end.
    pub fn is_transit(&self, r: RouterId) -> bool {
        self.links.iter().any(|l| match l.class {
            LinkClass::TransitTransit => l.a == Endpoint::Router(r) || l.b == Endpoint::Router(r),
            LinkClass::StubTransit => l.b == Endpoint::Router(r),
            _ => false,
        })
    }

    fn validate(&self) -> Result<(), TopologyError> {
        let invalid = |m: String| Err(TopologyError::Invalid(m));
        if self.routers == 0 {
            return invalid("no routers".into());
        }
        for (i, h) in self.hosts.iter().enumerate() {
            if h.id.index() != i {
                return invalid(format!("host ids must be dense, found {} at position {i}", h.id));
            }
            if h.router.0 >= self.routers {
                return invalid(format!("host {} attaches to unknown router {}", h.id, h.router));
            }
        }
        let mut host_links = vec![0usize; self.hosts.len()];
        let mut transit = vec![false; self.routers as usize];
        for l in &self.links {
            for e in [l.a, l.b] {
                match e {
                    Endpoint::Router(r) if r.0 >= self.routers => {
                        return invalid(format!("link references unknown router {r}"))
                    }
                    Endpoint::Host(h) if h.index() >= self.hosts.len() => {
                        return invalid(format!("link references unknown host {h}"))
                    }
                    _ => {}
                }
            }
            if l.a == l.b {
                return invalid(format!("self loop at {}", l.a));
            }
            if l.latency == SimTime::ZERO {
                return invalid(format!("link {}-{} has non-positive latency", l.a, l.b));
            }
            if l.bandwidth == 0 {
                return invalid(format!("link {}-{} has non-positive bandwidth", l.a, l.b));
            }
            match (l.class, l.a, l.b) {
                (LinkClass::ClientStub, Endpoint::Host(h), Endpoint::Router(r)) => {
                    if self.hosts[h.index()].router != r {
                        return invalid(format!(
                            "host {h} links to {r} but is declared on {}",
                            self.hosts[h.index()].router
                        ));
                    }
                    host_links[h.index()] += 1;
                }
                (LinkClass::ClientStub, _, _) => {
                    return invalid(format!("ClientStub link {}-{} must be host-router", l.a, l.b))
                }
                (_, Endpoint::Host(_), _) | (_, _, Endpoint::Host(_)) => {
                    return invalid(format!("{} link {}-{} touches a host", l.class, l.a, l.b))
                }
                (LinkClass::TransitTransit, Endpoint::Router(a), Endpoint::Router(b)) => {
                    transit[a.index()] = true;
                    transit[b.index()] = true;
                }
                (LinkClass::StubTransit, _, Endpoint::Router(b)) => transit[b.index()] = true,
                _ => {}
            }
        }
        for (i, n) in host_links.iter().enumerate() {
            if *n != 1 {
                return invalid(format!("host h{i} must have exactly one access link, has {n}"));
            }
            let r = self.hosts[i].router;
            if transit[r.index()] {
                return invalid(format!("host h{i} attaches to transit router {r}"));
            }
        }
        // router graph connectivity
        let mut adj = vec![Vec::new(); self.routers as usize];
        for l in &self.links {
            if let (Endpoint::Router(a), Endpoint::Router(b)) = (l.a, l.b) {
                adj[a.index()].push(b.index());
                adj[b.index()].push(a.index());
            }
        }
        let mut seen = vec![false; adj.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        if let Some(r) = seen.iter().position(|s| !s) {
            return invalid(format!("router graph is disconnected (r{r} unreachable from r0)"));
        }
        Ok(())
    }
}
