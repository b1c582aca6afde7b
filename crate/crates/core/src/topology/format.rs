//! Line-oriented topology file format.
//!
//! ```text
//! # comment
//! routers 4 hosts 2
//! link r1 r0 3.250 8000000 StubTransit
//! link h0 r1 0.500 4000000 ClientStub
//! host h0 r1
//! ```
//!
//! Latencies are milliseconds, bandwidths bits per second.

use std::fmt::Write as _;

use super::{Endpoint, Host, PhysLink, PhysicalTopology, TopologyError};
use crate::ids::{HostId, RouterId};
use crate::time::SimTime;

impl PhysicalTopology {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "routers {} hosts {}", self.routers, self.hosts.len()).unwrap();
        for l in &self.links {
            writeln!(out, "link {} {} {} {} {}", l.a, l.b, l.latency, l.bandwidth, l.class).unwrap();
        }
        for h in &self.hosts {
            writeln!(out, "host {} {}", h.id, h.router).unwrap();
        }
        out
    }

    /// Parses and validates a topology file.
    pub fn from_text(text: &str) -> Result<Self, TopologyError> {
        let mut header: Option<(u32, u32)> = None;
        let mut links = Vec::new();
        let mut hosts: Vec<Option<RouterId>> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let perr = |msg: String| TopologyError::Parse { line, msg };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            match fields[0] {
                "routers" => {
                    if fields.len() != 4 || fields[2] != "hosts" {
                        return Err(perr("expected `routers N hosts M`".into()));
                    }
                    let r = fields[1].parse().map_err(|_| perr(format!("bad router count `{}`", fields[1])))?;
                    let h: u32 = fields[3].parse().map_err(|_| perr(format!("bad host count `{}`", fields[3])))?;
                    header = Some((r, h));
                    hosts = vec![None; h as usize];
                }
                "link" => {
                    if header.is_none() {
                        return Err(perr("link before header".into()));
                    }
                    if fields.len() != 6 {
                        return Err(perr("expected `link <idA> <idB> <latency_ms> <bw_bps> <class>`".into()));
                    }
                    let a = parse_endpoint(fields[1]).map_err(perr)?;
                    let b = parse_endpoint(fields[2]).map_err(perr)?;
                    let latency = parse_millis(fields[3]).map_err(perr)?;
                    let bandwidth = fields[4]
                        .parse()
                        .map_err(|_| perr(format!("bad bandwidth `{}`", fields[4])))?;
                    let class = fields[5].parse().map_err(perr)?;
                    links.push(PhysLink { a, b, latency, bandwidth, class });
                }
                "host" => {
                    let Some(id) = fields.get(1) else {
                        return Err(perr("host line without an id".into()));
                    };
                    let h = match parse_endpoint(id).map_err(perr)? {
                        Endpoint::Host(h) => h,
                        Endpoint::Router(_) => return Err(perr(format!("`{id}` is not a host id"))),
                    };
                    let Some(router) = fields.get(2) else {
                        return Err(perr(format!("host {h} has no attachment router")));
                    };
                    let r = match parse_endpoint(router).map_err(perr)? {
                        Endpoint::Router(r) => r,
                        Endpoint::Host(_) => return Err(perr(format!("host {h} attaches to non-router `{router}`"))),
                    };
                    let slot = hosts
                        .get_mut(h.index())
                        .ok_or_else(|| perr(format!("host {h} exceeds declared host count")))?;
                    if slot.is_some() {
                        return Err(perr(format!("host {h} declared twice")));
                    }
                    *slot = Some(r);
                }
                other => return Err(perr(format!("unknown record `{other}`"))),
            }
        }
        let Some((routers, _)) = header else {
            return Err(TopologyError::Parse { line: 0, msg: "missing `routers N hosts M` header".into() });
        };
        let hosts = hosts
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.map(|router| Host { id: HostId(i as u32), router })
                    .ok_or_else(|| TopologyError::Invalid(format!("host h{i} declared in header but never defined")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        PhysicalTopology::new(routers, links, hosts)
    }
}

fn parse_endpoint(s: &str) -> Result<Endpoint, String> {
    let (kind, num) = s.split_at(1.min(s.len()));
    let n: u32 = num.parse().map_err(|_| format!("bad id `{s}`"))?;
    match kind {
        "r" => Ok(Endpoint::Router(RouterId(n))),
        "h" => Ok(Endpoint::Host(HostId(n))),
        _ => Err(format!("id `{s}` must start with `r` or `h`")),
    }
}

fn parse_millis(s: &str) -> Result<SimTime, String> {
    let bad = || format!("bad latency `{s}`");
    if let Some((int, frac)) = s.split_once('.') {
        if frac.len() <= 3 && !int.is_empty() && frac.bytes().all(|b| b.is_ascii_digit()) {
            let whole: u64 = int.parse().map_err(|_| bad())?;
            let frac_us: u64 = format!("{frac:0<3}").parse().map_err(|_| bad())?;
            return Ok(SimTime::from_micros(whole * 1_000 + frac_us));
        }
    }
    let ms: f64 = s.parse().map_err(|_| bad())?;
    if !ms.is_finite() || ms < 0.0 {
        return Err(bad());
    }
    Ok(SimTime::from_millis_f64(ms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{generate_topology, TopologyParams};

    #[test]
    fn round_trip_is_identity() {
        let params = TopologyParams { hosts: 40, ..TopologyParams::default() };
        let topo = generate_topology(&params, 3).unwrap();
        let text = topo.to_text();
        let back = PhysicalTopology::from_text(&text).unwrap();
        assert_eq!(back, topo);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn generation_is_deterministic() {
        let params = TopologyParams { hosts: 30, ..TopologyParams::default() };
        let a = generate_topology(&params, 11).unwrap().to_text();
        let b = generate_topology(&params, 11).unwrap().to_text();
        assert_eq!(a, b);
        let c = generate_topology(&params, 12).unwrap().to_text();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_latency_link_is_rejected() {
        let text = "routers 2 hosts 0\nlink r0 r1 0 1000 TransitTransit\n";
        match PhysicalTopology::from_text(text) {
            Err(TopologyError::Invalid(m)) => assert!(m.contains("latency"), "{m}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn host_without_router_names_the_host() {
        let text = "routers 1 hosts 1\nlink h0 r0 1.0 1000 ClientStub\nhost h0\n";
        match PhysicalTopology::from_text(text) {
            Err(TopologyError::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("h0"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn disconnected_router_graph_is_rejected() {
        let text = "routers 3 hosts 0\nlink r0 r1 1.0 1000 TransitTransit\n";
        assert!(matches!(PhysicalTopology::from_text(text), Err(TopologyError::Invalid(_))));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# tiny\n\nrouters 1 hosts 1 # trailing\nlink h0 r0 0.250 2000000 ClientStub\nhost h0 r0\n";
        let topo = PhysicalTopology::from_text(text).unwrap();
        assert_eq!(topo.links()[0].latency, SimTime::from_micros(250));
    }

    #[test]
    fn unknown_record_reports_line() {
        let text = "routers 1 hosts 0\nswitch s0\n";
        assert_eq!(
            PhysicalTopology::from_text(text),
            Err(TopologyError::Parse { line: 2, msg: "unknown record `switch`".into() })
        );
    }
}
