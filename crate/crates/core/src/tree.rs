//! Flood-and-prune tree extraction.
//!
//! Each node keeps three soft-state stores: message ids it has seen (with the
//! tunnel they came in on), filters its peers installed on it, and filters it
//! asked its peers to install. Handlers are pure with respect to the network:
//! they mutate local stores and return the messages to send.

use serde::{Deserialize, Serialize};

use crate::ids::{MessageId, NodeId, TunnelId};
use crate::overlay::LinkView;
use crate::soft_state::SoftStateStore;
use crate::time::SimTime;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeConfig {
    /// Hop limit of data messages.
    pub data_ttl: u32,
    /// Hop limit of reset floods after a tunnel failure.
    pub reset_ttl: u32,
    /// Seconds a message id is remembered.
    pub idstore_timeout: f64,
    /// Seconds between soft-state sweeps.
    pub sweep_period: f64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig { data_ttl: 32, reset_ttl: 3, idstore_timeout: 30.0, sweep_period: 10.0 }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.data_ttl == 0 || self.reset_ttl == 0 {
            return Err("data_ttl and reset_ttl must be positive".into());
        }
        if !(self.idstore_timeout > 0.0 && self.sweep_period > 0.0) {
            return Err("idstore_timeout and sweep_period must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Payload {
    Data,
    Heartbeat,
    /// Probe answered by every receiver along the reverse tree.
    Ping,
    Pong { ping: MessageId, replier: NodeId },
    DropRoute { source: NodeId },
    ResetRoute,
}

impl Payload {
    /// Flooded along the source's tree and subject to filters.
    pub fn is_multicast(self) -> bool {
        matches!(self, Payload::Data | Payload::Heartbeat | Payload::Ping)
    }

    pub fn name(self) -> &'static str {
        match self {
            Payload::Data => "data",
            Payload::Heartbeat => "heartbeat",
            Payload::Ping => "ping",
            Payload::Pong { .. } => "pong",
            Payload::DropRoute { .. } => "drop_route",
            Payload::ResetRoute => "reset_route",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayMessage {
    pub id: MessageId,
    pub payload: Payload,
    pub ttl: u32,
}

impl OverlayMessage {
    pub fn source(&self) -> NodeId {
        self.id.source
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Send {
    pub peer: NodeId,
    pub tunnel: TunnelId,
    pub msg: OverlayMessage,
}

/// Where a message id was last seen coming from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arrival {
    Local,
    Tunnel(NodeId, TunnelId),
    /// Over a tunnel this node no longer holds.
    Detached,
}

impl Arrival {
    fn of(link: Option<LinkView>) -> Arrival {
        link.map_or(Arrival::Detached, |l| Arrival::Tunnel(l.peer, l.id))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DataOutcome {
    pub deliver: bool,
    pub duplicate: bool,
    pub drop_route_sent: bool,
    pub sends: Vec<Send>,
}

#[derive(Clone, Copy, Debug)]
pub struct TreeTimers {
    pub idstore: SimTime,
    pub filter: SimTime,
}

#[derive(Clone, Debug, Default)]
pub struct TreeState {
    id_store: SoftStateStore<MessageId, Arrival>,
    filtered: SoftStateStore<(NodeId, TunnelId), ()>,
    filtered_local: SoftStateStore<(NodeId, TunnelId), ()>,
    next_seq: u64,
}

impl TreeState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&mut self, me: NodeId) -> MessageId {
        let id = MessageId::new(me, self.next_seq);
        self.next_seq += 1;
        id
    }

    /// Starts a flood from `me`; the message is marked seen so echoes are
    /// treated as duplicates.
    pub fn originate(
        &mut self,
        me: NodeId,
        payload: Payload,
        ttl: u32,
        now: SimTime,
        links: &[LinkView],
        timers: TreeTimers,
    ) -> (OverlayMessage, Vec<Send>) {
        let msg = OverlayMessage { id: self.next_id(me), payload, ttl };
        self.id_store.put(msg.id, Arrival::Local, now, timers.idstore);
        let sends = links
            .iter()
            .filter(|l| !self.filtered.contains(&(me, l.id), now))
            .map(|l| Send { peer: l.peer, tunnel: l.id, msg })
            .collect();
        (msg, sends)
    }

    /// A data, heartbeat or ping message arrived over `tunnel` from `peer`.
    /// `link` is the local view of that tunnel, absent if it is gone.
    pub fn on_data(
        &mut self,
        me: NodeId,
        msg: OverlayMessage,
        peer: NodeId,
        tunnel: TunnelId,
        link: Option<LinkView>,
        now: SimTime,
        links: &[LinkView],
        timers: TreeTimers,
    ) -> DataOutcome {
        let arrival = Arrival::of(link);
        let source = msg.source();
        match self.id_store.put(msg.id, arrival, now, timers.idstore) {
            None => {
                let mut out = DataOutcome { deliver: true, ..Default::default() };
                let ttl = msg.ttl.saturating_sub(1);
                if ttl == 0 {
                    return out;
                }
                let fwd = OverlayMessage { ttl, ..msg };
                out.sends = links
                    .iter()
                    .filter(|c| c.id != tunnel && !self.filtered.contains(&(source, c.id), now))
                    .map(|c| Send { peer: c.peer, tunnel: c.id, msg: fwd })
                    .collect();
                out
            }
            Some(old) => {
                let mut out = DataOutcome { duplicate: true, ..Default::default() };
                let old_active = match old {
                    Arrival::Local => true,
                    Arrival::Tunnel(p, t) => links.iter().any(|c| c.id == t && c.peer == p && c.active),
                    Arrival::Detached => false,
                };
                let arriving_active = link.is_some_and(|l| l.active);
                if old_active && arriving_active && !self.filtered_local.contains(&(source, tunnel), now) {
                    let drop = OverlayMessage { id: self.next_id(me), payload: Payload::DropRoute { source }, ttl: 1 };
                    out.sends.push(Send { peer, tunnel, msg: drop });
                    self.filtered_local.put((source, tunnel), (), now, timers.filter);
                    out.drop_route_sent = true;
                }
                out
            }
        }
    }

    pub fn on_drop_route(&mut self, source: NodeId, tunnel: TunnelId, now: SimTime, timers: TreeTimers) {
        self.filtered.put((source, tunnel), (), now, timers.filter);
    }

    /// Reaction to a detected tunnel failure: wipe remote filters, forget
    /// local ones on the surviving tunnels, and flood a reset.
    pub fn on_failed_connection(
        &mut self,
        me: NodeId,
        failed: TunnelId,
        reset_ttl: u32,
        now: SimTime,
        links: &[LinkView],
        timers: TreeTimers,
    ) -> Vec<Send> {
        self.filtered.clear();
        self.filtered_local.retain(|&(_, t), _| t != failed);
        self.announce_reset(me, reset_ttl, now, links, timers)
    }

    /// Sends a fresh reset on every active tunnel and clears the local filters
    /// on them, so peers resume sending to us.
    pub fn announce_reset(&mut self, me: NodeId, ttl: u32, now: SimTime, links: &[LinkView], timers: TreeTimers) -> Vec<Send> {
        let msg = OverlayMessage { id: self.next_id(me), payload: Payload::ResetRoute, ttl };
        self.id_store.put(msg.id, Arrival::Local, now, timers.idstore);
        let mut sends = Vec::new();
        for c in links.iter().filter(|c| c.active) {
            sends.push(Send { peer: c.peer, tunnel: c.id, msg });
            self.filtered_local.retain(|&(_, t), _| t != c.id);
        }
        sends
    }

    /// A reset wipes every remote filter here and travels on while its TTL lasts.
    pub fn on_reset_route(
        &mut self,
        msg: OverlayMessage,
        link: Option<LinkView>,
        now: SimTime,
        links: &[LinkView],
        timers: TreeTimers,
    ) -> Vec<Send> {
        let arrival = Arrival::of(link);
        if self.id_store.put(msg.id, arrival, now, timers.idstore).is_some() {
            return Vec::new();
        }
        self.filtered.clear();
        let ttl = msg.ttl.saturating_sub(1);
        if ttl == 0 {
            return Vec::new();
        }
        let fwd = OverlayMessage { ttl, ..msg };
        let mut sends = Vec::new();
        for c in links.iter().filter(|c| c.active) {
            sends.push(Send { peer: c.peer, tunnel: c.id, msg: fwd });
            self.filtered_local.retain(|&(_, t), _| t != c.id);
        }
        sends
    }

    /// Next hop for a pong travelling back towards the ping's source.
    pub fn reverse_hop(&self, ping: MessageId, now: SimTime) -> Option<Arrival> {
        self.id_store.get(&ping, now).copied()
    }

    /// Forgets every filter that refers to `tunnel`.
    pub fn purge_tunnel(&mut self, tunnel: TunnelId) {
        self.filtered.retain(|&(_, t), _| t != tunnel);
        self.filtered_local.retain(|&(_, t), _| t != tunnel);
    }

    pub fn sweep(&mut self, now: SimTime) -> usize {
        self.id_store.sweep(now) + self.filtered.sweep(now) + self.filtered_local.sweep(now)
    }

    pub fn is_filtered(&self, source: NodeId, tunnel: TunnelId, now: SimTime) -> bool {
        self.filtered.contains(&(source, tunnel), now)
    }

    pub fn is_filtered_local(&self, source: NodeId, tunnel: TunnelId, now: SimTime) -> bool {
        self.filtered_local.contains(&(source, tunnel), now)
    }

    pub fn has_seen(&self, id: MessageId, now: SimTime) -> bool {
        self.id_store.contains(&id, now)
    }

    /// Live entry counts of (idStore, tunnelFiltered, tunnelFilteredLocal).
    pub fn store_sizes(&self, now: SimTime) -> (usize, usize, usize) {
        (self.id_store.live(now), self.filtered.live(now), self.filtered_local.live(now))
    }

    pub fn clear(&mut self) {
        self.id_store.clear();
        self.filtered.clear();
        self.filtered_local.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: TreeTimers = TreeTimers { idstore: SimTime::from_secs(30), filter: SimTime::from_secs(600) };

    fn link(peer: u32, id: u64) -> LinkView {
        LinkView { id: TunnelId(id), peer: NodeId(peer), active: true }
    }

    fn data(src: u32, seq: u64, ttl: u32) -> OverlayMessage {
        OverlayMessage { id: MessageId::new(NodeId(src), seq), payload: Payload::Data, ttl }
    }

    #[test]
    fn first_copy_delivered_and_forwarded_elsewhere() {
        let mut s = TreeState::new();
        let links = [link(0, 1), link(2, 2), link(3, 3)];
        let out = s.on_data(NodeId(1), data(0, 0, 32), NodeId(0), TunnelId(1), Some(links[0]), SimTime::ZERO, &links, T);
        assert!(out.deliver && !out.duplicate);
        let peers: Vec<_> = out.sends.iter().map(|x| x.peer.0).collect();
        assert_eq!(peers, vec![2, 3]);
        assert!(out.sends.iter().all(|x| x.msg.ttl == 31));
    }

    #[test]
    fn ttl_exhausted_is_delivered_but_not_forwarded() {
        let mut s = TreeState::new();
        let links = [link(0, 1), link(2, 2)];
        let out = s.on_data(NodeId(1), data(0, 0, 1), NodeId(0), TunnelId(1), Some(links[0]), SimTime::ZERO, &links, T);
        assert!(out.deliver);
        assert!(out.sends.is_empty());
    }

    #[test]
    fn duplicate_sends_one_drop_route() {
        let mut s = TreeState::new();
        let links = [link(0, 1), link(2, 2)];
        let now = SimTime::from_millis(1);
        s.on_data(NodeId(1), data(0, 0, 32), NodeId(0), TunnelId(1), Some(links[0]), now, &links, T);
        let dup = s.on_data(NodeId(1), data(0, 0, 31), NodeId(2), TunnelId(2), Some(links[1]), now, &links, T);
        assert!(dup.duplicate && !dup.deliver && dup.drop_route_sent);
        assert_eq!(dup.sends.len(), 1);
        assert_eq!(dup.sends[0].msg.payload, Payload::DropRoute { source: NodeId(0) });
        assert!(s.is_filtered_local(NodeId(0), TunnelId(2), now));

        s.on_data(NodeId(1), data(0, 1, 32), NodeId(0), TunnelId(1), Some(links[0]), now, &links, T);
        let again = s.on_data(NodeId(1), data(0, 1, 31), NodeId(2), TunnelId(2), Some(links[1]), now, &links, T);
        assert!(again.duplicate && again.sends.is_empty());
    }

    #[test]
    fn duplicate_over_draining_tunnel_is_not_pruned() {
        let mut s = TreeState::new();
        let draining = LinkView { active: false, ..link(2, 2) };
        let links = [link(0, 1), draining];
        s.on_data(NodeId(1), data(0, 0, 32), NodeId(0), TunnelId(1), Some(links[0]), SimTime::ZERO, &links, T);
        let dup = s.on_data(NodeId(1), data(0, 0, 31), NodeId(2), TunnelId(2), Some(draining), SimTime::ZERO, &links, T);
        assert!(dup.duplicate && dup.sends.is_empty());
    }

    #[test]
    fn echo_at_source_is_pruned() {
        let mut s = TreeState::new();
        let links = [link(1, 1), link(2, 2)];
        let (msg, sends) = s.originate(NodeId(0), Payload::Data, 32, SimTime::ZERO, &links, T);
        assert_eq!(sends.len(), 2);
        let echo = OverlayMessage { ttl: 30, ..msg };
        let out = s.on_data(NodeId(0), echo, NodeId(2), TunnelId(2), Some(links[1]), SimTime::ZERO, &links, T);
        assert!(out.duplicate && out.drop_route_sent);
    }

    #[test]
    fn drop_route_filters_next_forward_until_expiry() {
        let mut s = TreeState::new();
        let links = [link(0, 1), link(2, 2), link(3, 3)];
        s.on_drop_route(NodeId(0), TunnelId(2), SimTime::ZERO, T);
        let out = s.on_data(NodeId(1), data(0, 0, 32), NodeId(0), TunnelId(1), Some(links[0]), SimTime::ZERO, &links, T);
        assert_eq!(out.sends.iter().map(|x| x.peer.0).collect::<Vec<_>>(), vec![3]);
        let later = SimTime::from_secs(600);
        let out = s.on_data(NodeId(1), data(0, 1, 32), NodeId(0), TunnelId(1), Some(links[0]), later, &links, T);
        assert_eq!(out.sends.len(), 2);
    }

    #[test]
    fn drop_route_for_unknown_source_still_installs() {
        let mut s = TreeState::new();
        s.on_drop_route(NodeId(77), TunnelId(5), SimTime::ZERO, T);
        assert!(s.is_filtered(NodeId(77), TunnelId(5), SimTime::ZERO));
    }

    #[test]
    fn reset_clears_all_remote_filters_even_at_ttl_one() {
        let mut s = TreeState::new();
        let links = [link(0, 1), link(2, 2)];
        s.on_drop_route(NodeId(9), TunnelId(1), SimTime::ZERO, T);
        s.on_drop_route(NodeId(9), TunnelId(2), SimTime::ZERO, T);
        let reset = OverlayMessage { id: MessageId::new(NodeId(0), 5), payload: Payload::ResetRoute, ttl: 1 };
        let out = s.on_reset_route(reset, Some(links[0]), SimTime::ZERO, &links, T);
        assert!(out.is_empty());
        assert!(!s.is_filtered(NodeId(9), TunnelId(1), SimTime::ZERO));
        assert!(!s.is_filtered(NodeId(9), TunnelId(2), SimTime::ZERO));
    }

    #[test]
    fn repeated_reset_is_ignored() {
        let mut s = TreeState::new();
        let links = [link(0, 1), link(2, 2)];
        let reset = OverlayMessage { id: MessageId::new(NodeId(0), 5), payload: Payload::ResetRoute, ttl: 3 };
        let first = s.on_reset_route(reset, Some(links[0]), SimTime::ZERO, &links, T);
        assert_eq!(first.len(), 2);
        assert!(first.iter().all(|x| x.msg.ttl == 2));
        let second = s.on_reset_route(reset, Some(links[1]), SimTime::ZERO, &links, T);
        assert!(second.is_empty());
    }

    #[test]
    fn failure_clears_every_remote_filter() {
        let mut s = TreeState::new();
        let links = [link(2, 2)];
        s.on_drop_route(NodeId(4), TunnelId(2), SimTime::ZERO, T);
        s.on_drop_route(NodeId(5), TunnelId(1), SimTime::ZERO, T);
        let sends = s.on_failed_connection(NodeId(1), TunnelId(1), 3, SimTime::ZERO, &links, T);
        assert_eq!(sends.len(), 1);
        assert_eq!(sends[0].msg.payload, Payload::ResetRoute);
        assert_eq!(s.store_sizes(SimTime::ZERO).1, 0);
    }

    #[test]
    fn isolated_origin_sends_nothing() {
        let mut s = TreeState::new();
        let (msg, sends) = s.originate(NodeId(0), Payload::Data, 32, SimTime::ZERO, &[], T);
        assert!(sends.is_empty());
        assert!(s.has_seen(msg.id, SimTime::ZERO));
    }

    #[test]
    fn sweep_drops_expired_entries() {
        let mut s = TreeState::new();
        s.on_drop_route(NodeId(1), TunnelId(1), SimTime::ZERO, TreeTimers { idstore: SimTime::from_millis(500), filter: SimTime::from_millis(500) });
        assert_eq!(s.sweep(SimTime::from_millis(501)), 1);
        assert_eq!(s.store_sizes(SimTime::from_millis(501)), (0, 0, 0));
    }
}
