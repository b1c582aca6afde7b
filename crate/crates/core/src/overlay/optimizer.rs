use rand::Rng;
use serde::Serialize;

use super::{Direction, Overlay, TunnelClass};
use crate::ids::{NodeId, TunnelId};
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ReconfigKind {
    Short,
    Long,
}

/// One tunnel replacement (or an empty slot being filled).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconfigEvent {
    pub time: SimTime,
    pub node: NodeId,
    pub kind: ReconfigKind,
    pub added_peer: NodeId,
    pub added: TunnelId,
    pub dropped_peer: Option<NodeId>,
    pub dropped: Option<TunnelId>,
    /// Delay in ms for short replacements, bandwidth in bps for long ones.
    pub old_value: f64,
    pub new_value: f64,
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    id: NodeId,
    delay: f64,
    bw: f64,
}

#[derive(Clone, Copy, Debug)]
struct Slot {
    peer: Option<NodeId>,
    value: f64,
}

impl Overlay {
    /// Worst droppable initiated tunnel of a class, or an empty slot if the
    /// class quota is not yet used up. Pinned tunnels are never offered.
    fn worst_slot(&self, n: NodeId, class: TunnelClass, now: SimTime) -> Option<Slot> {
        let node = &self.nodes[n.index()];
        let quota = match class {
            TunnelClass::Short => self.cfg.short_slots(),
            TunnelClass::Long => self.cfg.long_slots(),
        };
        let mine: Vec<_> = node
            .tunnels
            .values()
            .filter(|t| t.direction == Direction::Initiated && t.class == class)
            .collect();
        if mine.len() < quota {
            let value = match class {
                TunnelClass::Short => f64::INFINITY,
                TunnelClass::Long => 0.0,
            };
            if node.initiated() < self.cfg.max_initiated {
                return Some(Slot { peer: None, value });
            }
            // The other class holds more than its share; reclaim its worst tunnel.
            let other = match class {
                TunnelClass::Short => TunnelClass::Long,
                TunnelClass::Long => TunnelClass::Short,
            };
            let surplus = node
                .tunnels
                .values()
                .filter(|t| t.direction == Direction::Initiated && t.class == other)
                .filter(|t| self.can_drop(n, t.peer, now));
            let pick = match other {
                TunnelClass::Short => surplus.max_by(|a, b| a.est_delay_ms.total_cmp(&b.est_delay_ms).then(a.peer.cmp(&b.peer))),
                TunnelClass::Long => surplus.min_by(|a, b| a.est_bw_bps.total_cmp(&b.est_bw_bps).then(b.peer.cmp(&a.peer))),
            }?;
            return Some(Slot { peer: Some(pick.peer), value });
        }
        let droppable = mine.into_iter().filter(|t| self.can_drop(n, t.peer, now));
        let pick = match class {
            TunnelClass::Short => droppable.max_by(|a, b| a.est_delay_ms.total_cmp(&b.est_delay_ms).then(a.peer.cmp(&b.peer))),
            TunnelClass::Long => droppable.min_by(|a, b| a.est_bw_bps.total_cmp(&b.est_bw_bps).then(b.peer.cmp(&a.peer))),
        }?;
        let value = match class {
            TunnelClass::Short => pick.est_delay_ms,
            TunnelClass::Long => pick.est_bw_bps,
        };
        Some(Slot { peer: Some(pick.peer), value })
    }

    /// Swaps `slot` for a tunnel to `cand`. Refusal by the candidate leaves
    /// everything untouched.
    fn replace(&mut self, n: NodeId, slot: Slot, cand: NodeId, now: SimTime, rng: &mut impl Rng) -> Option<(TunnelId, Option<TunnelId>)> {
        if !self.reachable(n, cand) || self.nodes[cand.index()].accepted() >= self.cfg.max_accepted {
            return None;
        }
        let dropped = match slot.peer {
            Some(peer) => Some(self.drop_tunnel(n, peer, now)?.0),
            None => None,
        };
        match self.try_accept(n, cand, now, rng) {
            Ok(id) => Some((id, dropped)),
            Err(_) => None,
        }
    }

    /// One optimizer round at `n`: probe random candidates and replace at
    /// most one short and one long initiated tunnel.
    pub fn optimizer_iteration(&mut self, n: NodeId, now: SimTime, rng: &mut impl Rng) -> Vec<ReconfigEvent> {
        let mut events = Vec::new();
        if !self.nodes[n.index()].alive {
            return events;
        }
        let k = self.cfg.candidates_per_iter;
        let picked = {
            let node = &self.nodes[n.index()];
            node.membership
                .random_candidates(k, |c| !node.tunnels.contains_key(&c) && !node.is_draining_peer(c), rng)
        };
        let mut short = Vec::new();
        let mut long = Vec::new();
        for c in picked {
            if !self.reachable(n, c) {
                self.nodes[n.index()].membership.remove(c);
                continue;
            }
            self.contact_exchange(n, c, rng);
            let Some(est) = self.evaluate_potential_connection(n, c, rng) else {
                continue;
            };
            let cand = Candidate { id: c, delay: est.delay_ms, bw: est.bw_bps };
            match self.classify(est.delay_ms) {
                TunnelClass::Short => short.push(cand),
                TunnelClass::Long => long.push(cand),
            }
        }
        short.sort_by(|a, b| a.delay.total_cmp(&b.delay).then(a.id.cmp(&b.id)));
        long.sort_by(|a, b| b.bw.total_cmp(&a.bw).then(a.id.cmp(&b.id)));

        if let Some(slot) = self.worst_slot(n, TunnelClass::Short, now) {
            for c in &short {
                if !(c.delay < slot.value - self.cfg.delay_threshold) {
                    continue;
                }
                if let Some((added, dropped)) = self.replace(n, slot, c.id, now, rng) {
                    events.push(ReconfigEvent {
                        time: now,
                        node: n,
                        kind: ReconfigKind::Short,
                        added_peer: c.id,
                        added,
                        dropped_peer: slot.peer,
                        dropped,
                        old_value: slot.value,
                        new_value: c.delay,
                    });
                    break;
                }
            }
        }
        if self.cfg.single_replacement && !events.is_empty() {
            return events;
        }
        if let Some(slot) = self.worst_slot(n, TunnelClass::Long, now) {
            for c in &long {
                if self.nodes[n.index()].tunnels.contains_key(&c.id) {
                    continue;
                }
                if !(c.bw > slot.value * (1.0 + self.cfg.bw_threshold)) {
                    continue;
                }
                if let Some((added, dropped)) = self.replace(n, slot, c.id, now, rng) {
                    events.push(ReconfigEvent {
                        time: now,
                        node: n,
                        kind: ReconfigKind::Long,
                        added_peer: c.id,
                        added,
                        dropped_peer: slot.peer,
                        dropped,
                        old_value: slot.value,
                        new_value: c.bw,
                    });
                    break;
                }
            }
        }
        events
    }
}
