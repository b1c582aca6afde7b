//! Partition detection from a majority of heartbeat sources.

use serde::{Deserialize, Serialize};

use crate::ids::NodeId;
use crate::time::SimTime;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConnectivityConfig {
    /// Number of heartbeat sources; 0 disables partition detection.
    pub heartbeat_sources: usize,
    /// Seconds between heartbeats.
    pub t_heartbeat: f64,
    /// Heartbeat periods without news before a source counts as unheard.
    pub miss_multiple: u32,
    /// Upper bound of the random wait before a repair, seconds.
    pub repair_jitter: f64,
}

impl Default for ConnectivityConfig {
    fn default() -> Self {
        ConnectivityConfig { heartbeat_sources: 3, t_heartbeat: 5.0, miss_multiple: 3, repair_jitter: 10.0 }
    }
}

impl ConnectivityConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.t_heartbeat > 0.0) || self.miss_multiple == 0 || self.repair_jitter < 0.0 {
            return Err("t_heartbeat and miss_multiple must be positive, repair_jitter non-negative".into());
        }
        Ok(())
    }

    pub fn period(&self) -> SimTime {
        SimTime::from_secs_f64(self.t_heartbeat)
    }

    /// Silence after which a source counts as unheard.
    pub fn window(&self) -> SimTime {
        self.period() * self.miss_multiple as u64
    }

    /// How long a heartbeat pins the tunnel it arrived on.
    pub fn pin_window(&self) -> SimTime {
        self.period() * 2
    }

    pub fn jitter(&self) -> SimTime {
        SimTime::from_secs_f64(self.repair_jitter)
    }
}

#[derive(Clone, Debug)]
pub struct HeartbeatLedger {
    sources: Vec<NodeId>,
    last_heard: Vec<SimTime>,
    window: SimTime,
}

impl HeartbeatLedger {
    /// Every source starts as freshly heard, which gives a new node one
    /// window of grace.
    pub fn new(sources: Vec<NodeId>, now: SimTime, window: SimTime) -> Self {
        let last_heard = vec![now; sources.len()];
        HeartbeatLedger { sources, last_heard, window }
    }

    pub fn sources(&self) -> &[NodeId] {
        &self.sources
    }

    pub fn heard(&mut self, src: NodeId, now: SimTime) {
        if let Some(i) = self.sources.iter().position(|&s| s == src) {
            self.last_heard[i] = self.last_heard[i].max(now);
        }
    }

    pub fn rearm(&mut self, now: SimTime) {
        for t in &mut self.last_heard {
            *t = (*t).max(now);
        }
    }

    pub fn last_heard(&self, src: NodeId) -> Option<SimTime> {
        self.sources.iter().position(|&s| s == src).map(|i| self.last_heard[i])
    }

    fn fresh(&self, i: usize, now: SimTime) -> bool {
        now.saturating_sub(self.last_heard[i]) < self.window
    }

    pub fn heard_count(&self, now: SimTime) -> usize {
        (0..self.sources.len()).filter(|&i| self.fresh(i, now)).count()
    }

    pub fn connected(&self, now: SimTime) -> bool {
        self.sources.is_empty() || 2 * self.heard_count(now) > self.sources.len()
    }

    pub fn unheard(&self, now: SimTime) -> Vec<NodeId> {
        (0..self.sources.len()).filter(|&i| !self.fresh(i, now)).map(|i| self.sources[i]).collect()
    }

    /// Earliest time at which the node stops being connected if nothing
    /// more is heard.
    pub fn deadline(&self) -> Option<SimTime> {
        if self.sources.is_empty() {
            return None;
        }
        let mut heard = self.last_heard.clone();
        heard.sort_unstable_by(|a, b| b.cmp(a));
        let need = self.sources.len() / 2 + 1;
        Some(heard[need - 1] + self.window)
    }
}

/// Doubling retry delay.
#[derive(Clone, Copy, Debug)]
pub struct Backoff {
    initial: SimTime,
    max: SimTime,
    next: SimTime,
}

impl Backoff {
    pub fn new(initial: SimTime, max: SimTime) -> Self {
        Backoff { initial, max, next: initial }
    }

    pub fn next_delay(&mut self) -> SimTime {
        let d = self.next;
        self.next = (self.next * 2).min(self.max);
        d
    }

    pub fn reset(&mut self) {
        self.next = self.initial;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger() -> HeartbeatLedger {
        HeartbeatLedger::new(vec![NodeId(0), NodeId(1), NodeId(2)], SimTime::ZERO, SimTime::from_secs(15))
    }

    #[test]
    fn all_sources_heard_means_connected() {
        let mut l = ledger();
        let now = SimTime::from_secs(20);
        for s in 0..3 {
            l.heard(NodeId(s), now);
        }
        assert!(l.connected(now));
    }

    #[test]
    fn one_silent_source_of_three_is_tolerated() {
        let mut l = ledger();
        let now = SimTime::from_secs(20);
        l.heard(NodeId(0), now);
        l.heard(NodeId(1), now);
        assert!(l.connected(now));
        assert_eq!(l.unheard(now), vec![NodeId(2)]);
    }

    #[test]
    fn silence_from_all_sources_disconnects_after_window() {
        let l = ledger();
        assert!(l.connected(SimTime::from_millis(14_999)));
        assert!(!l.connected(SimTime::from_secs(15)));
        assert_eq!(l.deadline(), Some(SimTime::from_secs(15)));
    }

    #[test]
    fn deadline_tracks_the_majority_threshold() {
        let mut l = ledger();
        l.heard(NodeId(0), SimTime::from_secs(10));
        l.heard(NodeId(1), SimTime::from_secs(4));
        // Majority of three is two: the second most recent decides.
        assert_eq!(l.deadline(), Some(SimTime::from_secs(19)));
    }

    #[test]
    fn no_sources_never_disconnects() {
        let l = HeartbeatLedger::new(Vec::new(), SimTime::ZERO, SimTime::from_secs(1));
        assert!(l.connected(SimTime::from_secs(1000)));
        assert_eq!(l.deadline(), None);
    }

    #[test]
    fn backoff_doubles_up_to_cap() {
        let mut b = Backoff::new(SimTime::from_secs(1), SimTime::from_secs(5));
        let seq: Vec<_> = (0..5).map(|_| b.next_delay().as_micros() / 1_000_000).collect();
        assert_eq!(seq, vec![1, 2, 4, 5, 5]);
        b.reset();
        assert_eq!(b.next_delay(), SimTime::from_secs(1));
    }
}
