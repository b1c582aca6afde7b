//! Delivery-rate bookkeeping under churn.
//!
//! A message sent at `T` by `s` is expected at every other receiver `r` with
//! `join(r) < T < leave(r) - T_prop`; the sender's own copy always counts.
//! Deliveries to receivers that leave within `T_prop` of the send are taken
//! back when the crash happens, so the ratio never exceeds one.

use std::collections::{HashMap, VecDeque};

use serde::Serialize;

use crate::ids::{MessageId, NodeId};
use crate::time::SimTime;

#[derive(Clone, Debug)]
pub struct DeliveryAccounting {
    t_prop: SimTime,
    from: SimTime,
    to: SimTime,
    bucket: SimTime,
    /// Generation times, in event order and therefore sorted.
    sent: Vec<(SimTime, NodeId)>,
    sent_at: HashMap<MessageId, SimTime>,
    /// Per node: join time and, once dead, leave time.
    lives: Vec<(SimTime, Option<SimTime>)>,
    recent: Vec<VecDeque<SimTime>>,
    delivered: u64,
    delivered_by_bucket: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DeliveryReport {
    pub messages: u64,
    pub expected: u64,
    pub delivered: u64,
    pub ratio: f64,
    /// `(bucket start seconds, expected, delivered)` by generation time.
    pub series: Vec<(f64, u64, u64)>,
}

impl DeliveryAccounting {
    /// Counts messages generated in `[from, to)`.
    pub fn new(t_prop: SimTime, from: SimTime, to: SimTime, bucket: SimTime) -> Self {
        DeliveryAccounting {
            t_prop,
            from,
            to,
            bucket: bucket.max(SimTime::from_micros(1)),
            sent: Vec::new(),
            sent_at: HashMap::new(),
            lives: Vec::new(),
            recent: Vec::new(),
            delivered: 0,
            delivered_by_bucket: Vec::new(),
        }
    }

    fn counted(&self, t: SimTime) -> bool {
        t >= self.from && t < self.to
    }

    fn bucket_of(&self, t: SimTime) -> usize {
        ((t - self.from).as_micros() / self.bucket.as_micros()) as usize
    }

    fn add_bucket(&mut self, t: SimTime, delta: i64) {
        let b = self.bucket_of(t);
        if self.delivered_by_bucket.len() <= b {
            self.delivered_by_bucket.resize(b + 1, 0);
        }
        self.delivered_by_bucket[b] = (self.delivered_by_bucket[b] as i64 + delta) as u64;
    }

    pub fn on_join(&mut self, n: NodeId, now: SimTime) {
        let i = n.index();
        if self.lives.len() <= i {
            self.lives.resize(i + 1, (SimTime::MAX, None));
            self.recent.resize(i + 1, VecDeque::new());
        }
        self.lives[i] = (now, None);
    }

    pub fn on_crash(&mut self, n: NodeId, now: SimTime) {
        let i = n.index();
        if i >= self.lives.len() {
            return;
        }
        self.lives[i].1 = Some(now);
        let cutoff = now.saturating_sub(self.t_prop);
        let taken: Vec<SimTime> = self.recent[i].drain(..).filter(|&t| t >= cutoff).collect();
        for t in taken {
            self.delivered -= 1;
            self.add_bucket(t, -1);
        }
    }

    pub fn on_generate(&mut self, id: MessageId, now: SimTime) {
        if !self.counted(now) {
            return;
        }
        self.sent.push((now, id.source));
        self.sent_at.insert(id, now);
    }

    pub fn on_deliver(&mut self, id: MessageId, receiver: NodeId, now: SimTime) {
        let Some(&t) = self.sent_at.get(&id) else { return };
        if receiver == id.source {
            return;
        }
        let i = receiver.index();
        let Some(&(join, None)) = self.lives.get(i) else { return };
        if join >= t {
            return;
        }
        self.delivered += 1;
        self.add_bucket(t, 1);
        let horizon = now.saturating_sub(self.t_prop);
        let q = &mut self.recent[i];
        while q.front().is_some_and(|&x| x < horizon) {
            q.pop_front();
        }
        q.push_back(t);
    }

    /// Messages sent strictly inside `(lo, hi)`.
    fn count_between(&self, lo: SimTime, hi: SimTime) -> usize {
        if hi <= lo {
            return 0;
        }
        let a = self.sent.partition_point(|&(t, _)| t <= lo);
        let b = self.sent.partition_point(|&(t, _)| t < hi);
        b.saturating_sub(a)
    }

    pub fn report(&self) -> DeliveryReport {
        let nb = if self.to > self.from { self.bucket_of(self.to - SimTime::from_micros(1)) + 1 } else { 0 };
        let mut expected_by_bucket = vec![0u64; nb];
        let mut expected = 0u64;
        for (i, &(join, leave)) in self.lives.iter().enumerate() {
            if join == SimTime::MAX {
                continue;
            }
            let hi = match leave {
                Some(l) => l.saturating_sub(self.t_prop),
                None => SimTime::MAX,
            };
            let lo_idx = self.sent.partition_point(|&(t, _)| t <= join);
            let hi_idx = self.sent.partition_point(|&(t, _)| t < hi);
            for &(t, src) in self.sent.get(lo_idx..hi_idx.max(lo_idx)).unwrap_or(&[]) {
                if src.index() != i {
                    expected += 1;
                    expected_by_bucket[self.bucket_of(t)] += 1;
                }
            }
        }
        // The sender's own copy.
        let own = self.sent.len() as u64;
        let mut own_by_bucket = vec![0u64; nb];
        for &(t, _) in &self.sent {
            own_by_bucket[self.bucket_of(t)] += 1;
        }
        let series = (0..nb)
            .map(|b| {
                let start = self.from + self.bucket * b as u64;
                let d = self.delivered_by_bucket.get(b).copied().unwrap_or(0);
                (start.as_secs_f64(), expected_by_bucket[b] + own_by_bucket[b], d + own_by_bucket[b])
            })
            .collect();
        let exp = expected + own;
        let del = self.delivered + own;
        DeliveryReport {
            messages: own,
            expected: exp,
            delivered: del,
            ratio: if exp == 0 { 1.0 } else { del as f64 / exp as f64 },
            series,
        }
    }

    /// Expected count under an arbitrary propagation allowance, for checking
    /// that the accounting is monotone in it.
    pub fn expected_with(&self, t_prop: SimTime) -> u64 {
        let mut expected = self.sent.len() as u64;
        for (i, &(join, leave)) in self.lives.iter().enumerate() {
            if join == SimTime::MAX {
                continue;
            }
            let hi = leave.map_or(SimTime::MAX, |l| l.saturating_sub(t_prop));
            let n = self.count_between(join, hi) as u64;
            let own = self
                .sent
                .iter()
                .filter(|&&(t, s)| s.index() == i && t > join && t < hi)
                .count() as u64;
            expected += n - own;
        }
        expected
    }
}
