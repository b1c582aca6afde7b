//! Keyed store whose entries silently expire.

use std::collections::HashMap;
use std::hash::Hash;

use crate::time::SimTime;

#[derive(Clone, Debug)]
pub struct SoftStateStore<K, V> {
    entries: HashMap<K, (V, SimTime)>,
}

impl<K: Eq + Hash, V> Default for SoftStateStore<K, V> {
    fn default() -> Self {
        SoftStateStore { entries: HashMap::new() }
    }
}

impl<K: Eq + Hash, V> SoftStateStore<K, V> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `value` until `now + ttl` and returns the previous live value.
    pub fn put(&mut self, key: K, value: V, now: SimTime, ttl: SimTime) -> Option<V> {
        let expiry = now.saturating_add(ttl);
        match self.entries.insert(key, (value, expiry)) {
            Some((old, old_expiry)) if old_expiry > now => Some(old),
            _ => None,
        }
    }

    pub fn get(&self, key: &K, now: SimTime) -> Option<&V> {
        match self.entries.get(key) {
            Some((v, expiry)) if *expiry > now => Some(v),
            _ => None,
        }
    }

    pub fn contains(&self, key: &K, now: SimTime) -> bool {
        self.get(key, now).is_some()
    }

    pub fn remove(&mut self, key: &K) -> Option<V> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&K, &V) -> bool) {
        self.entries.retain(|k, (v, _)| keep(k, v));
    }

    /// Drops expired entries; returns how many were removed.
    pub fn sweep(&mut self, now: SimTime) -> usize {
        let before = self.entries.len();
        self.entries.retain(|_, (_, expiry)| *expiry > now);
        before - self.entries.len()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Entries still stored, including expired ones not yet swept.
    pub fn stored(&self) -> usize {
        self.entries.len()
    }

    pub fn live(&self, now: SimTime) -> usize {
        self.entries.values().filter(|(_, e)| *e > now).count()
    }

    pub fn live_keys(&self, now: SimTime) -> impl Iterator<Item = &K> {
        self.entries.iter().filter(move |(_, (_, e))| *e > now).map(|(k, _)| k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(v: u64) -> SimTime {
        SimTime::from_millis(v)
    }

    #[test]
    fn put_returns_previous_live_value() {
        let mut s = SoftStateStore::new();
        assert_eq!(s.put("a", 1, ms(0), ms(10)), None);
        assert_eq!(s.put("a", 2, ms(5), ms(10)), Some(1));
        // expired previous value counts as absent
        assert_eq!(s.put("a", 3, ms(20), ms(10)), None);
    }

    #[test]
    fn lookup_after_expiry_is_absent() {
        let mut s = SoftStateStore::new();
        s.put(1u32, (), ms(0), ms(500));
        assert!(s.contains(&1, ms(499)));
        assert!(!s.contains(&1, ms(500)));
    }

    #[test]
    fn sweep_purges_expired() {
        let mut s = SoftStateStore::new();
        s.put(1u32, (), ms(0), ms(500));
        s.put(2u32, (), ms(0), ms(900));
        assert_eq!(s.sweep(ms(501)), 1);
        assert_eq!(s.stored(), 1);
        assert!(s.contains(&2, ms(501)));
    }

    proptest::proptest! {
        #[test]
        fn matches_a_naive_model(ops in proptest::collection::vec((0u8..4, 0u64..50, 1u64..40), 1..200)) {
            let mut s = SoftStateStore::new();
            let mut model: Vec<(u8, u64, SimTime)> = Vec::new();
            let mut now = SimTime::ZERO;
            for (i, (key, step, ttl)) in ops.into_iter().enumerate() {
                now = now + ms(step);
                let alive = |m: &Vec<(u8, u64, SimTime)>, now| m.iter().rev().find(|e| e.0 == key).filter(|e| e.2 > now).map(|e| e.1);
                if i % 3 == 2 {
                    proptest::prop_assert_eq!(s.get(&key, now).copied(), alive(&model, now));
                } else {
                    let prev = s.put(key, i as u64, now, ms(ttl));
                    proptest::prop_assert_eq!(prev, alive(&model, now));
                    model.push((key, i as u64, now + ms(ttl)));
                }
                let live = (0u8..4).filter(|k| model.iter().rev().find(|e| e.0 == *k).is_some_and(|e| e.2 > now)).count();
                proptest::prop_assert_eq!(s.live(now), live);
            }
        }
    }
}
