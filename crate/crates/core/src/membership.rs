//! Epidemic partial-view membership.
//!
//! Every node keeps a bounded random subset of other participants. Whenever
//! two nodes talk (tunnel negotiation, path probing, join requests) each
//! hands the other a small random sample of its view and the contact itself
//! becomes known. Overflow evicts uniformly at random.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ids::NodeId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MembershipConfig {
    /// Cache capacity.
    pub cache_size: usize,
    /// Ids handed over per contact.
    pub exchange_size: usize,
}

impl Default for MembershipConfig {
    fn default() -> Self {
        MembershipConfig { cache_size: 100, exchange_size: 10 }
    }
}

#[derive(Clone, Debug)]
pub struct MembershipCache {
    owner: NodeId,
    capacity: usize,
    known: Vec<NodeId>,
}

impl MembershipCache {
    pub fn new(owner: NodeId, capacity: usize) -> Self {
        MembershipCache { owner, capacity, known: Vec::new() }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.known.len()
    }

    pub fn is_empty(&self) -> bool {
        self.known.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.known.contains(&id)
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.known
    }

    /// Adds `id`, evicting a random entry when full. Returns whether the view changed.
    pub fn insert(&mut self, id: NodeId, rng: &mut impl Rng) -> bool {
        if id == self.owner || self.capacity == 0 || self.contains(id) {
            return false;
        }
        if self.known.len() >= self.capacity {
            let victim = rng.random_range(0..self.known.len());
            self.known.swap_remove(victim);
        }
        self.known.push(id);
        true
    }

    pub fn remove(&mut self, id: NodeId) -> bool {
        match self.known.iter().position(|&k| k == id) {
            Some(i) => {
                self.known.swap_remove(i);
                true
            }
            None => false,
        }
    }

    pub fn flush(&mut self) {
        self.known.clear();
    }

    /// Uniform sample without replacement of `min(k, len)` ids.
    pub fn sample(&self, k: usize, rng: &mut impl Rng) -> Vec<NodeId> {
        let k = k.min(self.known.len());
        index::sample(rng, self.known.len(), k).into_iter().map(|i| self.known[i]).collect()
    }

    /// Uniform sample of up to `k` ids for which `eligible` holds.
    pub fn random_candidates(&self, k: usize, eligible: impl Fn(NodeId) -> bool, rng: &mut impl Rng) -> Vec<NodeId> {
        let pool: Vec<NodeId> = self.known.iter().copied().filter(|&id| eligible(id)).collect();
        let k = k.min(pool.len());
        index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
    }
}

/// Two-way exchange between caches `a` and `b`.
pub fn exchange_membership(a: &mut MembershipCache, b: &mut MembershipCache, subset: usize, rng: &mut impl Rng) {
    let from_a = a.sample(subset, rng);
    let from_b = b.sample(subset, rng);
    let (a_id, b_id) = (a.owner, b.owner);
    a.insert(b_id, rng);
    b.insert(a_id, rng);
    for id in from_b {
        a.insert(id, rng);
    }
    for id in from_a {
        b.insert(id, rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn empty_caches_learn_each_other() {
        let mut r = rng();
        let mut a = MembershipCache::new(NodeId(1), 100);
        let mut b = MembershipCache::new(NodeId(2), 100);
        exchange_membership(&mut a, &mut b, 10, &mut r);
        assert_eq!(a.ids(), &[NodeId(2)]);
        assert_eq!(b.ids(), &[NodeId(1)]);
    }

    #[test]
    fn receiver_gains_at_most_subset_plus_one() {
        let mut r = rng();
        let mut a = MembershipCache::new(NodeId(0), 100);
        for i in 1..=100 {
            a.insert(NodeId(i), &mut r);
        }
        let mut b = MembershipCache::new(NodeId(500), 100);
        exchange_membership(&mut a, &mut b, 10, &mut r);
        assert!(b.len() <= 11);
        assert!(b.contains(NodeId(0)));
    }

    #[test]
    fn never_holds_owner_and_respects_capacity() {
        let mut r = rng();
        let mut c = MembershipCache::new(NodeId(3), 5);
        for i in 0..50 {
            c.insert(NodeId(i), &mut r);
            assert!(c.len() <= 5);
        }
        assert!(!c.contains(NodeId(3)));
    }

    #[test]
    fn candidates_exclude_ineligible() {
        let mut r = rng();
        let mut c = MembershipCache::new(NodeId(0), 10);
        for i in 1..=3 {
            c.insert(NodeId(i), &mut r);
        }
        let neighbours = [NodeId(1), NodeId(2), NodeId(3)];
        assert!(c.random_candidates(10, |id| !neighbours.contains(&id), &mut r).is_empty());
        assert!(c.random_candidates(10, |_| true, &mut r).len() == 3);
    }

    #[test]
    fn candidate_sample_size_bounded_by_k() {
        let mut r = rng();
        let mut c = MembershipCache::new(NodeId(0), 100);
        for i in 1..=60 {
            c.insert(NodeId(i), &mut r);
        }
        assert_eq!(c.random_candidates(10, |_| true, &mut r).len(), 10);
    }

    #[test]
    fn candidate_draws_are_uniform() {
        let mut r = rng();
        let mut c = MembershipCache::new(NodeId(0), 100);
        for i in 1..=50 {
            c.insert(NodeId(i), &mut r);
        }
        let mut hits = [0u32; 51];
        for _ in 0..10_000 {
            for id in c.random_candidates(1, |_| true, &mut r) {
                hits[id.index()] += 1;
            }
        }
        let expected = 10_000.0 / 50.0;
        let chi2: f64 = hits[1..].iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
        // 99.9% quantile of chi-square with 49 degrees of freedom
        assert!(chi2 < 85.35, "chi2 {chi2}");
    }

    fn swap(caches: &mut [MembershipCache], i: usize, j: usize, r: &mut ChaCha8Rng) {
        let (lo, hi) = caches.split_at_mut(i.max(j));
        let (x, y) = (&mut lo[i.min(j)], &mut hi[0]);
        exchange_membership(x, y, 5, r);
    }

    #[test]
    fn gossip_spreads_views_over_the_population() {
        let mut r = rng();
        let n = 64u32;
        let mut caches: Vec<MembershipCache> = (0..n).map(|i| MembershipCache::new(NodeId(i), 20)).collect();
        let mut seen: Vec<std::collections::BTreeSet<NodeId>> = vec![Default::default(); n as usize];
        for i in 0..n {
            // a ring of initial contacts
            let j = (i + 1) % n;
            swap(&mut caches, i as usize, j as usize, &mut r);
        }
        for _ in 0..3000 {
            let i = r.random_range(0..n as usize);
            let Some(&j) = caches[i].sample(1, &mut r).first() else { continue };
            let j = j.index();
            swap(&mut caches, i, j, &mut r);
            for k in [i, j] {
                seen[k].extend(caches[k].ids().iter().copied());
            }
        }
        for (i, s) in seen.iter().enumerate() {
            assert!(s.len() as f64 >= 0.9 * (n - 1) as f64, "node {i} saw {}", s.len());
        }
    }
}
