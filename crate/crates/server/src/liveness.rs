//! Heartbeat bookkeeping: peers that stay silent longer than the timeout
//! are reported once as lost.

use std::collections::BTreeMap;

use fvv_core::Timestamp;

pub const HEARTBEAT_INTERVAL_US: u64 = 1_000_000;
pub const PEER_TIMEOUT_US: u64 = 5_000_000;

#[derive(Debug, Clone)]
pub struct Liveness<K: Ord + Clone> {
    timeout_us: u64,
    last_seen: BTreeMap<K, Timestamp>,
}

impl<K: Ord + Clone> Default for Liveness<K> {
    fn default() -> Self {
        Self::new(PEER_TIMEOUT_US)
    }
}

impl<K: Ord + Clone> Liveness<K> {
    pub fn new(timeout_us: u64) -> Self {
        Self { timeout_us, last_seen: BTreeMap::new() }
    }

    /// Records traffic from a peer, registering it if new.
    pub fn touch(&mut self, peer: K, now: Timestamp) {
        let seen = self.last_seen.entry(peer).or_insert(now);
        *seen = (*seen).max(now);
    }

    pub fn forget(&mut self, peer: &K) {
        self.last_seen.remove(peer);
    }

    pub fn is_tracked(&self, peer: &K) -> bool {
        self.last_seen.contains_key(peer)
    }

    /// Removes and returns peers silent for more than the timeout.
    pub fn expire(&mut self, now: Timestamp) -> Vec<K> {
        let dead: Vec<K> =
            self.last_seen.iter().filter(|(_, t)| now.0.saturating_sub(t.0) > self.timeout_us).map(|(k, _)| k.clone()).collect();
        for k in &dead {
            self.last_seen.remove(k);
        }
        dead
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silent_peer_expires_after_timeout() {
        let mut l = Liveness::default();
        l.touch(3u16, Timestamp(0));
        l.touch(4u16, Timestamp(0));
        l.touch(4u16, Timestamp(4_000_000));
        assert!(l.expire(Timestamp(5_000_000)).is_empty());
        assert_eq!(l.expire(Timestamp(5_000_001)), vec![3]);
        assert!(l.expire(Timestamp(6_000_000)).is_empty());
        assert_eq!(l.expire(Timestamp(9_000_001)), vec![4]);
        assert!(!l.is_tracked(&4));
    }

    #[test]
    fn late_touch_does_not_rewind() {
        let mut l = Liveness::new(10);
        l.touch("a", Timestamp(100));
        l.touch("a", Timestamp(50));
        assert!(l.expire(Timestamp(110)).is_empty());
    }
}
