//! Memory-centric result store: uid-keyed payloads held in RAM with
//! fetch-once semantics and TTL expiry.
//!
//! Generated results are short-lived and usually read exactly once, so
//! instances keep everything in memory, purge an entry on its first
//! successful fetch or when its TTL lapses, and replicate asynchronously to
//! a few peers without any consensus. A client reads by querying one
//! instance at a time and moving to the next on a miss, which tolerates an
//! instance failure or a still-propagating replica without coordination.
//! Replicas may serve a duplicate fetch if a purge hint is lost; callers
//! count duplicates rather than prevent them.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::{NodeId, Tick};

/// One stored result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredResult {
    pub payload: Vec<u8>,
    pub stored_at: Tick,
    pub ttl: Tick,
}

impl StoredResult {
    fn expired(&self, now: Tick) -> bool {
        now.saturating_sub(self.stored_at) > self.ttl
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutResult {
    Stored,
    /// Same uid, same payload: acknowledged without change.
    DuplicateIdentical,
    /// Same uid, different payload.
    Conflict,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GetResult {
    /// Payload returned; the local entry is purged (fetch-once).
    Hit(Vec<u8>),
    Miss,
}

/// One database instance: a uid-keyed in-memory map plus an online flag
/// (an offline instance answers nothing, as a crashed node would).
#[derive(Debug)]
pub struct DbInstance {
    pub id: NodeId,
    pub online: bool,
    entries: BTreeMap<u128, StoredResult>,
    default_ttl: Tick,
}

impl DbInstance {
    pub fn new(id: NodeId, default_ttl: Tick) -> Self {
        Self { id, online: true, entries: BTreeMap::new(), default_ttl }
    }

    pub fn default_ttl(&self) -> Tick {
        self.default_ttl
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores a result locally. Replication to peers is the caller's job
    /// (messages issued asynchronously after a successful put).
    pub fn put(&mut self, uid: u128, payload: Vec<u8>, now: Tick, ttl: Option<Tick>) -> PutResult {
        match self.entries.get(&uid) {
            Some(existing) if existing.payload == payload => PutResult::DuplicateIdentical,
            Some(_) => PutResult::Conflict,
            None => {
                self.entries.insert(
                    uid,
                    StoredResult { payload, stored_at: now, ttl: ttl.unwrap_or(self.default_ttl) },
                );
                PutResult::Stored
            }
        }
    }

    /// Applies a replication record, keeping the origin's store time so TTL
    /// expiry is consistent across replicas. Idempotent.
    pub fn apply_replicate(&mut self, uid: u128, payload: Vec<u8>, stored_at: Tick, ttl: Tick) {
        self.entries.entry(uid).or_insert(StoredResult { payload, stored_at, ttl });
    }

    /// Fetch-once read: a hit returns the payload and purges the local
    /// entry. An expired entry is purged and reported as a miss. Offline
    /// instances answer nothing.
    pub fn get(&mut self, uid: u128, now: Tick) -> GetResult {
        if !self.online {
            return GetResult::Miss;
        }
        match self.entries.get(&uid) {
            None => GetResult::Miss,
            Some(entry) if entry.expired(now) => {
                self.entries.remove(&uid);
                GetResult::Miss
            }
            Some(_) => {
                let entry = self.entries.remove(&uid).unwrap();
                GetResult::Hit(entry.payload)
            }
        }
    }

    /// Drops the local copy after another replica served the result. Late or
    /// lost hints merely allow a duplicate fetch.
    pub fn apply_purge_hint(&mut self, uid: u128) {
        self.entries.remove(&uid);
    }

    /// TTL sweep; run every maintenance tick so the store never holds more
    /// than the live (unexpired, unfetched) entries.
    pub fn maintain(&mut self, now: Tick) {
        self.entries.retain(|_, e| !e.expired(now));
    }
}

/// Peers that receive the replicas of a result stored at `origin`, chosen
/// round-robin among the set's `count` database instances: the next
/// `replicas - 1` instances after the origin.
pub fn replica_targets(origin: usize, count: usize, replicas: usize) -> Vec<usize> {
    assert!(origin < count);
    (1..replicas.min(count)).map(|i| (origin + i) % count).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchResult {
    Found { payload: Vec<u8>, instance: usize },
    NotFoundAfterRetries,
}

/// Client-side read: query instances in order until one answers. The caller
/// polls again later on `NotFoundAfterRetries`.
pub fn client_fetch(dbs: &mut [DbInstance], uid: u128, now: Tick) -> FetchResult {
    for (idx, db) in dbs.iter_mut().enumerate() {
        if let GetResult::Hit(payload) = db.get(uid, now) {
            return FetchResult::Found { payload, instance: idx };
        }
    }
    FetchResult::NotFoundAfterRetries
}

/// Wire form of the store's messages, as moved between instances over the
/// fabric. Fixed-width little-endian fields; see `FORMATS.md`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreMsg {
    Put { uid: u128, ttl: Tick, payload: Vec<u8> },
    Replicate { uid: u128, stored_at: Tick, ttl: Tick, payload: Vec<u8> },
    PurgeHint { uid: u128 },
    Get { uid: u128 },
}

impl StoreMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            StoreMsg::Put { uid, ttl, payload } => {
                out.push(1);
                out.extend_from_slice(&uid.to_le_bytes());
                out.extend_from_slice(&ttl.to_le_bytes());
                out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
                out.extend_from_slice(payload);
            }
            StoreMsg::Replicate { uid, stored_at, ttl, payload } => {
                out.push(2);
                out.extend_from_slice(&uid.to_le_bytes());
                out.extend_from_slice(&stored_at.to_le_bytes());
                out.extend_from_slice(&ttl.to_le_bytes());
                out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
                out.extend_from_slice(payload);
            }
            StoreMsg::PurgeHint { uid } => {
                out.push(3);
                out.extend_from_slice(&uid.to_le_bytes());
            }
            StoreMsg::Get { uid } => {
                out.push(4);
                out.extend_from_slice(&uid.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        let (&tag, rest) = bytes.split_first()?;
        let uid = u128::from_le_bytes(rest.get(0..16)?.try_into().ok()?);
        match tag {
            1 => {
                let ttl = u64::from_le_bytes(rest.get(16..24)?.try_into().ok()?);
                let len = u32::from_le_bytes(rest.get(24..28)?.try_into().ok()?) as usize;
                let payload = rest.get(28..28 + len)?.to_vec();
                Some(StoreMsg::Put { uid, ttl, payload })
            }
            2 => {
                let stored_at = u64::from_le_bytes(rest.get(16..24)?.try_into().ok()?);
                let ttl = u64::from_le_bytes(rest.get(24..32)?.try_into().ok()?);
                let len = u32::from_le_bytes(rest.get(32..36)?.try_into().ok()?) as usize;
                let payload = rest.get(36..36 + len)?.to_vec();
                Some(StoreMsg::Replicate { uid, stored_at, ttl, payload })
            }
            3 => Some(StoreMsg::PurgeHint { uid }),
            4 => Some(StoreMsg::Get { uid }),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db(id: u16) -> DbInstance {
        DbInstance::new(NodeId(id), 600)
    }

    #[test]
    fn put_then_get_returns_payload() {
        let mut d = db(1);
        assert_eq!(d.put(7, alloc::vec![1, 2], 0, None), PutResult::Stored);
        assert_eq!(d.get(7, 1), GetResult::Hit(alloc::vec![1, 2]));
    }

    #[test]
    fn replicated_copy_serves_reads() {
        let mut origin = db(1);
        let mut replica = db(2);
        origin.put(7, alloc::vec![9], 10, None);
        replica.apply_replicate(7, alloc::vec![9], 10, 600);
        assert_eq!(replica.get(7, 11), GetResult::Hit(alloc::vec![9]));
    }

    #[test]
    fn dropped_replication_misses_then_origin_hits() {
        let mut dbs = alloc::vec![db(1), db(2)];
        dbs[1].put(7, alloc::vec![4], 0, None);
        // Client queries instance 0 first (replication to it was lost),
        // then finds the result at the origin.
        assert_eq!(
            client_fetch(&mut dbs, 7, 5),
            FetchResult::Found { payload: alloc::vec![4], instance: 1 }
        );
    }

    #[test]
    fn unknown_uid_misses() {
        let mut d = db(1);
        assert_eq!(d.get(42, 0), GetResult::Miss);
    }

    #[test]
    fn expired_entry_misses_and_is_purged() {
        let mut d = db(1);
        d.put(7, alloc::vec![1], 0, Some(10));
        assert_eq!(d.get(7, 10), GetResult::Hit(alloc::vec![1]));
        let mut d = db(1);
        d.put(7, alloc::vec![1], 0, Some(10));
        assert_eq!(d.get(7, 11), GetResult::Miss);
        assert!(d.is_empty());
    }

    #[test]
    fn second_get_after_success_misses() {
        let mut d = db(1);
        d.put(7, alloc::vec![1], 0, None);
        assert_eq!(d.get(7, 1), GetResult::Hit(alloc::vec![1]));
        assert_eq!(d.get(7, 2), GetResult::Miss);
    }

    #[test]
    fn duplicate_put_is_idempotent_conflicting_put_is_flagged() {
        let mut d = db(1);
        d.put(7, alloc::vec![1], 0, None);
        assert_eq!(d.put(7, alloc::vec![1], 5, None), PutResult::DuplicateIdentical);
        assert_eq!(d.put(7, alloc::vec![2], 5, None), PutResult::Conflict);
    }

    #[test]
    fn fetch_walks_instances_in_order() {
        let mut dbs = alloc::vec![db(1), db(2), db(3)];
        dbs[1].put(7, alloc::vec![5], 0, None);
        assert_eq!(
            client_fetch(&mut dbs, 7, 1),
            FetchResult::Found { payload: alloc::vec![5], instance: 1 }
        );
        assert_eq!(client_fetch(&mut dbs, 99, 1), FetchResult::NotFoundAfterRetries);
    }

    #[test]
    fn offline_origin_is_covered_by_replica() {
        let mut dbs = alloc::vec![db(1), db(2)];
        dbs[0].put(7, alloc::vec![5], 0, None);
        dbs[1].apply_replicate(7, alloc::vec![5], 0, 600);
        dbs[0].online = false;
        assert_eq!(
            client_fetch(&mut dbs, 7, 1),
            FetchResult::Found { payload: alloc::vec![5], instance: 1 }
        );
    }

    #[test]
    fn purge_hint_drops_replica_copy() {
        let mut replica = db(2);
        replica.apply_replicate(7, alloc::vec![5], 0, 600);
        replica.apply_purge_hint(7);
        assert_eq!(replica.get(7, 1), GetResult::Miss);
    }

    #[test]
    fn maintenance_keeps_only_live_entries() {
        let mut d = db(1);
        d.put(1, alloc::vec![1], 0, Some(5));
        d.put(2, alloc::vec![2], 0, Some(50));
        d.maintain(6);
        assert_eq!(d.len(), 1);
        assert_eq!(d.get(2, 7), GetResult::Hit(alloc::vec![2]));
    }

    #[test]
    fn replica_targets_round_robin() {
        assert_eq!(replica_targets(0, 3, 2), alloc::vec![1]);
        assert_eq!(replica_targets(2, 3, 2), alloc::vec![0]);
        assert_eq!(replica_targets(1, 4, 3), alloc::vec![2, 3]);
        assert_eq!(replica_targets(0, 1, 2), alloc::vec![]);
    }

    #[test]
    fn store_messages_round_trip() {
        let msgs = alloc::vec![
            StoreMsg::Put { uid: 7, ttl: 600, payload: alloc::vec![1, 2, 3] },
            StoreMsg::Replicate { uid: 8, stored_at: 5, ttl: 600, payload: alloc::vec![] },
            StoreMsg::PurgeHint { uid: 9 },
            StoreMsg::Get { uid: 10 },
        ];
        for m in msgs {
            assert_eq!(StoreMsg::decode(&m.encode()), Some(m));
        }
        assert_eq!(StoreMsg::decode(&[]), None);
        assert_eq!(StoreMsg::decode(&[1, 0, 0]), None);
    }
}
