//! Liveness-driven dual-tier KV-block cache simulator.
//!
//! Residency decisions come from exact remaining-use counters seeded by the
//! job list: blocks above the hot threshold are pinned in the hot tier until
//! they drain, moderately reused blocks go to the cold tier (victim: smallest
//! remaining use, oldest first), single-use blocks stream through without
//! residency, and any resident block is evicted the instant its counter hits
//! zero. A bounded-lookahead prefetcher fills free space ahead of the
//! block-major schedule without ever evicting a live entry.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// (kv_head, block index).
pub type BlockKey = (usize, usize);

#[derive(Debug, Error, PartialEq)]
pub enum CacheError {
    #[error("access to block {0:?} with zero remaining use")]
    DeadAccess(BlockKey),
    #[error("consume of block {0:?} underflows its counter")]
    Underflow(BlockKey),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CacheConfig {
    /// Total cache bytes across both tiers.
    pub total_capacity: u64,
    /// Fraction of capacity given to the hot tier.
    pub hot_fraction: f64,
    /// Remaining-use threshold for hot admission (strictly greater-than).
    pub t_hot: u64,
    /// Prefetch lookahead window, in blocks.
    pub lookahead: usize,
    /// Bytes moved per block fetch (K and V together).
    pub block_bytes: u64,
    /// Disabled caches bypass everything; fetches still stream through.
    pub enabled: bool,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            total_capacity: 16 * 1024 * 1024,
            hot_fraction: 0.5,
            t_hot: 1,
            lookahead: 4,
            block_bytes: 2 * 128 * 64,
            enabled: true,
        }
    }
}

impl CacheConfig {
    pub fn hot_capacity(&self) -> u64 {
        (self.total_capacity as f64 * self.hot_fraction) as u64
    }

    pub fn cold_capacity(&self) -> u64 {
        self.total_capacity - self.hot_capacity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessOutcome {
    Hit,
    MissHot,
    MissCold,
    Bypass,
}

#[derive(Debug, Default, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub bypasses: u64,
    pub evictions: u64,
    pub prefetches: u64,
    pub bytes_fetched: u64,
    /// Bytes fetched on demand (miss/bypass), i.e. not covered by prefetch.
    pub bytes_demand: u64,
    pub hit_rate: f64,
    /// False when counters had not drained at report time.
    pub complete: bool,
}

#[derive(Debug, Clone, Copy)]
struct Resident {
    bytes: u64,
    admitted_seq: u64,
}

#[derive(Debug, Clone)]
pub struct CacheState {
    pub cfg: CacheConfig,
    hot: BTreeMap<BlockKey, Resident>,
    cold: BTreeMap<BlockKey, Resident>,
    remaining: BTreeMap<BlockKey, u64>,
    hot_used: u64,
    cold_used: u64,
    seq: u64,
    /// Blocks the prefetcher has already fetched once; never re-prefetched.
    prefetched: BTreeMap<BlockKey, ()>,
    hits: u64,
    misses: u64,
    bypasses: u64,
    evictions: u64,
    prefetches: u64,
    bytes_fetched: u64,
    bytes_demand: u64,
}

/// Seed a cache with exact remaining-use counters.
pub fn init_counters(
    cfg: CacheConfig,
    counts: impl IntoIterator<Item = (BlockKey, u64)>,
) -> CacheState {
    let mut remaining = BTreeMap::new();
    for (key, count) in counts {
        if count > 0 {
            *remaining.entry(key).or_insert(0) += count;
        }
    }
    CacheState {
        cfg,
        hot: BTreeMap::new(),
        cold: BTreeMap::new(),
        remaining,
        hot_used: 0,
        cold_used: 0,
        seq: 0,
        prefetched: BTreeMap::new(),
        hits: 0,
        misses: 0,
        bypasses: 0,
        evictions: 0,
        prefetches: 0,
        bytes_fetched: 0,
        bytes_demand: 0,
    }
}

impl CacheState {
    pub fn remaining_use(&self, key: BlockKey) -> u64 {
        self.remaining.get(&key).copied().unwrap_or(0)
    }

    pub fn is_resident(&self, key: BlockKey) -> bool {
        self.hot.contains_key(&key) || self.cold.contains_key(&key)
    }

    pub fn resident_blocks(&self) -> usize {
        self.hot.len() + self.cold.len()
    }

    fn hot_free(&self) -> u64 {
        self.cfg.hot_capacity() - self.hot_used
    }

    fn cold_free(&self) -> u64 {
        self.cfg.cold_capacity() - self.cold_used
    }

    fn admit_hot(&mut self, key: BlockKey) {
        self.seq += 1;
        self.hot.insert(
            key,
            Resident {
                bytes: self.cfg.block_bytes,
                admitted_seq: self.seq,
            },
        );
        self.hot_used += self.cfg.block_bytes;
    }

    fn admit_cold(&mut self, key: BlockKey) {
        self.seq += 1;
        self.cold.insert(
            key,
            Resident {
                bytes: self.cfg.block_bytes,
                admitted_seq: self.seq,
            },
        );
        self.cold_used += self.cfg.block_bytes;
    }

    /// Evict cold entries (smallest remaining use, oldest first) until
    /// `need` bytes are free. Returns false if the tier cannot ever fit.
    fn make_cold_room(&mut self, need: u64) -> bool {
        if need > self.cfg.cold_capacity() {
            return false;
        }
        while self.cold_free() < need {
            let victim = self
                .cold
                .iter()
                .min_by_key(|(k, r)| (self.remaining.get(k).copied().unwrap_or(0), r.admitted_seq))
                .map(|(k, _)| *k)
                .expect("cold tier non-empty when under-capacity");
            let r = self.cold.remove(&victim).unwrap();
            self.cold_used -= r.bytes;
            self.evictions += 1;
        }
        true
    }

    /// Service one block request through the cache. The caller must never
    /// request a block whose remaining use is zero.
    pub fn access(&mut self, key: BlockKey) -> Result<AccessOutcome, CacheError> {
        let remaining = self.remaining_use(key);
        if remaining == 0 {
            return Err(CacheError::DeadAccess(key));
        }
        if self.is_resident(key) {
            self.hits += 1;
            return Ok(AccessOutcome::Hit);
        }
        let bytes = self.cfg.block_bytes;
        self.bytes_fetched += bytes;
        self.bytes_demand += bytes;
        if !self.cfg.enabled {
            self.bypasses += 1;
            return Ok(AccessOutcome::Bypass);
        }
        if remaining > self.cfg.t_hot && self.hot_free() >= bytes {
            self.admit_hot(key);
            self.misses += 1;
            Ok(AccessOutcome::MissHot)
        } else if remaining >= 2 && self.make_cold_room(bytes) {
            self.admit_cold(key);
            self.misses += 1;
            Ok(AccessOutcome::MissCold)
        } else {
            self.bypasses += 1;
            Ok(AccessOutcome::Bypass)
        }
    }

    /// Decrement a block's counter; on nil, an resident copy is evicted
    /// immediately.
    pub fn consume(&mut self, key: BlockKey) -> Result<(), CacheError> {
        let counter = self
            .remaining
            .get_mut(&key)
            .ok_or(CacheError::Underflow(key))?;
        if *counter == 0 {
            return Err(CacheError::Underflow(key));
        }
        *counter -= 1;
        if *counter == 0 {
            if let Some(r) = self.hot.remove(&key) {
                self.hot_used -= r.bytes;
                self.evictions += 1;
            } else if let Some(r) = self.cold.remove(&key) {
                self.cold_used -= r.bytes;
                self.evictions += 1;
            }
        }
        Ok(())
    }

    /// Fetch ahead over the next blocks of the schedule: up to `lookahead`
    /// live, non-resident blocks are brought in, each only if its admission
    /// tier has free space (prefetch never evicts). Single-use blocks stream
    /// through at access time and are not prefetched. Returns the keys
    /// fetched this step.
    pub fn prefetch_step(&mut self, upcoming: &[BlockKey]) -> Vec<BlockKey> {
        if !self.cfg.enabled {
            return Vec::new();
        }
        let mut fetched = Vec::new();
        let mut window = 0;
        for &key in upcoming {
            if window >= self.cfg.lookahead {
                break;
            }
            let remaining = self.remaining_use(key);
            if remaining == 0 || self.is_resident(key) {
                continue; // dead blocks skipped entirely; resident need nothing
            }
            window += 1;
            if remaining == 1 {
                continue; // bypass class: residency cannot produce a hit
            }
            if self.prefetched.contains_key(&key) {
                continue; // one request per block, ever
            }
            let bytes = self.cfg.block_bytes;
            let fits_hot = remaining > self.cfg.t_hot && self.hot_free() >= bytes;
            let fits_cold = remaining <= self.cfg.t_hot && self.cold_free() >= bytes;
            if fits_hot {
                self.admit_hot(key);
            } else if fits_cold {
                self.admit_cold(key);
            } else {
                continue; // no space without evicting a live entry: retry later
            }
            self.prefetched.insert(key, ());
            self.prefetches += 1;
            self.bytes_fetched += bytes;
            fetched.push(key);
        }
        fetched
    }

    /// Snapshot of the run statistics. `complete` is false while any counter
    /// is still live.
    pub fn cache_stats(&self) -> CacheStats {
        let accesses = self.hits + self.misses + self.bypasses;
        CacheStats {
            hits: self.hits,
            misses: self.misses,
            bypasses: self.bypasses,
            evictions: self.evictions,
            prefetches: self.prefetches,
            bytes_fetched: self.bytes_fetched,
            bytes_demand: self.bytes_demand,
            hit_rate: if accesses == 0 {
                0.0
            } else {
                self.hits as f64 / accesses as f64
            },
            complete: self.remaining.values().all(|&c| c == 0),
        }
    }

    /// Invariant probe for tests: both tiers within capacity, no dead
    /// residents.
    pub fn check_invariants(&self) {
        assert!(self.hot_used <= self.cfg.hot_capacity());
        assert!(self.cold_used <= self.cfg.cold_capacity());
        for key in self.hot.keys().chain(self.cold.keys()) {
            assert!(
                self.remaining_use(*key) > 0,
                "dead block {key:?} still resident"
            );
        }
    }
}

/// Plain LRU cache over whole blocks: the reference point for the liveness
/// policy comparison.
#[derive(Debug)]
pub struct LruCache {
    capacity: u64,
    block_bytes: u64,
    used: u64,
    seq: u64,
    resident: BTreeMap<BlockKey, u64>,
    pub hits: u64,
    pub misses: u64,
}

impl LruCache {
    pub fn new(capacity: u64, block_bytes: u64) -> LruCache {
        LruCache {
            capacity,
            block_bytes,
            used: 0,
            seq: 0,
            resident: BTreeMap::new(),
            hits: 0,
            misses: 0,
        }
    }

    pub fn access(&mut self, key: BlockKey) {
        self.seq += 1;
        if let Some(stamp) = self.resident.get_mut(&key) {
            *stamp = self.seq;
            self.hits += 1;
            return;
        }
        self.misses += 1;
        if self.block_bytes > self.capacity {
            return;
        }
        while self.used + self.block_bytes > self.capacity {
            let victim = self
                .resident
                .iter()
                .min_by_key(|(_, &stamp)| stamp)
                .map(|(k, _)| *k)
                .expect("non-empty under capacity pressure");
            self.resident.remove(&victim);
            self.used -= self.block_bytes;
        }
        self.resident.insert(key, self.seq);
        self.used += self.block_bytes;
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

/// One record of the block-access trace: a visit to a KV block with the
/// number of consumers it serves.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TraceRecord {
    pub kv_head: usize,
    pub block: usize,
    pub consumers: u64,
}

/// Replay a trace through the liveness cache (no prefetch: a standalone
/// trace carries no schedule to look ahead into).
pub fn replay_liveness(cfg: CacheConfig, records: &[TraceRecord]) -> CacheStats {
    let mut counts: BTreeMap<BlockKey, u64> = BTreeMap::new();
    for r in records {
        *counts.entry((r.kv_head, r.block)).or_insert(0) += r.consumers;
    }
    let mut state = init_counters(cfg, counts);
    for r in records {
        let key = (r.kv_head, r.block);
        state.access(key).expect("trace accesses live blocks");
        for _ in 0..r.consumers {
            state.consume(key).expect("trace consumes within counts");
        }
    }
    state.cache_stats()
}

/// Replay the same trace through the LRU reference at equal capacity.
pub fn replay_lru(cfg: CacheConfig, records: &[TraceRecord]) -> f64 {
    let mut lru = LruCache::new(cfg.total_capacity, cfg.block_bytes);
    for r in records {
        lru.access((r.kv_head, r.block));
    }
    lru.hit_rate()
}
