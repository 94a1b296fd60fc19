//! Block-major sparse attention execution.
//!
//! The per-head index sets are inverted into a job list keyed by
//! (kv_head, block); execution then walks KV blocks in ascending order,
//! running every consumer's score/softmax/value step while the block is
//! resident, with partial results folded into keyed accumulators via the
//! online-softmax merge. A query block finalizes the moment its last KV
//! block has been applied.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixed::{exp_q16, fx_from_f64, fx_mul, FxRecip, FX_NEG_INF};
use crate::index_gen::{score_tile, BlockIndexSet};
use crate::kv_cache::{BlockKey, CacheError, CacheState, TraceRecord};
use crate::mpu::{CostTally, MpuConfig, MpuError};
use crate::quant::{FxMat, QTensor};

#[derive(Debug, Error, PartialEq)]
pub enum AttnError {
    #[error("head {head} query block {q_block} selects out-of-range or non-causal key block {k_block}")]
    BadIndex {
        head: usize,
        q_block: usize,
        k_block: usize,
    },
    #[error("gqa map length {0} does not cover head {1}")]
    BadGqaMap(usize, usize),
    #[error("merge of states keyed ({0}, {1}) and ({2}, {3})")]
    KeyMismatch(usize, usize, usize, usize),
    #[error("missing block {0} for kv head {1}")]
    MissingBlock(usize, usize),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Mpu(#[from] MpuError),
}

/// Inverted index: for every (kv_head, KV block), the (query head, query
/// block) pairs that consume it, in ascending (head, q_block) order, stored
/// flat behind a prefix-sum offset table.
#[derive(Debug, Clone, PartialEq)]
pub struct JobList {
    pub num_kv_heads: usize,
    pub num_blocks: usize,
    offsets: Vec<usize>,
    consumers: Vec<(u32, u32)>,
}

impl JobList {
    #[inline]
    fn bucket(&self, kv_head: usize, block: usize) -> usize {
        block * self.num_kv_heads + kv_head
    }

    pub fn consumers(&self, kv_head: usize, block: usize) -> &[(u32, u32)] {
        let b = self.bucket(kv_head, block);
        &self.consumers[self.offsets[b]..self.offsets[b + 1]]
    }

    pub fn use_count(&self, kv_head: usize, block: usize) -> u64 {
        self.consumers(kv_head, block).len() as u64
    }

    pub fn total_jobs(&self) -> usize {
        self.consumers.len()
    }

    /// (key, use count) pairs for live blocks, for counter initialization.
    pub fn use_counts(&self) -> Vec<(BlockKey, u64)> {
        let mut out = Vec::new();
        for block in 0..self.num_blocks {
            for kv in 0..self.num_kv_heads {
                let n = self.use_count(kv, block);
                if n > 0 {
                    out.push(((kv, block), n));
                }
            }
        }
        out
    }

    /// The visit schedule: blocks ascending, kv heads ascending within one.
    pub fn schedule(&self) -> Vec<BlockKey> {
        let mut out = Vec::new();
        for block in 0..self.num_blocks {
            for kv in 0..self.num_kv_heads {
                if self.use_count(kv, block) > 0 {
                    out.push((kv, block));
                }
            }
        }
        out
    }
}

/// Single-pass bucketization of the per-head index sets into a job list.
/// `gqa_map[h]` is the kv head serving query head `h`.
pub fn build_job_list(
    index_sets: &[BlockIndexSet],
    gqa_map: &[usize],
    num_kv_heads: usize,
    num_blocks: usize,
) -> Result<JobList, AttnError> {
    let mut counts = vec![0usize; num_kv_heads * num_blocks + 1];
    for set in index_sets {
        if set.head >= gqa_map.len() {
            return Err(AttnError::BadGqaMap(gqa_map.len(), set.head));
        }
        let kv = gqa_map[set.head];
        for (q_b, blocks) in set.blocks.iter().enumerate() {
            for &b in blocks {
                if b > q_b || b >= num_blocks {
                    return Err(AttnError::BadIndex {
                        head: set.head,
                        q_block: q_b,
                        k_block: b,
                    });
                }
                counts[b * num_kv_heads + kv + 1] += 1;
            }
        }
    }
    for i in 1..counts.len() {
        counts[i] += counts[i - 1];
    }
    let offsets = counts;
    let mut cursor = offsets.clone();
    let mut consumers = vec![(0u32, 0u32); *offsets.last().unwrap()];
    // Heads ascending, then query blocks ascending: the scatter order leaves
    // every bucket sorted by (head, q_block).
    for set in index_sets {
        let kv = gqa_map[set.head];
        for (q_b, blocks) in set.blocks.iter().enumerate() {
            for &b in blocks {
                let slot = &mut cursor[b * num_kv_heads + kv];
                consumers[*slot] = (set.head as u32, q_b as u32);
                *slot += 1;
            }
        }
    }
    Ok(JobList {
        num_kv_heads,
        num_blocks,
        offsets,
        consumers,
    })
}

/// Running softmax state of one (head, query block): per-row maximum and
/// denominator plus the value accumulator in units of V's integer grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineSoftmaxState {
    pub head: usize,
    pub q_block: usize,
    /// Per-row running maximum (Q16.16 score units), `FX_NEG_INF` when empty.
    pub m: Vec<i64>,
    /// Per-row running denominator (Q16.16).
    pub l: Vec<i64>,
    /// B x d accumulator (Q16.16, V-integer units), row-major.
    pub acc: Vec<i64>,
}

impl OnlineSoftmaxState {
    pub fn empty(head: usize, q_block: usize, rows: usize, d: usize) -> OnlineSoftmaxState {
        OnlineSoftmaxState {
            head,
            q_block,
            m: vec![FX_NEG_INF; rows],
            l: vec![0; rows],
            acc: vec![0; rows * d],
        }
    }

    /// State of a single KV block: local row maxima, local denominators,
    /// and the exp-weighted value products.
    pub fn from_block(
        head: usize,
        q_block: usize,
        tile: &[i64],
        v_block: &QTensor,
    ) -> OnlineSoftmaxState {
        let cols = v_block.rows;
        let d = v_block.cols;
        let rows = tile.len() / cols;
        let mut state = OnlineSoftmaxState::empty(head, q_block, rows, d);
        for i in 0..rows {
            let row = &tile[i * cols..(i + 1) * cols];
            let mut m = FX_NEG_INF;
            for &s in row {
                if s != FX_NEG_INF && s > m {
                    m = s;
                }
            }
            if m == FX_NEG_INF {
                continue;
            }
            state.m[i] = m;
            let acc_row = &mut state.acc[i * d..(i + 1) * d];
            let mut l = 0i64;
            for (j, &s) in row.iter().enumerate() {
                if s == FX_NEG_INF {
                    continue;
                }
                let e = exp_q16(s - m);
                l += e;
                if e != 0 {
                    let v_row = v_block.row(j);
                    for (a, &v) in acc_row.iter_mut().zip(v_row) {
                        *a += e * v as i64; // Q16.16 * integer stays Q16.16
                    }
                }
            }
            state.l[i] = l;
        }
        state
    }
}

/// Commutative, associative merge of two online-softmax states over the same
/// key. Both sides rescale toward the common maximum, so `merge(a, b)` and
/// `merge(b, a)` are bitwise identical.
pub fn online_merge(
    a: &OnlineSoftmaxState,
    b: &OnlineSoftmaxState,
) -> Result<OnlineSoftmaxState, AttnError> {
    if a.head != b.head || a.q_block != b.q_block {
        return Err(AttnError::KeyMismatch(a.head, a.q_block, b.head, b.q_block));
    }
    debug_assert_eq!(a.m.len(), b.m.len());
    let rows = a.m.len();
    let d = a.acc.len() / rows;
    let mut out = OnlineSoftmaxState::empty(a.head, a.q_block, rows, d);
    for i in 0..rows {
        let m = a.m[i].max(b.m[i]);
        if m == FX_NEG_INF {
            continue;
        }
        out.m[i] = m;
        let ca = if a.m[i] == FX_NEG_INF { 0 } else { exp_q16(a.m[i] - m) };
        let cb = if b.m[i] == FX_NEG_INF { 0 } else { exp_q16(b.m[i] - m) };
        out.l[i] = fx_mul(a.l[i], ca) + fx_mul(b.l[i], cb);
        let (oa, ob, oo) = (
            &a.acc[i * d..(i + 1) * d],
            &b.acc[i * d..(i + 1) * d],
            &mut out.acc[i * d..(i + 1) * d],
        );
        for ((&xa, &xb), o) in oa.iter().zip(ob).zip(oo) {
            *o = fx_mul(xa, ca) + fx_mul(xb, cb);
        }
    }
    Ok(out)
}

/// Divide the accumulator rows by their denominators: one reciprocal per row.
/// Outputs are Q16.16 in V-integer units.
pub fn finalize_state(state: &OnlineSoftmaxState, d: usize) -> FxMat {
    let rows = state.m.len();
    let mut out = FxMat::zeros(rows, d);
    for i in 0..rows {
        if state.l[i] <= 0 {
            continue;
        }
        let recip = FxRecip::new(state.l[i]);
        let acc_row = &state.acc[i * d..(i + 1) * d];
        for (o, &a) in out.row_mut(i).iter_mut().zip(acc_row) {
            *o = recip.mul(a).clamp(i32::MIN as i64, i32::MAX as i64) as i32;
        }
    }
    out
}

/// Attention output for one head: finalized query-block tiles in real-value
/// Q16.16 units, plus completion bookkeeping.
#[derive(Debug, Clone)]
pub struct AttnOutput {
    /// Per head: S_pad x d matrix in real units.
    pub per_head: Vec<FxMat>,
    /// Total finalizations (must equal heads x query blocks).
    pub finalized: usize,
}

#[derive(Debug, Clone)]
pub struct SparseAttnRun {
    pub output: AttnOutput,
    pub trace: Vec<TraceRecord>,
    pub cache_stats: crate::kv_cache::CacheStats,
}

/// Keyed accumulator store: states live in `q_block % num_banks` banks at
/// deterministic slots, standing in for the banked on-chip accumulator.
struct AccumulatorBanks {
    num_banks: usize,
    q_blocks: usize,
    banks: Vec<Vec<Option<OnlineSoftmaxState>>>,
}

impl AccumulatorBanks {
    fn new(num_banks: usize, heads: usize, q_blocks: usize) -> AccumulatorBanks {
        let slots_per_bank = heads * q_blocks.div_ceil(num_banks);
        AccumulatorBanks {
            num_banks,
            q_blocks,
            banks: vec![vec![None; slots_per_bank]; num_banks],
        }
    }

    fn slot(&self, head: usize, q_block: usize) -> (usize, usize) {
        let bank = q_block % self.num_banks;
        let within = q_block / self.num_banks;
        (bank, head * self.q_blocks.div_ceil(self.num_banks) + within)
    }

    fn take(&mut self, head: usize, q_block: usize) -> Option<OnlineSoftmaxState> {
        let (b, s) = self.slot(head, q_block);
        self.banks[b][s].take()
    }

    fn put(&mut self, head: usize, q_block: usize, state: OnlineSoftmaxState) {
        let (b, s) = self.slot(head, q_block);
        self.banks[b][s] = Some(state);
    }
}

/// Per-head quantized block stores for one layer's Q, K, V.
pub struct BlockStores<'a> {
    /// `q[h][q_b]`: B x d query block of head h.
    pub q: &'a [Vec<QTensor>],
    /// `k[kv][b]`, `v[kv][b]`: key/value blocks of kv head kv.
    pub k: &'a [Vec<QTensor>],
    pub v: &'a [Vec<QTensor>],
}

/// Execute sparse attention block-major through the cache. Returns per-head
/// outputs (real units), the block-access trace, and final cache statistics.
#[allow(clippy::too_many_arguments)]
pub fn run_sparse_attention(
    stores: &BlockStores,
    jobs: &JobList,
    cache: &mut CacheState,
    block_size: usize,
    num_banks: usize,
    mpu: &MpuConfig,
    tally: &mut CostTally,
) -> Result<SparseAttnRun, AttnError> {
    let heads = stores.q.len();
    let q_blocks = jobs.num_blocks;
    let d = stores.k[0][0].cols;
    let v_scale = stores.v[0][0].scale;

    // How many KV blocks each (head, q_block) still needs.
    let mut blocks_left = vec![0usize; heads * q_blocks];
    for block in 0..q_blocks {
        for kv in 0..jobs.num_kv_heads {
            for &(h, q_b) in jobs.consumers(kv, block) {
                blocks_left[h as usize * q_blocks + q_b as usize] += 1;
            }
        }
    }

    let mut banks = AccumulatorBanks::new(num_banks.max(1), heads, q_blocks);
    let mut finals: Vec<Option<FxMat>> = vec![None; heads * q_blocks];
    let mut finalized = 0usize;
    let mut trace = Vec::new();

    let schedule = jobs.schedule();
    // The prefetch FSM starts alongside job construction, one step ahead of
    // the first visit.
    cache.prefetch_step(&schedule);
    for (pos, &(kv, block)) in schedule.iter().enumerate() {
        let k_block = stores.k[kv]
            .get(block)
            .ok_or(AttnError::MissingBlock(block, kv))?;
        let v_block = stores.v[kv]
            .get(block)
            .ok_or(AttnError::MissingBlock(block, kv))?;
        let consumers = jobs.consumers(kv, block);
        cache.access((kv, block))?;
        trace.push(TraceRecord {
            kv_head: kv,
            block,
            consumers: consumers.len() as u64,
        });
        for &(h, q_b) in consumers {
            let (h, q_b) = (h as usize, q_b as usize);
            let tile = score_tile(
                &stores.q[h][q_b],
                k_block,
                q_b * block_size,
                block * block_size,
                usize::MAX,
                false,
                mpu,
                tally,
            )?;
            let block_state = OnlineSoftmaxState::from_block(h, q_b, &tile, v_block);
            let prev = banks
                .take(h, q_b)
                .unwrap_or_else(|| OnlineSoftmaxState::empty(h, q_b, block_size, d));
            let merged = online_merge(&prev, &block_state)?;
            cache.consume((kv, block))?;
            let left = &mut blocks_left[h * q_blocks + q_b];
            *left -= 1;
            if *left == 0 {
                debug_assert!(finals[h * q_blocks + q_b].is_none(), "double finalize");
                finals[h * q_blocks + q_b] = Some(finalize_state(&merged, d));
                finalized += 1;
            } else {
                banks.put(h, q_b, merged);
            }
        }
        cache.prefetch_step(&schedule[pos + 1..]);
    }

    // Assemble per-head outputs in real units.
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut mat = FxMat::zeros(q_blocks * block_size, d);
        for q_b in 0..q_blocks {
            if let Some(tile) = &finals[h * q_blocks + q_b] {
                for r in 0..block_size {
                    let dst = mat.row_mut(q_b * block_size + r);
                    for (c, dv) in dst.iter_mut().enumerate() {
                        let vint = tile.get(r, c) as i64;
                        *dv = fx_from_f64(crate::fixed::fx_to_f64(vint) * v_scale)
                            .clamp(i32::MIN as i64, i32::MAX as i64)
                            as i32;
                    }
                }
            }
        }
        per_head.push(mat);
    }

    Ok(SparseAttnRun {
        output: AttnOutput {
            per_head,
            finalized,
        },
        trace,
        cache_stats: cache.cache_stats(),
    })
}

/// Query-major dense fixed-point reference: every query block folds its full
/// causal KV range in ascending order with the same per-block arithmetic,
/// without job lists or a cache. Bit-identical to the block-major path when
/// that path runs with full causal index sets.
pub fn dense_reference_attention(
    stores: &BlockStores,
    gqa_map: &[usize],
    num_blocks: usize,
    block_size: usize,
    mpu: &MpuConfig,
    tally: &mut CostTally,
) -> Result<Vec<FxMat>, AttnError> {
    let d = stores.k[0][0].cols;
    let v_scale = stores.v[0][0].scale;
    let mut per_head = Vec::with_capacity(stores.q.len());
    for (h, q_head) in stores.q.iter().enumerate() {
        let kv = gqa_map[h];
        let mut mat = FxMat::zeros(num_blocks * block_size, d);
        for q_b in 0..num_blocks {
            let mut state = OnlineSoftmaxState::empty(h, q_b, block_size, d);
            for b in 0..=q_b {
                let tile = score_tile(
                    &q_head[q_b],
                    &stores.k[kv][b],
                    q_b * block_size,
                    b * block_size,
                    usize::MAX,
                    false,
                    mpu,
                    tally,
                )?;
                let bs = OnlineSoftmaxState::from_block(h, q_b, &tile, &stores.v[kv][b]);
                state = online_merge(&state, &bs)?;
            }
            let tile = finalize_state(&state, d);
            for r in 0..block_size {
                let dst = mat.row_mut(q_b * block_size + r);
                for (c, dv) in dst.iter_mut().enumerate() {
                    let vint = tile.get(r, c) as i64;
                    *dv = fx_from_f64(crate::fixed::fx_to_f64(vint) * v_scale)
                        .clamp(i32::MIN as i64, i32::MAX as i64) as i32;
                }
            }
        }
        per_head.push(mat);
    }
    Ok(per_head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index_gen::Pattern;
    use crate::kv_cache::{init_counters, CacheConfig};

    fn set(head: usize, blocks: Vec<Vec<usize>>) -> BlockIndexSet {
        BlockIndexSet {
            head,
            pattern: Pattern::VerticalSlash,
            blocks,
        }
    }

    #[test]
    fn job_list_distinct_kv_heads() {
        let sets = vec![
            set(0, vec![vec![0], vec![0, 1], vec![0, 2]]),
            set(1, vec![vec![0], vec![1], vec![1, 2]]),
        ];
        let jobs = build_job_list(&sets, &[0, 1], 2, 3).unwrap();
        assert_eq!(jobs.use_count(0, 0), 3);
        assert_eq!(jobs.use_count(0, 2), 1);
        assert_eq!(jobs.use_count(1, 1), 2);
        assert_eq!(jobs.use_count(1, 2), 1);
        assert_eq!(jobs.total_jobs(), 9);
    }

    #[test]
    fn job_list_gqa_merge() {
        let sets = vec![
            set(0, vec![vec![0], vec![0, 1], vec![0, 2]]),
            set(1, vec![vec![0], vec![0, 1], vec![1, 2]]),
        ];
        let jobs = build_job_list(&sets, &[0, 0], 1, 3).unwrap();
        assert_eq!(jobs.use_count(0, 2), 2);
        assert_eq!(
            jobs.consumers(0, 0),
            &[(0, 0), (0, 1), (0, 2), (1, 0), (1, 1)]
        );
        let total: u64 = (0..3).map(|b| jobs.use_count(0, b)).sum();
        assert_eq!(total as usize, jobs.total_jobs());
    }

    #[test]
    fn job_list_rejects_non_causal() {
        let sets = vec![set(0, vec![vec![1]])];
        let err = build_job_list(&sets, &[0], 1, 4).unwrap_err();
        assert_eq!(
            err,
            AttnError::BadIndex {
                head: 0,
                q_block: 0,
                k_block: 1
            }
        );
    }

    fn rng_tensor(rows: usize, cols: usize, seed: u64, scale: f64) -> QTensor {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        let data = (0..rows * cols)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as i32 % 255 - 127) as i8
            })
            .collect();
        QTensor::from_parts(rows, cols, data, scale)
    }

    fn fx_tile(vals: &[f64], cols: usize) -> Vec<i64> {
        assert_eq!(vals.len() % cols, 0);
        vals.iter().map(|&v| fx_from_f64(v)).collect()
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let v = rng_tensor(4, 3, 9, 0.5);
        let tile = fx_tile(&[0.5, -0.25, 1.0, 0.0, 2.0, -1.0, 0.25, 0.125], 4);
        let state = OnlineSoftmaxState::from_block(0, 0, &tile, &v);
        let empty = OnlineSoftmaxState::empty(0, 0, 2, 3);
        let merged = online_merge(&empty, &state).unwrap();
        assert_eq!(merged, state);
        let merged2 = online_merge(&state, &empty).unwrap();
        assert_eq!(merged2, state);
    }

    #[test]
    fn merge_commutes_bitwise() {
        let v1 = rng_tensor(4, 3, 1, 0.5);
        let v2 = rng_tensor(4, 3, 2, 0.5);
        for seed in 0..50u64 {
            let mut s = seedystate(seed);
            let t1: Vec<i64> = (0..8).map(|_| next_fx(&mut s)).collect();
            let t2: Vec<i64> = (0..8).map(|_| next_fx(&mut s)).collect();
            let a = OnlineSoftmaxState::from_block(0, 3, &t1, &v1);
            let b = OnlineSoftmaxState::from_block(0, 3, &t2, &v2);
            let ab = online_merge(&a, &b).unwrap();
            let ba = online_merge(&b, &a).unwrap();
            assert_eq!(ab, ba, "seed {seed}");
        }
    }

    fn seedystate(seed: u64) -> u64 {
        seed.wrapping_mul(0x9e3779b97f4a7c15) | 1
    }

    fn next_fx(state: &mut u64) -> i64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
        ((*state >> 40) as i64 % (8 << 16)) - (4 << 16)
    }

    #[test]
    fn merge_key_mismatch_rejected() {
        let a = OnlineSoftmaxState::empty(0, 0, 2, 2);
        let b = OnlineSoftmaxState::empty(0, 1, 2, 2);
        assert!(matches!(
            online_merge(&a, &b),
            Err(AttnError::KeyMismatch(0, 0, 0, 1))
        ));
    }

    fn build_stores(
        heads: usize,
        kv_heads: usize,
        num_blocks: usize,
        b: usize,
        d: usize,
        seed: u64,
    ) -> (Vec<Vec<QTensor>>, Vec<Vec<QTensor>>, Vec<Vec<QTensor>>) {
        let q: Vec<Vec<QTensor>> = (0..heads)
            .map(|h| {
                (0..num_blocks)
                    .map(|qb| rng_tensor(b, d, seed + (h * 31 + qb) as u64, 0.02))
                    .collect()
            })
            .collect();
        let k: Vec<Vec<QTensor>> = (0..kv_heads)
            .map(|kv| {
                (0..num_blocks)
                    .map(|blk| rng_tensor(b, d, seed + 1000 + (kv * 97 + blk) as u64, 0.02))
                    .collect()
            })
            .collect();
        let v: Vec<Vec<QTensor>> = (0..kv_heads)
            .map(|kv| {
                (0..num_blocks)
                    .map(|blk| rng_tensor(b, d, seed + 2000 + (kv * 89 + blk) as u64, 0.03))
                    .collect()
            })
            .collect();
        (q, k, v)
    }

    fn full_causal_sets(heads: usize, num_blocks: usize) -> Vec<BlockIndexSet> {
        (0..heads)
            .map(|h| {
                set(
                    h,
                    (0..num_blocks).map(|qb| (0..=qb).collect()).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn single_block_matches_plain_softmax() {
        let b = 8;
        let d = 4;
        let (q, k, v) = build_stores(1, 1, 1, b, d, 42);
        let sets = full_causal_sets(1, 1);
        let jobs = build_job_list(&sets, &[0], 1, 1).unwrap();
        let cfg = CacheConfig {
            block_bytes: (2 * b * d) as u64,
            ..Default::default()
        };
        let mut cache = init_counters(cfg, jobs.use_counts());
        let stores = BlockStores {
            q: &q,
            k: &k,
            v: &v,
        };
        let mut tally = CostTally::default();
        let run = run_sparse_attention(
            &stores,
            &jobs,
            &mut cache,
            b,
            8,
            &MpuConfig::default(),
            &mut tally,
        )
        .unwrap();
        // f64 oracle: causal softmax(QK^T/sqrt(d)) V on dequantized inputs
        let qd = q[0][0].dequantize();
        let kd = k[0][0].dequantize();
        let vd = v[0][0].dequantize();
        let out = run.output.per_head[0].to_f64();
        let mut max_ref = 0.0f64;
        let mut max_err = 0.0f64;
        for i in 0..b {
            let mut scores = vec![f64::NEG_INFINITY; b];
            for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                *s = (0..d).map(|t| qd[i * d + t] * kd[j * d + t]).sum::<f64>()
                    / (d as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for c in 0..d {
                let want: f64 = (0..b).map(|j| exps[j] / denom * vd[j * d + c]).sum();
                max_ref = max_ref.max(want.abs());
                max_err = max_err.max((out[i * d + c] - want).abs());
            }
        }
        assert!(
            max_err <= max_ref.max(1e-9) * 2f64.powi(-6),
            "err {max_err} vs ref {max_ref}"
        );
        assert_eq!(run.output.finalized, 1);
        assert!(run.cache_stats.complete);
    }

    #[test]
    fn block_major_equals_dense_reference_on_full_sets() {
        let b = 8;
        let d = 4;
        let nb = 5;
        let heads = 3;
        let gqa = vec![0usize, 0, 1];
        let (q, k, v) = build_stores(heads, 2, nb, b, d, 7);
        let sets = full_causal_sets(heads, nb);
        let jobs = build_job_list(&sets, &gqa, 2, nb).unwrap();
        let cfg = CacheConfig {
            block_bytes: (2 * b * d) as u64,
            ..Default::default()
        };
        let mut cache = init_counters(cfg, jobs.use_counts());
        let stores = BlockStores {
            q: &q,
            k: &k,
            v: &v,
        };
        let mut t1 = CostTally::default();
        let mut t2 = CostTally::default();
        let run = run_sparse_attention(
            &stores,
            &jobs,
            &mut cache,
            b,
            8,
            &MpuConfig::default(),
            &mut t1,
        )
        .unwrap();
        let dense =
            dense_reference_attention(&stores, &gqa, nb, b, &MpuConfig::default(), &mut t2)
                .unwrap();
        for h in 0..heads {
            assert_eq!(run.output.per_head[h], dense[h], "head {h}");
        }
        assert_eq!(run.output.finalized, heads * nb);
    }

    #[test]
    fn completion_counts_match_job_totals() {
        let b = 8;
        let d = 4;
        let nb = 4;
        let (q, k, v) = build_stores(2, 1, nb, b, d, 11);
        let sets = vec![
            set(0, vec![vec![0], vec![1], vec![0, 2], vec![0, 3]]),
            set(1, vec![vec![0], vec![0, 1], vec![2], vec![1, 3]]),
        ];
        let jobs = build_job_list(&sets, &[0, 0], 1, nb).unwrap();
        let total_use: u64 = jobs.use_counts().iter().map(|&(_, c)| c).sum();
        assert_eq!(total_use as usize, jobs.total_jobs());
        let cfg = CacheConfig {
            block_bytes: (2 * b * d) as u64,
            ..Default::default()
        };
        let mut cache = init_counters(cfg, jobs.use_counts());
        let stores = BlockStores {
            q: &q,
            k: &k,
            v: &v,
        };
        let mut tally = CostTally::default();
        let run = run_sparse_attention(
            &stores,
            &jobs,
            &mut cache,
            b,
            8,
            &MpuConfig::default(),
            &mut tally,
        )
        .unwrap();
        assert_eq!(run.output.finalized, 2 * nb);
        assert!(run.cache_stats.complete);
        cache.check_invariants();
        // trace mirrors the schedule
        let visits: u64 = run.trace.iter().map(|r| r.consumers).sum();
        assert_eq!(visits, total_use);
    }
}
