//! Per-head sparse index generation.
//!
//! A single streaming pass over the key blocks (each block fetched exactly
//! once, in ascending order) accumulates compact per-block statistics — the
//! pooled attention masses, the estimated pooled-Q/pooled-K scores, and the
//! per-block pooled key rows — then a divergence gate picks between the
//! vertical-slash and query-aware selection paths. Nothing proportional to
//! `B x S` is ever materialized; per-block exponential sums carry their local
//! maximum and are rescaled against the global maximum at the end of the
//! stream.
//!
//! At block granularity the vertical score of key block `b` is exactly the
//! pooled attention mass of that block, and the slash score at diagonal
//! offset `o` is the mass of block `last - o`; the three vectors come from
//! one set of accumulators.
//!
//! `generate_indices_oracle` is the materializing reference: it builds the
//! full score map, pools it in place, and selects by full sort. Both paths
//! share the fixed-point kernels, so they must agree bit-exactly.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixed::{exp_q16, fx_from_f64, fx_mul, FxRecip, FX_NEG_INF};
use crate::mpu::{gemm_nt, CostTally, MpuConfig, MpuError};
use crate::quant::{FixedVec, QTensor};
use crate::sfu::softmax_fx_row;

#[derive(Debug, Error, PartialEq)]
pub enum SigError {
    #[error("key block {got} pushed out of order (expected {expected})")]
    OutOfOrder { expected: usize, got: usize },
    #[error("key block has shape {0}x{1}, expected {2}x{3}")]
    BadBlockShape(usize, usize, usize, usize),
    #[error("stream already complete")]
    StreamComplete,
    #[error("stream ended after {got} of {expected} blocks")]
    StreamIncomplete { expected: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sequence length {0} shorter than one block ({1})")]
    SequenceTooShort(usize, usize),
    #[error(transparent)]
    Mpu(#[from] MpuError),
}

/// Block size, divergence gate, and coverage target.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SigConfig {
    pub block_size: usize,
    pub tau: f64,
    pub gamma: f64,
}

impl Default for SigConfig {
    fn default() -> Self {
        SigConfig {
            block_size: 128,
            tau: 0.1,
            gamma: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    VerticalSlash,
    QueryAware,
}

/// Normalized per-block score vectors produced by the streaming pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScores {
    pub num_blocks: usize,
    /// True block-pooled attention mass.
    pub a_hat: FixedVec,
    /// Estimated mass from pooled queries and keys.
    pub a_bar: FixedVec,
    /// Vertical (key-block) scores.
    pub a_v: FixedVec,
    /// Slash scores indexed by block-diagonal offset.
    pub a_s: FixedVec,
}

/// Selected key blocks for every query block of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockIndexSet {
    pub head: usize,
    pub pattern: Pattern,
    /// `blocks[q_b]` is the sorted set of key-block indices, all `<= q_b`.
    pub blocks: Vec<Vec<usize>>,
}

impl BlockIndexSet {
    pub fn num_query_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_selected(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }
}

/// Tracks live transient elements of the streaming pass so tests can pin its
/// peak against the contract bound.
#[derive(Debug, Default, Clone, Copy)]
pub struct TransientMeter {
    live: usize,
    pub peak: usize,
}

impl TransientMeter {
    fn alloc(&mut self, elems: usize) {
        self.live += elems;
        self.peak = self.peak.max(self.live);
    }

    fn free(&mut self, elems: usize) {
        self.live -= elems;
    }
}

/// Columnwise mean of a B x d INT8 block in Q16.16 real units.
pub fn pool_mean(block: &QTensor) -> Vec<i64> {
    let b = block.rows;
    let mut sums = vec![0i64; block.cols];
    for r in 0..b {
        for (c, s) in sums.iter_mut().enumerate() {
            *s += block.get(r, c) as i64;
        }
    }
    sums.iter()
        .map(|&s| fx_from_f64(s as f64 * block.scale / b as f64))
        .collect()
}

fn fx_dot(a: &[i64], b: &[i64]) -> i64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| fx_mul(x, y)).sum()
}

/// Score tile between a query block and a key block, in Q16.16 real units.
/// Masked entries (causal within the diagonal tile, plus padded rows or key
/// columns past `true_len`) come back as `FX_NEG_INF`.
#[allow(clippy::too_many_arguments)]
pub fn score_tile(
    q_block: &QTensor,
    k_block: &QTensor,
    q_start: usize,
    k_start: usize,
    true_len: usize,
    mask_padded_rows: bool,
    mpu: &MpuConfig,
    tally: &mut CostTally,
) -> Result<Vec<i64>, MpuError> {
    let d = q_block.cols;
    let r = gemm_nt(q_block, k_block, mpu)?;
    tally.add(&r);
    let factor = q_block.scale * k_block.scale / (d as f64).sqrt();
    let rows = q_block.rows;
    let cols = k_block.rows;
    let diagonal = q_start == k_start;
    // Padded key columns exist only in the final (diagonal) tile, where the
    // causal mask already covers them for every real query row.
    let mut out = vec![0i64; rows * cols];
    for i in 0..rows {
        let q_pos = q_start + i;
        for j in 0..cols {
            let masked = (mask_padded_rows && q_pos >= true_len) || (diagonal && j > i);
            out[i * cols + j] = if masked {
                FX_NEG_INF
            } else {
                fx_from_f64(r.tile.get(i, j) as f64 * factor)
            };
        }
    }
    Ok(out)
}

/// Local maximum and sum of `exp(s - max)` over the unmasked entries of a
/// tile. Fully-masked tiles give `(FX_NEG_INF, 0)`.
pub fn tile_mass(tile: &[i64]) -> (i64, i64) {
    let mut m = FX_NEG_INF;
    for &s in tile {
        if s != FX_NEG_INF && s > m {
            m = s;
        }
    }
    if m == FX_NEG_INF {
        return (FX_NEG_INF, 0);
    }
    let mut sum = 0i64;
    for &s in tile {
        if s != FX_NEG_INF {
            sum += exp_q16(s - m);
        }
    }
    (m, sum)
}

/// Rescale per-block `(local max, local sum)` pairs against the global
/// maximum and normalize into a probability vector over blocks.
pub fn finalize_masses(masses: &[(i64, i64)]) -> FixedVec {
    let gmax = masses
        .iter()
        .map(|&(m, _)| m)
        .max()
        .expect("at least one block");
    let rescaled: Vec<i64> = masses
        .iter()
        .map(|&(m, u)| {
            if m == FX_NEG_INF {
                0
            } else {
                fx_mul(u, exp_q16(m - gmax))
            }
        })
        .collect();
    let total: i64 = rescaled.iter().sum();
    if total <= 0 {
        return FixedVec::from_fx(vec![0; masses.len()]);
    }
    let recip = FxRecip::new(total);
    FixedVec::from_fx(rescaled.iter().map(|&u| recip.mul(u) as i32).collect())
}

/// Streaming score accumulator for one head: key blocks are pushed strictly
/// in ascending order, each exactly once.
pub struct ScoreStream {
    cfg: SigConfig,
    mpu: MpuConfig,
    q_hat: QTensor,
    q_hat_pool: Vec<i64>,
    num_blocks: usize,
    true_len: usize,
    inv_sqrt_d: i64,
    next: usize,
    masses: Vec<(i64, i64)>,
    pooled_k: Vec<Vec<i64>>,
    bar_scores: Vec<i64>,
    pub meter: TransientMeter,
}

/// Everything the stream retains besides the normalized scores: the pooled
/// key rows (needed by the query-aware path without refetching K) and the
/// transient-memory peak.
pub struct StreamArtifacts {
    pub pooled_k: Vec<Vec<i64>>,
    pub peak_transient_elems: usize,
}

impl ScoreStream {
    /// `q_hat` must be the (zero-padded) last query block.
    pub fn new(
        q_hat: QTensor,
        num_blocks: usize,
        true_len: usize,
        cfg: SigConfig,
        mpu: MpuConfig,
    ) -> ScoreStream {
        assert_eq!(q_hat.rows, cfg.block_size, "q_hat must be one block");
        let d = q_hat.cols;
        let q_hat_pool = pool_mean(&q_hat);
        let mut meter = TransientMeter::default();
        // Persistent stream state: q_hat (int8 elements), its pooled row,
        // and the per-block accumulators.
        meter.alloc(q_hat.data.len() + d + num_blocks * (2 + d + 1));
        ScoreStream {
            inv_sqrt_d: fx_from_f64(1.0 / (d as f64).sqrt()),
            cfg,
            mpu,
            q_hat,
            q_hat_pool,
            num_blocks,
            true_len,
            next: 0,
            masses: Vec::with_capacity(num_blocks),
            pooled_k: Vec::with_capacity(num_blocks),
            bar_scores: Vec::with_capacity(num_blocks),
            meter,
        }
    }

    pub fn push_block(
        &mut self,
        idx: usize,
        k_block: &QTensor,
        tally: &mut CostTally,
    ) -> Result<(), SigError> {
        if self.next >= self.num_blocks {
            return Err(SigError::StreamComplete);
        }
        if idx != self.next {
            return Err(SigError::OutOfOrder {
                expected: self.next,
                got: idx,
            });
        }
        let b = self.cfg.block_size;
        if k_block.rows != b || k_block.cols != self.q_hat.cols {
            return Err(SigError::BadBlockShape(
                k_block.rows,
                k_block.cols,
                b,
                self.q_hat.cols,
            ));
        }
        let pooled = pool_mean(k_block);
        self.bar_scores
            .push(fx_mul(fx_dot(&self.q_hat_pool, &pooled), self.inv_sqrt_d));
        self.pooled_k.push(pooled);

        // One B x B tile: INT32 accumulator plus the fixed-point view.
        self.meter.alloc(2 * b * b);
        let q_start = (self.num_blocks - 1) * b;
        let tile = score_tile(
            &self.q_hat,
            k_block,
            q_start,
            idx * b,
            self.true_len,
            true,
            &self.mpu,
            tally,
        )?;
        self.masses.push(tile_mass(&tile));
        self.meter.free(2 * b * b);
        self.next += 1;
        Ok(())
    }

    /// Normalize the accumulated statistics. Errors if any block is missing.
    pub fn finish(self) -> Result<(BlockScores, StreamArtifacts), SigError> {
        if self.next != self.num_blocks {
            return Err(SigError::StreamIncomplete {
                expected: self.num_blocks,
                got: self.next,
            });
        }
        let a_v = finalize_masses(&self.masses);
        let a_hat = a_v.clone();
        let a_s = FixedVec::from_fx(a_v.data.iter().rev().copied().collect());
        let a_bar = softmax_fx_row(&self.bar_scores);
        Ok((
            BlockScores {
                num_blocks: self.num_blocks,
                a_hat,
                a_bar,
                a_v,
                a_s,
            },
            StreamArtifacts {
                pooled_k: self.pooled_k,
                peak_transient_elems: self.meter.peak,
            },
        ))
    }
}

/// Convenience wrapper over `ScoreStream` for an in-memory key sequence.
pub fn stream_scores(
    q_hat: &QTensor,
    key_blocks: &[QTensor],
    true_len: usize,
    cfg: &SigConfig,
    mpu: &MpuConfig,
    tally: &mut CostTally,
) -> Result<(BlockScores, StreamArtifacts), SigError> {
    let mut stream = ScoreStream::new(q_hat.clone(), key_blocks.len(), true_len, *cfg, *mpu);
    for (i, kb) in key_blocks.iter().enumerate() {
        stream.push_block(i, kb, tally)?;
    }
    stream.finish()
}

/// Square root of the Jensen-Shannon divergence between two normalized
/// probability vectors (natural log; `0 * log 0 = 0`).
pub fn jsd_sqrt(p: &FixedVec, q: &FixedVec) -> Result<f64, SigError> {
    if p.len() != q.len() {
        return Err(SigError::LengthMismatch(p.len(), q.len()));
    }
    let mut acc = 0.0f64;
    for (&pi_fx, &qi_fx) in p.data.iter().zip(&q.data) {
        let pi = pi_fx.max(0) as f64 / 65536.0;
        let qi = qi_fx.max(0) as f64 / 65536.0;
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += 0.5 * pi * (pi / m).ln();
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (qi / m).ln();
        }
    }
    Ok(acc.max(0.0).sqrt())
}

/// Divergence gate: low divergence means the pooled estimate is trustworthy
/// and the head can use the query-aware pattern.
pub fn classify_head(scores: &BlockScores, tau: f64) -> Result<Pattern, SigError> {
    let d_js = jsd_sqrt(&scores.a_bar, &scores.a_hat)?;
    Ok(if d_js < tau {
        Pattern::QueryAware
    } else {
        Pattern::VerticalSlash
    })
}

/// Smallest set of indices, by descending score (ties to the lower index),
/// whose cumulative normalized score reaches `gamma`. If rounding leaves the
/// whole vector short of `gamma`, every index is selected. Selection runs on
/// a candidate heap; no full argsort.
pub fn coverage_select(scores: &FixedVec, gamma: f64) -> Vec<usize> {
    let gamma_fx = fx_from_f64(gamma);
    let mut heap: BinaryHeap<(i32, Reverse<usize>)> = scores
        .data
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, Reverse(i)))
        .collect();
    let mut picked = Vec::new();
    let mut cum: i64 = 0;
    while let Some((s, Reverse(i))) = heap.pop() {
        picked.push(i);
        cum += s as i64;
        if cum >= gamma_fx {
            break;
        }
    }
    picked.sort_unstable();
    picked
}

/// Sort-based reference for `coverage_select`, used by the materializing
/// oracle path.
pub fn coverage_select_sorted(scores: &FixedVec, gamma: f64) -> Vec<usize> {
    let gamma_fx = fx_from_f64(gamma);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores.data[j].cmp(&scores.data[i]).then(i.cmp(&j)));
    let mut picked = Vec::new();
    let mut cum: i64 = 0;
    for i in order {
        picked.push(i);
        cum += scores.data[i] as i64;
        if cum >= gamma_fx {
            break;
        }
    }
    picked.sort_unstable();
    picked
}

/// Expand vertical indices and slash offsets into per-query-block sets:
/// `{ v in S_v : v <= q_b } U { q_b - o : o in S_s, o <= q_b }`.
pub fn expand_vertical_slash(
    s_v: &[usize],
    s_s: &[usize],
    num_blocks: usize,
) -> Vec<Vec<usize>> {
    (0..num_blocks)
        .map(|q_b| {
            let mut set: Vec<usize> = s_v.iter().copied().filter(|&v| v <= q_b).collect();
            set.extend(s_s.iter().filter(|&&o| o <= q_b).map(|&o| q_b - o));
            set.sort_unstable();
            set.dedup();
            set
        })
        .collect()
}

/// Flattened causal pooled-attention map: Q16.16 scores plus the (q_b, k_b)
/// pair behind each entry, in (q_b, then k_b) order.
fn pooled_causal_scores(
    pooled_q: &[Vec<i64>],
    pooled_k: &[Vec<i64>],
    inv_sqrt_d: i64,
) -> (Vec<i64>, Vec<(usize, usize)>) {
    let nb = pooled_q.len();
    let mut flat = Vec::with_capacity(nb * (nb + 1) / 2);
    let mut pairs = Vec::with_capacity(flat.capacity());
    for (q_b, pq) in pooled_q.iter().enumerate() {
        for (k_b, pk) in pooled_k.iter().enumerate().take(q_b + 1) {
            flat.push(fx_mul(fx_dot(pq, pk), inv_sqrt_d));
            pairs.push((q_b, k_b));
        }
    }
    (flat, pairs)
}

fn group_pairs(
    selected: &[usize],
    pairs: &[(usize, usize)],
    num_blocks: usize,
) -> Vec<Vec<usize>> {
    let mut blocks = vec![Vec::new(); num_blocks];
    for &idx in selected {
        let (q_b, k_b) = pairs[idx];
        blocks[q_b].push(k_b);
    }
    // Floor rule: the self block is never maskable.
    for (q_b, set) in blocks.iter_mut().enumerate() {
        set.push(q_b);
        set.sort_unstable();
        set.dedup();
    }
    blocks
}

/// Query-aware selection from pooled queries and pooled keys: one global
/// softmax over the flattened causal map, then minimal coverage.
pub fn query_aware_indices(
    pooled_q: &[Vec<i64>],
    pooled_k: &[Vec<i64>],
    gamma: f64,
    select: fn(&FixedVec, f64) -> Vec<usize>,
) -> Vec<Vec<usize>> {
    let nb = pooled_q.len();
    let d = pooled_q[0].len();
    let inv_sqrt_d = fx_from_f64(1.0 / (d as f64).sqrt());
    let (flat, pairs) = pooled_causal_scores(pooled_q, pooled_k, inv_sqrt_d);
    let probs = softmax_fx_row(&flat);
    let selected = select(&probs, gamma);
    group_pairs(&selected, &pairs, nb)
}

/// Outcome of one head pass, with enough detail for the coverage and memory
/// assertions.
pub struct GenReport {
    pub scores: BlockScores,
    pub d_js: f64,
    /// Raw coverage selections before the slash-offset floor rule.
    pub selected_v: Vec<usize>,
    pub selected_s: Vec<usize>,
    pub peak_transient_elems: usize,
}

fn split_blocks(t: &QTensor, block: usize) -> Vec<QTensor> {
    let nb = t.rows.div_ceil(block);
    (0..nb).map(|b| t.row_block(b * block, block)).collect()
}

fn generate_common(
    head: usize,
    q: &QTensor,
    k: &QTensor,
    cfg: &SigConfig,
    mpu: &MpuConfig,
    tally: &mut CostTally,
    materializing: bool,
) -> Result<(BlockIndexSet, GenReport), SigError> {
    let s = q.rows;
    let b = cfg.block_size;
    if s < b {
        return Err(SigError::SequenceTooShort(s, b));
    }
    if k.rows != s || k.cols != q.cols {
        return Err(SigError::LengthMismatch(k.rows, s));
    }
    let nb = s.div_ceil(b);
    let key_blocks = split_blocks(k, b);
    let q_hat = q.row_block((nb - 1) * b, b);

    let (scores, artifacts) = if materializing {
        materialize_scores(&q_hat, &key_blocks, s, cfg, mpu, tally)?
    } else {
        stream_scores(&q_hat, &key_blocks, s, cfg, mpu, tally)?
    };

    let d_js = jsd_sqrt(&scores.a_bar, &scores.a_hat)?;
    let pattern = if d_js < cfg.tau {
        Pattern::QueryAware
    } else {
        Pattern::VerticalSlash
    };
    let select = if materializing {
        coverage_select_sorted
    } else {
        coverage_select
    };

    let (blocks, selected_v, selected_s) = match pattern {
        Pattern::VerticalSlash => {
            let sv = select(&scores.a_v, cfg.gamma);
            let ss = select(&scores.a_s, cfg.gamma);
            // Floor rule: offset 0 keeps every query block's self block.
            let mut ss_floor = ss.clone();
            if !ss_floor.contains(&0) {
                ss_floor.insert(0, 0);
            }
            (expand_vertical_slash(&sv, &ss_floor, nb), sv, ss)
        }
        Pattern::QueryAware => {
            let pooled_q: Vec<Vec<i64>> = split_blocks(q, b).iter().map(pool_mean).collect();
            let blocks = query_aware_indices(&pooled_q, &artifacts.pooled_k, cfg.gamma, select);
            (blocks, Vec::new(), Vec::new())
        }
    };

    Ok((
        BlockIndexSet {
            head,
            pattern,
            blocks,
        },
        GenReport {
            scores,
            d_js,
            selected_v,
            selected_s,
            peak_transient_elems: artifacts.peak_transient_elems,
        },
    ))
}

/// Streaming index generation for one head. `q` and `k` are the full S x d
/// projections (unpadded); the final partial block is zero-padded internally.
pub fn generate_indices(
    head: usize,
    q: &QTensor,
    k: &QTensor,
    cfg: &SigConfig,
    mpu: &MpuConfig,
    tally: &mut CostTally,
) -> Result<(BlockIndexSet, GenReport), SigError> {
    generate_common(head, q, k, cfg, mpu, tally, false)
}

/// Materializing reference with the same contract: full score map, pooled in
/// place, full-sort selection.
pub fn generate_indices_oracle(
    head: usize,
    q: &QTensor,
    k: &QTensor,
    cfg: &SigConfig,
    mpu: &MpuConfig,
    tally: &mut CostTally,
) -> Result<(BlockIndexSet, GenReport), SigError> {
    generate_common(head, q, k, cfg, mpu, tally, true)
}

/// Materialize the full `B x (nb * B)` fixed-point score map, then pool
/// per-block statistics from the stored map.
fn materialize_scores(
    q_hat: &QTensor,
    key_blocks: &[QTensor],
    true_len: usize,
    cfg: &SigConfig,
    mpu: &MpuConfig,
    tally: &mut CostTally,
) -> Result<(BlockScores, StreamArtifacts), SigError> {
    let b = cfg.block_size;
    let nb = key_blocks.len();
    let q_start = (nb - 1) * b;
    let mut map = vec![0i64; b * nb * b];
    for (idx, kb) in key_blocks.iter().enumerate() {
        let tile = score_tile(q_hat, kb, q_start, idx * b, true_len, true, mpu, tally)?;
        for i in 0..b {
            map[i * nb * b + idx * b..i * nb * b + (idx + 1) * b]
                .copy_from_slice(&tile[i * b..(i + 1) * b]);
        }
    }
    // Pool the materialized map block by block.
    let mut masses = Vec::with_capacity(nb);
    let mut slice = vec![0i64; b * b];
    for blk in 0..nb {
        for i in 0..b {
            slice[i * b..(i + 1) * b]
                .copy_from_slice(&map[i * nb * b + blk * b..i * nb * b + (blk + 1) * b]);
        }
        masses.push(tile_mass(&slice));
    }
    let a_v = finalize_masses(&masses);
    let a_hat = a_v.clone();
    let a_s = FixedVec::from_fx(a_v.data.iter().rev().copied().collect());

    let q_hat_pool = pool_mean(q_hat);
    let pooled_k: Vec<Vec<i64>> = key_blocks.iter().map(pool_mean).collect();
    let inv_sqrt_d = fx_from_f64(1.0 / (q_hat.cols as f64).sqrt());
    let bar_scores: Vec<i64> = pooled_k
        .iter()
        .map(|pk| fx_mul(fx_dot(&q_hat_pool, pk), inv_sqrt_d))
        .collect();
    let a_bar = softmax_fx_row(&bar_scores);

    Ok((
        BlockScores {
            num_blocks: nb,
            a_hat,
            a_bar,
            a_v,
            a_s,
        },
        StreamArtifacts {
            pooled_k,
            peak_transient_elems: map.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fxv(vals: &[f64]) -> FixedVec {
        FixedVec::from_f64(vals)
    }

    #[test]
    fn jsd_identical_is_zero() {
        let p = fxv(&[0.25, 0.25, 0.5]);
        assert_eq!(jsd_sqrt(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn jsd_disjoint_closed_form() {
        let p = fxv(&[1.0, 0.0]);
        let q = fxv(&[0.0, 1.0]);
        let d = jsd_sqrt(&p, &q).unwrap();
        assert!((d - (2f64.ln()).sqrt()).abs() < 1e-4, "{d}");
    }

    #[test]
    fn jsd_symmetric() {
        let p = fxv(&[0.7, 0.2, 0.1]);
        let q = fxv(&[0.1, 0.3, 0.6]);
        assert_eq!(jsd_sqrt(&p, &q).unwrap(), jsd_sqrt(&q, &p).unwrap());
    }

    #[test]
    fn jsd_length_mismatch() {
        let p = fxv(&[1.0]);
        let q = fxv(&[0.5, 0.5]);
        assert!(matches!(jsd_sqrt(&p, &q), Err(SigError::LengthMismatch(1, 2))));
    }

    #[test]
    fn coverage_basic_cases() {
        let v = fxv(&[0.5, 0.3, 0.2]);
        assert_eq!(coverage_select(&v, 0.7), vec![0, 1]);
        assert_eq!(coverage_select(&v, 0.5), vec![0]);
    }

    #[test]
    fn coverage_tie_breaks_to_lower_index() {
        let v = fxv(&[0.25, 0.25, 0.25, 0.25]);
        assert_eq!(coverage_select(&v, 0.5), vec![0, 1]);
    }

    #[test]
    fn coverage_gamma_one_selects_all() {
        // Normalized vectors can sum to slightly under 1.0 in fixed point;
        // gamma = 1 must still select everything rather than loop forever.
        let v = FixedVec::from_fx(vec![30000, 20000, 15535]); // sums just below 1.0
        assert_eq!(coverage_select(&v, 1.0), vec![0, 1, 2]);
    }

    #[test]
    fn coverage_matches_sort_reference() {
        let mut state = 1u64;
        for case in 0..200 {
            let n = 1 + (case % 37);
            let vals: Vec<i32> = (0..n)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                    ((state >> 40) as i32) % 5000
                })
                .collect();
            let total: i64 = vals.iter().map(|&v| v as i64).sum();
            if total == 0 {
                continue;
            }
            let v = FixedVec::from_fx(vals);
            for gamma in [0.3, 0.5, 0.9, 1.0] {
                assert_eq!(
                    coverage_select(&v, gamma),
                    coverage_select_sorted(&v, gamma),
                    "case {case} gamma {gamma}"
                );
            }
        }
    }

    #[test]
    fn expansion_examples() {
        assert_eq!(
            expand_vertical_slash(&[0], &[0], 4),
            vec![vec![0], vec![0, 1], vec![0, 2], vec![0, 3]]
        );
        // all verticals saturate to the full causal triangle
        let all: Vec<usize> = (0..4).collect();
        assert_eq!(
            expand_vertical_slash(&all, &[2], 4),
            vec![vec![0], vec![0, 1], vec![0, 1, 2], vec![0, 1, 2, 3]]
        );
        // diagonal only
        assert_eq!(
            expand_vertical_slash(&[], &[0], 3),
            vec![vec![0], vec![1], vec![2]]
        );
    }

    #[test]
    fn pool_mean_identical_rows() {
        let row: Vec<i8> = vec![3, -7, 100, 0];
        let mut data = Vec::new();
        for _ in 0..8 {
            data.extend_from_slice(&row);
        }
        let q = QTensor::from_parts(8, 4, data, 0.25);
        let pooled = pool_mean(&q);
        for (p, &r) in pooled.iter().zip(&row) {
            assert_eq!(*p, fx_from_f64(r as f64 * 0.25));
        }
    }

    #[test]
    fn pool_mean_opposite_rows_cancel() {
        let mut data = vec![5i8, -9, 33];
        data.extend_from_slice(&[-5, 9, -33]);
        let q = QTensor::from_parts(2, 3, data, 1.0);
        assert_eq!(pool_mean(&q), vec![0, 0, 0]);
    }

    #[test]
    fn classify_boundary_tau_zero() {
        let scores = BlockScores {
            num_blocks: 2,
            a_hat: fxv(&[0.5, 0.5]),
            a_bar: fxv(&[0.5, 0.5]),
            a_v: fxv(&[0.5, 0.5]),
            a_s: fxv(&[0.5, 0.5]),
        };
        // d_js = 0; strict inequality means tau = 0 forces vertical-slash.
        assert_eq!(classify_head(&scores, 0.0).unwrap(), Pattern::VerticalSlash);
        assert_eq!(classify_head(&scores, 0.1).unwrap(), Pattern::QueryAware);
    }

    fn rng_tensor(rows: usize, cols: usize, seed: u64, scale: f64) -> QTensor {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let data = (0..rows * cols)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as i32 % 255 - 127) as i8
            })
            .collect();
        QTensor::from_parts(rows, cols, data, scale)
    }

    #[test]
    fn stream_rejects_out_of_order() {
        let cfg = SigConfig { block_size: 8, ..Default::default() };
        let q_hat = rng_tensor(8, 4, 1, 0.1);
        let mut stream = ScoreStream::new(q_hat, 3, 24, cfg, MpuConfig::default());
        let kb = rng_tensor(8, 4, 2, 0.1);
        let mut tally = CostTally::default();
        stream.push_block(0, &kb, &mut tally).unwrap();
        let err = stream.push_block(2, &kb, &mut tally).unwrap_err();
        assert_eq!(err, SigError::OutOfOrder { expected: 1, got: 2 });
    }

    #[test]
    fn single_block_scores_are_unit() {
        let cfg = SigConfig { block_size: 16, ..Default::default() };
        let q = rng_tensor(16, 8, 3, 0.05);
        let k = rng_tensor(16, 8, 4, 0.05);
        let mut tally = CostTally::default();
        let (set, rep) =
            generate_indices(0, &q, &k, &cfg, &MpuConfig::default(), &mut tally).unwrap();
        for v in [&rep.scores.a_hat, &rep.scores.a_bar, &rep.scores.a_v, &rep.scores.a_s] {
            assert_eq!(v.len(), 1);
            assert!((v.to_f64()[0] - 1.0).abs() < 1e-4, "{:?}", v);
        }
        assert_eq!(set.blocks, vec![vec![0]]);
    }

    #[test]
    fn streaming_equals_oracle_small_cases() {
        let mpu = MpuConfig::default();
        for seed in 0..12u64 {
            let cfg = SigConfig {
                block_size: 16,
                tau: if seed % 2 == 0 { 0.1 } else { 1.5 },
                gamma: 0.9,
            };
            let s = 16 * (2 + (seed as usize % 5)) + (seed as usize % 13);
            let q = rng_tensor(s, 8, seed * 2 + 1, 0.03);
            let k = rng_tensor(s, 8, seed * 2 + 2, 0.03);
            let mut t1 = CostTally::default();
            let mut t2 = CostTally::default();
            let (set_s, rep_s) = generate_indices(0, &q, &k, &cfg, &mpu, &mut t1).unwrap();
            let (set_o, rep_o) = generate_indices_oracle(0, &q, &k, &cfg, &mpu, &mut t2).unwrap();
            assert_eq!(set_s, set_o, "seed {seed}");
            assert_eq!(rep_s.scores, rep_o.scores, "seed {seed}");
        }
    }

    #[test]
    fn uniform_scores_give_uniform_vertical_mass() {
        // Queries and keys live in orthogonal column spaces: every score is
        // zero, so all fully-causal blocks carry identical mass and the
        // diagonal block (half masked) carries less.
        let b = 16;
        let nb = 4;
        let d = 8;
        let mut qdata = vec![0i8; b * nb * d];
        let mut kdata = vec![0i8; b * nb * d];
        for r in 0..b * nb {
            for c in 0..d / 2 {
                qdata[r * d + c] = 7;
                kdata[r * d + d / 2 + c] = 9;
            }
        }
        let q = QTensor::from_parts(b * nb, d, qdata, 0.1);
        let k = QTensor::from_parts(b * nb, d, kdata, 0.1);
        let cfg = SigConfig { block_size: b, ..Default::default() };
        let mut tally = CostTally::default();
        let (_, rep) =
            generate_indices(0, &q, &k, &cfg, &MpuConfig::default(), &mut tally).unwrap();
        let av = rep.scores.a_v.to_f64();
        for w in av.windows(2).take(nb - 2) {
            assert!((w[0] - w[1]).abs() < 1e-4, "{av:?}");
        }
        assert!(av[nb - 1] < av[0], "{av:?}");
    }
}
