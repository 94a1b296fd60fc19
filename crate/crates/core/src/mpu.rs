//! Hybrid matrix processing unit: exact INT8 multiply via bit-plane or
//! nibble decomposition (LUT arrays) and via direct widening multiply (DSP
//! arrays), plus a tile-scheduled GEMM with systolic-array cycle accounting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::{AccTile, QTensor};

/// Deepest reduction that cannot overflow INT32: |sum| <= k * 2^14 < 2^31.
pub const MAX_REDUCTION_DEPTH: usize = 1 << 15;

#[derive(Debug, Error, PartialEq)]
pub enum MpuError {
    #[error("inner dimensions do not match: {0}x{1} * {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("reduction depth {0} exceeds the INT32 overflow guard of {MAX_REDUCTION_DEPTH}")]
    ReductionTooDeep(usize),
    #[error("tile of {0}x{1} exceeds the {2}x{2} array")]
    TileTooLarge(usize, usize, usize),
    #[error("configuration has no arrays")]
    NoArrays,
}

/// Array counts and geometry of the matrix unit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MpuConfig {
    pub dsp_arrays: usize,
    pub lut_arrays: usize,
    pub array_dim: usize,
    pub accumulate_width: u32,
}

impl Default for MpuConfig {
    fn default() -> Self {
        MpuConfig {
            dsp_arrays: 6,
            lut_arrays: 6,
            array_dim: 32,
            accumulate_width: 32,
        }
    }
}

impl MpuConfig {
    pub fn total_arrays(&self) -> usize {
        self.dsp_arrays + self.lut_arrays
    }

    pub fn validate(&self) -> Result<(), MpuError> {
        if self.total_arrays() == 0 {
            return Err(MpuError::NoArrays);
        }
        assert!(self.array_dim.is_power_of_two(), "array_dim must be a power of two");
        Ok(())
    }
}

/// Which multiplier realization a tile-pass runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpuPath {
    Dsp,
    Lut,
}

/// Exact product plus the cycle/MAC accounting of the schedule.
#[derive(Debug, Clone)]
pub struct GemmResult {
    pub tile: AccTile,
    pub cycles: u64,
    pub macs: u64,
}

/// Signed INT8 product from bit-level partial products: both operands expand
/// into bit planes, the most-significant plane carrying weight -2^7 so the
/// two's-complement value is reproduced exactly.
pub fn bitplane_mul(a: i8, b: i8) -> i32 {
    let au = a as u8;
    let bu = b as u8;
    let mut acc: i32 = 0;
    for i in 0..8u32 {
        let ai = ((au >> i) & 1) as i32;
        let wa: i32 = if i == 7 { -128 } else { 1 << i };
        for j in 0..8u32 {
            let bj = ((bu >> j) & 1) as i32;
            let wb: i32 = if j == 7 { -128 } else { 1 << j };
            acc += (ai & bj) * wa * wb;
        }
    }
    acc
}

/// Signed INT8 product from four INT4 sub-products; the high nibble is signed
/// in [-8, 7], the low nibble unsigned in [0, 15].
#[inline]
pub fn nibble_mul(a: i8, b: i8) -> i32 {
    let ah = (a >> 4) as i32; // arithmetic shift: signed high nibble
    let al = (a & 0x0f) as i32;
    let bh = (b >> 4) as i32;
    let bl = (b & 0x0f) as i32;
    al * bl + ((ah * bl + al * bh) << 4) + ((ah * bh) << 8)
}

#[inline]
fn widening_mul(a: i8, b: i8) -> i32 {
    a as i32 * b as i32
}

/// One output tile partial product: C[r0.., c0..] += A[r0.., k0..] * B[k0.., c0..]
/// over the given extents, multiplying on the selected path.
fn mac_block(
    a: &QTensor,
    b: &QTensor,
    out: &mut [i32],
    out_cols: usize,
    r0: usize,
    rows: usize,
    c0: usize,
    cols: usize,
    k0: usize,
    depth: usize,
    path: MpuPath,
) {
    let mul = match path {
        MpuPath::Dsp => widening_mul,
        MpuPath::Lut => nibble_mul,
    };
    for r in 0..rows {
        let a_row = a.row(r0 + r);
        for c in 0..cols {
            let mut sum = 0i32;
            for t in 0..depth {
                sum += mul(a_row[k0 + t], b.get(k0 + t, c0 + c));
            }
            out[(r0 + r) * out_cols + c0 + c] += sum;
        }
    }
}

/// Single-array tile multiply: exact INT32 accumulation of an m x k by k x n
/// product where m, n fit one array.
pub fn tile_matmul(
    a: &QTensor,
    b: &QTensor,
    path: MpuPath,
    array_dim: usize,
) -> Result<AccTile, MpuError> {
    if a.cols != b.rows {
        return Err(MpuError::DimensionMismatch(a.rows, a.cols, b.rows, b.cols));
    }
    if a.rows > array_dim || b.cols > array_dim {
        return Err(MpuError::TileTooLarge(a.rows, b.cols, array_dim));
    }
    if a.cols > MAX_REDUCTION_DEPTH {
        return Err(MpuError::ReductionTooDeep(a.cols));
    }
    let mut tile = AccTile::zeros(a.rows, b.cols, a.scale * b.scale);
    mac_block(
        a, b, &mut tile.data, b.cols, 0, a.rows, 0, b.cols, 0, a.cols, path,
    );
    Ok(tile)
}

/// Full GEMM: output tiles are cut to the array geometry, the k dimension is
/// chunked per array_dim, and tile-passes are assigned round-robin across the
/// DSP and LUT arrays. Values are exact regardless of the assignment; only
/// the cycle count depends on it.
///
/// A tile-pass over array_dim x k_tile x array_dim occupies its array for
/// `k_tile + 2 * array_dim - 1` cycles (fill + stream + drain); the GEMM
/// cost is the busiest array's total.
pub fn gemm(a: &QTensor, b: &QTensor, cfg: &MpuConfig) -> Result<GemmResult, MpuError> {
    cfg.validate()?;
    if a.cols != b.rows {
        return Err(MpuError::DimensionMismatch(a.rows, a.cols, b.rows, b.cols));
    }
    if a.cols > MAX_REDUCTION_DEPTH {
        return Err(MpuError::ReductionTooDeep(a.cols));
    }
    let dim = cfg.array_dim;
    let total = cfg.total_arrays();
    let mut tile = AccTile::zeros(a.rows, b.cols, a.scale * b.scale);
    let mut array_busy = vec![0u64; total];
    let mut pass: usize = 0;
    for r0 in (0..a.rows).step_by(dim) {
        let rows = dim.min(a.rows - r0);
        for c0 in (0..b.cols).step_by(dim) {
            let cols = dim.min(b.cols - c0);
            for k0 in (0..a.cols).step_by(dim) {
                let depth = dim.min(a.cols - k0);
                let array = pass % total;
                let path = if array < cfg.dsp_arrays {
                    MpuPath::Dsp
                } else {
                    MpuPath::Lut
                };
                mac_block(
                    a, b, &mut tile.data, b.cols, r0, rows, c0, cols, k0, depth, path,
                );
                array_busy[array] += depth as u64 + 2 * dim as u64 - 1;
                pass += 1;
            }
        }
    }
    let cycles = array_busy.iter().copied().max().unwrap_or(0);
    let macs = (a.rows * a.cols * b.cols) as u64;
    Ok(GemmResult { tile, cycles, macs })
}

/// A * B^T without materializing the transpose at the call site.
pub fn gemm_nt(a: &QTensor, b: &QTensor, cfg: &MpuConfig) -> Result<GemmResult, MpuError> {
    gemm(a, &b.transpose(), cfg)
}

/// Running total of matrix-unit work, accumulated across a pipeline stage.
#[derive(Debug, Default, Clone, Copy)]
pub struct CostTally {
    pub mpu_cycles: u64,
    pub macs: u64,
}

impl CostTally {
    pub fn add(&mut self, r: &GemmResult) {
        self.mpu_cycles += r.cycles;
        self.macs += r.macs;
    }
}
