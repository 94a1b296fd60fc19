//! INT8 tensors with per-tensor scales, INT32 accumulator tiles, and the
//! Q16.16 probability/score vectors that flow between pipeline stages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixed::{fx_from_f64, fx_to_f64};

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("input contains a non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("empty input")]
    Empty,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// INT8 value grid plus a positive real scale; entry (i, j) represents
/// `data[i * cols + j] as f64 * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i8>,
    pub scale: f64,
}

impl QTensor {
    /// Symmetric per-tensor quantization with round-half-to-even:
    /// `scale = max|x| / 127` (1 for an all-zero input), entries clamped to
    /// [-128, 127].
    pub fn quantize(rows: usize, cols: usize, x: &[f64]) -> Result<QTensor, QuantError> {
        if rows == 0 || cols == 0 || x.is_empty() {
            return Err(QuantError::Empty);
        }
        if x.len() != rows * cols {
            return Err(QuantError::ShapeMismatch(format!(
                "{rows}x{cols} grid needs {} entries, got {}",
                rows * cols,
                x.len()
            )));
        }
        let mut amax = 0.0f64;
        for (i, &v) in x.iter().enumerate() {
            if !v.is_finite() {
                return Err(QuantError::NonFinite {
                    row: i / cols,
                    col: i % cols,
                });
            }
            amax = amax.max(v.abs());
        }
        let scale = if amax == 0.0 { 1.0 } else { amax / 127.0 };
        let data = x
            .iter()
            .map(|&v| (v / scale).round_ties_even().clamp(-128.0, 127.0) as i8)
            .collect();
        Ok(QTensor {
            rows,
            cols,
            data,
            scale,
        })
    }

    pub fn from_parts(rows: usize, cols: usize, data: Vec<i8>, scale: f64) -> QTensor {
        assert_eq!(rows * cols, data.len(), "grid size mismatch");
        assert!(scale > 0.0 && scale.is_finite(), "scale must be positive");
        QTensor {
            rows,
            cols,
            data,
            scale,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> QTensor {
        QTensor {
            rows,
            cols,
            data: vec![0; rows * cols],
            scale: 1.0,
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[i8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Real-valued view: entry = data * scale.
    pub fn dequantize(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 * self.scale).collect()
    }

    pub fn transpose(&self) -> QTensor {
        let mut data = vec![0i8; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        QTensor {
            rows: self.cols,
            cols: self.rows,
            data,
            scale: self.scale,
        }
    }

    /// Copy a contiguous column range.
    pub fn col_slice(&self, c0: usize, width: usize) -> QTensor {
        assert!(c0 + width <= self.cols, "column slice out of range");
        let mut data = vec![0i8; self.rows * width];
        for r in 0..self.rows {
            data[r * width..(r + 1) * width]
                .copy_from_slice(&self.data[r * self.cols + c0..r * self.cols + c0 + width]);
        }
        QTensor {
            rows: self.rows,
            cols: width,
            data,
            scale: self.scale,
        }
    }

    /// Copy `nrows` rows starting at `r0` (zero-padded past the end).
    pub fn row_block(&self, r0: usize, nrows: usize) -> QTensor {
        let mut data = vec![0i8; nrows * self.cols];
        for r in 0..nrows {
            if r0 + r < self.rows {
                data[r * self.cols..(r + 1) * self.cols]
                    .copy_from_slice(self.row(r0 + r));
            }
        }
        QTensor {
            rows: nrows,
            cols: self.cols,
            data,
            scale: self.scale,
        }
    }
}

/// INT32 accumulator grid with the product scale of its GEMM inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AccTile {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
    pub scale: f64,
}

impl AccTile {
    pub fn zeros(rows: usize, cols: usize, scale: f64) -> AccTile {
        AccTile {
            rows,
            cols,
            data: vec![0; rows * cols],
            scale,
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 * self.scale).collect()
    }

    /// Requantize to INT8 with a fresh per-tensor scale.
    pub fn requantize(&self) -> QTensor {
        let vals = self.dequantize();
        QTensor::quantize(self.rows, self.cols, &vals).expect("finite by construction")
    }
}

/// Signed 32-bit fixed-point vector, 16 fraction bits. The carrier for
/// probabilities and block scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedVec {
    pub data: Vec<i32>,
}

impl FixedVec {
    pub fn from_fx(data: Vec<i32>) -> FixedVec {
        FixedVec { data }
    }

    pub fn from_f64(vals: &[f64]) -> FixedVec {
        FixedVec {
            data: vals.iter().map(|&v| fx_from_f64(v) as i32).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| fx_to_f64(v as i64)).collect()
    }

    pub fn sum_fx(&self) -> i64 {
        self.data.iter().map(|&v| v as i64).sum()
    }
}

/// Q16.16 matrix: the activation format between fixed-point pipeline stages.
#[derive(Debug, Clone, PartialEq)]
pub struct FxMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl FxMat {
    pub fn zeros(rows: usize, cols: usize) -> FxMat {
        FxMat {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[i32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [i32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| fx_to_f64(v as i64)).collect()
    }

    pub fn from_f64(rows: usize, cols: usize, vals: &[f64]) -> FxMat {
        assert_eq!(vals.len(), rows * cols);
        FxMat {
            rows,
            cols,
            data: vals
                .iter()
                .map(|&v| fx_from_f64(v).clamp(i32::MIN as i64, i32::MAX as i64) as i32)
                .collect(),
        }
    }

    /// Saturating elementwise add (residual connections).
    pub fn add_assign_sat(&mut self, other: &FxMat) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = a.saturating_add(b);
        }
    }

    /// Quantize the real values this matrix represents to INT8.
    pub fn quantize(&self) -> QTensor {
        QTensor::quantize(self.rows, self.cols, &self.to_f64()).expect("fx values are finite")
    }

    /// Widen an INT32 accumulator tile into Q16.16 real units.
    pub fn from_acc(acc: &AccTile) -> FxMat {
        let data = acc
            .data
            .iter()
            .map(|&v| {
                fx_from_f64(v as f64 * acc.scale).clamp(i32::MIN as i64, i32::MAX as i64) as i32
            })
            .collect();
        FxMat {
            rows: acc.rows,
            cols: acc.cols,
            data,
        }
    }
}
