//! Special-function kernels: LUT-based softmax, RMS normalization, and SiLU
//! over Q16.16 data. Shared by the index-generation and attention paths.

use crate::fixed::{exp_q16, fx_from_f64, fx_mul, fx_to_f64, FxRecip, FX_NEG_INF, FX_ONE};
use crate::quant::{FixedVec, FxMat};

/// Softmax of an INT32 score row (real value = score * scale), evaluated with
/// the piecewise-linear exponential table and a single reciprocal per row.
///
/// Output sums to 1 within `2^(-16 + ceil(log2 n))` and preserves the order
/// of the inputs.
pub fn softmax_fixed(scores: &[i32], scale: f64) -> FixedVec {
    assert!(!scores.is_empty(), "softmax of empty row");
    let fx: Vec<i64> = scores
        .iter()
        .map(|&s| fx_from_f64(s as f64 * scale))
        .collect();
    softmax_fx_row(&fx)
}

/// Softmax over a row already in Q16.16; entries equal to `FX_NEG_INF` are
/// excluded (zero probability).
pub fn softmax_fx_row(fx: &[i64]) -> FixedVec {
    let m = fx.iter().copied().max().expect("non-empty row");
    if m == FX_NEG_INF {
        // Fully masked row: define as all zeros.
        return FixedVec::from_fx(vec![0; fx.len()]);
    }
    let exps: Vec<i64> = fx
        .iter()
        .map(|&s| if s == FX_NEG_INF { 0 } else { exp_q16(s - m) })
        .collect();
    let total: i64 = exps.iter().sum();
    let recip = FxRecip::new(total);
    FixedVec::from_fx(exps.iter().map(|&e| recip.mul(e) as i32).collect())
}

/// Elementwise SiLU on a Q16.16 value.
pub fn silu_fixed(x: i64) -> i64 {
    crate::fixed::silu_q16(x)
}

/// SiLU applied elementwise to a fixed-point matrix.
pub fn silu_mat(x: &FxMat) -> FxMat {
    FxMat {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .map(|&v| crate::fixed::silu_q16(v as i64) as i32)
            .collect(),
    }
}

/// RMS normalization of one Q16.16 row with learned weights:
/// `out_i = x_i * w_i / sqrt(mean(x^2) + eps)`, `eps = 2^-20`.
///
/// The squared-sum accumulates exactly in Q32 fraction bits; the scalar
/// inverse square root goes through f64 (IEEE sqrt is correctly rounded, so
/// the result is still deterministic).
pub fn rmsnorm_fixed(x: &[i32], w: &[i32]) -> Vec<i32> {
    assert!(!x.is_empty(), "rmsnorm of empty row");
    assert_eq!(x.len(), w.len(), "weight length mismatch");
    // sum of x_fx^2 is Q32.32 in i128; mean back in f64.
    let sq_sum: i128 = x.iter().map(|&v| (v as i128) * (v as i128)).sum();
    let mean = sq_sum as f64 / x.len() as f64 / 4294967296.0;
    let inv_rms = 1.0 / (mean + 2f64.powi(-20)).sqrt();
    let inv_rms_fx = fx_from_f64(inv_rms);
    x.iter()
        .zip(w.iter())
        .map(|(&xi, &wi)| {
            let t = fx_mul(xi as i64, wi as i64);
            fx_mul(t, inv_rms_fx).clamp(i32::MIN as i64, i32::MAX as i64) as i32
        })
        .collect()
}

/// RMS normalization applied row-wise to a matrix.
pub fn rmsnorm_mat(x: &FxMat, w: &[i32]) -> FxMat {
    let mut out = FxMat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        out.row_mut(r).copy_from_slice(&rmsnorm_fixed(x.row(r), w));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f64_softmax(vals: &[f64]) -> Vec<f64> {
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals.iter().map(|&v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        exps.iter().map(|&e| e / s).collect()
    }

    #[test]
    fn softmax_symmetry() {
        let out = softmax_fixed(&[0, 0], 1.0).to_f64();
        assert!((out[0] - 0.5).abs() < 1e-4);
        assert!((out[1] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn softmax_saturation() {
        // Gap of 20 > 16: the small entry underflows to exactly zero.
        let out = softmax_fixed(&[20, 0], 1.0).to_f64();
        assert!((out[0] - 1.0).abs() < 1e-3);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn softmax_vs_float_oracle() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as i32 % 2000) - 1000
        };
        for n in [2usize, 5, 17, 64, 300] {
            let scores: Vec<i32> = (0..n).map(|_| next()).collect();
            let scale = 0.01;
            let got = softmax_fixed(&scores, scale).to_f64();
            let want = f64_softmax(&scores.iter().map(|&s| s as f64 * scale).collect::<Vec<_>>());
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() <= 2f64.powi(-8), "n={n}: {g} vs {w}");
            }
            // probability vector: non-negative, sums to 1 within tolerance
            let sum: f64 = got.iter().sum();
            let tol = 2f64.powi(-16 + (n as f64).log2().ceil() as i32);
            assert!((sum - 1.0).abs() <= tol, "n={n}: sum {sum} tol {tol}");
            assert!(got.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn softmax_monotone() {
        let scores = [5, -3, 12, 12, 0, -50];
        let out = softmax_fixed(&scores, 0.1);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] > scores[j] {
                    assert!(out.data[i] >= out.data[j]);
                }
            }
        }
    }

    #[test]
    fn rmsnorm_constant_row() {
        let c = fx_from_f64(3.25) as i32;
        let one = FX_ONE as i32;
        let out = rmsnorm_fixed(&[c, c], &[one, one]);
        for v in out {
            assert!((fx_to_f64(v as i64) - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn rmsnorm_zero_row() {
        let one = FX_ONE as i32;
        let out = rmsnorm_fixed(&[0, 0], &[one, one]);
        assert_eq!(out, vec![0, 0]);
    }

    #[test]
    fn rmsnorm_vs_float_oracle() {
        let xs: Vec<f64> = (0..32).map(|i| ((i * 29) % 17) as f64 / 4.0 - 2.0).collect();
        let ws: Vec<f64> = (0..32).map(|i| 0.8 + ((i * 13) % 5) as f64 * 0.1).collect();
        let x_fx: Vec<i32> = xs.iter().map(|&v| fx_from_f64(v) as i32).collect();
        let w_fx: Vec<i32> = ws.iter().map(|&v| fx_from_f64(v) as i32).collect();
        let got = rmsnorm_fixed(&x_fx, &w_fx);
        let rms = (xs.iter().map(|v| v * v).sum::<f64>() / 32.0 + 2f64.powi(-20)).sqrt();
        let max_ref = xs
            .iter()
            .zip(&ws)
            .map(|(x, w)| (x * w / rms).abs())
            .fold(0.0f64, f64::max);
        for (g, (x, w)) in got.iter().zip(xs.iter().zip(&ws)) {
            let want = x * w / rms;
            assert!(
                (fx_to_f64(*g as i64) - want).abs() <= max_ref * 2f64.powi(-6),
                "{} vs {want}",
                fx_to_f64(*g as i64)
            );
        }
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let out = softmax_fx_row(&[FX_NEG_INF, FX_NEG_INF]);
        assert_eq!(out.data, vec![0, 0]);
    }
}
