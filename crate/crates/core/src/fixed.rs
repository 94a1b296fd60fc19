//! Q16.16 fixed-point arithmetic and the LUT-based scalar kernels shared by
//! every compute unit: exponential, reciprocal, sigmoid/SiLU.
//!
//! All operations are integer-only (plus IEEE-exact `f64` conversions at
//! domain boundaries), so identical inputs always produce bit-identical
//! outputs regardless of evaluation order or thread count.

/// Fraction bits of the working fixed-point format.
pub const FRAC_BITS: u32 = 16;
/// 1.0 in Q16.16.
pub const FX_ONE: i64 = 1 << FRAC_BITS;
/// Sentinel for -infinity scores (masked entries). Far enough from any real
/// score that `exp_q16` of any difference against it is exactly zero.
pub const FX_NEG_INF: i64 = i64::MIN / 4;

/// Piecewise-linear exponential table: `round(e^(-s/16) * 2^16)` for
/// `s = 0..=256`, covering exp over [-16, 0] in 256 segments.
const EXP_TABLE: [u32; 257] = [
    65536, 61565, 57835, 54331, 51039, 47947, 45042, 42313,
    39750, 37341, 35079, 32954, 30957, 29081, 27319, 25664,
    24109, 22649, 21276, 19987, 18776, 17639, 16570, 15566,
    14623, 13737, 12905, 12123, 11388, 10698, 10050, 9441,
    8869, 8332, 7827, 7353, 6907, 6489, 6096, 5726,
    5380, 5054, 4747, 4460, 4190, 3936, 3697, 3473,
    3263, 3065, 2879, 2705, 2541, 2387, 2243, 2107,
    1979, 1859, 1746, 1641, 1541, 1448, 1360, 1278,
    1200, 1128, 1059, 995, 935, 878, 825, 775,
    728, 684, 642, 604, 567, 533, 500, 470,
    442, 415, 390, 366, 344, 323, 303, 285,
    268, 252, 236, 222, 209, 196, 184, 173,
    162, 153, 143, 135, 127, 119, 112, 105,
    99, 93, 87, 82, 77, 72, 68, 64,
    60, 56, 53, 50, 47, 44, 41, 39,
    36, 34, 32, 30, 28, 27, 25, 23,
    22, 21, 19, 18, 17, 16, 15, 14,
    13, 13, 12, 11, 10, 10, 9, 9,
    8, 8, 7, 7, 6, 6, 6, 5,
    5, 5, 4, 4, 4, 4, 3, 3,
    3, 3, 3, 2, 2, 2, 2, 2,
    2, 2, 2, 1, 1, 1, 1, 1,
    1, 1, 1, 1, 1, 1, 1, 1,
    1, 1, 1, 1, 1, 0, 0, 0,
    0, 0, 0, 0, 0, 0, 0, 0,
    0, 0, 0, 0, 0, 0, 0, 0,
    0, 0, 0, 0, 0, 0, 0, 0,
    0, 0, 0, 0, 0, 0, 0, 0,
    0, 0, 0, 0, 0, 0, 0, 0,
    0, 0, 0, 0, 0, 0, 0, 0,
    0, 0, 0, 0, 0, 0, 0, 0,
    0, 0, 0, 0, 0, 0, 0, 0,
    0,
];

/// Reciprocal seed table: `round(2^16 / m)` at the midpoint of each of the
/// 256 segments of m in [1, 2).
const RECIP_TABLE: [u32; 256] = [
    65408, 65154, 64902, 64652, 64404, 64158, 63913, 63671,
    63430, 63191, 62954, 62719, 62485, 62253, 62023, 61795,
    61568, 61343, 61119, 60897, 60677, 60458, 60241, 60026,
    59812, 59599, 59388, 59179, 58971, 58764, 58559, 58356,
    58153, 57952, 57753, 57555, 57358, 57163, 56968, 56776,
    56584, 56394, 56205, 56017, 55831, 55646, 55462, 55279,
    55098, 54917, 54738, 54560, 54383, 54207, 54033, 53859,
    53687, 53516, 53346, 53177, 53009, 52842, 52676, 52511,
    52347, 52184, 52022, 51862, 51702, 51543, 51385, 51228,
    51072, 50917, 50763, 50610, 50458, 50306, 50156, 50007,
    49858, 49710, 49563, 49417, 49272, 49128, 48985, 48842,
    48700, 48559, 48419, 48280, 48141, 48003, 47867, 47730,
    47595, 47460, 47326, 47193, 47061, 46929, 46798, 46668,
    46539, 46410, 46282, 46155, 46028, 45902, 45777, 45652,
    45528, 45405, 45283, 45161, 45040, 44919, 44799, 44680,
    44561, 44443, 44326, 44209, 44093, 43977, 43862, 43748,
    43634, 43521, 43408, 43296, 43185, 43074, 42963, 42854,
    42744, 42636, 42528, 42420, 42313, 42207, 42101, 41996,
    41891, 41786, 41683, 41579, 41476, 41374, 41272, 41171,
    41070, 40970, 40870, 40771, 40672, 40574, 40476, 40378,
    40281, 40185, 40089, 39993, 39898, 39804, 39709, 39616,
    39522, 39429, 39337, 39245, 39153, 39062, 38971, 38881,
    38791, 38702, 38613, 38524, 38436, 38348, 38260, 38173,
    38087, 38000, 37915, 37829, 37744, 37659, 37575, 37491,
    37407, 37324, 37241, 37159, 37077, 36995, 36914, 36833,
    36752, 36672, 36592, 36512, 36433, 36354, 36275, 36197,
    36119, 36041, 35964, 35887, 35810, 35734, 35658, 35583,
    35507, 35432, 35358, 35283, 35209, 35136, 35062, 34989,
    34916, 34844, 34771, 34700, 34628, 34557, 34486, 34415,
    34344, 34274, 34204, 34135, 34065, 33996, 33928, 33859,
    33791, 33723, 33655, 33588, 33521, 33454, 33387, 33321,
    33255, 33189, 33124, 33059, 32994, 32929, 32864, 32800,
];

/// Round a real value to Q16.16 (ties to even), saturating at the i64 range.
pub fn fx_from_f64(v: f64) -> i64 {
    (v * 65536.0).round_ties_even() as i64
}

/// The real value a Q16.16 word represents.
pub fn fx_to_f64(v: i64) -> f64 {
    v as f64 / 65536.0
}

/// Q16.16 multiply, round to nearest.
#[inline]
pub fn fx_mul(a: i64, b: i64) -> i64 {
    (((a as i128 * b as i128) + (1 << 15)) >> 16) as i64
}

/// exp(x) for x in Q16.16, evaluated on a 256-segment piecewise-linear table
/// over [-16, 0]. Inputs above 0 clamp to 1.0, inputs at or below -16 give 0.
/// `exp_q16(0) == FX_ONE` exactly.
#[inline]
pub fn exp_q16(x: i64) -> i64 {
    if x >= 0 {
        return FX_ONE;
    }
    if x <= -(16 << FRAC_BITS) {
        return 0;
    }
    let t = -x; // in (0, 16) as Q16.16
    let seg = (t >> 12) as usize; // segment width 1/16 = 4096 fx units
    let frac = t & 0xfff;
    let y0 = EXP_TABLE[seg] as i64;
    let y1 = EXP_TABLE[seg + 1] as i64;
    y0 - (((y0 - y1) * frac + (1 << 11)) >> 12)
}

/// Precomputed normalized reciprocal of a positive Q16.16 value: one table
/// seed plus one Newton step, applied as a multiply at finalization time.
#[derive(Debug, Clone, Copy)]
pub struct FxRecip {
    /// 1/m in Q16.16 for the normalized mantissa m in [1, 2).
    mantissa: i64,
    /// b = m * 2^exp.
    exp: i32,
}

impl FxRecip {
    /// Build the reciprocal of `b` (must be > 0).
    pub fn new(b: i64) -> FxRecip {
        assert!(b > 0, "reciprocal of non-positive value");
        // Normalize b to m in [FX_ONE, 2*FX_ONE).
        let lz = b.leading_zeros() as i32;
        // Highest set bit position p: value is in [2^p, 2^(p+1)).
        let p = 63 - lz;
        let exp = p - FRAC_BITS as i32;
        let m = if exp >= 0 { b >> exp } else { b << -exp };
        let idx = ((m - FX_ONE) >> 8) as usize; // top 8 fraction bits
        let r0 = RECIP_TABLE[idx] as i64;
        // Newton: r1 = r0 * (2 - m * r0)
        let r1 = fx_mul(r0, 2 * FX_ONE - fx_mul(m, r0));
        FxRecip { mantissa: r1, exp }
    }

    /// a / b rounded to nearest, computed as a * (1/m) * 2^-exp.
    #[inline]
    pub fn mul(&self, a: i64) -> i64 {
        let shift = 16 + self.exp;
        let prod = a as i128 * self.mantissa as i128;
        if shift > 0 {
            ((prod + (1i128 << (shift - 1))) >> shift) as i64
        } else {
            (prod << -shift) as i64
        }
    }
}

/// Q16.16 division via the table/Newton reciprocal. `b` must be positive.
pub fn fx_div(a: i64, b: i64) -> i64 {
    FxRecip::new(b).mul(a)
}

/// Logistic sigmoid in Q16.16, evaluated from the exponential table.
pub fn sigmoid_q16(x: i64) -> i64 {
    if x >= 0 {
        // 1 / (1 + e^-x)
        fx_div(FX_ONE, FX_ONE + exp_q16(-x))
    } else {
        // e^x / (1 + e^x)
        let e = exp_q16(x);
        if e == 0 {
            return 0;
        }
        fx_div(e, FX_ONE + e)
    }
}

/// SiLU (x * sigmoid(x)) in Q16.16. Exactly zero at zero.
pub fn silu_q16(x: i64) -> i64 {
    fx_mul(x, sigmoid_q16(x))
}
