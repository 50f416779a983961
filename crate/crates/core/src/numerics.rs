//! Fixed-point quantization, canonically-signed-digit (CSD) encoding and the
//! addition/shift cost model used as the uncompressed baseline.

use std::fmt;
use std::ops::{Add, AddAssign};

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fixed-point grid: `frac_bits` fractional bits and `int_bits` magnitude
/// bits, so representable magnitudes are `< 2^int_bits` in steps of
/// `2^-frac_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub frac_bits: u32,
    pub int_bits: u32,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            frac_bits: 10,
            int_bits: 6,
        }
    }
}

impl FixedPointConfig {
    pub const MAX_TOTAL_BITS: u32 = 62;

    pub fn new(frac_bits: u32, int_bits: u32) -> Result<Self> {
        let cfg = FixedPointConfig {
            frac_bits,
            int_bits,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.int_bits < 1 {
            return Err(Error::Config("int_bits must be at least 1".into()));
        }
        if self.frac_bits + self.int_bits > Self::MAX_TOTAL_BITS {
            return Err(Error::Config(format!(
                "frac_bits + int_bits = {} exceeds {}",
                self.frac_bits + self.int_bits,
                Self::MAX_TOTAL_BITS
            )));
        }
        Ok(())
    }

    /// Grid step `2^-frac_bits`.
    pub fn step(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    /// Largest representable integer mantissa (`2^(int+frac) - 1`).
    pub fn max_mantissa(&self) -> i64 {
        (1i64 << (self.int_bits + self.frac_bits)) - 1
    }
}

/// Result of snapping a value onto the fixed-point grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantized {
    pub value: f64,
    /// Integer mantissa, `value = mantissa * 2^-frac_bits`.
    pub mantissa: i64,
    /// Set when `|v|` was out of range and the result was clamped.
    pub saturated: bool,
}

/// Round `v` to the nearest multiple of `2^-frac_bits`, ties away from zero.
/// Out-of-range inputs saturate to the largest representable magnitude.
pub fn quantize_fixed(v: f64, cfg: FixedPointConfig) -> Quantized {
    let max = cfg.max_mantissa();
    if v.is_nan() {
        return Quantized {
            value: 0.0,
            mantissa: 0,
            saturated: true,
        };
    }
    let scaled = v * (cfg.frac_bits as f64).exp2();
    // f64::round is ties-away-from-zero
    let r = scaled.round();
    let (mantissa, saturated) = if r.abs() > max as f64 {
        (max * r.signum() as i64, true)
    } else {
        (r as i64, false)
    };
    Quantized {
        value: mantissa as f64 * cfg.step(),
        mantissa,
        saturated,
    }
}

/// One nonzero signed digit `sign * 2^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsdDigit {
    pub exponent: i32,
    pub sign: i8,
}

/// Canonically signed digit form; digits sorted by strictly decreasing
/// exponent with no two adjacent exponents.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CsdForm {
    pub digits: Vec<CsdDigit>,
}

impl CsdForm {
    pub fn weight(&self) -> usize {
        self.digits.len()
    }

    pub fn decode(&self) -> f64 {
        self.digits
            .iter()
            .map(|d| d.sign as f64 * (d.exponent as f64).exp2())
            .sum()
    }

    /// Checks ordering and non-adjacency.
    pub fn is_canonical(&self) -> bool {
        self.digits
            .windows(2)
            .all(|w| w[0].exponent > w[1].exponent + 1)
            && self.digits.iter().all(|d| d.sign == 1 || d.sign == -1)
    }
}

impl fmt::Display for CsdForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.digits.is_empty() {
            return write!(f, "0");
        }
        for (i, d) in self.digits.iter().enumerate() {
            let s = if d.sign > 0 { '+' } else { '-' };
            if i == 0 && d.sign > 0 {
                write!(f, "2^{}", d.exponent)?;
            } else {
                write!(f, "{s}2^{}", d.exponent)?;
            }
        }
        Ok(())
    }
}

/// Non-adjacent form of an integer; digits returned with ascending position.
fn naf(mut m: i64) -> Vec<(u32, i8)> {
    let mut out = Vec::new();
    let mut pos = 0u32;
    while m != 0 {
        if m & 1 != 0 {
            // m mod 4 == 1 -> +1, m mod 4 == 3 -> -1
            let d: i64 = 2 - m.rem_euclid(4);
            out.push((pos, d as i8));
            m -= d;
        }
        m /= 2;
        pos += 1;
    }
    out
}

/// CSD encoding of a value on the grid of `cfg`. Values off the grid are
/// snapped first.
pub fn csd_encode(v: f64, cfg: FixedPointConfig) -> CsdForm {
    let q = quantize_fixed(v, cfg);
    csd_encode_mantissa(q.mantissa, cfg.frac_bits)
}

pub(crate) fn csd_encode_mantissa(mantissa: i64, frac_bits: u32) -> CsdForm {
    let mut digits: Vec<CsdDigit> = naf(mantissa)
        .into_iter()
        .map(|(pos, sign)| CsdDigit {
            exponent: pos as i32 - frac_bits as i32,
            sign,
        })
        .collect();
    digits.reverse();
    CsdForm { digits }
}

/// Number of nonzero CSD digits of `v` after quantization.
pub fn csd_weight(v: f64, cfg: FixedPointConfig) -> u32 {
    let m = quantize_fixed(v, cfg).mantissa;
    // NAF weight without materializing the digits
    let mut m = m;
    let mut w = 0;
    while m != 0 {
        if m & 1 != 0 {
            let d = 2 - m.rem_euclid(4);
            m -= d;
            w += 1;
        }
        m /= 2;
    }
    w
}

/// Additions (subtractions count the same) and nonzero shift terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub adds: u64,
    pub shifts: u64,
}

impl Add for CostReport {
    type Output = CostReport;
    fn add(self, rhs: Self) -> Self {
        CostReport {
            adds: self.adds + rhs.adds,
            shifts: self.shifts + rhs.shifts,
        }
    }
}

impl AddAssign for CostReport {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for CostReport {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(CostReport::default(), |a, b| a + b)
    }
}

/// CSD cost of one output row: every nonzero digit is one shift term, and
/// `terms - 1` additions combine them.
pub fn csd_row_cost(row: ArrayView1<f64>, cfg: FixedPointConfig) -> CostReport {
    let digits: u64 = row.iter().map(|&v| csd_weight(v, cfg) as u64).sum();
    CostReport {
        adds: digits.saturating_sub(1),
        shifts: digits,
    }
}

/// CSD cost of computing `W x` with every entry quantized to `cfg`.
pub fn csd_matrix_cost(w: ArrayView2<f64>, cfg: FixedPointConfig) -> CostReport {
    w.rows().into_iter().map(|r| csd_row_cost(r, cfg)).sum()
}

/// Entrywise quantization of a matrix.
pub fn quantize_matrix(w: ArrayView2<f64>, cfg: FixedPointConfig) -> ndarray::Array2<f64> {
    w.mapv(|v| quantize_fixed(v, cfg).value)
}

/// Signal-to-quantization-noise ratio `10 log10(|W|_F^2 / |W - What|_F^2)`
/// in dB. Returns `+inf` when the two matrices agree exactly.
pub fn sqnr_db(w: ArrayView2<f64>, w_hat: ArrayView2<f64>) -> Result<f64> {
    if w.dim() != w_hat.dim() {
        return Err(Error::Shape(format!(
            "sqnr_db: {:?} vs {:?}",
            w.dim(),
            w_hat.dim()
        )));
    }
    // logical order, so the result does not depend on memory layout
    let (mut signal, mut noise) = (0.0, 0.0);
    for (&a, &b) in w.iter().zip(w_hat.iter()) {
        signal += a * a;
        noise += (a - b) * (a - b);
    }
    if signal == 0.0 {
        return Err(Error::Undefined("sqnr_db of an all-zero matrix".into()));
    }
    Ok(sqnr_from_energies(signal, noise))
}

pub(crate) fn sqnr_from_energies(signal: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / noise).log10()
    }
}
