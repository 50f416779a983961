//! Linear computation coding: approximate a constant matrix by a product of
//! sparse factors whose nonzero entries are signed powers of two, so that
//! `W x` needs only shifts and additions.
//!
//! Wide matrices are cut into column slices ([`slice_matrix`]); each slice
//! is factored independently by either the fully parallel ([`fp`]) or the
//! fully sequential ([`fs`]) algorithm. Slice outputs are summed, which
//! costs `slices - 1` additions per output row.
//!
//! A factor chain always starts with the seed factor `F_0 = I_k`, stored as
//! a carry factor without rows. Carry factors forward all of their inputs
//! unchanged and append their own rows after them; the fully sequential
//! algorithm uses them to grow its codebook one level at a time.

pub mod fp;
pub mod fs;
pub mod program;
pub mod serial;

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::numerics::sqnr_db;
use crate::par::{self, Parallelism};
use crate::{Error, Result};

pub use program::{execute_program, to_adder_program, AdderProgram};

/// Default range for every shift exponent.
pub const DEFAULT_EXP_RANGE: (i32, i32) = (-16, 15);
/// Hard cap on FP factors when stopping by SQNR.
pub const FP_FACTOR_CAP: usize = 32;

/// `sign * 2^exponent * input[source]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PowTerm {
    pub source: u32,
    pub exponent: i32,
    pub sign: i8,
}

impl PowTerm {
    pub fn new(source: usize, exponent: i32, sign: i8) -> Self {
        PowTerm {
            source: source as u32,
            exponent,
            sign,
        }
    }

    pub fn coeff(&self) -> f64 {
        self.sign as f64 * pow2(self.exponent)
    }
}

#[inline]
pub(crate) fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// One stage of a factor chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorMatrix {
    pub in_dim: usize,
    /// Outputs `0..in_dim` copy the inputs; rows follow after them.
    pub carry: bool,
    pub rows: Vec<Vec<PowTerm>>,
}

impl FactorMatrix {
    pub fn identity(k: usize) -> Self {
        FactorMatrix {
            in_dim: k,
            carry: true,
            rows: Vec::new(),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.rows.len() + if self.carry { self.in_dim } else { 0 }
    }

    fn row_offset(&self) -> usize {
        if self.carry {
            self.in_dim
        } else {
            0
        }
    }

    /// Dense `out_dim x in_dim` form.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.out_dim(), self.in_dim));
        if self.carry {
            for i in 0..self.in_dim {
                m[(i, i)] = 1.0;
            }
        }
        let off = self.row_offset();
        for (r, terms) in self.rows.iter().enumerate() {
            for t in terms {
                m[(off + r, t.source as usize)] += t.coeff();
            }
        }
        m
    }

    pub fn validate(&self, max_terms: Option<usize>) -> Result<()> {
        for (r, terms) in self.rows.iter().enumerate() {
            if let Some(s) = max_terms {
                if terms.len() > s {
                    return Err(Error::Shape(format!("row {r} has {} > {s} terms", terms.len())));
                }
            }
            for (a, t) in terms.iter().enumerate() {
                if t.source as usize >= self.in_dim {
                    return Err(Error::Shape(format!(
                        "row {r}: source {} out of range {}",
                        t.source, self.in_dim
                    )));
                }
                if t.sign != 1 && t.sign != -1 {
                    return Err(Error::Shape(format!("row {r}: sign {}", t.sign)));
                }
                if terms[..a].iter().any(|u| u.source == t.source) {
                    return Err(Error::Shape(format!("row {r}: repeated source {}", t.source)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Algorithm {
    /// Fully parallel: at most `terms` signed powers of two per row.
    Fp { terms: usize },
    /// Fully sequential: one codeword (one addition) per step.
    Fs,
}

/// Factor chain for one column slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceDecomposition {
    pub col_start: usize,
    pub col_len: usize,
    /// `F_0, F_1, ...`; empty for an all-zero slice.
    pub factors: Vec<FactorMatrix>,
}

impl SliceDecomposition {
    pub fn columns(&self) -> Range<usize> {
        self.col_start..self.col_start + self.col_len
    }

    /// Dense product `F_P ... F_0` (`rows x col_len`).
    pub fn product(&self, rows: usize) -> Array2<f64> {
        if self.factors.is_empty() {
            return Array2::zeros((rows, self.col_len));
        }
        let k = self.col_len;
        // current stage outputs as rows over the slice inputs
        let mut cur: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let mut v = vec![0.0; k];
                v[i] = 1.0;
                v
            })
            .collect();
        for f in &self.factors {
            let mut next: Vec<Vec<f64>> = if f.carry { cur.clone() } else { Vec::new() };
            for terms in &f.rows {
                let mut v = vec![0.0; k];
                for t in terms {
                    let c = t.coeff();
                    for (a, b) in v.iter_mut().zip(&cur[t.source as usize]) {
                        *a += c * b;
                    }
                }
                next.push(v);
            }
            cur = next;
        }
        let mut out = Array2::zeros((rows, k));
        for (i, v) in cur.iter().enumerate().take(rows) {
            for (j, x) in v.iter().enumerate() {
                out[(i, j)] = *x;
            }
        }
        out
    }

    fn validate(&self, rows: usize, max_terms: Option<usize>) -> Result<()> {
        let Some(first) = self.factors.first() else {
            return Ok(());
        };
        if first.in_dim != self.col_len {
            return Err(Error::Shape("first factor does not match slice width".into()));
        }
        for (p, w) in self.factors.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim {
                return Err(Error::Shape(format!(
                    "factor {p} out_dim {} != factor {} in_dim {}",
                    w[0].out_dim(),
                    p + 1,
                    w[1].in_dim
                )));
            }
        }
        for (p, f) in self.factors.iter().enumerate() {
            // the seed factor and FS carry stages are exempt from the S bound
            let bound = if p == 0 { None } else { max_terms };
            f.validate(bound)?;
        }
        let last = self.factors.last().unwrap();
        if last.out_dim() != rows {
            return Err(Error::Shape(format!(
                "final factor has {} outputs, expected {rows}",
                last.out_dim()
            )));
        }
        Ok(())
    }

    /// Per-factor liveness: `live[p][o]` is set when output `o` of factor
    /// `p` contributes to a final output. Outputs that are identically zero
    /// are never live.
    pub(crate) fn liveness(&self) -> Vec<Vec<bool>> {
        let n_f = self.factors.len();
        let zero = self.zero_outputs();
        let mut live: Vec<Vec<bool>> = self.factors.iter().map(|f| vec![false; f.out_dim()]).collect();
        if n_f == 0 {
            return live;
        }
        for (o, l) in live[n_f - 1].iter_mut().enumerate() {
            *l = !zero[n_f - 1][o];
        }
        for p in (1..n_f).rev() {
            let f = &self.factors[p];
            let off = f.row_offset();
            let (before, after) = live.split_at_mut(p);
            let prev = &mut before[p - 1];
            for (o, &l) in after[0].iter().enumerate() {
                if !l {
                    continue;
                }
                if o < off {
                    prev[o] = true;
                } else {
                    for t in &f.rows[o - off] {
                        if !zero[p - 1][t.source as usize] {
                            prev[t.source as usize] = true;
                        }
                    }
                }
            }
        }
        live
    }

    /// `zero[p][o]` is set when output `o` of factor `p` is structurally zero.
    pub(crate) fn zero_outputs(&self) -> Vec<Vec<bool>> {
        let mut out: Vec<Vec<bool>> = Vec::with_capacity(self.factors.len());
        let mut prev = vec![false; self.col_len];
        for f in &self.factors {
            let mut z = if f.carry { prev.clone() } else { Vec::new() };
            for terms in &f.rows {
                z.push(terms.iter().all(|t| prev[t.source as usize]));
            }
            prev = z.clone();
            out.push(z);
        }
        out
    }

    /// Additions for the live part of the chain (excludes cross-slice sums).
    pub fn chain_additions(&self) -> u64 {
        let live = self.liveness();
        let zero = self.zero_outputs();
        let mut adds = 0u64;
        for (p, f) in self.factors.iter().enumerate().skip(1) {
            let off = f.row_offset();
            for (r, terms) in f.rows.iter().enumerate() {
                if !live[p][off + r] {
                    continue;
                }
                let nz = terms.iter().filter(|t| !zero[p - 1][t.source as usize]).count() as u64;
                adds += nz.saturating_sub(1);
            }
        }
        adds
    }

    /// Live nonzero shift terms, excluding exponent-0 single-term wires.
    pub fn chain_shifts(&self) -> u64 {
        let live = self.liveness();
        let zero = self.zero_outputs();
        let mut shifts = 0u64;
        for (p, f) in self.factors.iter().enumerate().skip(1) {
            let off = f.row_offset();
            for (r, terms) in f.rows.iter().enumerate() {
                if !live[p][off + r] {
                    continue;
                }
                let nz: Vec<_> = terms.iter().filter(|t| !zero[p - 1][t.source as usize]).collect();
                shifts += if nz.len() == 1 {
                    (nz[0].exponent != 0) as u64
                } else {
                    nz.len() as u64
                };
            }
        }
        shifts
    }

    /// Whether final output `i` is structurally nonzero.
    pub(crate) fn output_nonzero(&self) -> Vec<bool> {
        match self.zero_outputs().last() {
            Some(z) => z.iter().map(|&b| !b).collect(),
            None => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Exponents that hit the configured range and were clamped.
    pub clamped_exponents: u64,
    /// False when the stopping target was not reached (factor cap, budget
    /// exhausted or stalled greedy search).
    pub converged: bool,
    /// FS codewords created (one addition each before dead-code removal).
    pub steps: u64,
}

/// A full decomposition of an `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LccDecomposition {
    pub rows: usize,
    pub cols: usize,
    pub slice_width: usize,
    pub algorithm: Algorithm,
    pub slices: Vec<SliceDecomposition>,
    pub achieved_sqnr: f64,
    pub diagnostics: Diagnostics,
}

impl LccDecomposition {
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for s in &self.slices {
            if s.col_start != next {
                return Err(Error::Shape("slice column ranges do not partition the matrix".into()));
            }
            next += s.col_len;
            let bound = match self.algorithm {
                Algorithm::Fp { terms } => Some(terms),
                Algorithm::Fs => None,
            };
            s.validate(self.rows, bound)?;
        }
        if next != self.cols {
            return Err(Error::Shape("slice column ranges do not cover the matrix".into()));
        }
        Ok(())
    }

    /// Identity decomposition of `I_k` (one seed factor).
    pub fn identity(k: usize) -> Self {
        LccDecomposition {
            rows: k,
            cols: k,
            slice_width: k,
            algorithm: Algorithm::Fp { terms: 2 },
            slices: vec![SliceDecomposition {
                col_start: 0,
                col_len: k,
                factors: vec![FactorMatrix::identity(k)],
            }],
            achieved_sqnr: f64::INFINITY,
            diagnostics: Diagnostics {
                converged: true,
                ..Default::default()
            },
        }
    }
}

/// Split `w` into column slices of `width` (the last may be narrower).
pub fn slice_matrix(w: ArrayView2<'_, f64>, width: usize) -> Vec<(Range<usize>, ArrayView2<'_, f64>)> {
    let width = width.max(1);
    let k = w.ncols();
    (0..k)
        .step_by(width)
        .map(move |start| {
            let end = (start + width).min(k);
            (start..end, w.slice_move(s![.., start..end]))
        })
        .collect()
}

/// `max(1, floor(log2 n))`.
pub fn default_slice_width(n: usize) -> usize {
    if n <= 1 {
        1
    } else {
        (usize::BITS - 1 - n.leading_zeros()).max(1) as usize
    }
}

/// Dense reconstruction `[F_{1,P}...F_{1,0} | F_{2,P}...F_{2,0} | ...]`.
pub fn reconstruct(d: &LccDecomposition) -> Array2<f64> {
    let mut out = Array2::zeros((d.rows, d.cols));
    for s in &d.slices {
        out.slice_mut(s![.., s.columns()]).assign(&s.product(d.rows));
    }
    out
}

/// Additions needed to evaluate the decomposition: live factor rows plus
/// the sums across slices.
pub fn count_additions(d: &LccDecomposition) -> u64 {
    let chain: u64 = d.slices.iter().map(|s| s.chain_additions()).sum();
    let mut per_row = vec![0u64; d.rows];
    for s in &d.slices {
        for (i, nz) in s.output_nonzero().into_iter().enumerate() {
            per_row[i] += nz as u64;
        }
    }
    chain + per_row.into_iter().map(|c| c.saturating_sub(1)).sum::<u64>()
}

pub fn count_shifts(d: &LccDecomposition) -> u64 {
    d.slices.iter().map(|s| s.chain_shifts()).sum()
}

/// Stopping rule for the decomposition of a whole matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    /// FP: number of factors after the seed. Ignored by FS.
    pub max_factors: Option<usize>,
    /// Target SQNR in dB; `f64::INFINITY` asks for an exact decomposition.
    pub target_db: Option<f64>,
    /// FS: maximum number of additions per slice.
    pub budget: Option<usize>,
}

impl StopRule {
    pub fn factors(p: usize) -> Self {
        StopRule {
            max_factors: Some(p),
            target_db: None,
            budget: None,
        }
    }

    pub fn target(db: f64) -> Self {
        StopRule {
            max_factors: None,
            target_db: Some(db),
            budget: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LccConfig {
    pub algorithm: Algorithm,
    /// `None` picks [`default_slice_width`] of the row count.
    pub slice_width: Option<usize>,
    pub stop: StopRule,
    pub exp_range: (i32, i32),
    /// FS: size of the candidate set searched for codeword pairs.
    pub fs_candidates: usize,
    pub parallelism: Parallelism,
}

impl Default for LccConfig {
    fn default() -> Self {
        LccConfig {
            algorithm: Algorithm::Fs,
            slice_width: None,
            stop: StopRule::target(f64::INFINITY),
            exp_range: DEFAULT_EXP_RANGE,
            fs_candidates: 64,
            parallelism: Parallelism::default(),
        }
    }
}

/// Result of factoring one slice.
#[derive(Debug, Clone)]
pub(crate) struct SliceOutcome {
    pub factors: Vec<FactorMatrix>,
    pub diagnostics: Diagnostics,
}

/// Slice `w` and factor every slice with the configured algorithm.
pub fn decompose(w: ArrayView2<f64>, cfg: &LccConfig) -> Result<LccDecomposition> {
    let (n, k) = w.dim();
    if let (None, None) = (cfg.stop.max_factors, cfg.stop.target_db) {
        if matches!(cfg.algorithm, Algorithm::Fp { .. }) {
            return Err(Error::Config("FP needs max_factors or target_db".into()));
        }
    }
    if cfg.exp_range.0 > cfg.exp_range.1 {
        return Err(Error::Config("empty exponent range".into()));
    }
    let width = cfg.slice_width.unwrap_or_else(|| default_slice_width(n));
    if width == 0 {
        return Err(Error::Config("slice width must be at least 1".into()));
    }
    let slices = slice_matrix(w, width);
    let outcomes: Vec<Result<SliceOutcome>> = par::map_slice(cfg.parallelism, &slices, |(_, sub)| {
        decompose_slice(sub.view(), cfg)
    });
    let mut diag = Diagnostics {
        converged: true,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(slices.len());
    for ((range, _), o) in slices.iter().zip(outcomes) {
        let o = o?;
        diag.clamped_exponents += o.diagnostics.clamped_exponents;
        diag.converged &= o.diagnostics.converged;
        diag.steps += o.diagnostics.steps;
        out.push(SliceDecomposition {
            col_start: range.start,
            col_len: range.len(),
            factors: o.factors,
        });
    }
    let mut d = LccDecomposition {
        rows: n,
        cols: k,
        slice_width: width,
        algorithm: cfg.algorithm,
        slices: out,
        achieved_sqnr: f64::INFINITY,
        diagnostics: diag,
    };
    d.achieved_sqnr = achieved_sqnr(w, &d);
    Ok(d)
}

pub(crate) fn decompose_slice(w: ArrayView2<f64>, cfg: &LccConfig) -> Result<SliceOutcome> {
    match cfg.algorithm {
        Algorithm::Fp { terms } => fp::decompose_fp(w, terms, &cfg.stop, cfg.exp_range, cfg.parallelism),
        Algorithm::Fs => fs::decompose_fs(
            w,
            cfg.stop.target_db.unwrap_or(f64::INFINITY),
            cfg.stop.budget,
            cfg.fs_candidates,
            cfg.exp_range,
        ),
    }
}

fn achieved_sqnr(w: ArrayView2<f64>, d: &LccDecomposition) -> f64 {
    let r = reconstruct(d);
    // an all-zero matrix is reproduced exactly by the empty chains
    sqnr_db(w, r.view()).unwrap_or(f64::INFINITY)
}

/// Round `|alpha|` to a power of two in the log domain, ties toward the
/// smaller exponent, clamped to `range`. Returns `(exponent, clamped)`.
pub(crate) fn log_round_exponent(alpha: f64, range: (i32, i32)) -> (i32, bool) {
    let l = alpha.abs().log2();
    let e = (l - 0.5).ceil();
    clamp_exp(e, range)
}

pub(crate) fn clamp_exp(e: f64, range: (i32, i32)) -> (i32, bool) {
    if e < range.0 as f64 {
        (range.0, true)
    } else if e > range.1 as f64 {
        (range.1, true)
    } else {
        (e as i32, false)
    }
}
