//! Fully parallel (FP) factorization.
//!
//! Every factor after the seed holds, for each target row, at most `S`
//! signed powers of two over the previous stage's outputs, so a row costs
//! at most `S - 1` additions and the rows of one stage are independent.
//! The previous stage's outputs are its row approximations followed by the
//! `k` raw inputs, which are carried along by single-term rows.
//!
//! Terms are chosen by discrete matching pursuit: in each of the `S` rounds
//! the codebook vector whose power-of-two coefficient (least-squares
//! coefficient rounded in the log domain) leaves the smallest residual is
//! taken. A stage row is only accepted if it beats the previous stage's
//! approximation of the same row; otherwise that approximation is passed
//! on unchanged, which keeps the SQNR non-decreasing in the factor count.

use ndarray::ArrayView2;

use super::{log_round_exponent, pow2, Diagnostics, FactorMatrix, PowTerm, SliceOutcome, StopRule, FP_FACTOR_CAP};
use crate::numerics::sqnr_from_energies;
use crate::par::{self, Parallelism};
use crate::{Error, Result};

struct RowStage {
    terms: Vec<PowTerm>,
    approx: Vec<f64>,
    err: f64,
    clamped: u64,
    improved: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy `S`-term approximation of `target` over `codebook`.
fn pursue(
    target: &[f64],
    codebook: &[Vec<f64>],
    norms: &[f64],
    terms_per_row: usize,
    range: (i32, i32),
) -> (Vec<PowTerm>, Vec<f64>, f64, u64) {
    let k = target.len();
    let mut approx = vec![0.0; k];
    let mut resid: Vec<f64> = target.to_vec();
    let mut err = dot(&resid, &resid);
    let mut terms: Vec<PowTerm> = Vec::with_capacity(terms_per_row);
    let mut clamped = 0;
    let mut trial = vec![0.0; k];
    for _ in 0..terms_per_row {
        if err == 0.0 {
            break;
        }
        let mut best: Option<(usize, i32, i8, f64, bool)> = None;
        for (j, c) in codebook.iter().enumerate() {
            if norms[j] == 0.0 || terms.iter().any(|t| t.source as usize == j) {
                continue;
            }
            let d = dot(&resid, c);
            if d == 0.0 {
                continue;
            }
            let (e, cl) = log_round_exponent(d / norms[j], range);
            let sign: i8 = if d > 0.0 { 1 } else { -1 };
            let q = sign as f64 * pow2(e);
            for (t, (r, x)) in trial.iter_mut().zip(resid.iter().zip(c)) {
                *t = r - q * x;
            }
            let e_new = dot(&trial, &trial);
            if best.is_none_or(|b| e_new < b.3) {
                best = Some((j, e, sign, e_new, cl));
            }
        }
        match best {
            Some((j, e, sign, e_new, cl)) if e_new < err => {
                let q = sign as f64 * pow2(e);
                for ((a, r), x) in approx.iter_mut().zip(resid.iter_mut()).zip(&codebook[j]) {
                    *a += q * x;
                    *r -= q * x;
                }
                err = e_new;
                clamped += cl as u64;
                terms.push(PowTerm::new(j, e, sign));
            }
            _ => break,
        }
    }
    // recompute from the accumulated approximation to avoid drift
    let err = sq_dist(target, &approx);
    (terms, approx, err, clamped)
}

/// Factor one `n x k` slice with at most `terms_per_row` terms per row.
pub(crate) fn decompose_fp(
    w: ArrayView2<f64>,
    terms_per_row: usize,
    stop: &StopRule,
    range: (i32, i32),
    mode: Parallelism,
) -> Result<SliceOutcome> {
    if terms_per_row < 2 {
        return Err(Error::Config("FP needs at least 2 terms per row".into()));
    }
    let (n, k) = w.dim();
    if k == 0 {
        return Err(Error::Shape("empty slice".into()));
    }
    let targets: Vec<Vec<f64>> = w.rows().into_iter().map(|r| r.to_vec()).collect();
    let signal: f64 = targets.iter().map(|t| dot(t, t)).sum();
    if signal == 0.0 {
        return Ok(SliceOutcome {
            factors: Vec::new(),
            diagnostics: Diagnostics {
                converged: true,
                ..Default::default()
            },
        });
    }
    let cap = stop.max_factors.unwrap_or(FP_FACTOR_CAP).max(1);
    let target_db = stop.target_db;

    let basis: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut v = vec![0.0; k];
            v[i] = 1.0;
            v
        })
        .collect();
    let mut codebook = basis.clone();
    let mut approx: Vec<Vec<f64>> = vec![vec![0.0; k]; n];
    let mut errs: Vec<f64> = targets.iter().map(|t| dot(t, t)).collect();
    let mut factors = vec![FactorMatrix::identity(k)];
    let mut diag = Diagnostics::default();

    for p in 1..=cap {
        let norms: Vec<f64> = codebook.iter().map(|c| dot(c, c)).collect();
        let first = p == 1;
        let stage: Vec<RowStage> = par::map_range(mode, n, |i| {
            let prev_err = errs[i];
            let pass = |err: f64| RowStage {
                terms: if first { Vec::new() } else { vec![PowTerm::new(i, 0, 1)] },
                approx: approx[i].clone(),
                err,
                clamped: 0,
                improved: false,
            };
            if prev_err == 0.0 {
                return pass(0.0);
            }
            let (terms, a, e, cl) = pursue(&targets[i], &codebook, &norms, terms_per_row, range);
            if e < prev_err {
                RowStage {
                    terms,
                    approx: a,
                    err: e,
                    clamped: cl,
                    improved: true,
                }
            } else {
                pass(prev_err)
            }
        });

        let improved = stage.iter().any(|r| r.improved);
        let noise: f64 = stage.iter().map(|r| r.err).sum();
        let sqnr = sqnr_from_energies(signal, noise);
        let reached = target_db.is_some_and(|t| sqnr >= t);
        let last = reached || p == cap || !improved;

        let in_dim = codebook.len();
        let mut rows: Vec<Vec<PowTerm>> = Vec::with_capacity(n + k);
        for r in &stage {
            diag.clamped_exponents += r.clamped;
            rows.push(r.terms.clone());
        }
        if !last {
            // carry the raw inputs forward
            let raw_offset = if first { 0 } else { n };
            rows.extend((0..k).map(|j| vec![PowTerm::new(raw_offset + j, 0, 1)]));
        }
        factors.push(FactorMatrix {
            in_dim,
            carry: false,
            rows,
        });
        for (i, r) in stage.into_iter().enumerate() {
            approx[i] = r.approx;
            errs[i] = r.err;
        }
        if last {
            diag.converged = match target_db {
                Some(t) => sqnr >= t,
                None => true,
            };
            break;
        }
        codebook = approx.iter().cloned().chain(basis.iter().cloned()).collect();
    }

    Ok(SliceOutcome {
        factors,
        diagnostics: diag,
    })
}
