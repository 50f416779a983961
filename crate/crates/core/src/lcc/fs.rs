//! Fully sequential (FS) factorization.
//!
//! A codebook starts with the `k` canonical basis vectors. Each step spends
//! one addition to append a codeword `±2^a c_i ± 2^b c_j`. A target row is
//! served by a single codeword times a free signed power of two, so it is
//! satisfied once that scaled codeword is within the target SQNR.
//!
//! The step always works on the row with the largest relative residual. It
//! searches codeword pairs drawn from a candidate set (the row's current
//! codeword plus the codewords most correlated with the residual and with
//! the row itself), fits both coefficients by least squares, rounds them to
//! powers of two and keeps the pair with the smallest remaining error. The
//! refinement `current ± 2^b c_j` is also tried against every codeword.
//!
//! The resulting DAG is emitted as a chain of carry factors, one per DAG
//! level, followed by a selection factor with one term per output row.

use ndarray::ArrayView2;

use super::{clamp_exp, pow2, Diagnostics, FactorMatrix, PowTerm, SliceOutcome};
use crate::Result;

/// Additions allowed per row when no explicit budget is given.
const DEFAULT_STEPS_PER_ROW: usize = 64;

#[derive(Debug, Clone, Copy)]
struct Coef {
    exp: i32,
    sign: i8,
}

impl Coef {
    fn value(self) -> f64 {
        self.sign as f64 * pow2(self.exp)
    }
}

#[derive(Debug, Clone, Copy)]
struct Codeword {
    a: usize,
    ca: Coef,
    b: usize,
    cb: Coef,
}

#[derive(Debug, Clone, Copy)]
struct RowFit {
    cw: usize,
    coef: Coef,
}

struct State {
    k: usize,
    range: (i32, i32),
    /// Flat codebook, `k` values per codeword.
    book: Vec<f64>,
    norms: Vec<f64>,
    defs: Vec<Option<Codeword>>,
    levels: Vec<u32>,
    clamped: u64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Candidate power-of-two coefficients around `alpha`: the two exponents
/// bracketing `log2|alpha|`, clamped.
fn pow2_candidates(alpha: f64, range: (i32, i32)) -> [(Coef, bool); 2] {
    let sign: i8 = if alpha >= 0.0 { 1 } else { -1 };
    let lo = alpha.abs().log2().floor();
    let (e0, c0) = clamp_exp(lo, range);
    let (e1, c1) = clamp_exp(lo + 1.0, range);
    [(Coef { exp: e0, sign }, c0), (Coef { exp: e1, sign }, c1)]
}

impl State {
    fn new(k: usize, range: (i32, i32)) -> Self {
        let mut book = vec![0.0; k * k];
        for i in 0..k {
            book[i * k + i] = 1.0;
        }
        State {
            k,
            range,
            book,
            norms: vec![1.0; k],
            defs: vec![None; k],
            levels: vec![0; k],
            clamped: 0,
        }
    }

    fn len(&self) -> usize {
        self.norms.len()
    }

    fn cw(&self, i: usize) -> &[f64] {
        &self.book[i * self.k..(i + 1) * self.k]
    }

    /// Best `±2^e * c` approximation of `w`, with its squared error.
    fn fit_scaled(&self, w: &[f64], cw: usize) -> Option<(RowFit, f64, bool)> {
        let c = self.cw(cw);
        let n = self.norms[cw];
        if n == 0.0 {
            return None;
        }
        let d = dot(w, c);
        if d == 0.0 {
            return None;
        }
        let mut best: Option<(RowFit, f64, bool)> = None;
        for (coef, cl) in pow2_candidates(d / n, self.range) {
            let q = coef.value();
            let err: f64 = w.iter().zip(c).map(|(x, y)| (x - q * y) * (x - q * y)).sum();
            if best.as_ref().is_none_or(|b| err < b.1) {
                best = Some((RowFit { cw, coef }, err, cl));
            }
        }
        best
    }

    fn push(&mut self, def: Codeword) -> usize {
        let k = self.k;
        let (qa, qb) = (def.ca.value(), def.cb.value());
        let mut v = vec![0.0; k];
        for (t, v) in v.iter_mut().enumerate() {
            *v = qa * self.book[def.a * k + t] + qb * self.book[def.b * k + t];
        }
        let id = self.len();
        self.norms.push(dot(&v, &v));
        self.book.extend_from_slice(&v);
        self.levels.push(1 + self.levels[def.a].max(self.levels[def.b]));
        self.defs.push(Some(def));
        id
    }
}

struct Pair {
    def: Codeword,
    err: f64,
    clamped: u64,
}

/// Search for the codeword pair that best approximates `w`.
fn search_pair(st: &State, w: &[f64], fit: RowFit, n_cand: usize) -> Option<Pair> {
    let m = st.len();
    let wn2 = dot(w, w);
    let qm = fit.coef.value();
    let resid: Vec<f64> = w.iter().zip(st.cw(fit.cw)).map(|(x, y)| x - qm * y).collect();
    let rn2 = dot(&resid, &resid);

    let mut wdots = vec![0.0; m];
    let mut rdots = vec![0.0; m];
    for j in 0..m {
        let c = st.cw(j);
        wdots[j] = dot(w, c);
        rdots[j] = dot(&resid, c);
    }

    let mut best: Option<Pair> = None;
    let mut consider = |def: Codeword, err: f64, clamped: u64| {
        if best.as_ref().is_none_or(|b| err < b.err) {
            best = Some(Pair { def, err, clamped });
        }
    };

    // refinement of the current codeword by every other codeword
    for j in 0..m {
        if j == fit.cw || st.norms[j] == 0.0 || rdots[j] == 0.0 {
            continue;
        }
        let nj = st.norms[j];
        for (cb, cl) in pow2_candidates(rdots[j] / nj, st.range) {
            let q = cb.value();
            let err = rn2 - 2.0 * q * rdots[j] + q * q * nj;
            consider(
                Codeword {
                    a: fit.cw,
                    ca: fit.coef,
                    b: j,
                    cb,
                },
                err,
                cl as u64,
            );
        }
    }

    // candidate set for the joint pair search
    let rank = |scores: &[f64], take: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..m).filter(|&j| st.norms[j] > 0.0).collect();
        let key = |j: usize| scores[j].abs() / st.norms[j].sqrt();
        if idx.len() > take {
            idx.select_nth_unstable_by(take, |&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
            idx.truncate(take);
        }
        idx.sort_unstable();
        idx
    };
    let mut cand = vec![fit.cw];
    cand.extend(rank(&rdots, n_cand));
    cand.extend(rank(&wdots, (n_cand / 4).max(1)));
    cand.sort_unstable();
    cand.dedup();

    let nc = cand.len();
    let mut gram = vec![0.0; nc * nc];
    for a in 0..nc {
        for b in a..nc {
            let g = dot(st.cw(cand[a]), st.cw(cand[b]));
            gram[a * nc + b] = g;
            gram[b * nc + a] = g;
        }
    }
    for ia in 0..nc {
        let (a, gaa, ya) = (cand[ia], gram[ia * nc + ia], wdots[cand[ia]]);
        for ib in ia + 1..nc {
            let (b, gbb, yb) = (cand[ib], gram[ib * nc + ib], wdots[cand[ib]]);
            let gab = gram[ia * nc + ib];
            let det = gaa * gbb - gab * gab;
            if det <= 1e-12 * gaa * gbb {
                continue;
            }
            let alpha = (ya * gbb - yb * gab) / det;
            let beta = (yb * gaa - ya * gab) / det;
            let err_of = |qa: f64, qb: f64| {
                wn2 - 2.0 * qa * ya - 2.0 * qb * yb + qa * qa * gaa + qb * qb * gbb + 2.0 * qa * qb * gab
            };
            // round one coefficient, refit the other, round it too
            if alpha != 0.0 {
                for (ca, cla) in pow2_candidates(alpha, st.range) {
                    let qa = ca.value();
                    let bfit = (yb - qa * gab) / gbb;
                    if bfit == 0.0 {
                        continue;
                    }
                    for (cb, clb) in pow2_candidates(bfit, st.range) {
                        let err = err_of(qa, cb.value());
                        consider(Codeword { a, ca, b, cb }, err, cla as u64 + clb as u64);
                    }
                }
            }
            if beta != 0.0 {
                for (cb, clb) in pow2_candidates(beta, st.range) {
                    let qb = cb.value();
                    let afit = (ya - qb * gab) / gaa;
                    if afit == 0.0 {
                        continue;
                    }
                    for (ca, cla) in pow2_candidates(afit, st.range) {
                        let err = err_of(ca.value(), qb);
                        consider(Codeword { a, ca, b, cb }, err, cla as u64 + clb as u64);
                    }
                }
            }
        }
    }
    best
}

/// Factor one `n x k` slice until every row reaches `target_db`, or the
/// addition budget runs out.
pub(crate) fn decompose_fs(
    w: ArrayView2<f64>,
    target_db: f64,
    budget: Option<usize>,
    n_cand: usize,
    range: (i32, i32),
) -> Result<SliceOutcome> {
    let (n, k) = w.dim();
    if k == 0 {
        return Err(crate::Error::Shape("empty slice".into()));
    }
    let targets: Vec<Vec<f64>> = w.rows().into_iter().map(|r| r.to_vec()).collect();
    let wn2: Vec<f64> = targets.iter().map(|t| dot(t, t)).collect();
    if wn2.iter().all(|&x| x == 0.0) {
        return Ok(SliceOutcome {
            factors: Vec::new(),
            diagnostics: Diagnostics {
                converged: true,
                ..Default::default()
            },
        });
    }
    let rel = if target_db.is_infinite() && target_db > 0.0 {
        0.0
    } else {
        10f64.powf(-target_db / 10.0)
    };
    let thr: Vec<f64> = wn2.iter().map(|x| x * rel).collect();
    let budget = budget.unwrap_or(DEFAULT_STEPS_PER_ROW * n.max(1));

    let mut st = State::new(k, range);
    let mut fits: Vec<Option<RowFit>> = vec![None; n];
    let mut errs: Vec<f64> = wn2.clone();
    let mut stalled = vec![false; n];

    let refit = |st: &State, i: usize, cw: usize, fits: &mut [Option<RowFit>], errs: &mut [f64]| -> u64 {
        if let Some((f, e, cl)) = st.fit_scaled(&targets[i], cw) {
            if e < errs[i] {
                fits[i] = Some(f);
                errs[i] = e;
                return cl as u64;
            }
        }
        0
    };
    for i in 0..n {
        if wn2[i] == 0.0 {
            continue;
        }
        for j in 0..k {
            st.clamped += refit(&st, i, j, &mut fits, &mut errs);
        }
    }

    let mut steps = 0usize;
    let mut out_of_budget = false;
    loop {
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..n {
            if stalled[i] || errs[i] <= thr[i] {
                continue;
            }
            let r = errs[i] / wn2[i];
            if pick.is_none_or(|p| r > p.1) {
                pick = Some((i, r));
            }
        }
        let Some((i, _)) = pick else { break };
        if steps >= budget {
            out_of_budget = true;
            break;
        }
        let Some(fit) = fits[i] else {
            // every entry lies below the smallest representable power of two
            stalled[i] = true;
            continue;
        };
        match search_pair(&st, &targets[i], fit, n_cand) {
            Some(p) if p.err < errs[i] => {
                let before = errs[i];
                let id = st.push(p.def);
                if st.norms[id] == 0.0 {
                    stalled[i] = true;
                    continue;
                }
                steps += 1;
                st.clamped += p.clamped;
                // the new codeword may serve any row, including this one
                for j in 0..n {
                    if wn2[j] != 0.0 && errs[j] > thr[j] {
                        st.clamped += refit(&st, j, id, &mut fits, &mut errs);
                    }
                }
                if errs[i] >= before {
                    // rounding made the analytic estimate optimistic
                    stalled[i] = true;
                }
            }
            _ => stalled[i] = true,
        }
    }

    let converged = !out_of_budget && (0..n).all(|i| errs[i] <= thr[i]);
    let factors = emit_factors(&st, &fits);
    Ok(SliceOutcome {
        factors,
        diagnostics: Diagnostics {
            clamped_exponents: st.clamped,
            converged,
            steps: steps as u64,
        },
    })
}

/// Lay out the reachable part of the codebook as carry factors, one per
/// DAG level, and finish with the output selection factor.
fn emit_factors(st: &State, fits: &[Option<RowFit>]) -> Vec<FactorMatrix> {
    let k = st.k;
    let m = st.len();
    let mut reach = vec![false; m];
    let mut stack: Vec<usize> = fits.iter().flatten().map(|f| f.cw).collect();
    while let Some(c) = stack.pop() {
        if reach[c] {
            continue;
        }
        reach[c] = true;
        if let Some(d) = st.defs[c] {
            stack.push(d.a);
            stack.push(d.b);
        }
    }
    let mut order: Vec<usize> = (k..m).filter(|&c| reach[c]).collect();
    order.sort_by_key(|&c| (st.levels[c], c));
    let mut pos = vec![usize::MAX; m];
    for (j, p) in pos.iter_mut().enumerate().take(k) {
        *p = j;
    }
    for (r, &c) in order.iter().enumerate() {
        pos[c] = k + r;
    }

    let mut factors = vec![FactorMatrix::identity(k)];
    let mut in_dim = k;
    let max_level = order.last().map_or(0, |&c| st.levels[c]);
    let mut idx = 0;
    for level in 1..=max_level {
        let mut rows = Vec::new();
        while idx < order.len() && st.levels[order[idx]] == level {
            let d = st.defs[order[idx]].expect("non-basis codeword");
            rows.push(vec![
                PowTerm::new(pos[d.a], d.ca.exp, d.ca.sign),
                PowTerm::new(pos[d.b], d.cb.exp, d.cb.sign),
            ]);
            idx += 1;
        }
        let added = rows.len();
        factors.push(FactorMatrix {
            in_dim,
            carry: true,
            rows,
        });
        in_dim += added;
    }
    let rows = fits
        .iter()
        .map(|f| match f {
            Some(f) => vec![PowTerm::new(pos[f.cw], f.coef.exp, f.coef.sign)],
            None => Vec::new(),
        })
        .collect();
    factors.push(FactorMatrix {
        in_dim,
        carry: false,
        rows,
    });
    factors
}
