//! Acceptance suite. Every check prints one `PASS`/`FAIL` line followed by
//! indented details; the process exits non-zero when any check fails.
//!
//! The MNIST check reads the IDX files from `LCC_DATA_DIR`, falling back to
//! `data/mnist` at the workspace root. The target lives in its own package
//! so that the other suites of the workspace run before it.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use lccnn::convlower::{conv_addition_cost, conv_forward_with, lower, ConvSpec, Lowering};
use lccnn::lcc::{
    count_additions, decompose, execute_program, reconstruct, serial, to_adder_program, Algorithm, LccConfig,
    StopRule,
};
use lccnn::nncore::{Architecture, Model, Tying, DATA_DIR_ENV};
use lccnn::numerics::{csd_encode, csd_matrix_cost, quantize_matrix, sqnr_db, FixedPointConfig};
use lccnn::pipeline::{load_datasets, run_sweep_with_data, CompressionReport, PipelineConfig, Stage};
use lccnn::pruning::block_soft_threshold;
use lccnn::sharing::{affinity_propagation, centroid_gradient, column_similarity, set_preference, ApConfig, Preference};
use ndarray::{array, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Outcome of one check; `fingerprint` captures everything a rerun must
/// reproduce bit for bit.
struct Check {
    ok: bool,
    details: Vec<String>,
    fingerprint: Vec<u8>,
}

impl Check {
    fn new() -> Self {
        Check {
            ok: true,
            details: Vec::new(),
            fingerprint: Vec::new(),
        }
    }

    /// Record a condition with its explanation.
    fn require(&mut self, cond: bool, what: impl Into<String>) {
        let what = what.into();
        self.details.push(format!("{} {what}", if cond { "ok  " } else { "MISS" }));
        self.ok &= cond;
    }

    fn note(&mut self, what: impl Into<String>) {
        self.details.push(format!("     {}", what.into()));
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

fn worked_example() -> Check {
    let mut c = Check::new();
    let w = array![[2.0, 0.375], [3.75, 1.0]];
    let cost = csd_matrix_cost(w.view(), FixedPointConfig::default());
    c.require(cost.adds == 4 && cost.shifts == 6, format!("CSD cost: {} adds, {} shifts", cost.adds, cost.shifts));
    for algorithm in [Algorithm::Fp { terms: 2 }, Algorithm::Fs] {
        // the whole 2x2 matrix is one slice
        let cfg = LccConfig {
            algorithm,
            slice_width: Some(2),
            stop: StopRule::target(f64::INFINITY),
            ..Default::default()
        };
        let d = decompose(w.view(), &cfg).unwrap();
        let adds = count_additions(&d);
        c.require(
            reconstruct(&d) == w && d.achieved_sqnr == f64::INFINITY && adds <= 3,
            format!("{algorithm:?}: exact = {}, SQNR {} dB, {adds} additions", reconstruct(&d) == w, d.achieved_sqnr),
        );
    }
    c
}

/// Fewest nonzero signed digits for every integer in `[-limit, limit]`, by
/// enumerating all digit strings over `positions` positions.
fn min_signed_digits(positions: u32, limit: i64) -> Vec<u32> {
    let mut best = vec![u32::MAX; 2 * limit as usize + 1];
    let mut digits = vec![-1i64; positions as usize];
    loop {
        let (mut v, mut wgt) = (0i64, 0u32);
        for (p, &d) in digits.iter().enumerate() {
            v += d << p;
            wgt += (d != 0) as u32;
        }
        if v.abs() <= limit {
            let slot = &mut best[(v + limit) as usize];
            *slot = (*slot).min(wgt);
        }
        // odometer over {-1, 0, 1}
        let mut p = 0;
        loop {
            if p == digits.len() {
                return best;
            }
            if digits[p] < 1 {
                digits[p] += 1;
                break;
            }
            digits[p] = -1;
            p += 1;
        }
    }
}

fn csd_minimality() -> Check {
    let mut c = Check::new();
    const MAX_BITS: u32 = 12;
    let limit = (1i64 << MAX_BITS) - 1;
    // two spare positions: no minimal form of a 12-bit integer needs more
    let table = min_signed_digits(MAX_BITS + 2, limit);
    let (mut checked, mut wrong, mut adjacent, mut off_grid) = (0u64, 0u64, 0u64, 0u64);
    for total in 1..=MAX_BITS {
        for int_bits in 1..=total {
            let cfg = FixedPointConfig::new(total - int_bits, int_bits).unwrap();
            let m = cfg.max_mantissa();
            for k in -m..=m {
                let v = k as f64 * cfg.step();
                let form = csd_encode(v, cfg);
                checked += 1;
                wrong += (form.weight() as u32 != table[(k + limit) as usize]) as u64;
                adjacent += !form.is_canonical() as u64;
                off_grid += (form.decode() != v) as u64;
            }
        }
    }
    c.require(wrong == 0, format!("{wrong} of {checked} grid values off the exhaustive minimum"));
    c.require(adjacent == 0, format!("{adjacent} forms with adjacent or misordered digits"));
    c.require(off_grid == 0, format!("{off_grid} forms decoding to another value"));
    c
}

fn program_oracle() -> Check {
    let mut c = Check::new();
    let mut r = rng(3);
    let (mut bad_values, mut bad_counts, mut worst) = (0u64, 0u64, 0.0f64);
    for case in 0..100 {
        let (n, k) = (r.random_range(1..=64), r.random_range(1..=8));
        let w = gaussian(&mut r, n, k);
        let algorithm = if case % 2 == 0 {
            Algorithm::Fs
        } else {
            Algorithm::Fp { terms: r.random_range(2..=4) }
        };
        let stop = if r.random_bool(0.5) {
            StopRule::target(r.random_range(10.0..60.0))
        } else {
            StopRule::factors(r.random_range(1..=4))
        };
        let cfg = LccConfig {
            algorithm,
            slice_width: Some(r.random_range(1..=k)),
            stop,
            ..Default::default()
        };
        let d = decompose(w.view(), &cfg).unwrap();
        let program = to_adder_program(&d);
        let dense = reconstruct(&d);
        bad_counts += (count_additions(&d) != program.additions()) as u64;
        c.fingerprint.extend(serial::encode(&d));
        for _ in 0..10 {
            let x: Vec<f64> = (0..k).map(|_| r.sample(StandardNormal)).collect();
            let got = execute_program(&program, &x).unwrap();
            let want = dense.dot(&Array1::from(x));
            for (g, e) in got.iter().zip(&want) {
                worst = worst.max((g - e).abs() / (1.0 + e.abs()));
                bad_values += !close(*g, *e, 1e-9) as u64;
                c.fingerprint.extend(g.to_le_bytes());
            }
        }
    }
    c.require(bad_values == 0, format!("{bad_values} outputs off by more than 1e-9 (worst {worst:.2e})"));
    c.require(bad_counts == 0, format!("{bad_counts} of 100 programs disagree on the addition count"));
    c
}

fn tall_matrix_gain() -> Check {
    let mut c = Check::new();
    let w = gaussian(&mut rng(4), 256, 8);
    let fixed = FixedPointConfig::default();
    let baseline = csd_matrix_cost(w.view(), fixed).adds;
    let target = sqnr_db(w.view(), quantize_matrix(w.view(), fixed).view()).unwrap();
    let cfg = LccConfig {
        algorithm: Algorithm::Fs,
        stop: StopRule::target(target),
        ..Default::default()
    };
    let d = decompose(w.view(), &cfg).unwrap();
    let adds = count_additions(&d);
    c.fingerprint = serial::encode(&d);
    c.require(
        d.achieved_sqnr >= target,
        format!("SQNR {:.2} dB against the {target:.2} dB quantization baseline", d.achieved_sqnr),
    );
    c.require(
        adds as f64 <= 0.6 * baseline as f64,
        format!("{adds} additions vs {baseline} CSD ({:.2}x gain)", baseline as f64 / adds as f64),
    );
    c
}

/// Minimizer of `t*sqrt(|x|^2 + eps^2) + |x - v|^2 / 2` by damped Newton.
fn smoothed_prox(v: &[f64], t: f64) -> Vec<f64> {
    use nalgebra::{DMatrix, DVector};
    const EPS: f64 = 1e-12;
    let v = DVector::from_column_slice(v);
    let f = |x: &DVector<f64>| t * (x.norm_squared() + EPS * EPS).sqrt() + 0.5 * (x - &v).norm_squared();
    let mut x = v.clone();
    for _ in 0..500 {
        let s = (x.norm_squared() + EPS * EPS).sqrt();
        let grad = &x * (t / s) + (&x - &v);
        let hess = DMatrix::identity(x.len(), x.len()) * (t / s + 1.0) - &x * x.transpose() * (t / (s * s * s));
        let step = hess.lu().solve(&grad).expect("the Hessian is positive definite");
        let (fx, slope) = (f(&x), grad.dot(&step));
        let mut alpha = 1.0;
        while alpha > 1e-20 && f(&(&x - &step * alpha)) > fx - 1e-4 * alpha * slope {
            alpha *= 0.5;
        }
        x -= &step * alpha;
        if (&step * alpha).norm() <= 1e-16 * (1.0 + x.norm()) {
            break;
        }
    }
    x.iter().copied().collect()
}

fn prox_correctness() -> Check {
    let mut c = Check::new();
    let mut r = rng(5);
    let (mut worst, mut zeroed) = (0.0f64, 0);
    for _ in 0..200 {
        let d = r.random_range(1..=16);
        let v: Vec<f64> = (0..d).map(|_| r.sample::<f64, _>(StandardNormal) * 2.0).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        // about half the rows fall below the threshold
        let t = r.random_range(0.0..2.0 * norm);
        let row = Array2::from_shape_vec((1, d), v.clone()).unwrap();
        let got = block_soft_threshold(row.view(), t);
        zeroed += got.iter().all(|&a| a == 0.0) as usize;
        let want = smoothed_prox(&v, t);
        worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    c.require(worst <= 1e-6, format!("worst deviation from the numerical minimizer {worst:.2e} ({zeroed} rows zeroed)"));

    let mut violations = 0;
    for _ in 0..200 {
        let d = r.random_range(1..=16);
        let t = r.random_range(0.0..3.0);
        let a = gaussian(&mut r, 1, d);
        let b = gaussian(&mut r, 1, d);
        let gap = (&block_soft_threshold(a.view(), t) - &block_soft_threshold(b.view(), t)).mapv(|e| e * e).sum();
        violations += (gap.sqrt() > (&a - &b).mapv(|e| e * e).sum().sqrt() * (1.0 + 1e-12)) as usize;
    }
    c.require(violations == 0, format!("{violations} of 200 pairs expanded"));
    c
}

fn direct_conv(spec: ConvSpec, w: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    let (z, o, p) = (spec.input, spec.kernel, spec.out_size());
    let mut y = vec![0.0; spec.output_len()];
    for n in 0..spec.out_maps {
        for r in 0..p {
            for col in 0..p {
                let mut s = 0.0;
                for k in 0..spec.in_maps {
                    for i in 0..o {
                        for j in 0..o {
                            s += w[(n, k * o * o + i * o + j)] * x[k * z * z + (r + i) * z + col + j];
                        }
                    }
                }
                y[n * p * p + r * p + col] = s;
            }
        }
    }
    y
}

fn conv_equivalence() -> Check {
    let mut c = Check::new();
    let mut r = rng(7);
    let (mut bad_outputs, mut bad_costs, mut worst) = (0, 0, 0.0f64);
    for _ in 0..50 {
        let kernel = [1, 2, 3, 5][r.random_range(0..4)];
        let spec = ConvSpec {
            in_maps: r.random_range(1..=8),
            out_maps: r.random_range(1..=8),
            kernel,
            input: r.random_range(kernel..=16),
        };
        let (rows, cols) = spec.weight_shape();
        let w = gaussian(&mut r, rows, cols);
        let x: Vec<f64> = (0..spec.input_len()).map(|_| r.sample(StandardNormal)).collect();
        let want = direct_conv(spec, &w, &x);
        for method in [Lowering::Fk, Lowering::Pk] {
            let lowered = lower(spec, w.view(), method).unwrap();
            let (y, trace) = conv_forward_with(spec, method, &x, |k, input, out| {
                out.copy_from_slice(lowered.matrices[k].dot(&ndarray::ArrayView1::from(input)).as_slice().unwrap());
                Ok(())
            })
            .unwrap();
            for (g, e) in y.iter().zip(&want) {
                worst = worst.max((g - e).abs() / (1.0 + e.abs()));
                bad_outputs += !close(*g, *e, 1e-6) as usize;
            }
            // closed form against the operations the forward pass performed
            let per_matrix: Vec<u64> = (0..spec.in_maps).map(|_| r.random_range(0..500)).collect();
            let formula = conv_addition_cost(spec, method, &per_matrix).unwrap();
            bad_costs += (formula != trace.total_adds(&per_matrix)) as usize;
        }
    }
    c.require(bad_outputs == 0, format!("{bad_outputs} outputs off direct convolution (worst {worst:.2e})"));
    c.require(bad_costs == 0, format!("{bad_costs} of 100 cost formulas disagree with the traced count"));
    c
}

fn batch(r: &mut ChaCha8Rng, n: usize, d: usize, classes: u8) -> (Array2<f64>, Vec<u8>) {
    let x = Array2::from_shape_fn((n, d), |_| r.random_range(0.0..1.0));
    (x, (0..n).map(|_| r.random_range(0..classes)).collect())
}

/// Worst relative error of the analytic weight gradient of layer `li`
/// against central differences.
fn fd_error(model: &Model, li: usize, x: &Array2<f64>, y: &[u8], analytic: &Array2<f64>) -> f64 {
    const EPS: f64 = 1e-4;
    let mut worst = 0.0f64;
    for (idx, &a) in analytic.indexed_iter() {
        let mut m = model.clone();
        m.layers[li].weight[idx] += EPS;
        let up = m.loss(x.view(), y).unwrap();
        m.layers[li].weight[idx] -= 2.0 * EPS;
        let down = m.loss(x.view(), y).unwrap();
        let numeric = (up - down) / (2.0 * EPS);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

fn gradient_checks() -> Check {
    let mut c = Check::new();
    let mut r = rng(8);
    let archs = [
        ("dense", Architecture::Mlp { hidden: vec![6] }),
        (
            "conv FK",
            Architecture::Conv { maps: 2, kernel: 3, lowering: Lowering::Fk, hidden: vec![4] },
        ),
        (
            "conv PK",
            Architecture::Conv { maps: 2, kernel: 2, lowering: Lowering::Pk, hidden: vec![] },
        ),
    ];
    for (name, arch) in archs {
        let m = arch.build(5, 3, 11).unwrap();
        let (x, y) = batch(&mut r, 6, 25, 3);
        let (_, g) = m.backward(x.view(), &y).unwrap();
        let worst = (0..m.layers.len()).map(|li| fd_error(&m, li, &x, &y, &g.weights[li])).fold(0.0, f64::max);
        c.require(worst <= 1e-4, format!("{name}: worst relative error {worst:.2e}"));
    }

    // tied first layer: 9 inputs in 4 clusters
    let mut tied = Architecture::Mlp { hidden: vec![5] }.build(3, 3, 12).unwrap();
    let assign = vec![0, 1, 1, 2, 0, 3, 3, 3, 2];
    tied.layers[0].weight = gaussian(&mut r, 5, 4) * 0.5;
    tied.layers[0].tying = Some(Tying { assign: assign.clone(), n_clusters: 4 });
    let (x, y) = batch(&mut r, 6, 9, 3);
    let (_, g) = tied.backward(x.view(), &y).unwrap();
    let worst = fd_error(&tied, 0, &x, &y, &g.weights[0]);
    c.require(worst <= 1e-4, format!("tied centroids: worst relative error {worst:.2e}"));

    // the update rule averages member gradients: that is the centroid
    // gradient divided by the cluster size
    let mut untied = tied.clone();
    untied.layers[0].tying = None;
    untied.layers[0].weight = tied.layers[0].effective_weight();
    let (_, gu) = untied.backward(x.view(), &y).unwrap();
    let members = tied.layers[0].tying.as_ref().unwrap().members();
    let mut mean = Array2::zeros(g.weights[0].dim());
    let mut worst = 0.0f64;
    for (ci, m) in members.iter().enumerate() {
        let cols: Vec<_> = m.iter().map(|&j| gu.weights[0].column(j)).collect();
        mean.column_mut(ci).assign(&centroid_gradient(&cols).unwrap());
        for (a, b) in mean.column(ci).iter().zip(g.weights[0].column(ci)) {
            let b = b / m.len() as f64;
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-6));
        }
    }
    let sizes: Array1<f64> = members.iter().map(|m| m.len() as f64).collect();
    let fd_mean = fd_error(&tied, 0, &x, &y, &(&mean * &sizes.insert_axis(Axis(0))));
    c.require(
        worst <= 1e-12 && fd_mean <= 1e-4,
        format!("member-gradient mean: {worst:.2e} from centroid gradient / size, {fd_mean:.2e} from finite differences"),
    );
    c
}

/// Best exemplar set by exhaustive search over all subsets.
fn exhaustive_exemplars(s: &Array2<f64>) -> Vec<usize> {
    let n = s.nrows();
    let mut best = (f64::NEG_INFINITY, 0u32);
    for mask in 1u32..(1 << n) {
        let net: f64 = (0..n)
            .map(|i| {
                if mask >> i & 1 == 1 {
                    s[(i, i)]
                } else {
                    (0..n)
                        .filter(|e| mask >> e & 1 == 1)
                        .map(|e| s[(i, e)])
                        .fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .sum();
        if net > best.0 {
            best = (net, mask);
        }
    }
    (0..n).filter(|i| best.1 >> i & 1 == 1).collect()
}

/// Points around three centres, with a distinct preference per point so the
/// optimum is unique.
fn clustered_similarity(r: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let centres: Vec<(f64, f64)> = (0..3).map(|_| (r.random_range(-10.0..10.0), r.random_range(-10.0..10.0))).collect();
    let mut w = Array2::zeros((2, n));
    for j in 0..n {
        let (cx, cy) = centres[r.random_range(0..3)];
        w[(0, j)] = cx + r.random_range(-1.0..1.0);
        w[(1, j)] = cy + r.random_range(-1.0..1.0);
    }
    let mut s = column_similarity(w.view(), false).unwrap();
    set_preference(&mut s, Preference::Median).unwrap();
    for i in 0..n {
        s[(i, i)] *= r.random_range(0.8..1.2);
    }
    s
}

fn ap_oracle() -> Check {
    let mut c = Check::new();
    let mut r = rng(12);
    let mut mismatches = 0;
    for _ in 0..20 {
        let n = r.random_range(3..=8);
        let s = clustered_similarity(&mut r, n);
        let got = affinity_propagation(s.view(), &ApConfig::default()).unwrap();
        mismatches += (got.exemplars != exhaustive_exemplars(&s)) as usize;
    }
    c.require(mismatches == 0, format!("{mismatches} of 20 small instances differ from the exhaustive optimum"));

    let (mut broken, mut unconverged) = (0, 0);
    for _ in 0..20 {
        let w = gaussian(&mut r, 4, 100);
        let mut s = column_similarity(w.view(), false).unwrap();
        set_preference(&mut s, Preference::Median).unwrap();
        let res = affinity_propagation(s.view(), &ApConfig::default()).unwrap();
        unconverged += !res.converged as usize;
        let ex = &res.exemplars;
        let sorted = !ex.is_empty() && ex.windows(2).all(|p| p[0] < p[1]) && ex.iter().all(|&e| e < 100);
        let own = ex.iter().enumerate().all(|(ci, &e)| res.labels[e] == ci);
        // every point sits with its most similar exemplar
        let nearest = (0..100).all(|i| {
            ex.contains(&i)
                || (0..ex.len()).all(|cj| s[(i, ex[res.labels[i]])] >= s[(i, ex[cj])])
        });
        broken += !(res.labels.len() == 100 && res.labels.iter().all(|&l| l < ex.len()) && sorted && own && nearest) as usize;
    }
    c.require(broken == 0, format!("{broken} of 20 instances with n = 100 break the partition invariants"));
    c.note(format!("{unconverged} of the 20 large instances hit the iteration cap"));
    c
}

fn mnist_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

const SWEEP: [f64; 5] = [0.1, 0.2, 0.4, 0.7, 1.0];

fn mnist_pipeline() -> Check {
    let mut c = Check::new();
    let out = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.data.root = Some(mnist_root());
    cfg.output_dir = out.path().to_path_buf();
    cfg.sweep.lambdas = SWEEP.to_vec();
    let data = match load_datasets(&cfg.data) {
        Ok(d) => d,
        Err(e) => {
            c.require(false, format!("MNIST unavailable at {}: {e}", mnist_root().display()));
            return c;
        }
    };
    c.note(format!("{} training / {} test images, lambda sweep {SWEEP:?}", data.train.len(), data.test.len()));
    let points = run_sweep_with_data(&cfg, &data).unwrap();

    let pct = |a: Option<f64>| a.map_or(f64::NAN, |a| 100.0 * a);
    let mut any = false;
    for (lam, rep) in &points {
        c.fingerprint.extend(rep.to_json().into_bytes());
        let verdict = judge(rep);
        any |= verdict.iter().all(|(ok, _)| *ok);
        let acc = |s| pct(rep.stage(s).and_then(|s| s.top1));
        c.note(format!(
            "lambda {lam}: top-1 baseline {:.2}% pruned {:.2}% shared {:.2}% LCC {:.2}%, ratio {:.2}x",
            acc(Stage::Baseline),
            acc(Stage::Pruned),
            acc(Stage::Shared),
            acc(Stage::Lcc),
            rep.total_ratio().value
        ));
        for (ok, what) in verdict {
            c.note(format!("  {} {what}", if ok { "ok  " } else { "MISS" }));
        }
    }
    c.require(any, "at least one lambda meets every condition");
    c
}

/// Every condition of the MNIST check for one sweep point.
fn judge(rep: &CompressionReport) -> Vec<(bool, String)> {
    let l0 = &rep.layers[0];
    let top1 = |s| rep.stage(s).and_then(|s| s.top1).unwrap_or(f64::NAN);
    let retained = l0.stage(Stage::Pruned).map_or(0, |s| s.input_dims);
    let unique = l0.stage(Stage::Shared).map_or(retained, |s| s.unique_columns);
    let (pruned, shared) = (top1(Stage::Pruned), top1(Stage::Shared));
    let ratio = rep.stage(Stage::Lcc).map_or(0.0, |s| s.ratio.value);
    vec![
        (l0.pruned_dims >= 600, format!("{} of 784 input columns pruned", l0.pruned_dims)),
        (pruned >= 0.90, format!("pruned top-1 {:.2}% (needs 90%)", 100.0 * pruned)),
        (
            unique * 2 <= retained,
            format!("sharing keeps {unique} of {retained} columns ({:.2}x)", retained as f64 / unique as f64),
        ),
        (
            shared >= pruned - 0.01,
            format!("sharing changes top-1 by {:+.2} points", 100.0 * (shared - pruned)),
        ),
        (ratio >= 10.0, format!("total compression {ratio:.2}x over the CSD baseline")),
    ]
}

type CheckFn = fn() -> Check;

fn run(name: &str, limit: Duration, f: CheckFn) -> (bool, Vec<u8>) {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    let mut c = result.unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        let mut c = Check::new();
        c.require(false, format!("panicked: {msg}"));
        c
    });
    c.require(elapsed <= limit, format!("runtime {:.2?} (limit {:.0?})", elapsed, limit));
    report(name, &c);
    (c.ok, c.fingerprint)
}

fn report(name: &str, c: &Check) {
    println!("{} {name}", if c.ok { "PASS" } else { "FAIL" });
    for d in &c.details {
        println!("    {d}");
    }
}

fn main() {
    let min = |m: u64| Duration::from_secs(60 * m);
    let checks: [(&str, Duration, CheckFn); 9] = [
        ("worked-example exactness", Duration::from_secs(1), worked_example),
        ("CSD minimality", min(1), csd_minimality),
        ("adder-program oracle equivalence", min(1), program_oracle),
        ("LCC gain on tall matrices", min(5), tall_matrix_gain),
        ("proximal-operator correctness", Duration::from_secs(30), prox_correctness),
        ("scaled MLP pipeline on MNIST", min(30), mnist_pipeline),
        ("convolution equivalence", min(1), conv_equivalence),
        ("gradient checks", min(1), gradient_checks),
        ("affinity propagation oracle", min(1), ap_oracle),
    ];
    let mut all = true;
    let mut prints = Vec::new();
    for (name, limit, f) in checks {
        let (ok, fp) = run(name, limit, f);
        all &= ok;
        prints.push((name, f, fp));
    }

    let mut det = Check::new();
    for (name, f, first) in prints.into_iter().filter(|(_, _, fp)| !fp.is_empty()) {
        let again = catch_unwind(AssertUnwindSafe(f)).map(|c| c.fingerprint).unwrap_or_default();
        det.require(again == first, format!("{name}: rerun reproduces {} bytes", first.len()));
    }
    let tried = det.details.len();
    det.require(tried == 3, format!("{tried} of 3 checks produced a fingerprint"));
    report("determinism", &det);
    all &= det.ok;

    if !all {
        std::process::exit(1);
    }
}
