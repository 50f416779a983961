//! Weight sharing: clustering of weight columns and tied layers.
//!
//! Columns are clustered with affinity propagation on negative squared
//! distances. A clustered layer stores one centroid per cluster and pools
//! its inputs before the product: `y = sum_i g_i * sum_{j in I_i} x_j`.
//! The pooling costs `|I_i| - 1` additions per cluster and input vector.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nncore::{train, Dataset, LayerKind, Model, TrainConfig, TrainLog, TrainOptions, Tying};
use crate::numerics::{csd_matrix_cost, CostReport, FixedPointConfig};
use crate::par::{self, Parallelism};
use crate::{Error, Result};

/// `s(a, b) = -||w_a - w_b||^2` over the columns of `w`, optionally after
/// scaling every nonzero column to unit norm.
pub fn column_similarity(w: ArrayView2<f64>, normalize: bool) -> Result<Array2<f64>> {
    let k = w.ncols();
    if k == 0 {
        return Err(Error::Shape("similarity of a matrix without columns".into()));
    }
    let cols: Vec<Array1<f64>> = w
        .axis_iter(Axis(1))
        .map(|c| {
            let n = c.dot(&c).sqrt();
            if normalize && n > 0.0 {
                &c / n
            } else {
                c.to_owned()
            }
        })
        .collect();
    let mut s = Array2::zeros((k, k));
    for a in 0..k {
        for b in a + 1..k {
            let d = &cols[a] - &cols[b];
            let v = -d.dot(&d);
            s[(a, b)] = v;
            s[(b, a)] = v;
        }
    }
    Ok(s)
}

/// Self-similarity placed on the diagonal before clustering. Higher values
/// yield more clusters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preference {
    /// Median of the off-diagonal similarities.
    Median,
    /// Quantile in `[0, 1]` of the off-diagonal similarities.
    Quantile(f64),
    Value(f64),
}

impl Default for Preference {
    fn default() -> Self {
        Preference::Median
    }
}

/// Write the preference onto the diagonal of `s` and return it.
pub fn set_preference(s: &mut Array2<f64>, pref: Preference) -> Result<f64> {
    let n = s.nrows();
    let value = match pref {
        Preference::Value(v) => v,
        Preference::Median => quantile_off_diagonal(s.view(), 0.5),
        Preference::Quantile(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Config(format!("preference quantile {q} outside [0, 1]")));
            }
            quantile_off_diagonal(s.view(), q)
        }
    };
    if !value.is_finite() {
        return Err(Error::Config(format!("preference must be finite, got {value}")));
    }
    for i in 0..n {
        s[(i, i)] = value;
    }
    Ok(value)
}

fn quantile_off_diagonal(s: ArrayView2<f64>, q: f64) -> f64 {
    let mut v: Vec<f64> = s
        .indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, &x)| x)
        .collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApConfig {
    pub damping: f64,
    pub max_iter: usize,
    /// Iterations without a change in the exemplar set that end the run.
    pub convergence_iter: usize,
    /// Seed of the tie-breaking noise.
    pub seed: u64,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for ApConfig {
    fn default() -> Self {
        ApConfig {
            damping: 0.5,
            max_iter: 200,
            convergence_iter: 15,
            seed: 0,
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApResult {
    /// Exemplar indices in ascending order.
    pub exemplars: Vec<usize>,
    /// Cluster (position in `exemplars`) of every point.
    pub labels: Vec<usize>,
    pub iterations: usize,
    /// False when the iteration cap was hit or no exemplar emerged; in the
    /// latter case every point is returned as its own exemplar.
    pub converged: bool,
}

/// Affinity propagation on a square similarity matrix whose diagonal
/// already holds the preferences.
pub fn affinity_propagation(s: ArrayView2<f64>, cfg: &ApConfig) -> Result<ApResult> {
    let n = s.nrows();
    if n == 0 || s.ncols() != n {
        return Err(Error::Shape(format!("similarity matrix {:?} is not square", s.dim())));
    }
    if !(0.5..1.0).contains(&cfg.damping) {
        return Err(Error::Config(format!("damping must be in [0.5, 1), got {}", cfg.damping)));
    }
    if cfg.max_iter == 0 || cfg.convergence_iter == 0 {
        return Err(Error::Config("max_iter and convergence_iter must be >= 1".into()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Undefined("similarities must be finite".into()));
    }
    if n == 1 {
        return Ok(ApResult {
            exemplars: vec![0],
            labels: vec![0],
            iterations: 0,
            converged: true,
        });
    }
    if let Some(r) = degenerate(s) {
        return Ok(r);
    }

    // symmetric tie-breaking noise
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sim = s.to_owned();
    for i in 0..n {
        for j in i..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let a = sim[(i, j)];
            sim[(i, j)] = a + (1e-12 * a.abs() + 100.0 * f64::MIN_POSITIVE) * z;
            if i != j {
                let b = sim[(j, i)];
                sim[(j, i)] = b + (1e-12 * b.abs() + 100.0 * f64::MIN_POSITIVE) * z;
            }
        }
    }
    let sv = sim.as_slice().expect("standard layout").to_vec();
    let mut r = vec![0.0; n * n];
    let mut a = vec![0.0; n * n];
    let d = cfg.damping;
    let mode = cfg.parallelism;
    let mut history = vec![vec![false; n]; cfg.convergence_iter];
    let mut is_exemplar = vec![false; n];
    let mut converged = false;
    let mut it = 0;
    while it < cfg.max_iter {
        // responsibilities, row by row
        let av = &a;
        par::for_each_chunk_mut(mode, &mut r, n, |i, row| {
            let (mut best, mut second, mut arg) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for k in 0..n {
                let v = av[i * n + k] + sv[i * n + k];
                if v > best {
                    second = best;
                    best = v;
                    arg = k;
                } else if v > second {
                    second = v;
                }
            }
            for k in 0..n {
                let other = if k == arg { second } else { best };
                row[k] = d * row[k] + (1.0 - d) * (sv[i * n + k] - other);
            }
        });
        // availabilities from column sums of positive responsibilities
        let mut colsum = vec![0.0; n];
        for i in 0..n {
            for k in 0..n {
                let v = r[i * n + k];
                colsum[k] += if i == k { v } else { v.max(0.0) };
            }
        }
        let rv = &r;
        par::for_each_chunk_mut(mode, &mut a, n, |i, row| {
            for k in 0..n {
                let rik = rv[i * n + k];
                let new = if i == k {
                    colsum[k] - rik
                } else {
                    (colsum[k] - rik.max(0.0)).min(0.0)
                };
                row[k] = d * row[k] + (1.0 - d) * new;
            }
        });
        for (k, e) in is_exemplar.iter_mut().enumerate() {
            *e = a[k * n + k] + r[k * n + k] > 0.0;
        }
        history[it % cfg.convergence_iter].clone_from(&is_exemplar);
        it += 1;
        if it >= cfg.convergence_iter {
            let stable = (0..n).all(|k| {
                let c = history.iter().filter(|h| h[k]).count();
                c == 0 || c == cfg.convergence_iter
            });
            if stable && is_exemplar.iter().any(|&e| e) {
                converged = true;
                break;
            }
        }
    }

    let mut ex: Vec<usize> = (0..n).filter(|&k| is_exemplar[k]).collect();
    if ex.is_empty() {
        log::warn!("affinity propagation found no exemplar; returning singletons");
        return Ok(ApResult {
            exemplars: (0..n).collect(),
            labels: (0..n).collect(),
            iterations: it,
            converged: false,
        });
    }
    if !converged {
        log::warn!("affinity propagation did not converge in {} iterations", cfg.max_iter);
    }
    let assign = |ex: &[usize]| -> Vec<usize> {
        (0..n)
            .map(|i| match ex.iter().position(|&e| e == i) {
                Some(p) => p,
                None => (0..ex.len())
                    .fold((0, f64::NEG_INFINITY), |b, c| {
                        let v = sim[(i, ex[c])];
                        if v > b.1 {
                            (c, v)
                        } else {
                            b
                        }
                    })
                    .0,
            })
            .collect()
    };
    // refine: each cluster's exemplar becomes its most central member
    let c = assign(&ex);
    for (k, e) in ex.iter_mut().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| c[i] == k).collect();
        let mut best = (members[0], f64::NEG_INFINITY);
        for &j in &members {
            let tot: f64 = members.iter().map(|&i| sim[(i, j)]).sum();
            if tot > best.1 {
                best = (j, tot);
            }
        }
        *e = best.0;
    }
    let c = assign(&ex);
    let labels_pts: Vec<usize> = c.iter().map(|&k| ex[k]).collect();
    let mut exemplars = labels_pts.clone();
    exemplars.sort_unstable();
    exemplars.dedup();
    let labels = labels_pts
        .iter()
        .map(|e| exemplars.binary_search(e).expect("exemplar present"))
        .collect();
    Ok(ApResult {
        exemplars,
        labels,
        iterations: it,
        converged,
    })
}

/// All off-diagonal similarities equal and all preferences equal: message
/// passing has nothing to break the tie, so answer directly.
fn degenerate(s: ArrayView2<f64>) -> Option<ApResult> {
    let n = s.nrows();
    let off = s[(0, 1)];
    let pref = s[(0, 0)];
    let same = s
        .indexed_iter()
        .all(|((i, j), &v)| if i == j { v == pref } else { v == off });
    if !same {
        return None;
    }
    Some(if pref > off {
        ApResult {
            exemplars: (0..n).collect(),
            labels: (0..n).collect(),
            iterations: 0,
            converged: true,
        }
    } else {
        ApResult {
            exemplars: vec![0],
            labels: vec![0; n],
            iterations: 0,
            converged: true,
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub centroid: Vec<f64>,
    /// Member column indices, ascending.
    pub members: Vec<usize>,
}

/// Clusters of one layer's (compacted) weight columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerClusters {
    pub layer: usize,
    pub clusters: Vec<Cluster>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClusterModel {
    pub layers: Vec<LayerClusters>,
}

impl ClusterModel {
    pub fn for_layer(&self, layer: usize) -> Option<&[Cluster]> {
        self.layers
            .iter()
            .find(|l| l.layer == layer)
            .map(|l| l.clusters.as_slice())
    }
}

fn check_partition(clusters: &[Cluster], k: usize, len: usize) -> Result<()> {
    let mut seen = vec![false; k];
    for c in clusters {
        if c.members.is_empty() {
            return Err(Error::Degenerate("empty cluster".into()));
        }
        if c.centroid.len() != len {
            return Err(Error::Shape(format!(
                "centroid of length {} for columns of length {len}",
                c.centroid.len()
            )));
        }
        for &m in &c.members {
            if m >= k || std::mem::replace(&mut seen[m], true) {
                return Err(Error::Shape(format!("member {m} out of range or repeated")));
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Shape("clusters do not cover every column".into()));
    }
    Ok(())
}

/// Settings for clustering one layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShareConfig {
    pub preference: Preference,
    /// Cluster unit-norm columns instead of raw ones.
    pub normalize: bool,
    pub ap: ApConfig,
}

/// Cluster the columns of `w`; centroids are member means.
pub fn cluster_columns(w: ArrayView2<f64>, cfg: &ShareConfig) -> Result<(Vec<Cluster>, ApResult)> {
    let mut s = column_similarity(w, cfg.normalize)?;
    set_preference(&mut s, cfg.preference)?;
    let ap = affinity_propagation(s.view(), &cfg.ap)?;
    let mut members = vec![Vec::new(); ap.exemplars.len()];
    for (j, &c) in ap.labels.iter().enumerate() {
        members[c].push(j);
    }
    let clusters = members
        .into_iter()
        .map(|m| {
            let centroid = w.select(Axis(1), &m).mean_axis(Axis(1)).expect("non-empty cluster");
            Cluster {
                centroid: centroid.to_vec(),
                members: m,
            }
        })
        .collect();
    Ok((clusters, ap))
}

/// Arithmetic mean of the member gradients.
pub fn centroid_gradient(member_grads: &[ArrayView1<f64>]) -> Result<Array1<f64>> {
    let first = member_grads
        .first()
        .ok_or_else(|| Error::Degenerate("gradient of an empty cluster".into()))?;
    let mut sum = first.to_owned();
    for g in &member_grads[1..] {
        if g.len() != sum.len() {
            return Err(Error::Shape("member gradients differ in length".into()));
        }
        sum += g;
    }
    Ok(sum / member_grads.len() as f64)
}

/// Replace the columns of an untied dense layer by cluster centroids.
pub fn tie_layer(model: &mut Model, layer: usize, clusters: &[Cluster]) -> Result<()> {
    let l = model
        .layers
        .get_mut(layer)
        .ok_or_else(|| Error::Config(format!("layer {layer} does not exist")))?;
    if l.kind != LayerKind::Dense || l.tying.is_some() {
        return Err(Error::Config(format!("layer {layer} is not an untied dense layer")));
    }
    check_partition(clusters, l.weight.ncols(), l.weight.nrows())?;
    let mut assign = vec![0; l.weight.ncols()];
    let mut g = Array2::zeros((l.weight.nrows(), clusters.len()));
    for (ci, c) in clusters.iter().enumerate() {
        g.column_mut(ci).assign(&ArrayView1::from(&c.centroid[..]));
        for &m in &c.members {
            assign[m] = ci;
        }
    }
    l.weight = g;
    l.tying = Some(Tying {
        assign,
        n_clusters: clusters.len(),
    });
    Ok(())
}

/// Tie the clustered layers and retrain with mean centroid gradients.
/// Tied columns are stored once, so they stay identical throughout.
pub fn retrain_shared(model: &mut Model, clusters: &ClusterModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    for lc in &clusters.layers {
        tie_layer(model, lc.layer, &lc.clusters)?;
    }
    train(
        model,
        data,
        cfg,
        TrainOptions {
            mean_tied_gradient: true,
        },
    )
}

/// `y = G * pooled(x)` with `pooled_i = sum_{j in I_i} x_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedLayer {
    pub centroids: Array2<f64>,
    pub index_sets: Vec<Vec<usize>>,
    pub in_dim: usize,
}

impl SharedLayer {
    pub fn pool(&self, x: &[f64]) -> Vec<f64> {
        self.index_sets
            .iter()
            .map(|set| set.iter().map(|&j| x[j]).sum())
            .collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::Shape(format!("{} inputs for {} columns", x.len(), self.in_dim)));
        }
        Ok(self.centroids.dot(&Array1::from(self.pool(x))).to_vec())
    }

    pub fn pooling_adds(&self) -> u64 {
        self.index_sets
            .iter()
            .map(|s| s.len().saturating_sub(1) as u64)
            .sum()
    }
}

/// Collapse equal columns of `w` into a [`SharedLayer`].
pub fn build_equivalent(w: ArrayView2<f64>, clusters: &[Cluster]) -> Result<SharedLayer> {
    let (n, k) = w.dim();
    check_partition(clusters, k, n)?;
    let mut g = Array2::zeros((n, clusters.len()));
    for (ci, c) in clusters.iter().enumerate() {
        for &m in &c.members {
            let dev = w
                .column(m)
                .iter()
                .zip(&c.centroid)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if dev > 1e-9 {
                return Err(Error::Degenerate(format!(
                    "column {m} differs from its centroid by {dev:e}"
                )));
            }
        }
        g.column_mut(ci).assign(&ArrayView1::from(&c.centroid[..]));
    }
    Ok(SharedLayer {
        centroids: g,
        index_sets: clusters.iter().map(|c| c.members.clone()).collect(),
        in_dim: k,
    })
}

/// Pooling additions plus the CSD cost of the centroid matrix.
pub fn shared_cost(layer: &SharedLayer, cfg: FixedPointConfig) -> CostReport {
    let mut c = csd_matrix_cost(layer.centroids.view(), cfg);
    c.adds += layer.pooling_adds();
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::Architecture;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn similarity_examples() {
        let w = array![[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let s = column_similarity(w.view(), false).unwrap();
        assert_eq!(s[(0, 1)], 0.0);
        assert_eq!(s[(0, 2)], -2.0);
        assert_eq!(s, s.t());
        assert!(s.diag().iter().all(|&v| v == 0.0));
        let scaled = array![[2.0, 0.0], [0.0, 3.0]];
        assert_eq!(column_similarity(scaled.view(), true).unwrap()[(0, 1)], -2.0);
        assert!(column_similarity(Array2::<f64>::zeros((2, 0)).view(), false).is_err());
    }

    /// Best exemplar set by exhaustive search; ties go to the first subset
    /// in mask order.
    fn oracle(s: &Array2<f64>) -> Vec<usize> {
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

    fn points_sim(pts: &[(f64, f64)]) -> Array2<f64> {
        let w = Array2::from_shape_fn((2, pts.len()), |(r, j)| if r == 0 { pts[j].0 } else { pts[j].1 });
        let mut s = column_similarity(w.view(), false).unwrap();
        set_preference(&mut s, Preference::Median).unwrap();
        s
    }

    #[test]
    fn trivial_instances() {
        let one = array![[-1.0]];
        assert_eq!(affinity_propagation(one.view(), &ApConfig::default()).unwrap().exemplars, vec![0]);

        let s = points_sim(&[(0.0, 0.0), (0.01, 0.0), (5.0, 5.0), (5.0, 5.01)]);
        let r = affinity_propagation(s.view(), &ApConfig::default()).unwrap();
        assert_eq!(r.exemplars.len(), 2);
        assert_eq!(r.labels[0], r.labels[1]);
        assert_eq!(r.labels[2], r.labels[3]);
        assert_ne!(r.labels[0], r.labels[2]);

        let same = points_sim(&[(1.0, 1.0); 5]);
        let r = affinity_propagation(same.view(), &ApConfig::default()).unwrap();
        assert_eq!(r.exemplars, vec![0]);
        assert_eq!(r.exemplars, oracle(&same));
    }

    /// Clustered points with a distinct preference per point, so the
    /// optimum is unique.
    fn instance(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Array2<f64> {
        let centres: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0))).collect();
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let c = centres[rng.random_range(0..3)];
                (c.0 + rng.random_range(-1.0..1.0), c.1 + rng.random_range(-1.0..1.0))
            })
            .collect();
        let mut s = points_sim(&pts);
        for i in 0..n {
            s[(i, i)] *= rng.random_range(0.8..1.2);
        }
        s
    }

    #[test]
    fn matches_exhaustive_oracle_on_clustered_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let n = rng.random_range(3..=8);
            let s = instance(&mut rng, n);
            let r = affinity_propagation(s.view(), &ApConfig::default()).unwrap();
            assert_eq!(r.exemplars, oracle(&s));
        }
    }

    #[test]
    fn more_preference_means_more_clusters() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w = Array2::from_shape_fn((4, 60), |_| rng.random_range(-1.0..1.0));
        let base = column_similarity(w.view(), false).unwrap();
        let mut counts = Vec::new();
        for q in [0.1, 0.5, 0.9] {
            let mut s = base.clone();
            set_preference(&mut s, Preference::Quantile(q)).unwrap();
            counts.push(affinity_propagation(s.view(), &ApConfig::default()).unwrap().exemplars.len());
        }
        assert!(counts[0] <= counts[1] && counts[1] <= counts[2], "{counts:?}");
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let w = Array2::from_shape_fn((3, 80), |_| rng.random_range(-1.0..1.0));
        let cfg = ShareConfig::default();
        let mut seq = cfg;
        seq.ap.parallelism = Parallelism::Sequential;
        assert_eq!(cluster_columns(w.view(), &cfg).unwrap(), cluster_columns(w.view(), &seq).unwrap());
    }

    #[test]
    fn centroid_gradient_examples() {
        let g = array![1.0, -2.0];
        let ng = -&g;
        assert_eq!(centroid_gradient(&[g.view(), ng.view()]).unwrap(), array![0.0, 0.0]);
        assert_eq!(centroid_gradient(&[g.view()]).unwrap(), g);
        let (a, b, c) = (array![1.0, 0.0], array![0.0, 1.0], array![2.0, 2.0]);
        assert_eq!(centroid_gradient(&[a.view(), b.view(), c.view()]).unwrap(), array![1.0, 1.0]);
        assert!(centroid_gradient(&[]).is_err());
    }

    #[test]
    fn equivalent_layer_examples() {
        let w = array![[1.0, 2.0], [3.0, 4.0]];
        let singles = vec![
            Cluster { centroid: vec![1.0, 3.0], members: vec![0] },
            Cluster { centroid: vec![2.0, 4.0], members: vec![1] },
        ];
        let l = build_equivalent(w.view(), &singles).unwrap();
        assert_eq!(l.centroids, w);
        assert_eq!(l.pooling_adds(), 0);

        let g = array![[0.5, 0.5, 0.5], [-1.0, -1.0, -1.0]];
        let all = vec![Cluster { centroid: vec![0.5, -1.0], members: vec![0, 1, 2] }];
        let l = build_equivalent(g.view(), &all).unwrap();
        assert_eq!(l.centroids.dim(), (2, 1));
        assert_eq!(l.matvec(&[1.0, 2.0, 3.0]).unwrap(), vec![3.0, -6.0]);
        assert_eq!(l.pooling_adds(), 2);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (a, b): (Vec<f64>, Vec<f64>) = (0..5).map(|_| (rng.random::<f64>(), rng.random::<f64>())).unzip();
        let w = Array2::from_shape_fn((5, 4), |(i, j)| if j < 2 { a[i] } else { b[i] });
        let cl = vec![
            Cluster { centroid: a.clone(), members: vec![0, 1] },
            Cluster { centroid: b.clone(), members: vec![2, 3] },
        ];
        let l = build_equivalent(w.view(), &cl).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
        assert_eq!(l.pool(&x), vec![x[0] + x[1], x[2] + x[3]]);
        let dense = w.dot(&Array1::from(x.clone()));
        for (p, q) in l.matvec(&x).unwrap().iter().zip(dense.iter()) {
            assert!((p - q).abs() < 1e-12);
        }

        let mut off = w.clone();
        off[(0, 1)] += 1e-6;
        assert!(build_equivalent(off.view(), &cl).is_err());
    }

    #[test]
    fn pooling_cost_examples() {
        let sets = vec![vec![0, 1, 2], vec![3, 4], vec![5]];
        let l = SharedLayer { centroids: Array2::zeros((1, 3)), index_sets: sets, in_dim: 6 };
        assert_eq!(l.pooling_adds(), 3);
        assert_eq!(shared_cost(&l, FixedPointConfig::default()).adds, 3);
    }

    /// Two tied input columns behave like one column on the summed feature.
    #[test]
    fn tied_regression_matches_reparameterized_model() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 64;
        let images = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<u8> = images.rows().into_iter().map(|r| (r[0] + r[1] > 0.0) as u8).collect();
        let data = Dataset { images: images.clone(), labels: labels.clone() };
        let mut tied = Architecture::Mlp { hidden: vec![] }.build(1, 2, 0).unwrap();
        tied.layers[0].in_dim = 2;
        tied.layers[0].weight = array![[0.3, 0.1], [-0.2, 0.4]];
        let clusters = ClusterModel {
            layers: vec![LayerClusters {
                layer: 0,
                clusters: vec![Cluster { centroid: vec![0.2, 0.1], members: vec![0, 1] }],
            }],
        };
        let cfg = TrainConfig { epochs: 5, batch_size: 8, lr: 0.1, seed: 9, ..Default::default() };
        retrain_shared(&mut tied, &clusters, &data, &cfg).unwrap();

        // oracle: one input equal to x0 + x1, same shuffles; the tied update
        // uses the mean member gradient, i.e. half the summed-feature gradient
        let summed = Dataset {
            images: images.sum_axis(Axis(1)).insert_axis(Axis(1)),
            labels,
        };
        let mut one = Architecture::Mlp { hidden: vec![] }.build(1, 2, 0).unwrap();
        one.layers[0].weight = array![[0.2], [0.1]];
        // the oracle loop is written out so biases keep the full gradient
        let mut opt = crate::nncore::Optimizer::new(cfg.optimizer, &one, cfg.momentum);
        let mut order: Vec<usize> = (0..n).collect();
        let mut srng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        for epoch in 0..cfg.epochs {
            use rand::seq::SliceRandom;
            let lr = crate::nncore::lr_at_epoch(&cfg, epoch);
            order.shuffle(&mut srng);
            for idx in order.chunks(cfg.batch_size) {
                let (x, y) = summed.select(idx);
                let (_, mut g) = one.backward(x.view(), &y).unwrap();
                g.weights[0] /= 2.0;
                opt.step(&mut one, &g, lr);
            }
        }
        let w = tied.layers[0].effective_weight();
        assert_eq!(w.column(0), w.column(1));
        for r in 0..2 {
            assert!((w[(r, 0)] - one.layers[0].weight[(r, 0)]).abs() < 1e-12);
            assert!((tied.layers[0].bias[r] - one.layers[0].bias[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_epochs_keep_centroids() {
        let mut m = Architecture::Mlp { hidden: vec![] }.build(2, 2, 0).unwrap();
        let w = m.layers[0].weight.clone();
        let (clusters, _) = cluster_columns(w.view(), &ShareConfig::default()).unwrap();
        let cm = ClusterModel { layers: vec![LayerClusters { layer: 0, clusters: clusters.clone() }] };
        let data = Dataset { images: Array2::zeros((1, 4)), labels: vec![0] };
        retrain_shared(&mut m, &cm, &data, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        let eff = m.layers[0].effective_weight();
        for c in &clusters {
            for &j in &c.members {
                assert_eq!(eff.column(j).to_vec(), c.centroid);
            }
        }
    }
}
