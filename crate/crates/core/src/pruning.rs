//! Group-lasso regularization and structured pruning.
//!
//! A layer's weights are reshaped into a group matrix whose rows are the
//! groups to keep or drop: input columns for dense layers, whole kernels for
//! FK-lowered convolutions and kernel columns for PK-lowered ones. The
//! proximal operator of the group-lasso penalty is block soft thresholding
//! of those rows.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Reshaping of a layer's weight tensor into groups.
///
/// Dense weights are stored `N x K`. Convolution weights are stored
/// `N x (K * O * O)` with kernel `(n, k)` at columns `k*O*O .. (k+1)*O*O`,
/// row-major inside the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroupStructure {
    /// Groups are the `K` input columns (the transpose of `W`).
    Dense { rows: usize, cols: usize },
    /// Groups are kernels; row `k*N + n` holds kernel `(n, k)` flattened.
    ConvFk { out_maps: usize, in_maps: usize, kernel: usize },
    /// Groups are kernel columns; row `(k*N + n)*O + t` holds column `t` of
    /// kernel `(n, k)`.
    ConvPk { out_maps: usize, in_maps: usize, kernel: usize },
}

impl GroupStructure {
    pub fn weight_shape(&self) -> (usize, usize) {
        match *self {
            GroupStructure::Dense { rows, cols } => (rows, cols),
            GroupStructure::ConvFk {
                out_maps,
                in_maps,
                kernel,
            }
            | GroupStructure::ConvPk {
                out_maps,
                in_maps,
                kernel,
            } => (out_maps, in_maps * kernel * kernel),
        }
    }

    pub fn group_shape(&self) -> (usize, usize) {
        match *self {
            GroupStructure::Dense { rows, cols } => (cols, rows),
            GroupStructure::ConvFk {
                out_maps,
                in_maps,
                kernel,
            } => (in_maps * out_maps, kernel * kernel),
            GroupStructure::ConvPk {
                out_maps,
                in_maps,
                kernel,
            } => (in_maps * out_maps * kernel, kernel),
        }
    }

    pub fn n_groups(&self) -> usize {
        self.group_shape().0
    }

    /// Position in the weight matrix of entry `(g, j)` of the group matrix.
    fn locate(&self, g: usize, j: usize) -> (usize, usize) {
        match *self {
            GroupStructure::Dense { .. } => (j, g),
            GroupStructure::ConvFk {
                out_maps, kernel, ..
            } => {
                let (k, n) = (g / out_maps, g % out_maps);
                (n, k * kernel * kernel + j)
            }
            GroupStructure::ConvPk {
                out_maps, kernel, ..
            } => {
                let t = g % kernel;
                let kn = g / kernel;
                let (k, n) = (kn / out_maps, kn % out_maps);
                // j is the kernel row r
                (n, k * kernel * kernel + j * kernel + t)
            }
        }
    }

    fn check(&self, w: ArrayView2<f64>, expect: (usize, usize), what: &str) -> Result<()> {
        if w.dim() != expect {
            return Err(Error::Shape(format!(
                "{what}: expected {expect:?}, got {:?}",
                w.dim()
            )));
        }
        Ok(())
    }

    /// The group matrix `W~`.
    pub fn to_groups(&self, w: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(w, self.weight_shape(), "weight")?;
        if let GroupStructure::Dense { .. } = self {
            return Ok(w.t().to_owned());
        }
        Ok(Array2::from_shape_fn(self.group_shape(), |(g, j)| w[self.locate(g, j)]))
    }

    /// Inverse of [`GroupStructure::to_groups`].
    pub fn from_groups(&self, g: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(g, self.group_shape(), "group matrix")?;
        if let GroupStructure::Dense { .. } = self {
            return Ok(g.t().to_owned());
        }
        let mut w = Array2::zeros(self.weight_shape());
        for ((gi, j), &v) in g.indexed_iter() {
            w[self.locate(gi, j)] = v;
        }
        Ok(w)
    }

    /// Euclidean norm of every group, read straight from the weights.
    pub fn group_norms(&self, w: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check(w, self.weight_shape(), "weight")?;
        if let GroupStructure::Dense { .. } = self {
            return Ok(w.map_axis(Axis(0), |c| c.dot(&c).sqrt()).to_vec());
        }
        let (ng, len) = self.group_shape();
        Ok((0..ng)
            .map(|g| {
                (0..len)
                    .map(|j| {
                        let v = w[self.locate(g, j)];
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }

    /// Block soft thresholding applied directly to the weights.
    pub fn prox_in_place(&self, w: &mut Array2<f64>, t: f64) -> Result<()> {
        let norms = self.group_norms(w.view())?;
        if let GroupStructure::Dense { .. } = self {
            let f: Vec<f64> = norms.iter().map(|&n| shrink_factor(n, t)).collect();
            for mut row in w.rows_mut() {
                row.iter_mut().zip(&f).for_each(|(v, f)| *v *= f);
            }
            return Ok(());
        }
        let len = self.group_shape().1;
        for (g, &n) in norms.iter().enumerate() {
            let f = shrink_factor(n, t);
            if f == 1.0 {
                continue;
            }
            for j in 0..len {
                w[self.locate(g, j)] *= f;
            }
        }
        Ok(())
    }
}

#[inline]
fn shrink_factor(norm: f64, t: f64) -> f64 {
    if norm == 0.0 {
        0.0
    } else {
        (1.0 - t / norm).max(0.0)
    }
}

/// Regularization weight and step size for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub lambda: f64,
    pub lr: f64,
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        self.lr * self.lambda
    }
}

/// `lambda * sum_i ||row_i||_2`.
pub fn group_lasso_penalty(groups: ArrayView2<f64>, lambda: f64) -> f64 {
    lambda
        * groups
            .axis_iter(Axis(0))
            .map(|r| r.dot(&r).sqrt())
            .sum::<f64>()
}

/// `row_i <- max(1 - t / ||row_i||, 0) * row_i`.
pub fn block_soft_threshold(groups: ArrayView2<f64>, t: f64) -> Array2<f64> {
    let mut out = groups.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        let f = shrink_factor(n, t);
        row.mapv_inplace(|v| v * f);
    }
    out
}

/// One proximal gradient step: a plain gradient step on the loss followed
/// by block soft thresholding with `t = lr * lambda`. Biases only take the
/// gradient step.
pub fn proximal_step(
    weight: ArrayView2<f64>,
    bias: &[f64],
    grad_w: ArrayView2<f64>,
    grad_b: &[f64],
    cfg: RegConfig,
    gs: GroupStructure,
) -> Result<(Array2<f64>, Vec<f64>)> {
    cfg.validate()?;
    if weight.dim() != grad_w.dim() || bias.len() != grad_b.len() {
        return Err(Error::Shape("gradient does not match layer".into()));
    }
    let mut w = &weight - &(&grad_w * cfg.lr);
    gs.prox_in_place(&mut w, cfg.threshold())?;
    let b = bias.iter().zip(grad_b).map(|(b, g)| b - cfg.lr * g).collect();
    Ok((w, b))
}

/// Pruned layer restricted to its surviving groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Compacted {
    /// Dense layers: `N x K'` (retained columns). Convolutions: the
    /// retained rows of the group matrix.
    pub matrix: Array2<f64>,
    pub retained: Vec<usize>,
}

/// Drop every group whose norm is `<= tol`.
pub fn compact_pruned(w: ArrayView2<f64>, gs: GroupStructure, tol: f64) -> Result<Compacted> {
    if !(tol >= 0.0) {
        return Err(Error::Config("tolerance must be >= 0".into()));
    }
    let norms = gs.group_norms(w)?;
    let retained: Vec<usize> = norms
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > tol)
        .map(|(i, _)| i)
        .collect();
    if retained.is_empty() {
        return Err(Error::Degenerate(format!(
            "all {} groups pruned",
            norms.len()
        )));
    }
    let matrix = match gs {
        GroupStructure::Dense { .. } => w.select(Axis(1), &retained),
        _ => gs.to_groups(w)?.select(Axis(0), &retained),
    };
    Ok(Compacted { matrix, retained })
}

/// Default tolerance for treating a group as pruned after training.
pub const PRUNE_TOL: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};

    #[test]
    fn penalty_examples() {
        let z = Array2::<f64>::zeros((3, 2));
        assert_eq!(group_lasso_penalty(z.view(), 0.7), 0.0);
        let g = array![[3.0, 4.0], [0.0, 0.0]];
        assert!((group_lasso_penalty(g.view(), 0.1) - 0.5).abs() < 1e-15);
        let g2 = &g * 2.5;
        assert!((group_lasso_penalty(g2.view(), 0.1) - 2.5 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn threshold_examples() {
        let g = array![[3.0, 4.0], [0.3, 0.4], [0.0, 0.0]];
        let out = block_soft_threshold(g.view(), 1.0);
        assert!((out[(0, 0)] - 2.4).abs() < 1e-12 && (out[(0, 1)] - 3.2).abs() < 1e-12);
        assert_eq!(out.row(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(out.row(2).to_vec(), vec![0.0, 0.0]);
        assert_eq!(block_soft_threshold(g.view(), 0.0), g);
    }

    #[test]
    fn scalar_proximal_step() {
        // prox input 1 - 0.1*0.5 = 0.95, t = 0.2 -> 0.75
        let w = array![[1.0]];
        let gw = array![[0.5]];
        let (out, b) = proximal_step(
            w.view(),
            &[0.0],
            gw.view(),
            &[1.0],
            RegConfig { lambda: 2.0, lr: 0.1 },
            GroupStructure::Dense { rows: 1, cols: 1 },
        )
        .unwrap();
        assert!((out[(0, 0)] - 0.75).abs() < 1e-15);
        assert!((b[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_is_plain_gradient_step() {
        let w = array![[1.0, -2.0], [0.5, 0.25]];
        let gw = array![[0.1, 0.2], [-0.3, 0.4]];
        let (out, _) = proximal_step(
            w.view(),
            &[0.0, 0.0],
            gw.view(),
            &[0.0, 0.0],
            RegConfig { lambda: 0.0, lr: 0.5 },
            GroupStructure::Dense { rows: 2, cols: 2 },
        )
        .unwrap();
        assert_eq!(out, &w - &(&gw * 0.5));
        assert!(proximal_step(
            w.view(),
            &[0.0],
            gw.view(),
            &[0.0, 0.0],
            RegConfig { lambda: 0.0, lr: 0.5 },
            GroupStructure::Dense { rows: 2, cols: 2 },
        )
        .is_err());
    }

    /// Toy regression: the third feature is pure noise and its column must
    /// reach exactly zero.
    #[test]
    fn noise_feature_is_pruned_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 256;
        let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let y: Array1<f64> = x.column(0).mapv(|v| 2.0 * v) - x.column(1).mapv(|v| 0.5 * v);
        let mut w = array![[0.1, 0.1, 0.3]];
        let gs = GroupStructure::Dense { rows: 1, cols: 3 };
        let cfg = RegConfig { lambda: 0.05, lr: 0.1 };
        for _ in 0..200 {
            let pred = x.dot(&w.row(0));
            let err = &pred - &y;
            let g = x.t().dot(&err) / n as f64;
            let gw = g.insert_axis(Axis(0));
            let (nw, _) = proximal_step(w.view(), &[0.0], gw.view(), &[0.0], cfg, gs).unwrap();
            w = nw;
        }
        assert_eq!(w[(0, 2)], 0.0);
        assert!(w[(0, 0)] > 1.5 && w[(0, 1)] < -0.2);
    }

    #[test]
    fn compact_examples() {
        let w = array![[1.0, 0.0, 2.0], [3.0, 0.0, 4.0]];
        let gs = GroupStructure::Dense { rows: 2, cols: 3 };
        let c = compact_pruned(w.view(), gs, 0.0).unwrap();
        assert_eq!(c.retained, vec![0, 2]);
        assert_eq!(c.matrix, array![[1.0, 2.0], [3.0, 4.0]]);

        let full = array![[1.0, 2.0], [3.0, 4.0]];
        let c = compact_pruned(full.view(), GroupStructure::Dense { rows: 2, cols: 2 }, PRUNE_TOL).unwrap();
        assert_eq!(c.matrix, full);
        assert_eq!(c.retained, vec![0, 1]);

        let z = Array2::<f64>::zeros((2, 2));
        assert!(matches!(
            compact_pruned(z.view(), GroupStructure::Dense { rows: 2, cols: 2 }, PRUNE_TOL),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn compact_mnist_scale() {
        let mut w = Array2::<f64>::zeros((300, 784));
        for j in 0..14 {
            for i in 0..300 {
                w[(i, j * 50)] = (i + j) as f64 * 0.01 + 0.01;
            }
        }
        let c = compact_pruned(w.view(), GroupStructure::Dense { rows: 300, cols: 784 }, PRUNE_TOL).unwrap();
        assert_eq!(c.matrix.dim(), (300, 14));
        // gathering the inputs reproduces the full product
        let x = Array1::from_shape_fn(784, |i| (i as f64).sin());
        let xg = x.select(Axis(0), &c.retained);
        let a = w.dot(&x);
        let b = c.matrix.dot(&xg);
        assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn conv_group_layouts() {
        // N=1, K=1, O=2, kernel [[1,2],[3,4]]
        let w = array![[1.0, 2.0, 3.0, 4.0]];
        let fk = GroupStructure::ConvFk { out_maps: 1, in_maps: 1, kernel: 2 };
        assert_eq!(fk.to_groups(w.view()).unwrap(), array![[1.0, 2.0, 3.0, 4.0]]);
        let pk = GroupStructure::ConvPk { out_maps: 1, in_maps: 1, kernel: 2 };
        assert_eq!(pk.to_groups(w.view()).unwrap(), array![[1.0, 3.0], [2.0, 4.0]]);

        let fk = GroupStructure::ConvFk { out_maps: 2, in_maps: 3, kernel: 3 };
        assert_eq!(fk.group_shape(), (6, 9));
    }

    #[test]
    fn group_maps_roundtrip_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let cases = [
            GroupStructure::Dense { rows: 5, cols: 7 },
            GroupStructure::ConvFk { out_maps: 3, in_maps: 4, kernel: 3 },
            GroupStructure::ConvPk { out_maps: 3, in_maps: 4, kernel: 3 },
        ];
        for gs in cases {
            let w = Array2::from_shape_fn(gs.weight_shape(), |_| rng.random::<f64>() - 0.5);
            let g = gs.to_groups(w.view()).unwrap();
            assert_eq!(g.dim(), gs.group_shape());
            assert_eq!(gs.from_groups(g.view()).unwrap(), w);
            // in-place prox agrees with thresholding the group matrix
            let mut a = w.clone();
            gs.prox_in_place(&mut a, 0.4).unwrap();
            let b = gs
                .from_groups(block_soft_threshold(g.view(), 0.4).view())
                .unwrap();
            assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-15));
        }
    }

    #[test]
    fn zeroing_a_group_zeroes_the_kernel_part() {
        let gs = GroupStructure::ConvPk { out_maps: 2, in_maps: 2, kernel: 3 };
        let w = Array2::from_elem(gs.weight_shape(), 1.0);
        let mut g = gs.to_groups(w.view()).unwrap();
        // group (k=1, n=0, t=2)
        let gi = (1 * 2 + 0) * 3 + 2;
        g.row_mut(gi).fill(0.0);
        let back = gs.from_groups(g.view()).unwrap();
        for r in 0..3 {
            assert_eq!(back[(0, 9 + r * 3 + 2)], 0.0);
        }
        assert_eq!(back.iter().filter(|&&v| v == 0.0).count(), 3);
    }
}
