//! Lowering of convolutional layers to matrix-vector products.
//!
//! Convolutions are cross-correlations with stride 1 and no padding. Input
//! maps are stored map-major (`x[k*Z*Z + r*Z + c]`) and outputs likewise
//! (`y[n*P*P + r*P + c]`, `P = Z - O + 1`). Weights use the layout of
//! [`crate::pruning::GroupStructure`]: `N x (K*O*O)`, kernel `(n, k)` in
//! columns `k*O*O .. (k+1)*O*O`.
//!
//! - FK: one `N x O^2` matrix per input map; each output position costs one
//!   product per map.
//! - PK: one `N*O x O` matrix per input map whose rows are kernel columns;
//!   every `O`-long column segment of the input is multiplied once and the
//!   `O` partial outputs of each kernel are summed afterwards.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::pruning::GroupStructure;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_maps: usize,
    pub out_maps: usize,
    pub kernel: usize,
    pub input: usize,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_maps == 0 || self.out_maps == 0 || self.kernel == 0 || self.input == 0 {
            return Err(Error::Config(format!("conv dimensions must be >= 1: {self:?}")));
        }
        if self.kernel > self.input {
            return Err(Error::Config(format!(
                "kernel {} larger than input {}",
                self.kernel, self.input
            )));
        }
        Ok(())
    }

    /// Output side length `P = Z - O + 1`.
    pub fn out_size(&self) -> usize {
        self.input + 1 - self.kernel
    }

    pub fn input_len(&self) -> usize {
        self.in_maps * self.input * self.input
    }

    pub fn output_len(&self) -> usize {
        self.out_maps * self.out_size() * self.out_size()
    }

    pub fn weight_shape(&self) -> (usize, usize) {
        (self.out_maps, self.in_maps * self.kernel * self.kernel)
    }

    pub fn group_structure(&self, method: Lowering) -> GroupStructure {
        let (out_maps, in_maps, kernel) = (self.out_maps, self.in_maps, self.kernel);
        match method {
            Lowering::Fk => GroupStructure::ConvFk {
                out_maps,
                in_maps,
                kernel,
            },
            Lowering::Pk => GroupStructure::ConvPk {
                out_maps,
                in_maps,
                kernel,
            },
        }
    }

    /// Products evaluated per input map for one forward pass.
    pub fn positions_per_map(&self, method: Lowering) -> usize {
        match method {
            Lowering::Fk => self.out_size() * self.out_size(),
            Lowering::Pk => self.out_size() * self.input,
        }
    }

    fn check_weight(&self, w: ArrayView2<f64>) -> Result<()> {
        self.validate()?;
        if w.dim() != self.weight_shape() {
            return Err(Error::Shape(format!(
                "conv weight: expected {:?}, got {:?}",
                self.weight_shape(),
                w.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Lowering {
    #[default]
    Fk,
    Pk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoweredConv {
    pub method: Lowering,
    pub spec: ConvSpec,
    /// One matrix per input map.
    pub matrices: Vec<Array2<f64>>,
}

/// `W_k` with row `n` the row-major flattening of kernel `(n, k)`.
pub fn fk_matrices(spec: ConvSpec, w: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
    spec.check_weight(w)?;
    let o2 = spec.kernel * spec.kernel;
    Ok((0..spec.in_maps)
        .map(|k| w.slice(ndarray::s![.., k * o2..(k + 1) * o2]).to_owned())
        .collect())
}

/// `W_k` with row `n*O + t` equal to column `t` of kernel `(n, k)`.
pub fn pk_matrices(spec: ConvSpec, w: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
    spec.check_weight(w)?;
    let o = spec.kernel;
    Ok((0..spec.in_maps)
        .map(|k| {
            Array2::from_shape_fn((spec.out_maps * o, o), |(row, r)| {
                let (n, t) = (row / o, row % o);
                w[(n, k * o * o + r * o + t)]
            })
        })
        .collect())
}

pub fn lower(spec: ConvSpec, w: ArrayView2<f64>, method: Lowering) -> Result<LoweredConv> {
    let matrices = match method {
        Lowering::Fk => fk_matrices(spec, w)?,
        Lowering::Pk => pk_matrices(spec, w)?,
    };
    Ok(LoweredConv {
        method,
        spec,
        matrices,
    })
}

/// Vertical stack of the per-map matrices; its rows are the pruning groups.
pub fn conv_group_matrix(lowered: &LoweredConv) -> Array2<f64> {
    let views: Vec<_> = lowered.matrices.iter().map(|m| m.view()).collect();
    concatenate(Axis(0), &views).expect("per-map matrices share a column count")
}

/// Work done by one lowered forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    /// Products evaluated per input map.
    pub products: Vec<u64>,
    /// Additions spent combining partial outputs.
    pub accumulate_adds: u64,
}

impl ForwardTrace {
    /// Total additions given the cost of one product with each `W_k`.
    pub fn total_adds(&self, per_matrix: &[u64]) -> u64 {
        self.products
            .iter()
            .zip(per_matrix)
            .map(|(p, a)| p * a)
            .sum::<u64>()
            + self.accumulate_adds
    }
}

/// Accumulator that counts an addition for every contribution after the first.
struct Acc {
    vals: Vec<f64>,
    seen: Vec<bool>,
    adds: u64,
}

impl Acc {
    fn new(n: usize) -> Self {
        Acc {
            vals: vec![0.0; n],
            seen: vec![false; n],
            adds: 0,
        }
    }

    #[inline]
    fn add(&mut self, i: usize, v: f64) {
        if self.seen[i] {
            self.vals[i] += v;
            self.adds += 1;
        } else {
            self.vals[i] = v;
            self.seen[i] = true;
        }
    }
}

/// Lowered forward pass with a caller-supplied product.
///
/// `product(k, input, out)` must write `W_k * input` into `out`; this lets
/// the same plan run dense matrices, adder programs or instrumented code.
pub fn conv_forward_with<F>(
    spec: ConvSpec,
    method: Lowering,
    x: &[f64],
    mut product: F,
) -> Result<(Vec<f64>, ForwardTrace)>
where
    F: FnMut(usize, &[f64], &mut [f64]) -> Result<()>,
{
    spec.validate()?;
    if x.len() != spec.input_len() {
        return Err(Error::Shape(format!(
            "conv input: expected {}, got {}",
            spec.input_len(),
            x.len()
        )));
    }
    let (z, o, p, n_out) = (spec.input, spec.kernel, spec.out_size(), spec.out_maps);
    let pp = p * p;
    let mut acc = Acc::new(spec.output_len());
    let mut trace = ForwardTrace {
        products: vec![0; spec.in_maps],
        accumulate_adds: 0,
    };
    match method {
        Lowering::Fk => {
            let mut field = vec![0.0; o * o];
            let mut out = vec![0.0; n_out];
            for k in 0..spec.in_maps {
                let map = &x[k * z * z..(k + 1) * z * z];
                for r in 0..p {
                    for c in 0..p {
                        for i in 0..o {
                            field[i * o..(i + 1) * o].copy_from_slice(&map[(r + i) * z + c..(r + i) * z + c + o]);
                        }
                        product(k, &field, &mut out)?;
                        trace.products[k] += 1;
                        for (n, &v) in out.iter().enumerate() {
                            acc.add(n * pp + r * p + c, v);
                        }
                    }
                }
            }
        }
        Lowering::Pk => {
            let mut seg = vec![0.0; o];
            let mut out = vec![0.0; n_out * o];
            for k in 0..spec.in_maps {
                let map = &x[k * z * z..(k + 1) * z * z];
                for r in 0..p {
                    for cc in 0..z {
                        for (i, s) in seg.iter_mut().enumerate() {
                            *s = map[(r + i) * z + cc];
                        }
                        product(k, &seg, &mut out)?;
                        trace.products[k] += 1;
                        // row n*O + t contributes to output column cc - t
                        for n in 0..n_out {
                            for t in 0..o {
                                if cc >= t && cc - t < p {
                                    acc.add(n * pp + r * p + (cc - t), out[n * o + t]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    trace.accumulate_adds = acc.adds;
    Ok((acc.vals, trace))
}

/// Lowered forward pass with the dense per-map matrices.
pub fn conv_forward(x: &[f64], lowered: &LoweredConv) -> Result<Vec<f64>> {
    let (y, _) = conv_forward_with(lowered.spec, lowered.method, x, |k, input, out| {
        let m = &lowered.matrices[k];
        for (o, row) in out.iter_mut().zip(m.rows()) {
            *o = row.iter().zip(input).map(|(a, b)| a * b).sum();
        }
        Ok(())
    })?;
    Ok(y)
}

/// Additions for one forward pass given the additions of one product with
/// each `W_k`.
///
/// FK: `P^2 * (sum_k a_k + (K-1)*N)`.
/// PK: `P*Z * sum_k a_k + (K*O - 1)*N*P^2`; every output sums `O` partial
/// outputs from each of the `K` maps.
pub fn conv_addition_cost(spec: ConvSpec, method: Lowering, per_matrix: &[u64]) -> Result<u64> {
    spec.validate()?;
    if per_matrix.len() != spec.in_maps {
        return Err(Error::Shape(format!(
            "{} per-matrix costs for {} input maps",
            per_matrix.len(),
            spec.in_maps
        )));
    }
    let (k, n, o) = (spec.in_maps as u64, spec.out_maps as u64, spec.kernel as u64);
    let p = spec.out_size() as u64;
    let sum: u64 = per_matrix.iter().sum();
    Ok(match method {
        Lowering::Fk => p * p * (sum + (k - 1) * n),
        Lowering::Pk => p * spec.input as u64 * sum + (k * o - 1) * n * p * p,
    })
}
