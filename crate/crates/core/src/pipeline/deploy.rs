//! The deployed network: gather, pool and multiply-free products.

use ndarray::{Array2, ArrayView2};

use crate::convlower::{conv_forward_with, lower, ConvSpec, Lowering};
use crate::lcc::{execute_program, AdderProgram};
use crate::nncore::{top1_with, Activation, Dataset, LayerKind, Model};
use crate::par::Parallelism;
use crate::{Error, Result};

/// How one matrix product is carried out.
#[derive(Debug, Clone, PartialEq)]
pub enum Product {
    Dense(Array2<f64>),
    Program(AdderProgram),
}

impl Product {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Product::Dense(w) => w.dim(),
            Product::Program(p) => (p.outputs.len(), p.n_inputs),
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let (r, c) = self.shape();
        if x.len() != c || out.len() != r {
            return Err(Error::Shape(format!("{r}x{c} product on {} -> {} values", x.len(), out.len())));
        }
        match self {
            Product::Dense(w) => {
                for (o, row) in out.iter_mut().zip(w.rows()) {
                    *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
            Product::Program(p) => out.copy_from_slice(&execute_program(p, x)?),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeployedLayer {
    Dense {
        gather: Option<Vec<usize>>,
        /// Gathered inputs summed per tied cluster.
        pool: Option<Vec<Vec<usize>>>,
        product: Product,
        bias: Vec<f64>,
        activation: Activation,
    },
    Conv {
        spec: ConvSpec,
        method: Lowering,
        /// One product per input map.
        products: Vec<Product>,
        bias: Vec<f64>,
        activation: Activation,
    },
}

impl DeployedLayer {
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            DeployedLayer::Dense {
                gather,
                pool,
                product,
                bias,
                activation,
            } => {
                let xg: Vec<f64> = match gather {
                    Some(g) => g.iter().map(|&j| x[j]).collect(),
                    None => x.to_vec(),
                };
                let u: Vec<f64> = match pool {
                    Some(sets) => sets.iter().map(|s| s.iter().map(|&j| xg[j]).sum()).collect(),
                    None => xg,
                };
                let mut out = vec![0.0; bias.len()];
                product.apply(&u, &mut out)?;
                Ok(out.iter().zip(bias).map(|(v, b)| activation.apply(v + b)).collect())
            }
            DeployedLayer::Conv {
                spec,
                method,
                products,
                bias,
                activation,
            } => {
                let (mut y, _) = conv_forward_with(*spec, *method, x, |k, input, out| products[k].apply(input, out))?;
                let pp = spec.out_size() * spec.out_size();
                for (m, chunk) in y.chunks_mut(pp).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = activation.apply(*v + bias[m]));
                }
                Ok(y)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeployedModel {
    pub layers: Vec<DeployedLayer>,
}

impl DeployedModel {
    /// Deploy with float products. `programs[l]`, when given, replaces the
    /// products of layer `l` (one program per dense layer, one per input
    /// map for convolutions).
    pub fn new(model: &Model, programs: &[Option<Vec<AdderProgram>>]) -> Result<Self> {
        model.validate()?;
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, l) in model.layers.iter().enumerate() {
            let progs = programs.get(i).and_then(|p| p.as_ref());
            let deployed = match l.kind {
                LayerKind::Dense => {
                    let product = match progs.map(|p| p.as_slice()) {
                        None => Product::Dense(l.weight.clone()),
                        Some([p]) => Product::Program(p.clone()),
                        Some(_) => return Err(Error::Shape(format!("dense layer {i} needs exactly one program"))),
                    };
                    DeployedLayer::Dense {
                        gather: l.gather.clone(),
                        pool: l.tying.as_ref().map(|t| t.members()),
                        product,
                        bias: l.bias.to_vec(),
                        activation: l.activation,
                    }
                }
                LayerKind::Conv { spec, lowering } => {
                    let products = match progs {
                        None => lower(spec, l.weight.view(), lowering)?
                            .matrices
                            .into_iter()
                            .map(Product::Dense)
                            .collect(),
                        Some(p) if p.len() == spec.in_maps => p.iter().cloned().map(Product::Program).collect(),
                        Some(p) => {
                            return Err(Error::Shape(format!(
                                "conv layer {i} has {} input maps but {} programs",
                                spec.in_maps,
                                p.len()
                            )))
                        }
                    };
                    DeployedLayer::Conv {
                        spec,
                        method: lowering,
                        products,
                        bias: l.bias.to_vec(),
                        activation: l.activation,
                    }
                }
            };
            layers.push(deployed);
        }
        Ok(DeployedModel { layers })
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for l in &self.layers {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    /// Logits for a batch, one row per sample.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut rows = Vec::new();
        let mut width = 0;
        for r in x.rows() {
            let y = self.forward_one(&r.to_vec())?;
            width = y.len();
            rows.extend(y);
        }
        Ok(Array2::from_shape_vec((x.nrows(), width), rows).expect("uniform output width"))
    }

    pub fn accuracy(&self, data: &Dataset, mode: Parallelism) -> Result<f64> {
        top1_with(data, mode, |x| self.predict(x))
    }
}
