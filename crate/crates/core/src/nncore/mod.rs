//! A small, deterministic training stack.
//!
//! Models are stacks of dense and convolutional layers in `f64`. A dense
//! layer may read only a subset of its inputs (`gather`, left behind by
//! pruning) and may tie groups of its columns to shared centroids
//! (`tying`, left behind by weight sharing). Tied columns are stored once,
//! so they cannot drift apart during retraining.
//!
//! Batches are row-major: one sample per row. Convolutional layers use the
//! map-major layout of [`crate::convlower`].

mod data;
mod optim;
mod train;

pub use data::{load_mnist, load_mnist_idx, Dataset, Split, DATA_DIR_ENV};
pub use optim::{lr_at_epoch, sgd_momentum_step, Adam, Optimizer, OptimizerKind, Sgd};
pub use train::{train, TrainConfig, TrainLog, TrainOptions};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::convlower::{ConvSpec, Lowering};
use crate::par::{self, Parallelism};
use crate::pruning::GroupStructure;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => (z > 0.0) as u8 as f64,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv { spec: ConvSpec, lowering: Lowering },
}

/// Columns tied to shared centroids: `assign[j]` is the cluster of the
/// `j`-th (gathered) input column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tying {
    pub assign: Vec<usize>,
    pub n_clusters: usize,
}

impl Tying {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_clusters];
        for &c in &self.assign {
            s[c] += 1;
        }
        s
    }

    /// Member columns of every cluster, in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.n_clusters];
        for (j, &c) in self.assign.iter().enumerate() {
            m[c].push(j);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub activation: Activation,
    /// Width of the incoming activation vector.
    pub in_dim: usize,
    /// Dense: `N x q`, `q` = clusters, gathered or input columns.
    /// Conv: `N x (K*O*O)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub gather: Option<Vec<usize>>,
    pub tying: Option<Tying>,
}

fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let u = Uniform::new_inclusive(-a, a).expect("finite bound");
    Array2::from_shape_fn((rows, cols), |_| u.sample(rng))
}

impl Layer {
    pub fn dense(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Layer {
            kind: LayerKind::Dense,
            activation,
            in_dim,
            weight: glorot(out_dim, in_dim, in_dim, out_dim, rng),
            bias: Array1::zeros(out_dim),
            gather: None,
            tying: None,
        }
    }

    pub fn conv(spec: ConvSpec, lowering: Lowering, activation: Activation, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let o2 = spec.kernel * spec.kernel;
        let (n, q) = spec.weight_shape();
        Layer {
            kind: LayerKind::Conv { spec, lowering },
            activation,
            in_dim: spec.input_len(),
            weight: glorot(n, q, spec.in_maps * o2, spec.out_maps * o2, rng),
            bias: Array1::zeros(spec.out_maps),
            gather: None,
            tying: None,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.weight.nrows(),
            LayerKind::Conv { spec, .. } => spec.output_len(),
        }
    }

    /// Number of inputs actually read after gathering.
    pub fn gathered_width(&self) -> usize {
        self.gather.as_ref().map_or(self.in_dim, |g| g.len())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Shape(m));
        match self.kind {
            LayerKind::Dense => {
                if let Some(g) = &self.gather {
                    if g.iter().any(|&i| i >= self.in_dim) || g.windows(2).any(|w| w[0] >= w[1]) {
                        return bad("gather indices must be increasing and in range".into());
                    }
                }
                let q = match &self.tying {
                    Some(t) => {
                        if t.assign.len() != self.gathered_width() || t.assign.iter().any(|&c| c >= t.n_clusters) {
                            return bad("tying does not match the layer inputs".into());
                        }
                        if t.sizes().contains(&0) {
                            return bad("tying has an empty cluster".into());
                        }
                        t.n_clusters
                    }
                    None => self.gathered_width(),
                };
                if self.weight.ncols() != q {
                    return bad(format!("weight has {} columns, expected {q}", self.weight.ncols()));
                }
                if self.bias.len() != self.weight.nrows() {
                    return bad("bias length differs from output width".into());
                }
            }
            LayerKind::Conv { spec, .. } => {
                spec.validate()?;
                if self.gather.is_some() || self.tying.is_some() {
                    return bad("convolutional layers take no gather or tying".into());
                }
                if self.weight.dim() != spec.weight_shape() || self.bias.len() != spec.out_maps || self.in_dim != spec.input_len() {
                    return bad(format!("conv layer does not match {spec:?}"));
                }
            }
        }
        Ok(())
    }

    /// Group structure of the trainable weight.
    pub fn group_structure(&self) -> GroupStructure {
        match self.kind {
            LayerKind::Dense => GroupStructure::Dense {
                rows: self.weight.nrows(),
                cols: self.weight.ncols(),
            },
            LayerKind::Conv { spec, lowering } => spec.group_structure(lowering),
        }
    }

    /// The weight as an ordinary dense `N x in_dim` matrix (conv: as stored).
    pub fn effective_weight(&self) -> Array2<f64> {
        if let LayerKind::Conv { .. } = self.kind {
            return self.weight.clone();
        }
        let mut w = Array2::zeros((self.weight.nrows(), self.in_dim));
        for j in 0..self.gathered_width() {
            let dst = self.gather.as_ref().map_or(j, |g| g[j]);
            let src = self.tying.as_ref().map_or(j, |t| t.assign[j]);
            w.column_mut(dst).assign(&self.weight.column(src));
        }
        w
    }

    /// Dense: gather then pool tied columns. Conv: im2col.
    fn layer_input(&self, x: ArrayView2<f64>) -> Array2<f64> {
        match self.kind {
            LayerKind::Dense => {
                let xg = match &self.gather {
                    Some(g) => x.select(Axis(1), g),
                    None => x.to_owned(),
                };
                match &self.tying {
                    None => xg,
                    Some(t) => {
                        let mut u = Array2::zeros((x.nrows(), t.n_clusters));
                        for (mut urow, xrow) in u.rows_mut().into_iter().zip(xg.rows()) {
                            for (&c, &v) in t.assign.iter().zip(xrow) {
                                urow[c] += v;
                            }
                        }
                        u
                    }
                }
            }
            LayerKind::Conv { spec, .. } => im2col(spec, x),
        }
    }

    /// Map a gradient with respect to [`Layer::layer_input`] back to the raw
    /// input.
    fn input_gradient(&self, du: ArrayView2<f64>) -> Array2<f64> {
        let b = du.nrows();
        match self.kind {
            LayerKind::Dense => {
                let mut dx = Array2::zeros((b, self.in_dim));
                for (mut dxr, dur) in dx.rows_mut().into_iter().zip(du.rows()) {
                    for j in 0..self.gathered_width() {
                        let dst = self.gather.as_ref().map_or(j, |g| g[j]);
                        let src = self.tying.as_ref().map_or(j, |t| t.assign[j]);
                        dxr[dst] += dur[src];
                    }
                }
                dx
            }
            LayerKind::Conv { spec, .. } => col2im(spec, du, b),
        }
    }

    /// Pre-activations from the layer input.
    fn preactivation(&self, u: &Array2<f64>, batch: usize) -> Array2<f64> {
        match self.kind {
            LayerKind::Dense => u.dot(&self.weight.t()) + &self.bias,
            LayerKind::Conv { spec, .. } => {
                let z = u.dot(&self.weight.t()) + &self.bias;
                from_positions(spec, z.view(), batch)
            }
        }
    }
}

/// Rows `b*P^2 + r*P + c` hold the receptive fields in weight-column order.
fn im2col(spec: ConvSpec, x: ArrayView2<f64>) -> Array2<f64> {
    let (z, o, p) = (spec.input, spec.kernel, spec.out_size());
    let o2 = o * o;
    let width = spec.in_maps * o2;
    let mut cols = Array2::zeros((x.nrows() * p * p, width));
    for (b, xr) in x.rows().into_iter().enumerate() {
        for r in 0..p {
            for c in 0..p {
                let mut row = cols.row_mut(b * p * p + r * p + c);
                for k in 0..spec.in_maps {
                    for i in 0..o {
                        let base = k * z * z + (r + i) * z + c;
                        for j in 0..o {
                            row[k * o2 + i * o + j] = xr[base + j];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(spec: ConvSpec, dcols: ArrayView2<f64>, batch: usize) -> Array2<f64> {
    let (z, o, p) = (spec.input, spec.kernel, spec.out_size());
    let o2 = o * o;
    let mut dx = Array2::zeros((batch, spec.input_len()));
    for (b, mut dxr) in dx.rows_mut().into_iter().enumerate() {
        for r in 0..p {
            for c in 0..p {
                let row = dcols.row(b * p * p + r * p + c);
                for k in 0..spec.in_maps {
                    for i in 0..o {
                        let base = k * z * z + (r + i) * z + c;
                        for j in 0..o {
                            dxr[base + j] += row[k * o2 + i * o + j];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `(B*P^2) x N` position-major values to `B x (N*P^2)` map-major rows.
fn from_positions(spec: ConvSpec, z: ArrayView2<f64>, batch: usize) -> Array2<f64> {
    let pp = spec.out_size() * spec.out_size();
    let n = spec.out_maps;
    let mut out = Array2::zeros((batch, n * pp));
    for b in 0..batch {
        let block = z.slice(s![b * pp..(b + 1) * pp, ..]);
        let mut row = out.row_mut(b);
        for ((pos, m), &v) in block.indexed_iter() {
            row[m * pp + pos] = v;
        }
    }
    out
}

fn to_positions(spec: ConvSpec, y: ArrayView2<f64>) -> Array2<f64> {
    let pp = spec.out_size() * spec.out_size();
    let n = spec.out_maps;
    let mut out = Array2::zeros((y.nrows() * pp, n));
    for (b, row) in y.rows().into_iter().enumerate() {
        for m in 0..n {
            for pos in 0..pp {
                out[(b * pp + pos, m)] = row[m * pp + pos];
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
}

/// Network shapes understood by the pipeline. Inputs are `side x side`
/// single-channel images; the last layer has identity activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum Architecture {
    Mlp {
        hidden: Vec<usize>,
    },
    Conv {
        maps: usize,
        kernel: usize,
        #[serde(default)]
        lowering: Lowering,
        #[serde(default)]
        hidden: Vec<usize>,
    },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Mlp { hidden: vec![300] }
    }
}

impl Architecture {
    pub fn build(&self, side: usize, classes: usize, seed: u64) -> Result<Model> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut width = side * side;
        let hidden = match self {
            Architecture::Mlp { hidden } => hidden,
            Architecture::Conv {
                maps,
                kernel,
                lowering,
                hidden,
            } => {
                let spec = ConvSpec {
                    in_maps: 1,
                    out_maps: *maps,
                    kernel: *kernel,
                    input: side,
                };
                spec.validate()?;
                layers.push(Layer::conv(spec, *lowering, Activation::Relu, &mut rng));
                width = spec.output_len();
                hidden
            }
        };
        for &h in hidden {
            if h == 0 {
                return Err(Error::Config("hidden layer width must be >= 1".into()));
            }
            layers.push(Layer::dense(width, h, Activation::Relu, &mut rng));
            width = h;
        }
        layers.push(Layer::dense(width, classes, Activation::Identity, &mut rng));
        Ok(Model { layers })
    }
}

/// Per-layer outputs of a forward pass; the last entry is the logits.
#[derive(Debug, Clone)]
pub struct Forward {
    pub activations: Vec<Array2<f64>>,
}

impl Forward {
    pub fn logits(&self) -> &Array2<f64> {
        self.activations.last().expect("model has layers")
    }
}

/// Everything backward needs from a forward pass.
struct Trace {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

/// Gradients in the trainable parameterization: tied layers get the exact
/// gradient with respect to each centroid (the sum over its members).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Model {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()?;
            if i > 0 && l.in_dim != self.layers[i - 1].out_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} takes {} inputs but layer {} produces {}",
                    l.in_dim,
                    i - 1,
                    self.layers[i - 1].out_dim()
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        self.validate()?;
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn trace(&self, x: ArrayView2<f64>) -> Result<Trace> {
        self.check_input(x)?;
        let b = x.nrows();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for l in &self.layers {
            let u = l.layer_input(a.view());
            let z = l.preactivation(&u, b);
            a = z.mapv(|v| l.activation.apply(v));
            inputs.push(u);
            pre.push(z);
        }
        Ok(Trace {
            inputs,
            pre,
            logits: a,
        })
    }

    /// Logits only.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.trace(x)?.logits)
    }

    /// Gradients of the mean cross-entropy over the batch.
    pub fn backward(&self, x: ArrayView2<f64>, labels: &[u8]) -> Result<(f64, Gradients)> {
        if labels.len() != x.nrows() || labels.is_empty() {
            return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), x.nrows())));
        }
        let tr = self.trace(x)?;
        let b = x.nrows();
        let classes = self.output_dim();
        let mut loss = 0.0;
        let mut delta = Array2::zeros((b, classes));
        for (i, (&y, logits)) in labels.iter().zip(tr.logits.rows()).enumerate() {
            let y = y as usize;
            if y >= classes {
                return Err(Error::Undefined(format!("label {y} with {classes} classes")));
            }
            let logits = logits.to_vec();
            let logits = logits.as_slice();
            loss += loss_ce(logits, y)?;
            let p = softmax(logits);
            for (c, pc) in p.into_iter().enumerate() {
                delta[(i, c)] = (pc - (c == y) as u8 as f64) / b as f64;
            }
        }
        loss /= b as f64;

        let n = self.layers.len();
        let mut gw = vec![Array2::zeros((0, 0)); n];
        let mut gb = vec![Array1::zeros(0); n];
        for li in (0..n).rev() {
            let l = &self.layers[li];
            let dz = &delta * &tr.pre[li].mapv(|v| l.activation.derivative(v));
            let dzp = match l.kind {
                LayerKind::Dense => dz,
                LayerKind::Conv { spec, .. } => to_positions(spec, dz.view()),
            };
            gw[li] = dzp.t().dot(&tr.inputs[li]);
            gb[li] = dzp.sum_axis(Axis(0));
            if li > 0 {
                let du = dzp.dot(&l.weight);
                delta = l.input_gradient(du.view());
            }
        }
        Ok((
            loss,
            Gradients {
                weights: gw,
                biases: gb,
            },
        ))
    }

    /// Mean cross-entropy over a batch.
    pub fn loss(&self, x: ArrayView2<f64>, labels: &[u8]) -> Result<f64> {
        let logits = self.predict(x)?;
        let mut s = 0.0;
        for (row, &y) in logits.rows().into_iter().zip(labels) {
            s += loss_ce(&row.to_vec(), y as usize)?;
        }
        Ok(s / labels.len().max(1) as f64)
    }
}

/// Forward pass returning every layer's output.
pub fn forward(model: &Model, x: ArrayView2<f64>) -> Result<Forward> {
    model.check_input(x)?;
    let b = x.nrows();
    let mut activations = Vec::with_capacity(model.layers.len());
    let mut a = x.to_owned();
    for l in &model.layers {
        let u = l.layer_input(a.view());
        a = l.preactivation(&u, b).mapv(|v| l.activation.apply(v));
        activations.push(a.clone());
    }
    Ok(Forward { activations })
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax cross-entropy of one sample, computed with max subtraction.
pub fn loss_ce(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Undefined(format!("label {label} with {} classes", logits.len())));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.into_iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Top-1 accuracy of an arbitrary batch predictor, evaluated in chunks.
pub fn top1_with<F>(data: &Dataset, mode: Parallelism, predict: F) -> Result<f64>
where
    F: Fn(ArrayView2<f64>) -> Result<Array2<f64>> + Sync + Send,
{
    if data.is_empty() {
        return Err(Error::Undefined("accuracy of an empty dataset".into()));
    }
    const CHUNK: usize = 500;
    let n = data.len();
    let chunks = n.div_ceil(CHUNK);
    let hits = par::map_range(mode, chunks, |c| -> Result<usize> {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(n);
        let logits = predict(data.images.slice(s![lo..hi, ..]))?;
        Ok(logits
            .rows()
            .into_iter()
            .zip(&data.labels[lo..hi])
            .filter(|(row, &y)| argmax(row.iter().copied()) == y as usize)
            .count())
    });
    let mut total = 0;
    for h in hits {
        total += h?;
    }
    Ok(total as f64 / n as f64)
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn top1_accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    top1_with(data, Parallelism::default(), |x| model.predict(x))
}
