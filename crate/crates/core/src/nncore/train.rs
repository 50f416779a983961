//! Mini-batch training with optional group-lasso proximal steps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::optim::{lr_at_epoch, Optimizer, OptimizerKind};
use super::{Dataset, Model};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub seed: u64,
    /// Group-lasso weight per layer; missing entries mean 0.
    pub lambdas: Vec<f64>,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.001,
            momentum: 0.9,
            lr_decay: 0.95,
            decay_every: 10,
            seed: 0,
            lambdas: Vec::new(),
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return fail("batch_size and decay_every must be >= 1".into());
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return fail(format!("lambda must be finite and >= 0, got {l}"));
        }
        Ok(())
    }

    pub fn lambda(&self, layer: usize) -> f64 {
        self.lambdas.get(layer).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainOptions {
    /// Update tied centroids with the mean of their members' gradients
    /// instead of the sum.
    pub mean_tied_gradient: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss (without the penalty) per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Train in place. Layers with a positive lambda get a block soft
/// thresholding step with `t = lr * lambda` after every optimizer step.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, opts: TrainOptions) -> Result<TrainLog> {
    cfg.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(Error::Undefined("training on an empty dataset".into()));
    }
    if cfg.lambdas.len() > model.layers.len() {
        return Err(Error::Config(format!(
            "{} lambdas for {} layers",
            cfg.lambdas.len(),
            model.layers.len()
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, model, cfg.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let inv_sizes: Vec<Option<Vec<f64>>> = model
        .layers
        .iter()
        .map(|l| {
            l.tying
                .as_ref()
                .filter(|_| opts.mean_tied_gradient)
                .map(|t| t.sizes().iter().map(|&s| 1.0 / s as f64).collect())
        })
        .collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = data.select(idx);
            let (loss, mut g) = model.backward(x.view(), &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("loss {loss} in epoch {epoch}")));
            }
            total += loss * idx.len() as f64;
            for (gw, inv) in g.weights.iter_mut().zip(&inv_sizes) {
                if let Some(inv) = inv {
                    for mut row in gw.rows_mut() {
                        row.iter_mut().zip(inv).for_each(|(v, s)| *v *= s);
                    }
                }
            }
            opt.step(model, &g, lr);
            for (li, l) in model.layers.iter_mut().enumerate() {
                let lambda = cfg.lambda(li);
                if lambda > 0.0 {
                    let gs = l.group_structure();
                    gs.prox_in_place(&mut l.weight, lr * lambda)?;
                }
            }
        }
        let mean = total / data.len() as f64;
        log::info!("epoch {epoch}: loss {mean:.5} lr {lr:.6}");
        log.epoch_loss.push(mean);
    }
    Ok(log)
}
