//! Optimizers and the learning-rate schedule.

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{Gradients, Model, TrainConfig};

#[inline]
fn momentum_update(w: &mut f64, v: &mut f64, g: f64, lr: f64, mu: f64) {
    *v = mu * *v + g;
    *w -= lr * *v;
}

/// Classical momentum: `v <- mu*v + grad; w <- w - lr*v`.
pub fn sgd_momentum_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    assert!(params.len() == grads.len() && params.len() == velocity.len(), "parameter, gradient and state lengths differ");
    for ((w, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        momentum_update(w, v, g, lr, momentum);
    }
}

/// `lr * decay^floor(epoch / interval)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi((epoch / cfg.decay_every.max(1)) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

fn zeros_like(model: &Model) -> (Vec<Array2<f64>>, Vec<Array1<f64>>) {
    (
        model.layers.iter().map(|l| Array2::zeros(l.weight.dim())).collect(),
        model.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
    )
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    vw: Vec<Array2<f64>>,
    vb: Vec<Array1<f64>>,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64) -> Self {
        let (vw, vb) = zeros_like(model);
        Sgd { momentum, vw, vb }
    }

    fn step(&mut self, model: &mut Model, g: &Gradients, lr: f64) {
        let mu = self.momentum;
        for (i, l) in model.layers.iter_mut().enumerate() {
            Zip::from(&mut l.weight)
                .and(&mut self.vw[i])
                .and(&g.weights[i])
                .for_each(|w, v, &g| momentum_update(w, v, g, lr, mu));
            Zip::from(&mut l.bias)
                .and(&mut self.vb[i])
                .and(&g.biases[i])
                .for_each(|w, v, &g| momentum_update(w, v, g, lr, mu));
        }
    }
}

/// Adam with the usual defaults and bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    mw: Vec<Array2<f64>>,
    vw: Vec<Array2<f64>>,
    mb: Vec<Array1<f64>>,
    vb: Vec<Array1<f64>>,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let (mw, mb) = zeros_like(model);
        let (vw, vb) = zeros_like(model);
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            mw,
            vw,
            mb,
            vb,
        }
    }

    fn step(&mut self, model: &mut Model, g: &Gradients, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let upd = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (i, l) in model.layers.iter_mut().enumerate() {
            Zip::from(&mut l.weight)
                .and(&mut self.mw[i])
                .and(&mut self.vw[i])
                .and(&g.weights[i])
                .for_each(|w, m, v, &g| upd(w, m, v, g));
            Zip::from(&mut l.bias)
                .and(&mut self.mb[i])
                .and(&mut self.vb[i])
                .and(&g.biases[i])
                .for_each(|w, m, v, &g| upd(w, m, v, g));
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &Model, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(model, momentum)),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(model)),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64) {
        match self {
            Optimizer::Sgd(s) => s.step(model, grads, lr),
            Optimizer::Adam(a) => a.step(model, grads, lr),
        }
    }
}
