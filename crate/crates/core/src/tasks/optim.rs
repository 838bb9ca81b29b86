//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

/// Adam with coupled L2 weight decay (the decay term is added to the gradient).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grad.len(), self.m.len(), "gradient has wrong length");
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Cosine-annealed learning rate for `epoch` in `0..epochs`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

/// RMSProp with heavy-ball momentum, in the common deep-learning formulation:
/// `v = a v + (1 - a) g^2`, `b = mu b + g / (sqrt(v) + eps)`, `x -= lr b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    pub momentum: f64,
    sq: Vec<f64>,
    buf: Vec<f64>,
}

impl RmsProp {
    pub fn new(n: usize, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            alpha: 0.99,
            eps: 1e-8,
            momentum,
            sq: vec![0.0; n],
            buf: vec![0.0; n],
        }
    }

    /// Updates the internal state and returns the step to subtract from the parameters.
    pub fn step(&mut self, grad: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.sq.len(), "gradient has wrong length");
        grad.iter()
            .enumerate()
            .map(|(i, &g)| {
                self.sq[i] = self.alpha * self.sq[i] + (1.0 - self.alpha) * g * g;
                self.buf[i] = self.momentum * self.buf[i] + g / (self.sq[i].sqrt() + self.eps);
                self.lr * self.buf[i]
            })
            .collect()
    }
}
