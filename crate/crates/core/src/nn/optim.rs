use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `d = g + wd * p; buf = m * buf + d; p -= lr * buf`.
#[derive(Debug)]
pub struct Sgd {
    vars: Vec<Var>,
    buffers: Vec<Option<Tensor>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let buffers = vec![None; vars.len()];
        Self {
            vars,
            buffers,
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Parameters without a gradient in `grads` are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, buf) in self.vars.iter().zip(self.buffers.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let mut d = g.clone();
            if self.weight_decay != 0.0 {
                d = (d + var.as_tensor().affine(self.weight_decay, 0.0)?)?;
            }
            if self.momentum != 0.0 {
                let next = match buf.take() {
                    Some(b) => (b.affine(self.momentum, 0.0)? + d)?,
                    None => d,
                };
                *buf = Some(next.clone());
                d = next;
            }
            let updated = (var.as_tensor() - d.affine(self.lr, 0.0)?)?;
            var.set(&updated.contiguous()?.copy()?)?;
        }
        Ok(())
    }
}

/// Adam with bias correction (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`).
#[derive(Debug)]
pub struct Adam {
    vars: Vec<Var>,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    steps: Vec<i32>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Self {
        let n = vars.len();
        Self {
            vars,
            first: vec![None; n],
            second: vec![None; n],
            steps: vec![0; n],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for i in 0..self.vars.len() {
            let var = &self.vars[i];
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            self.steps[i] += 1;
            let t = self.steps[i];
            let m = match self.first[i].take() {
                Some(m) => (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?,
                None => g.affine(1.0 - self.beta1, 0.0)?,
            };
            let v = match self.second[i].take() {
                Some(v) => (v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?,
                None => g.sqr()?.affine(1.0 - self.beta2, 0.0)?,
            };
            let m_hat = m.affine(1.0 / (1.0 - self.beta1.powi(t)), 0.0)?;
            let v_hat = v.affine(1.0 / (1.0 - self.beta2.powi(t)), 0.0)?;
            let delta = m_hat.div(&v_hat.sqrt()?.affine(1.0, self.eps)?)?.affine(self.lr, 0.0)?;
            let updated = (var.as_tensor() - delta)?;
            var.set(&updated.contiguous()?.copy()?)?;
            self.first[i] = Some(m);
            self.second[i] = Some(v);
        }
        Ok(())
    }
}
