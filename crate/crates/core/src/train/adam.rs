use amformer_grad::Parameter;

use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are allocated on the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of every parameter. Gradients are checked for finiteness
    /// before anything is modified.
    pub fn step(&mut self, params: &mut [Parameter], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Config(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.numel() {
                return Err(Error::Config(format!("gradient of `{}` has {} entries, expected {}", p.name, g.len(), p.numel())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "gradient",
                    param: p.name.clone(),
                    step: self.t as usize + 1,
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
