//! SGD and Adam over [`Parameters`] containers, plus global-norm clipping.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::params::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Contract(format!("unknown optimizer {other:?}"))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates each parameter slice from the gradient slice at the same index.
    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powf(self.t as f64);
        let bc2 = 1.0 - self.beta2.powf(self.t as f64);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len());
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
        }
    }

    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.iter_mut().zip(g.iter()) {
                        *x -= *lr * d;
                    }
                }
            }
            Optimizer::Adam(a) => a.step_slices(params, grads),
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        let gv = grads.views();
        let gs: Vec<&[f64]> = gv.iter().map(|v| v.data).collect();
        let mut pv = params.views_mut();
        let mut ps: Vec<&mut [f64]> = pv.iter_mut().map(|v| &mut *v.data).collect();
        self.step_slices(&mut ps, &gs);
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<P: Parameters>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale_all(max_norm / norm);
    }
    norm
}
