//! SGD with momentum and bias-corrected Adam over [`Tensor`] parameters.

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerConfig {
    SgdMomentum {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::SgdMomentum { lr, momentum }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::SgdMomentum { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

/// Per-parameter moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn ensure_buffers(&mut self, params: &[&mut Tensor<T>]) -> Result<(), TensorError> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            if matches!(self.config, OptimizerConfig::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len() {
            return Err(TensorError::InvalidArgument {
                op: "optimizer_step",
                msg: format!(
                    "state tracks {} parameters, got {}",
                    self.first.len(),
                    params.len()
                ),
            });
        }
        for (m, p) in self.first.iter().zip(params) {
            if m.len() != p.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: vec![m.len()],
                    rhs: p.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Applies one update to every parameter, then clears their gradients.
    /// Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<(), TensorError> {
        for (i, p) in params.iter().enumerate() {
            if p.grad.is_none() {
                return Err(TensorError::MissingGrad(format!("#{i}")));
            }
        }
        self.ensure_buffers(params)?;
        self.step += 1;
        match self.config {
            OptimizerConfig::SgdMomentum { lr, momentum } => {
                let (lr, mu) = (T::from_f64(lr), T::from_f64(momentum));
                for (p, buf) in params.iter_mut().zip(&mut self.first) {
                    let grad = p.grad.take().expect("checked above");
                    for ((w, v), g) in p.data_mut().iter_mut().zip(buf.iter_mut()).zip(grad) {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.step as i32;
                let bc1 = T::from_f64(1.0 - beta1.powi(t));
                let bc2 = T::from_f64(1.0 - beta2.powi(t));
                let (lr, b1, b2, eps) = (
                    T::from_f64(lr),
                    T::from_f64(beta1),
                    T::from_f64(beta2),
                    T::from_f64(eps),
                );
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let grad = p.grad.take().expect("checked above");
                    for (((w, m), v), g) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                        .zip(grad)
                    {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
