use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::NumericsError;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter group.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<(), NumericsError> {
        if !(self.config.lr > 0.0) {
            return Err(NumericsError::InvalidArgument(format!(
                "adam: learning rate {} must be positive",
                self.config.lr
            )));
        }
        if params.len() != grads.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam",
                detail: format!("{} params vs {} grads", params.len(), grads.len()),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam",
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(NumericsError::ShapeMismatch {
                op: "adam",
                detail: "parameter set changed between steps".into(),
            });
        }

        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1 as f64), T::lit(c.beta2 as f64));
        let (lr, eps) = (T::lit(c.lr as f64), T::lit(c.eps as f64));
        let t = self.step as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = gd[i];
                md[i] = b1 * md[i] + (T::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
