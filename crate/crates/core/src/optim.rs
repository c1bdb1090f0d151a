//! Adam with L2 weight decay folded into the gradient.

use std::collections::BTreeMap;

use stnas_autodiff::Tensor;

use crate::params::{Group, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    group: Group,
    steps: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(group: Group, config: AdamConfig) -> Self {
        Self {
            config,
            group,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update; gradients for parameters outside this group are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (id, grad) in grads {
            if store.param(*id).group != self.group {
                continue;
            }
            let n = grad.numel();
            let (m, v) = self.moments.entry(*id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let value = store.value_mut(*id).data_mut();
            for i in 0..n {
                let g = grad.data()[i] + c.weight_decay * value[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                value[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}
