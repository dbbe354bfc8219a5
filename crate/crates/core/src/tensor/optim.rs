use super::element::{cast, Element};
use super::params::ParamStore;
use crate::error::{DgeError, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.ids().map(|id| vec![T::zero(); params.value(id).numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `params`. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.first.len() != params.len() {
            return Err(DgeError::Usage(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            if let Some(g) = params.grad(id) {
                if !g.all_finite() {
                    return Err(DgeError::numeric(
                        format!("gradient of `{}`", params.name(id)),
                        "non-finite value",
                    ));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (cast::<T>(c.beta1), cast::<T>(c.beta2));
        let (one_b1, one_b2) = (cast::<T>(1.0 - c.beta1), cast::<T>(1.0 - c.beta2));
        let decay = cast::<T>(1.0 - c.lr * c.weight_decay);
        let lr = cast::<T>(c.lr);
        let (bc1, bc2, eps) = (cast::<T>(bc1), cast::<T>(bc2), cast::<T>(c.eps));

        for id in params.ids().collect::<Vec<_>>() {
            let grad = params.grad(id).map(|g| g.data().to_vec());
            let (m, v) = (&mut self.first[id.0], &mut self.second[id.0]);
            let w = params.value_mut(id).data_mut();
            for i in 0..w.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] = w[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
