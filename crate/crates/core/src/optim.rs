//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn zeros(store: &ParamStore<T>) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, p)| p.tensor.numel()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// One update of a single parameter. `step` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Element>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::shape(
            "adamw_step",
            "parameter/grad/state length",
            param.len(),
            (grad.len(), m.len(), v.len()),
        ));
    }
    if step == 0 {
        return Err(Error::invalid("adamw_step", "step count starts at 1"));
    }
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let (b1t, b2t) = (T::c(b1), T::c(b2));
    let (one_b1, one_b2) = (T::c(1.0 - b1), T::c(1.0 - b2));
    let (lr_t, eps) = (T::c(lr), T::c(cfg.eps));
    let decay = T::c(lr * cfg.weight_decay);
    let (inv_c1, inv_c2) = (T::c(1.0 / c1), T::c(1.0 / c2));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1t * m[i] + one_b1 * g;
        v[i] = b2t * v[i] + one_b2 * g * g;
        let m_hat = m[i] * inv_c1;
        let v_hat = v[i] * inv_c2;
        let p = param[i];
        param[i] = p - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * p;
    }
    Ok(())
}

pub struct AdamW<T: Element> {
    pub config: AdamWConfig,
    pub state: AdamState<T>,
}

impl<T: Element> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: AdamState::zeros(store),
        }
    }

    /// Apply the gradients stored on each parameter. `lr_of` gives the
    /// learning rate for a parameter name.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr_of: impl Fn(&str) -> f64) -> Result<()> {
        if self.state.m.len() != store.len() {
            return Err(Error::shape("adamw", "parameter count", self.state.m.len(), store.len()));
        }
        self.state.step += 1;
        let step = self.state.step;
        for (k, (_, p)) in store.iter_mut().enumerate() {
            let lr = lr_of(&p.name);
            let grad = p.grad.data().to_vec();
            adamw_step(
                p.tensor.data_mut(),
                &grad,
                &mut self.state.m[k],
                &mut self.state.v[k],
                step,
                lr,
                &self.config,
            )?;
        }
        Ok(())
    }
}
