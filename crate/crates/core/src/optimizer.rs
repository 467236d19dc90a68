//! AdamW with decoupled weight decay, applied uniformly to every trainable
//! group with a per-group learning rate.

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

struct MomentPair<S: Scalar> {
    m: Vec<S>,
    v: Vec<S>,
}

/// Optimizer state: bias-corrected first/second moments per parameter slot,
/// plus a shared step counter advanced once per batch.
pub struct AdamW<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    states: Vec<Option<MomentPair<S>>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamW { beta1, beta2, eps, step: 0, states: (0..n_params).map(|_| None).collect() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter; call once before a round of updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Decoupled decay `w <- w - lr*wd*w`, then the bias-corrected Adam update
    /// from the parameter's accumulated gradient. The gradient buffer is
    /// cleared afterwards.
    pub fn update(
        &mut self,
        slot: usize,
        name: &str,
        param: &mut Tensor<S>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let n = param.numel();
        if let Some(bad) = param.grad().and_then(|g| g.iter().position(|v| !v.is_finite())) {
            return Err(Error::numerical(format!(
                "non-finite gradient in parameter {name} (entry {bad})"
            )));
        }
        let state = self.states[slot].get_or_insert_with(|| MomentPair {
            m: vec![S::ZERO; n],
            v: vec![S::ZERO; n],
        });
        if state.m.len() != n {
            return Err(Error::config(format!(
                "optimizer state for {name} has {} entries, parameter has {n}",
                state.m.len()
            )));
        }
        let t = self.step.max(1);
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_minus_b1 = S::from_f64(1.0 - self.beta1);
        let one_minus_b2 = S::from_f64(1.0 - self.beta2);
        let bc1 = S::from_f64(1.0 - self.beta1.powi(t as i32));
        let bc2 = S::from_f64(1.0 - self.beta2.powi(t as i32));
        let lrs = S::from_f64(lr);
        let decay = S::from_f64(1.0 - lr * weight_decay);
        let eps = S::from_f64(self.eps);

        let (data, grad) = param.data_and_grad();
        for i in 0..n {
            data[i] = data[i] * decay;
            let g = grad[i];
            state.m[i] = b1 * state.m[i] + one_minus_b1 * g;
            state.v[i] = b2 * state.v[i] + one_minus_b2 * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            data[i] = data[i] - lrs * m_hat / (v_hat.sqrt() + eps);
        }
        param.zero_grad();
        Ok(())
    }
}
