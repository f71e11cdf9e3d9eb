use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// RMSprop with the running mean-square accumulator kept per parameter.
///
/// `m ← α·m + (1−α)·g²`, `θ ← θ − lr·g / (√m + ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    mean_sq: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(store: &ParamStore, lr: f64, alpha: f64, eps: f64) -> Self {
        let mean_sq = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            alpha,
            eps,
            mean_sq,
        }
    }

    pub fn mean_sq(&self) -> &[Tensor] {
        &self.mean_sq
    }

    pub fn set_mean_sq(&mut self, state: Vec<Tensor>) -> Result<()> {
        if state.len() != self.mean_sq.len()
            || state.iter().zip(&self.mean_sq).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint("optimizer state shape mismatch".into()));
        }
        self.mean_sq = state;
        Ok(())
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.mean_sq.len() != store.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        if let Some(name) = store.first_non_finite_grad() {
            return Err(Error::NonFiniteGradient { param: name.to_string() });
        }
        let (lr, alpha, eps) = (self.lr, self.alpha, self.eps);
        for ((name, p), m) in store.iter_mut().zip(self.mean_sq.iter_mut()) {
            if m.shape() != p.value.shape() {
                return Err(Error::Contract(format!("optimizer state for `{name}` has wrong shape")));
            }
            let g = p.grad.data();
            for ((theta, mk), &gk) in p.value.data_mut().iter_mut().zip(m.data_mut()).zip(g) {
                *mk = alpha * *mk + (1.0 - alpha) * gk * gk;
                *theta -= lr * gk / (mk.sqrt() + eps);
            }
            if !p.value.all_finite() {
                return Err(Error::Numeric(format!("update produced non-finite `{name}`")));
            }
        }
        store.zero_grad();
        Ok(())
    }
}
