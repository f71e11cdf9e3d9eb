use indexmap::IndexMap;
use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// A learnable tensor paired with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let grad = Tensor::zeros(value.shape());
        let (idx, _) = self.entries.insert_full(name.into(), Param { value, grad });
        idx
    }

    /// Weight matrix `[fan_in × fan_out]` drawn uniformly from `±1/√fan_in`.
    pub fn init_weight(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data))
    }

    pub fn init_bias(&mut self, name: impl Into<String>, size: usize) -> usize {
        self.insert(name, Tensor::zeros(&[size]))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn by_index(&self, idx: usize) -> (&str, &Param) {
        let (k, v) = self.entries.get_index(idx).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Param {
        self.entries.get_index_mut(idx).expect("parameter index").1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// L2 norm over every gradient accumulator combined.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|p| p.grad.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales all gradients so that their joint norm does not exceed
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let mut grads: Vec<&mut Tensor> = self.entries.values_mut().map(|p| &mut p.grad).collect();
        clip_norm_refs(&mut grads, max_norm)
    }

    /// Overwrites every value with the one of the same name in `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Contract("parameter sets differ".into()));
        }
        for ((name, dst), (oname, src)) in self.entries.iter_mut().zip(&other.entries) {
            if name != oname || !dst.value.same_shape(&src.value) {
                return Err(Error::Contract(format!(
                    "parameter `{name}` does not match `{oname}`"
                )));
            }
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    /// Returns the name of the first parameter with a non-finite gradient.
    pub fn first_non_finite_grad(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, p)| !p.grad.all_finite())
            .map(|(k, _)| k.as_str())
    }
}

/// Rescales `grads` in place when their joint L2 norm exceeds `max_norm`.
///
/// Returns the norm measured before any scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let mut refs: Vec<&mut Tensor> = grads.iter_mut().collect();
    clip_norm_refs(&mut refs, max_norm)
}

fn clip_norm_refs(grads: &mut [&mut Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    // Rescaled gradients land within an ulp of max_norm; the slack keeps a
    // second clip from nudging them again.
    if norm > max_norm * (1.0 + 1e-12) {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(scale);
        }
    }
    norm
}
