//! Named parameter store with gradients and shared-group tags.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::Tensor4;

/// One learnable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor4,
    pub grad: Tensor4,
    /// Blocks that reuse one set of weights register them once under a
    /// shared-group tag; the audit in the tests walks these tags.
    pub group: Option<String>,
}

/// Ordered map name -> parameter. Insertion order is the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor4) -> Result<()> {
        self.insert_grouped(name, value, None)
    }

    pub fn insert_grouped(
        &mut self,
        name: impl Into<String>,
        value: Tensor4,
        group: Option<&str>,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let (b, c, h, w) = value.dims();
        self.entries.insert(
            name,
            Param {
                value,
                grad: Tensor4::zeros(b, c, h, w),
                group: group.map(str::to_string),
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    /// Panics on unknown names: lookups only use names the builder registered.
    pub fn value(&self, name: &str) -> &Tensor4 {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor4 {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Tensor4 {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .grad
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor4) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        p.grad.accumulate(delta)
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of registered tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Total scalar count of the entries carrying `group`.
    pub fn group_scalar_count(&self, group: &str) -> usize {
        self.entries
            .values()
            .filter(|p| p.group.as_deref() == Some(group))
            .map(|p| p.value.len())
            .sum()
    }

    /// First parameter whose gradient contains a non-finite value.
    pub fn first_nonfinite_grad(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, p)| !p.grad.all_finite())
            .map(|(name, _)| name.as_str())
    }

    /// Names whose gradient has at least one nonzero entry.
    pub fn nonzero_grad_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, p)| p.grad.data().iter().any(|&x| x != 0.0))
            .map(|(name, _)| name.as_str())
            .collect()
    }
}

/// Kaiming fan-in initialisation for a conv weight (out, in, k, k).
pub fn kaiming_conv(out_c: usize, in_c: usize, k: usize, rng: &mut DetRng) -> Tensor4 {
    let fan_in = (in_c * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    Tensor4::randn(out_c, in_c, k, k, std, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_dims_follow_value_dims() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor4::zeros(2, 3, 3, 3)).unwrap();
        assert_eq!(store.grad("w").dims(), (2, 3, 3, 3));
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor4::zeros(1, 1, 1, 1)).unwrap();
        assert!(store.insert("w", Tensor4::zeros(1, 1, 1, 1)).is_err());
    }

    #[test]
    fn group_scalar_count_sums_tagged_entries() {
        let mut store = ParamStore::new();
        store
            .insert_grouped("a", Tensor4::zeros(1, 1, 2, 2), Some("core"))
            .unwrap();
        store
            .insert_grouped("b", Tensor4::zeros(1, 1, 1, 3), Some("core"))
            .unwrap();
        store.insert("c", Tensor4::zeros(1, 1, 1, 5)).unwrap();
        assert_eq!(store.group_scalar_count("core"), 7);
        assert_eq!(store.scalar_count(), 12);
    }

    #[test]
    fn nonfinite_grad_detected_by_name() {
        let mut store = ParamStore::new();
        store.insert("ok", Tensor4::zeros(1, 1, 1, 1)).unwrap();
        store.insert("bad", Tensor4::zeros(1, 1, 1, 1)).unwrap();
        store.get_mut("bad").unwrap().grad.data_mut()[0] = f64::NAN;
        assert_eq!(store.first_nonfinite_grad(), Some("bad"));
    }
}
