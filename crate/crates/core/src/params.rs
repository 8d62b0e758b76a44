//! Named parameter storage.
//!
//! Parameters live outside any graph in a [`ParamStore`], keyed by canonical
//! dotted path strings (e.g. `dec.stage2.mewb.spectral.hw.real`). Binding a
//! store into a [`Graph`] shares the underlying allocations; the optimizer
//! mutates entries in place between steps.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, VarId};

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Arc<ArrayD<f64>>>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), Arc::new(value));
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    /// Mutate one entry in place (copy-on-write if a graph still holds it).
    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut ArrayD<f64>)) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        f(Arc::make_mut(entry));
    }

    /// Overwrite entries present in `other`, requiring matching shapes.
    /// Returns the overwritten names.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<Vec<String>, String> {
        let mut loaded = Vec::new();
        for (name, value) in &other.entries {
            if let Some(entry) = self.entries.get_mut(name) {
                if entry.shape() != value.shape() {
                    return Err(format!(
                        "parameter {name}: shape {:?} does not match stored {:?}",
                        entry.shape(),
                        value.shape()
                    ));
                }
                *entry = Arc::clone(value);
                loaded.push(name.clone());
            }
        }
        Ok(loaded)
    }

    /// Bind every parameter into `graph` as a leaf, sharing storage.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> Binding {
        let mut ids = BTreeMap::new();
        for (name, value) in &self.entries {
            let id = graph.leaf_shared(Arc::clone(value), requires_grad);
            ids.insert(name.clone(), id);
        }
        Binding { ids }
    }
}

/// Parameter name -> graph leaf mapping for one forward pass.
pub struct Binding {
    ids: BTreeMap<String, VarId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> VarId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, VarId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Deterministic initializers drawing from a caller-owned stream. The draw
/// order is the parameter construction order, which is fixed per config.
pub struct Init<'r> {
    pub rng: &'r mut ChaCha20Rng,
}

impl<'r> Init<'r> {
    pub fn new(rng: &'r mut ChaCha20Rng) -> Init<'r> {
        Init { rng }
    }

    pub fn zeros(&mut self, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn ones(&mut self, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::ones(IxDyn(shape))
    }

    pub fn constant(&mut self, shape: &[usize], v: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(shape), v)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> ArrayD<f64> {
        let dist = Normal::new(0.0, std).expect("valid std");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(self.rng))
    }

    /// Kaiming-style init for convolution kernels (fan_in = cin * kh * kw).
    pub fn conv(&mut self, shape: &[usize]) -> ArrayD<f64> {
        let fan_in: usize = shape[1..].iter().product();
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || self.rng.gen_range(lo..hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_is_ordered_and_counts() {
        let mut store = ParamStore::new();
        store.insert("b.x", ArrayD::zeros(IxDyn(&[2, 3])));
        store.insert("a.y", ArrayD::zeros(IxDyn(&[4])));
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, ["a.y", "b.x"]);
        assert_eq!(store.count(), 10);
    }

    #[test]
    fn update_is_visible_without_rebinding_confusion() {
        let mut store = ParamStore::new();
        store.insert("w", ArrayD::zeros(IxDyn(&[2])));
        let mut g = Graph::new();
        let _bind = store.bind(&mut g, false);
        store.update("w", |w| w[[0]] = 5.0);
        assert_eq!(store.get("w")[[0]], 5.0);
        // The bound graph keeps the old values (copy-on-write).
        assert_eq!(g.value(0)[[0]], 0.0);
    }

    #[test]
    fn same_seed_same_draws() {
        let mut r1 = ChaCha20Rng::seed_from_u64(7);
        let mut r2 = ChaCha20Rng::seed_from_u64(7);
        let a = Init::new(&mut r1).normal(&[16], 0.02);
        let b = Init::new(&mut r2).normal(&[16], 0.02);
        assert_eq!(a, b);
    }
}
