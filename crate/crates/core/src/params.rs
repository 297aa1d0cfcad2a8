//! Named parameter tensors with deterministic initialization and the
//! graph-binding glue used by forward passes.

use std::collections::HashMap;

use ndarray::IxDyn;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::graph::{Arr, Graph, Var};

/// One parameter tensor. `decay` marks whether weight decay applies to it;
/// LayerNorm gains and (un)embedding matrices are excluded per the training
/// recipe, while key vectors and projection matrices are decayed.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arr,
    pub decay: bool,
}

/// Ordered collection of named parameters. Insertion order is the canonical
/// order for checkpoints and optimizer state, so it must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Arr, decay: bool) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, decay });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count across all tensors.
    pub fn num_params(&self) -> u64 {
        self.entries.iter().map(|e| e.value.len() as u64).sum()
    }

    pub fn get(&self, name: &str) -> &Arr {
        let i = self.index[name];
        &self.entries[i].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        let i = self.index[name];
        &mut self.entries[i].value
    }

    pub fn entry(&self, i: usize) -> &ParamEntry {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut ParamEntry {
        &mut self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }
}

/// Parameter tensors registered as graph leaves for one forward/backward
/// pass, addressable by name.
pub struct BoundParams<'a> {
    pub graph: &'a Graph,
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl<'a> BoundParams<'a> {
    pub fn bind(graph: &'a Graph, params: &ParamSet) -> Self {
        let vars = params.iter().map(|e| graph.leaf(e.value.clone())).collect();
        let index = params
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        Self { graph, vars, index }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn var_at(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// How RMT key and storage vectors are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyInit {
    /// Retrieval keys get variance 1/D_k and storage keys variance 1/R, so
    /// the forward variance ratios of retrieval (D_k σ_w²) and storage
    /// (R σ_w²) are both exactly 1.
    #[default]
    VariancePreserving,
    /// Xavier with the declared fan pair (D_k, R) for every key vector:
    /// variance 2/(D_k + R).
    Xavier,
}

/// Initialization options shared by both architectures.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct InitOptions {
    /// Scale residual-writing tensors (transformer W_O/W_2, RMT storage keys
    /// w_O/w_FF) by 1/sqrt(2L) at init.
    pub residual_scaling: bool,
    pub key_init: KeyInit,
}

/// Deterministic zero-mean Gaussian tensor with the given standard deviation.
pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Arr {
    Arr::from_shape_simple_fn(IxDyn(shape), || std * rng.sample::<f64, _>(StandardNormal))
}

/// Xavier/Glorot standard deviation for an explicitly declared fan pair.
pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn paramset_preserves_insertion_order_and_lookup() {
        let mut p = ParamSet::new();
        p.push("b", arr1(&[1.0, 2.0]).into_dyn(), true);
        p.push("a", arr1(&[3.0]).into_dyn(), false);
        let names: Vec<_> = p.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(p.get("a")[[0]], 3.0);
        assert_eq!(p.num_params(), 3);
    }

    #[test]
    fn gaussian_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = gaussian(&mut r1, &[4, 3], 0.1);
        let b = gaussian(&mut r2, &[4, 3], 0.1);
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_std_scales_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = gaussian(&mut rng, &[2000], 0.5);
        let var = a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
        assert!((var - 0.25).abs() < 0.02, "sample variance {var}");
    }
}
