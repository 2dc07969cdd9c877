//! Named parameter sets and their binding into a graph.
//!
//! Parameters live in a BTreeMap so every traversal (hashing, checkpointing,
//! gradient application) sees the same name order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Iterates in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// FNV-1a 64-bit hash over names and raw little-endian f64 bytes,
    /// in name order. Used to pair bitstreams with model bundles.
    pub fn content_hash(&self) -> u64 {
        const OFFSET: u64 = 0xcbf29ce484222325;
        const PRIME: u64 = 0x100000001b3;
        let mut h = OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, t) in &self.map {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Leaf ids for one ParamSet bound into a graph. Learnability is decided
/// at bind time by a name predicate, which is how training stages freeze
/// parts of the model.
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &ParamSet, learnable: impl Fn(&str) -> bool) -> Self {
        let mut ids = BTreeMap::new();
        for (name, t) in params.iter() {
            let id = g.leaf(t.clone(), learnable(name));
            ids.insert(name.to_string(), id);
        }
        BoundParams { ids }
    }

    pub fn bind_frozen(g: &mut Graph, params: &ParamSet) -> Self {
        Self::bind(g, params, |_| false)
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter '{name}' not bound")))
    }

    /// Point a name at a different node, e.g. a probe leaf during a
    /// finite-difference check.
    pub fn replace(&mut self, name: &str, id: NodeId) {
        self.ids.insert(name.to_string(), id);
    }

    /// Collects gradients per parameter name. Parameters without a gradient
    /// (frozen, or not touched by the loss) are absent.
    pub fn grad_map(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.ids {
            if let Some(t) = grads.get(*id) {
                out.insert(name.clone(), t.clone());
            }
        }
        out
    }
}

/// Global L2 norm across a gradient map.
pub fn global_grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// One plain gradient-descent step with global-norm clipping. Returns the
/// pre-clip gradient norm.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    clip_norm: f64,
) -> Result<f64> {
    let norm = global_grad_norm(grads);
    let scale = if clip_norm > 0.0 && norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    };
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} does not match parameter '{name}' {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * scale * gv;
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_hash_changes_with_data_and_names() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::scalar(1.0));
        let mut b = ParamSet::new();
        b.insert("w", Tensor::scalar(2.0));
        let mut c = ParamSet::new();
        c.insert("v", Tensor::scalar(1.0));
        assert_ne!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
    }

    #[test]
    fn sgd_clips_at_global_norm() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert(
            "w".to_string(),
            Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(),
        );
        // norm 5 clipped to 1: effective grad (0.6, 0.8), lr 1
        let norm = sgd_step(&mut p, &grads, 1.0, 1.0).unwrap();
        assert_eq!(norm, 5.0);
        let w = p.get("w").unwrap().data();
        assert!((w[0] + 0.6).abs() < 1e-12 && (w[1] + 0.8).abs() < 1e-12);
    }

    #[test]
    fn frozen_bind_yields_no_gradients() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &p, |_| false);
        let w = bound.id("w").unwrap();
        let y = g.mul(w, w).unwrap();
        let root = g.mean_all(y);
        let grads = g.backward(root).unwrap();
        assert!(bound.grad_map(&grads).is_empty());
    }
}
