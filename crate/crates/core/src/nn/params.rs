//! Named, typed parameter tensors.
//!
//! Parameters are registered lazily during a network's first forward pass, so
//! registration order *is* forward order and init/forward can never drift
//! apart. Lookups afterwards are by name. Fan-in-scaled init happens at
//! registration; `filter_size` drives per-filter direction normalization in
//! the loss-contour diagnostics.

use crate::rng::Rng;
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Elements per filter (conv: cin·kh·kw per output channel; linear: the
    /// row length; bias: the whole vector). Always divides `data.len()`.
    pub filter_size: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub tensors: Vec<ParamTensor>,
    index: HashMap<String, usize>,
    /// When false, `ensure` panics on unknown names instead of creating them.
    growing: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            tensors: Vec::new(),
            index: HashMap::new(),
            growing: true,
        }
    }

    pub fn freeze(&mut self) {
        self.growing = false;
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Fetch a parameter index by name, creating the tensor on first use
    /// while the set is still growing. `fan_in = 0` means zero-init (biases);
    /// otherwise Kaiming-style normal init with std √(2/fan_in).
    pub fn ensure(
        &mut self,
        name: &str,
        shape: &[usize],
        filter_size: usize,
        fan_in: usize,
        rng: &mut Rng,
    ) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        assert!(
            self.growing,
            "unknown parameter {name:?} requested from frozen set"
        );
        let n: usize = shape.iter().product();
        assert!(n > 0 && filter_size > 0 && n % filter_size == 0, "bad shape for {name}");
        let mut data = vec![0.0; n];
        if fan_in > 0 {
            let std = (2.0 / fan_in as f64).sqrt();
            rng.fill_normal(&mut data, std);
        }
        let i = self.tensors.len();
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            filter_size,
        });
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn idx(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn flat_len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.flat_len());
        for t in &self.tensors {
            v.extend_from_slice(&t.data);
        }
        v
    }

    pub fn load_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.flat_len(), "flat parameter length");
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&v[off..off + n]);
            off += n;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Gradient container with this set's shapes, zero-filled.
    pub fn zero_grads(&self) -> Grads {
        Grads {
            by_param: self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn add_scaled_grads(&mut self, g: &Grads, s: f64) {
        assert_eq!(g.by_param.len(), self.tensors.len());
        for (t, gv) in self.tensors.iter_mut().zip(&g.by_param) {
            for (p, gi) in t.data.iter_mut().zip(gv) {
                *p += s * gi;
            }
        }
    }
}

/// Per-parameter-tensor gradients, parallel to a `ParamSet`'s tensor list.
#[derive(Debug, Clone)]
pub struct Grads {
    pub by_param: Vec<Vec<f64>>,
}

impl Grads {
    pub fn l2_norm(&self) -> f64 {
        self.by_param
            .iter()
            .flat_map(|v| v.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.by_param {
            for g in v.iter_mut() {
                *g *= s;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &Grads, s: f64) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (a, b) in self.by_param.iter_mut().zip(&other.by_param) {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for p in &self.by_param {
            v.extend_from_slice(p);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensure_registers_once_and_is_deterministic() {
        let mut r1 = Rng::seed_from_u64(1);
        let mut r2 = Rng::seed_from_u64(1);
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        let i0 = a.ensure("w", &[4, 3], 3, 3, &mut r1);
        let i1 = a.ensure("w", &[4, 3], 3, 3, &mut r1);
        assert_eq!(i0, i1);
        assert_eq!(a.len(), 1);
        b.ensure("w", &[4, 3], 3, 3, &mut r2);
        assert_eq!(a.tensors[0].data, b.tensors[0].data);
    }

    #[test]
    fn zero_fan_in_means_zero_init() {
        let mut r = Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        p.ensure("b", &[5], 5, 0, &mut r);
        assert!(p.tensors[0].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_round_trip() {
        let mut r = Rng::seed_from_u64(2);
        let mut p = ParamSet::new();
        p.ensure("a", &[2, 3], 3, 3, &mut r);
        p.ensure("b", &[4], 4, 0, &mut r);
        let flat = p.to_flat();
        assert_eq!(flat.len(), 10);
        let mut q = p.clone();
        q.load_flat(&flat);
        assert_eq!(q.to_flat(), flat);
    }

    #[test]
    #[should_panic(expected = "frozen")]
    fn frozen_set_rejects_new_names() {
        let mut r = Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        p.ensure("a", &[2], 2, 2, &mut r);
        p.freeze();
        p.ensure("new", &[2], 2, 2, &mut r);
    }
}
