//! Named parameter storage, graph binding and initializers.

use indexmap::IndexMap;
use rand::RngExt;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered name -> tensor map. Insertion order is the serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let (idx, _) = self.entries.insert_full(name, value);
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("valid id").0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Registers every parameter as a graph leaf. Untrainable binding uses
    /// constant inputs so no gradient work is done for them.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .values()
            .map(|t| if trainable { graph.param(t) } else { graph.input(t) })
            .collect();
        Bound { vars }
    }

    /// Overwrites values from another store with identical names and dims.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: model has {}, source has {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (name, t) in self.entries.iter_mut() {
            let src = other
                .entries
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if src.dims() != t.dims() {
                return Err(Error::Config(format!(
                    "parameter {name}: dims {:?} vs {:?}",
                    t.dims(),
                    src.dims()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Per-parameter `f64` gradient sums, aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub(crate) data: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros(store: &ParamStore) -> Self {
        ParamGrads {
            data: store.entries.values().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// Adds `scale * grad` for each bound parameter that received a gradient.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients, scale: f64) {
        for (acc, &v) in self.data.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += scale * x;
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }
}

/// Uniform in `±sqrt(6 / fan_in)` (He/Kaiming for ReLU).
pub fn kaiming_uniform<R: RngExt + ?Sized>(dims: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform(dims, bound, rng)
}

pub fn uniform<R: RngExt + ?Sized>(dims: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
        .map(|v| v as f32)
        .collect();
    Tensor::new(dims.to_vec(), data).expect("length matches dims")
}

pub fn standard_normal<R: RngExt + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; 1 - u keeps the log argument in (0, 1]
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Square `n x n` orthogonal matrix from Gram-Schmidt on Gaussian rows.
pub fn orthogonal<R: RngExt + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows.concat()
}
