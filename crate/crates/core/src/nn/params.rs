//! Named parameter trees and the value-and-gradient entry point.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::float::Float;
use super::graph::{Graph, Var};
use super::matrix::Matrix;
use crate::{Error, Result};

/// Trainable tensors plus non-trainable buffers (running statistics),
/// both keyed by hierarchical dotted names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Float + Serialize + serde::de::DeserializeOwned")]
pub struct ParameterTree<T: Float = f32> {
    params: BTreeMap<String, Matrix<T>>,
    buffers: BTreeMap<String, Matrix<T>>,
    seed: u64,
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl<T: Float> ParameterTree<T> {
    pub fn new(seed: u64) -> Self {
        ParameterTree {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for the tensor called `name`; depends only on the tree seed
    /// and the name, so initialization does not depend on insertion order.
    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::numeric(name, "non-finite initial value"));
        }
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Matrix<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    /// Glorot-uniform `fan_in x fan_out` weight.
    pub fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = self.rng_for(name);
        let data = (0..fan_in * fan_out)
            .map(|_| T::lit(rng.random_range(-limit..limit)))
            .collect();
        self.insert(name, Matrix::from_vec(fan_in, fan_out, data))
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<()> {
        let mut rng = self.rng_for(name);
        let dist = Normal::new(0.0, std).map_err(|e| Error::contract(e.to_string()))?;
        let data = (0..rows * cols)
            .map(|_| T::lit(dist.sample(&mut rng)))
            .collect();
        self.insert(name, Matrix::from_vec(rows, cols, data))
    }

    /// Uniform draws from the generator of `name`, for callers that apply their
    /// own transform before inserting.
    pub fn draw_uniform(
        &self,
        name: &str,
        rows: usize,
        cols: usize,
        lo: f64,
        hi: f64,
    ) -> Matrix<f64> {
        let mut rng = self.rng_for(name);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Matrix::from_vec(rows, cols, data)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, Matrix::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, Matrix::filled(rows, cols, T::one()))
    }

    pub fn get(&self, name: &str) -> Result<&Matrix<T>> {
        self.params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix<T>> {
        match self.params.get_mut(name) {
            Some(m) => Ok(m),
            None => self
                .buffers
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("unknown parameter {name}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name) || self.buffers.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Matrix<T>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Matrix<T>)> {
        self.buffers.iter()
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.buffers.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParameterTree<U> {
        ParameterTree {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            seed: self.seed,
        }
    }

    /// Binds every trainable tensor as a differentiable leaf and every
    /// buffer as a constant.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.params {
            vars.insert(k.clone(), g.param(v.clone()));
        }
        for (k, v) in &self.buffers {
            vars.insert(k.clone(), g.constant(v.clone()));
        }
        Bound { vars }
    }

    /// Names and shapes of all tensors, buffers included, in storage order.
    pub fn manifest(&self) -> Vec<(String, (usize, usize), bool)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.shape(), false))
            .collect();
        out.extend(
            self.buffers
                .iter()
                .map(|(k, v)| (k.clone(), v.shape(), true)),
        );
        out
    }

    /// Overwrites values from `other`, requiring identical names and shapes.
    pub fn assign_from(&mut self, other: &ParameterTree<T>) -> Result<()> {
        if self.manifest() != other.manifest() {
            let ours: Vec<_> = self.manifest().into_iter().map(|m| m.0).collect();
            let theirs: Vec<_> = other.manifest().into_iter().map(|m| m.0).collect();
            let differing: Vec<_> = ours
                .iter()
                .filter(|n| !theirs.contains(n))
                .chain(theirs.iter().filter(|n| !ours.contains(n)))
                .cloned()
                .collect();
            return Err(Error::Format(format!(
                "parameter manifest mismatch (differing names: {differing:?}; otherwise shapes differ)"
            )));
        }
        self.params = other.params.clone();
        self.buffers = other.buffers.clone();
        Ok(())
    }
}

/// Graph variables for the tensors of a [`ParameterTree`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// `d loss / d parameter`, congruent with the parameter tree.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTree<T: Float = f32> {
    grads: BTreeMap<String, Matrix<T>>,
}

impl<T: Float> GradientTree<T> {
    pub fn zeros_like(params: &ParameterTree<T>) -> Self {
        GradientTree {
            grads: params
                .params()
                .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows, v.cols)))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.grads.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.grads.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix<T>)> {
        self.grads.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|m| m.data.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: T) {
        for m in self.grads.values_mut() {
            m.data.iter_mut().for_each(|v| *v *= c);
        }
    }
}

/// Evaluates `loss_fn` on a fresh tape and returns the scalar loss, the
/// gradient for every trainable tensor (zero where the loss does not depend
/// on it) and whatever auxiliary value the closure produced.
pub fn value_and_grad<T: Float, A>(
    params: &ParameterTree<T>,
    loss_fn: impl FnOnce(&mut Graph<T>, &Bound) -> Result<(Var, A)>,
) -> Result<(T, GradientTree<T>, A)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let (loss, aux) = loss_fn(&mut g, &bound)?;
    if g.shape(loss) != (1, 1) {
        return Err(Error::contract("loss must be a scalar"));
    }
    let value = g.scalar(loss);
    if !value.is_finite() {
        let culprit = params
            .params()
            .find(|(_, m)| !m.is_finite())
            .map(|(k, _)| k.clone())
            .unwrap_or_else(|| "<loss>".to_string());
        return Err(Error::numeric(
            culprit,
            format!("loss evaluated to {value}"),
        ));
    }
    let mut grads = g.backward(loss);
    let mut tree = GradientTree {
        grads: BTreeMap::new(),
    };
    for (name, m) in params.params() {
        let v = bound.get(name)?;
        let gm = grads
            .take(v)
            .unwrap_or_else(|| Matrix::zeros(m.rows, m.cols));
        if !gm.is_finite() {
            return Err(Error::numeric(name.clone(), "non-finite gradient"));
        }
        tree.grads.insert(name.clone(), gm);
    }
    Ok((value, tree, aux))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm() {
        let mut p = ParameterTree::<f64>::new(0);
        p.insert("p", Matrix::from_vec(1, 2, vec![3.0, 4.0]))
            .unwrap();
        p.insert("unused", Matrix::from_vec(1, 1, vec![1.0]))
            .unwrap();
        let (v, g, ()) = value_and_grad(&p, |g, b| {
            let x = b.get("p")?;
            let sq = g.square(x);
            let s = g.sum(sq);
            Ok((g.scale(s, 0.5), ()))
        })
        .unwrap();
        assert_eq!(v, 12.5);
        assert_eq!(g.get("p").unwrap().data, vec![3.0, 4.0]);
        assert_eq!(g.get("unused").unwrap().data, vec![0.0]);
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let mut p = ParameterTree::<f64>::new(0);
        p.insert("a.w", Matrix::from_vec(1, 1, vec![-1.0])).unwrap();
        let err = value_and_grad(&p, |g, b| {
            let x = b.get("a.w")?;
            Ok((g.ln(x), ()))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn initialization_is_seeded_and_order_free() {
        let mut a = ParameterTree::<f32>::new(9);
        a.glorot("x", 3, 4).unwrap();
        a.glorot("y", 2, 2).unwrap();
        let mut b = ParameterTree::<f32>::new(9);
        b.glorot("y", 2, 2).unwrap();
        b.glorot("x", 3, 4).unwrap();
        assert_eq!(a, b);
        let mut c = ParameterTree::<f32>::new(10);
        c.glorot("x", 3, 4).unwrap();
        assert_ne!(a.get("x").unwrap(), c.get("x").unwrap());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = ParameterTree::<f32>::new(0);
        a.zeros("x", 1, 1).unwrap();
        assert!(a.zeros("x", 1, 1).is_err());
    }
}
