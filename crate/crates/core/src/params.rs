//! Named parameter storage shared by every model.

use std::ops::Index;

use atok_autodiff::{Float, Graph, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named tensors. Insertion order is the checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Put every parameter on `g`; those for which `trainable(name)` holds require grad.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Result<Bound> {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| g.leaf(t.clone(), trainable(n)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Bound(vars))
    }

    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Result<Bound> {
        self.bind(g, |_| false)
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles in store order, e.g. the inputs handed out by a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Helper that names and initialises parameters as a model is assembled.
pub struct ParamBuilder<'a, T: Float> {
    pub store: &'a mut ParamStore<T>,
    rng: &'a mut StreamRng,
    prefix: String,
    std: f64,
    fan_in: bool,
}

impl<'a, T: Float> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut StreamRng, std: f64) -> Self {
        Self { store, rng, prefix: String::new(), std, fan_in: false }
    }

    /// Weight matrices from [`Self::matrix`] get std `1/sqrt(d_in)` instead of the fixed std.
    pub fn with_fan_in(mut self) -> Self {
        self.fan_in = true;
        self
    }

    pub fn scoped<R>(&mut self, scope: &str, f: impl FnOnce(&mut ParamBuilder<'_, T>) -> R) -> R {
        let prefix = format!("{}{}.", self.prefix, scope);
        let mut sub = ParamBuilder { store: &mut *self.store, rng: &mut *self.rng, prefix, std: self.std, fan_in: self.fan_in };
        f(&mut sub)
    }

    fn full_name(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    /// Normal(0, std) truncated to two standard deviations.
    pub fn normal(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.normal_with_std(name, shape, self.std)
    }

    /// As [`Self::normal`] with an explicit standard deviation.
    pub fn normal_with_std(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::from_f64(z * std);
            }
        });
        let n = self.full_name(name);
        self.store.add(n, t)
    }

    /// `[d_in, d_out]` weight matrix, fixed-std or fan-in scaled per the builder mode.
    pub fn matrix(&mut self, name: &str, d_in: usize, d_out: usize) -> ParamId {
        let std = if self.fan_in { 1.0 / (d_in as f64).sqrt() } else { self.std };
        self.normal_with_std(name, &[d_in, d_out], std)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::full(shape, T::one()))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        use rand::Rng;
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)));
        let n = self.full_name(name);
        self.store.add(n, t)
    }
}
