//! Named parameter storage and the per-step binding of parameters into a graph.

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named 32-bit parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a parameter drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f32,
        rng: &mut impl Rng,
    ) -> ParamId {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape, data).expect("shape matches data"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Writes graph gradients into each tensor's accumulator. Parameters the
    /// loss never reached end up holding zeros.
    pub fn accumulate_grads(&mut self, vars: &ParamVars, grads: &Gradients) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&vars.0) {
            match grads.get(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    if t.grad().is_none() {
                        t.zero_grad();
                    }
                }
            }
        }
        Ok(())
    }

    /// Replaces every accumulator with `grads`, given in parameter order.
    pub fn set_grads(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!("{} gradients for {} parameters", grads.len(), self.tensors.len())));
        }
        for (t, d) in self.tensors.iter_mut().zip(grads) {
            t.zero_grad();
            t.accumulate_grad(d)?;
        }
        Ok(())
    }

    /// Overwrites values from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter sets differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("copy_values_from", dst.shape(), src.shape()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Source of parameter values when binding a model into a graph.
pub trait ParamSource {
    fn bind(&self, g: &mut Graph) -> ParamVars;
}

impl ParamSource for ParamStore {
    fn bind(&self, g: &mut Graph) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| g.input(t)).collect())
    }
}

/// 64-bit copy of a parameter set, used where perturbations must not be
/// rounded to 32 bits (finite-difference checks).
#[derive(Clone, Debug)]
pub struct F64Params {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl From<&ParamStore> for F64Params {
    fn from(store: &ParamStore) -> Self {
        F64Params {
            names: store.names.clone(),
            shapes: store.tensors.iter().map(|t| t.shape().to_vec()).collect(),
            values: store
                .tensors
                .iter()
                .map(|t| t.data().iter().map(|&x| x as f64).collect())
                .collect(),
        }
    }
}

impl ParamSource for F64Params {
    fn bind(&self, g: &mut Graph) -> ParamVars {
        ParamVars(
            self.shapes
                .iter()
                .zip(&self.values)
                .map(|(s, v)| g.leaf(s.clone(), v.clone(), true).expect("consistent shapes"))
                .collect(),
        )
    }
}

/// Graph handles for every parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}
