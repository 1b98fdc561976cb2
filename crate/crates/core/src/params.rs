//! Parameter registry, initialization, and binding of parameters into graphs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;
#[cfg(not(feature = "std"))]
use num_traits::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<R> {
    pub name: String,
    pub value: Tensor<R>,
    /// Entries the optimizer must never touch (EID kernel corners).
    pub frozen: Option<Vec<bool>>,
    pub grad: Vec<R>,
    /// Excluded from decoupled weight decay (norm affine, scalars).
    pub no_decay: bool,
}

/// Named parameters in registration order. Names are unique and
/// hierarchical (`encoder.stage1.block0.conv1.weight`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R> {
    params: Vec<Param<R>>,
    index: BTreeMap<String, usize>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<R>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Registry(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        let n = value.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            frozen: None,
            grad: vec![R::zero(); n],
            no_decay: false,
        });
        Ok(ParamId(id))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: Vec<bool>) {
        debug_assert_eq!(frozen.len(), self.params[id.0].value.len());
        self.params[id.0].frozen = Some(frozen);
    }

    pub fn set_no_decay(&mut self, id: ParamId) {
        self.params[id.0].no_decay = true;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<R> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<R> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<R>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<R>> {
        self.params.iter_mut()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<R>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim(
                "set_value",
                format!("`{}`: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Adds `scale·grad` into each parameter's gradient buffer.
    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<R>)], scale: R) {
        for (id, g) in grads {
            for (d, &s) in self.params[id.0].grad.iter_mut().zip(g) {
                *d += scale * s;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = R::zero());
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same parameters in another precision (used for 64-bit shadow checks).
    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    frozen: p.frozen.clone(),
                    grad: p.grad.iter().map(|g| S::from_f64(g.as_f64())).collect(),
                    no_decay: p.no_decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Deterministic parameter initializer with hierarchical name scoping.
pub struct Init<'a, R> {
    pub store: &'a mut ParamStore<R>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, R: Real> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore<R>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` inside a nested name scope.
    pub fn scoped<T>(&mut self, scope: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.push(scope);
        let out = f(self);
        self.pop();
        out
    }

    pub fn full_name(&self, leaf: &str) -> String {
        let mut s = String::new();
        for p in &self.prefix {
            s.push_str(p);
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    /// `U(-1/√fan_in, 1/√fan_in)`.
    pub fn uniform_fan_in(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| R::from_f64(self.rng.random_range(-bound..bound)))
            .collect();
        let name = self.full_name(leaf);
        self.store.register(&name, Tensor::new(shape, data)?)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let name = self.full_name(leaf);
        let id = self.store.register(&name, Tensor::full(shape, R::from_f64(value)))?;
        Ok(id)
    }

    /// Registers a fixed-value tensor (caller decides frozen entries).
    pub fn tensor(&mut self, leaf: &str, value: Tensor<R>) -> Result<ParamId> {
        let name = self.full_name(leaf);
        self.store.register(&name, value)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// A graph together with the parameter store it reads from.
///
/// Each parameter becomes one gradient-tracking leaf the first time it is
/// used; [`Ctx::param_grads`] collects their gradients for
/// [`ParamStore::accumulate`].
pub struct Ctx<'s, R> {
    pub g: Graph<R>,
    store: &'s ParamStore<R>,
    bound: Vec<Option<Var>>,
}

impl<'s, R: Real> Ctx<'s, R> {
    pub fn new(store: &'s ParamStore<R>) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore<R> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.value(id).clone(), true);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn input(&mut self, t: Tensor<R>) -> Var {
        self.g.constant(t)
    }

    /// Leaf gradients of every parameter the graph touched.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<R>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, b)| {
                let g = self.g.grad((*b)?)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect()
    }
}
