use super::tape::{Gradients, Tape, Var};
use super::{Result, Tensor, TensorError};
use rand::Rng;
use std::cell::RefCell;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensor owned by a model. Trainable parameters always carry a
/// gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, mut tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name(name).is_some() {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        if trainable {
            tensor.ensure_grad();
        }
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Adds a trainable parameter drawn uniformly from `±1/√fan_in`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape, data)?, true)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    /// Adds `grads` into every trainable parameter's accumulator.
    pub fn accumulate(&mut self, grads: &GradBuffer) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let (true, Some(g)) = (p.trainable, g) {
                p.tensor.ensure_grad();
                let acc = p.tensor.grad_mut().expect("grad attached");
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }
}

/// Per-parameter gradient sums, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradBuffer {
    pub fn empty(params: usize) -> Self {
        Self {
            grads: vec![None; params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Elementwise sum; summation order is the caller's responsibility.
    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn sum_ordered<'a>(params: usize, parts: impl IntoIterator<Item = &'a GradBuffer>) -> Self {
        let mut total = Self::empty(params);
        for p in parts {
            total.add_assign(p);
        }
        total
    }
}

/// A tape bound to a parameter store. Parameters are placed on the tape
/// lazily, once per graph.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<usize>>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'_> {
        if let Some(node) = self.bound.borrow()[id.0] {
            return self.tape.var_at(node);
        }
        let p = self.store.get(id);
        let value = p.tensor.detached();
        let var = if p.trainable {
            self.tape.variable(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut()[id.0] = Some(var.id());
        var
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.tape.constant(t)
    }

    /// Collects the gradients of every bound parameter.
    pub fn param_grads(&self, grads: &Gradients) -> GradBuffer {
        let bound = self.bound.borrow();
        GradBuffer {
            grads: bound
                .iter()
                .map(|b| b.and_then(|node| grads.raw(node).map(<[f64]>::to_vec)))
                .collect(),
        }
    }
}
