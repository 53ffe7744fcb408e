use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use super::ModelError;
use crate::rng::Rng;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies (linear weights only).
    pub decay: bool,
}

/// Named trainable tensors plus non-trainable `f64` buffers (batch-norm
/// running statistics). Insertion order is stable and defines the
/// checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    buffers: Vec<(String, Vec<f64>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, decay });
        self.params.len() - 1
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Vec<f64>) {
        self.buffers.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[(String, Vec<f64>)] {
        &self.buffers
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.position(name)
            .map(|i| &self.params[i].value)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, ModelError> {
        match self.position(name) {
            Some(i) => Ok(&mut self.params[i].value),
            None => Err(ModelError::MissingParam(name.to_string())),
        }
    }

    pub fn buffer(&self, name: &str) -> Result<&[f64], ModelError> {
        self.buffers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Vec<f64>, ModelError> {
        self.buffers
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Total number of trainable scalars, optionally restricted by name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
            index: self.index.clone(),
            buffers: self.buffers.clone(),
        }
    }

    /// Records every parameter as a tape leaf.
    pub fn bind<'s>(&'s self, tape: &mut Tape<T>, requires_grad: bool) -> Bound<'s, T> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect();
        Bound { store: self, vars }
    }

    /// Records parameters as leaves, with gradients only for names accepted by
    /// `trainable`.
    pub fn bind_with<'s>(&'s self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'s, T> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable(&p.name)))
            .collect();
        Bound { store: self, vars }
    }
}

impl<T: Real> ParamStore<T> {
    /// Pairs existing tape variables with the parameters, in store order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound<'_, T>, ModelError> {
        if vars.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(Bound {
            store: self,
            vars: vars.to_vec(),
        })
    }
}

/// Parameters of a [`ParamStore`] as recorded on one tape.
pub struct Bound<'s, T> {
    store: &'s ParamStore<T>,
    vars: Vec<Var>,
}

impl<'s, T: Real> Bound<'s, T> {
    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }
}

/// Normal(0, std) truncated at two standard deviations by redrawing.
pub fn truncated_normal<T: Real>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            break T::of(x);
        }
    })
}
