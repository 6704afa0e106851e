//! Named parameter storage and binding onto a tape.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.values[id.0] = Arc::new(value);
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.values[index])
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.values[index]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replaces every value by name; names and shapes must match exactly.
    pub fn load_values(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.names.len() {
            return Err(Error::Config(format!(
                "architecture mismatch: checkpoint has {} tensors, model expects {}",
                named.len(),
                self.names.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(Error::Config(format!(
                    "architecture mismatch at {name} {:?} (expected {} {:?})",
                    t.shape(),
                    self.names[i],
                    self.values[i].shape()
                )));
            }
            self.values[i] = Arc::new(t);
        }
        Ok(())
    }

    /// Puts every parameter on the tape as a differentiable (`trainable`) or
    /// constant leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param_shared(v.clone())
                } else {
                    tape.constant_shared(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps caller-created variables, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients in store order; parameters off the loss path get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }

    /// Adds `scale * grad` of every parameter into `acc` (store order).
    pub fn accumulate_grads(&self, acc: &mut [Tensor], scale: f64) {
        for (v, a) in self.vars.iter().zip(acc.iter_mut()) {
            v.with_grad(|g| {
                for (x, y) in a.data_mut().iter_mut().zip(g) {
                    *x += scale * y;
                }
            });
        }
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for a fan_in x fan_out matrix.
pub fn init_linear(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape")
}

/// Normal(0, 0.02) embedding table.
pub fn init_embedding(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let n = Normal::new(0.0, 0.02).expect("sigma");
    let data = (0..rows * cols).map(|_| n.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}
