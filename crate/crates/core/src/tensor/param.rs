use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub requires_grad: bool,
    pub grad: Option<Tensor<S>>,
}

/// Ordered collection of named parameters. Registration order is the
/// serialization order used by checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            requires_grad: true,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Marks every parameter as frozen (or trainable again).
    pub fn set_requires_grad(&mut self, flag: bool) {
        for p in &mut self.params {
            p.requires_grad = flag;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<S>) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => p.grad = Some(g.clone()),
        }
    }

    /// Multiplies every present gradient by `factor`.
    pub fn scale_grads(&mut self, factor: S) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                for v in g.data_mut() {
                    *v *= factor;
                }
            }
        }
    }

    /// Rescales gradients so their joint L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let sq: f64 = self
            .params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(S::lit(max_norm / norm));
        }
        norm
    }

    /// Flat copy of all parameter values in registration order.
    pub fn flatten(&self) -> Vec<S> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Overwrites values from `(name, tensor)` pairs; names and shapes must
    /// match the registered parameters exactly and in order.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<S>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter blobs, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(values) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match blob {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    t.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}
