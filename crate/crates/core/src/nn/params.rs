use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::scalar::Scalar;

use super::NnError;

/// Whether a parameter is drawn at init or starts at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// A trainable tensor with its Adam moments.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
    pub(crate) m: Vec<T>,
    pub(crate) v: Vec<T>,
}

/// Named parameters of one network plus its optimizer state.
///
/// Names are kept sorted so iteration order (and therefore checkpoint layout
/// and init draws) is independent of construction order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Scalar> {
    params: BTreeMap<String, Param<T>>,
    pub(crate) step: u64,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> Result<(), NnError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let n = tensor.numel();
        self.params.insert(
            name,
            Param {
                tensor: tensor.with_requires_grad(true),
                kind,
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, NnError> {
        self.params.get(name).map(|p| &p.tensor).ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, NnError> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    /// Replaces the values of `name`, keeping its shape.
    pub fn set_values(&mut self, name: &str, values: &[T]) -> Result<(), NnError> {
        let t = self.get_mut(name)?;
        if t.numel() != values.len() {
            return Err(NnError::ShapeMismatch {
                name: name.to_string(),
                expected: t.shape().to_vec(),
                got: vec![values.len()],
            });
        }
        t.values_mut().copy_from_slice(values);
        Ok(())
    }

    /// Registers every parameter on `graph`; as gradient leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| {
                let v = if trainable { graph.param(&p.tensor) } else { graph.constant(&p.tensor) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Writes the gradient of every bound parameter into its grad slot,
    /// adding to anything already there. Unreached parameters get zeros.
    pub fn absorb_grads(&mut self, bound: &Bound<'_, T>, grads: &Gradients<T>) -> Result<(), NnError> {
        for (name, var) in &bound.vars {
            let p = self.params.get_mut(name).ok_or_else(|| NnError::UnknownParam(name.clone()))?;
            let mut g = grads.tensor(*var).into_values();
            if let Some(prev) = p.tensor.take_grad() {
                for (a, b) in g.iter_mut().zip(prev) {
                    *a = *a + b;
                }
            }
            p.tensor.set_grad(g)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.clear_grad();
        }
    }

    /// Hash of every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (k, p) in &self.params {
            k.hash(&mut h);
            for v in p.tensor.values() {
                v.to_f64().unwrap_or(f64::NAN).to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.tensor.all_finite())
    }

    /// Copies values (not optimizer state) from a set with the same layout.
    pub fn load_values_from(&mut self, other: &ParamSet<T>) -> Result<(), NnError> {
        for (name, p) in &self.params {
            let o = other.get(name)?;
            if o.shape() != p.tensor.shape() {
                return Err(NnError::ShapeMismatch {
                    name: name.clone(),
                    expected: p.tensor.shape().to_vec(),
                    got: o.shape().to_vec(),
                });
            }
        }
        for (name, p) in self.params.iter_mut() {
            p.tensor.values_mut().copy_from_slice(other.get(name)?.values());
        }
        Ok(())
    }
}

/// Parameters registered on one graph, by name.
pub struct Bound<'g, T: Scalar> {
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    pub fn var(&self, name: &str) -> Result<Var<'g, T>, NnError> {
        self.vars.get(name).copied().ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    /// Builds a binding from explicit vars, one per parameter name in
    /// sorted order (used by finite-difference harnesses).
    pub fn from_vars(params: &ParamSet<T>, vars: &[Var<'g, T>]) -> Self {
        Bound {
            vars: params.names().map(str::to_string).zip(vars.iter().copied()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}
