use std::collections::{BTreeMap, HashMap};

use super::{NumericError, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub gradient: Tensor<S>,
}

/// Gradients of one backward pass, keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients<S> {
    pub(crate) by_param: BTreeMap<ParamId, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }
}

/// Ordered collection of parameters with unique names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumericError::Contract {
                op: "param_insert",
                msg: format!("duplicate parameter name {name}"),
            });
        }
        let id = ParamId(self.params.len());
        let gradient = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            gradient,
        });
        self.by_name.insert(name, id);
        Ok(id)
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(NumericError::Shape {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.gradient.data_mut().fill(S::zero());
        }
    }

    /// Overwrites every gradient; parameters absent from `grads` get zero.
    pub fn set_grads(&mut self, grads: &Gradients<S>) {
        self.zero_grads();
        self.accumulate_grads(grads, S::one());
    }

    /// `gradient += scale * grads` for every parameter present in `grads`.
    pub fn accumulate_grads(&mut self, grads: &Gradients<S>, scale: S) {
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            for (a, &b) in p.gradient.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn grad_norm(&self) -> S {
        self.params
            .iter()
            .map(|p| p.gradient.norm_sq())
            .sum::<S>()
            .sqrt()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[1])).is_err());
        assert_eq!(s.get(s.id("w").unwrap()).gradient.shape(), &[2, 2]);
    }

    #[test]
    fn set_value_rejects_shape_change() {
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.set_value(id, Tensor::zeros(&[4])).is_err());
    }
}
