use std::collections::BTreeMap;

use super::{Result, Tensor, TensorError};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its Adam moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    name: String,
    value: Tensor<T>,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
}

impl<T: Real> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn first_moment(&self) -> &[T] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[T] {
        &self.second_moment
    }
}

/// Ordered collection of parameters plus the shared optimizer step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    steps: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            steps: 0,
        }
    }

    /// Registers a parameter. Names must be unique within a store.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let n = value.numel();
        self.params.push(Parameter {
            name,
            value: value.with_grad(true),
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Replaces parameter values from `(name, tensor)` entries. Every
    /// parameter must be present exactly once with a matching shape.
    pub fn load_values(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(TensorError::InvalidArgument {
                op: "load_values",
                msg: format!("expected {} parameters, found {}", self.params.len(), entries.len()),
            });
        }
        let mut seen = vec![false; self.params.len()];
        for (name, tensor) in entries {
            let id = self.find(&name).ok_or_else(|| TensorError::InvalidArgument {
                op: "load_values",
                msg: format!("unknown parameter {name}"),
            })?;
            if std::mem::replace(&mut seen[id.0], true) {
                return Err(TensorError::InvalidArgument {
                    op: "load_values",
                    msg: format!("parameter {name} given twice"),
                });
            }
            let p = &mut self.params[id.0];
            if p.value.shape() != tensor.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: tensor.shape().to_vec(),
                });
            }
            p.value = tensor.with_grad(true);
        }
        Ok(())
    }
}

/// Parameter gradients keyed by id. Parameters that took no part in a pass are absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[T]) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, &g)| *a += g),
            None => {
                self.grads.insert(id, grad.to_vec());
            }
        }
    }

    pub fn merge(&mut self, other: &Gradients<T>) {
        for (&id, g) in &other.grads {
            self.accumulate(id, g);
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.grads.iter().map(|(&id, g)| (id, g.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// One update of every parameter that has a gradient; the others keep
    /// both their values and their moments.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = store.params.get(id.0).ok_or_else(|| TensorError::InvalidArgument {
                op: "adam_step",
                msg: format!("no parameter with id {}", id.0),
            })?;
            if p.value.numel() != g.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        store.steps += 1;
        let t = store.steps as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (id, g) in grads.iter() {
            let p = &mut store.params[id.0];
            let values = p.value.data_mut();
            for i in 0..g.len() {
                let m = b1 * p.first_moment[i] + (T::one() - b1) * g[i];
                let v = b2 * p.second_moment[i] + (T::one() - b2) * g[i] * g[i];
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                let m_hat = m / c1;
                let v_hat = v / c2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![value]));
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = one_param(0.7);
        let mut g = Gradients::new();
        g.accumulate(id, &[0.0]);
        Adam::default().step(&mut store, &g).unwrap();
        assert_eq!(store.get(id).value().data(), &[0.7]);
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
        let (mut store, id) = one_param(0.0);
        let mut g = Gradients::new();
        g.accumulate(id, &[1.0]);
        Adam::default().step(&mut store, &g).unwrap();
        let expected = -1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((store.get(id).value().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr_sign() {
        let (mut store, id) = one_param(0.0);
        let adam = Adam::new(1e-2);
        let mut g = Gradients::new();
        g.accumulate(id, &[-3.0]);
        let mut prev = 0.0;
        for _ in 0..2000 {
            adam.step(&mut store, &g).unwrap();
            let now = store.get(id).value().data()[0];
            let delta = now - prev;
            prev = now;
            assert!(delta > 0.0);
            assert!((delta - 1e-2).abs() < 1e-2 * 1e-3 + 1e-9);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut store, id) = one_param(0.0);
        let mut g = Gradients::new();
        g.accumulate(id, &[1.0, 2.0]);
        assert!(matches!(
            Adam::default().step(&mut store, &g),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert_eq!(store.steps(), 0);
    }

    #[test]
    fn load_values_checks_names_and_shapes() {
        let (mut store, _) = one_param(0.0);
        let bad_shape = vec![("w".to_string(), Tensor::from_vec(vec![1.0, 2.0]))];
        assert!(store.load_values(bad_shape).is_err());
        let bad_name = vec![("v".to_string(), Tensor::from_vec(vec![1.0]))];
        assert!(store.load_values(bad_name).is_err());
        store.load_values(vec![("w".into(), Tensor::from_vec(vec![5.0]))]).unwrap();
        assert_eq!(store.get(ParamId(0)).value().data(), &[5.0]);
    }
}
