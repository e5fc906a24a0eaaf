//! Named trainable parameter collections and the AdamW optimizer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered set of named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform matrix of shape `fan_in x fan_out`.
    pub fn add_xavier<R: Rng>(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(fan_in, fan_out, |_, _| T::lit(rng.random_range(-bound..bound)));
        self.add(name, t)
    }

    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let t = Tensor::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        });
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Gradients indexed by [`ParamId`]; `None` for parameters not reached.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn new(count: usize) -> Self {
        Self { grads: vec![None; count] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    /// Global L2 norm over every gradient present.
    pub fn norm(&self) -> T {
        self.grads.iter().flatten().map(|g| g.sum_sq()).sum::<T>().sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    decay_mask: Vec<bool>,
}

impl<T: Real> AdamW<T> {
    /// Weight decay applies only to parameters with two or more rows
    /// (weight matrices); biases, norms and vectors are left alone.
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let first = store.iter().map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols())).collect::<Vec<_>>();
        let second = first.clone();
        let decay_mask = store.iter().map(|(_, p)| p.value.rows() > 1 && !p.name.ends_with("mask_token")).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first,
            second,
            decay_mask,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) {
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let value = store.get_mut(id);
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let decay = if self.decay_mask[id.0] { self.weight_decay } else { 0.0 };
            let (b1t, b2t) = (T::lit(b1), T::lit(b2));
            let (one_m_b1, one_m_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
            let step_size = T::lit(lr / bc1);
            let inv_bc2 = T::lit(1.0 / bc2);
            let eps = T::lit(self.eps);
            let shrink = T::lit(1.0 - lr * decay);
            for (((w, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1t * *mi + one_m_b1 * gi;
                *vi = b2t * *vi + one_m_b2 * gi * gi;
                *w = *w * shrink - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..2000 {
            let w = store.get(id).clone();
            let mut grads = ParamGrads::new(1);
            grads.accumulate(id, w.map(|v| 2.0 * (v - 1.0)));
            opt.step(&mut store, &grads, 0.01);
        }
        for &v in store.get(id).data() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(1, 1));
        store.add("a", Tensor::zeros(1, 1));
    }
}
