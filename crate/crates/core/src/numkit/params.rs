use rand::RngExt;

use super::scalar::Real;
use super::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>) -> ParamId {
        self.add(name, Tensor::full(shape, T::one()))
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` for a `[fan_in, fan_out]`
    /// matrix (or `±sqrt(3 / len)` for a vector).
    pub fn uniform<R: rand::Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        rng: &mut R,
    ) -> ParamId {
        let shape = shape.into();
        let bound = match shape.as_slice() {
            [a, b] => (6.0 / (*a + *b) as f64).sqrt(),
            s => (3.0 / s.iter().product::<usize>().max(1) as f64).sqrt(),
        };
        self.uniform_bound(name, shape, bound, rng)
    }

    pub fn uniform_bound<R: rand::Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64(rng.random_range(-bound..=bound)))
            .collect();
        self.add(name, Tensor::new(shape, data).expect("length matches shape"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies every value of `src` into `dst` (shapes must agree).
    pub fn copy_tensor(&mut self, src: ParamId, dst: ParamId) {
        assert_eq!(self.tensors[src.0].shape(), self.tensors[dst.0].shape());
        let values = self.tensors[src.0].data().to_vec();
        self.tensors[dst.0].data_mut().copy_from_slice(&values);
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads<T: Real = f64> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn new(len: usize) -> Self {
        ParamGrads { grads: vec![None; len] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Adds `scale * grad` into the buffer for `id`.
    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>, scale: T) {
        let slot = &mut self.grads[id.0];
        match slot {
            Some(acc) => {
                for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a = *a + *g * scale;
                }
            }
            None => *slot = Some(grad.map(|g| g * scale)),
        }
    }

    pub fn merge(&mut self, other: &ParamGrads<T>, scale: T) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g, scale);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.all_finite())
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * factor;
            }
        }
    }
}
