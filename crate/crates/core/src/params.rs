//! Named learnable parameters.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor addressed by a dotted path such as `enc.0.blocks.1.msa.wl1`.
#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// How a parameter is initialized when registered.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    Zeros,
    Ones,
    Constant(f64),
}

/// Ordered collection of parameters; registration order is the checkpoint order.
#[derive(Clone, Debug)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self { params: Vec::new(), by_name: HashMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
            Init::Constant(c) => vec![lit(c); numel],
            Init::TruncNormal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..numel)
                    .map(|_| loop {
                        let v: f64 = dist.sample(&mut self.rng);
                        if v.abs() <= 2.0 * std {
                            break lit(v);
                        }
                    })
                    .collect()
            }
        };
        let mut tensor = Tensor::new(shape, data)?;
        tensor.requires_grad = true;
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    /// Adds `grad` into the parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        let t = &mut self.params[id.0].tensor;
        match &mut t.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, &b)| *a = *a + b),
            None => t.grad = Some(grad.to_vec()),
        }
    }

    /// Copy of this store with every value converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| {
                    let mut tensor = p.tensor.cast::<U>();
                    tensor.requires_grad = true;
                    Parameter { name: p.name.clone(), tensor }
                })
                .collect(),
            by_name: self.by_name.clone(),
            rng: self.rng.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new(0);
        s.register("a.w", &[2, 2], Init::Zeros).unwrap();
        assert!(s.register("a.w", &[2], Init::Zeros).is_err());
    }

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let mut a = ParamStore::<f32>::new(5);
        let mut b = ParamStore::<f32>::new(5);
        let ia = a.register("w", &[1000], Init::TruncNormal(0.02)).unwrap();
        let ib = b.register("w", &[1000], Init::TruncNormal(0.02)).unwrap();
        assert_eq!(a.tensor(ia).data(), b.tensor(ib).data());
        assert!(a.tensor(ia).data().iter().all(|v| v.abs() <= 0.04));
    }
}
