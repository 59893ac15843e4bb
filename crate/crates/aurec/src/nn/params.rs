//! Named parameter storage with deterministic initialization.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::scalar::{s, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Param<S> {
    name: String,
    value: ArrayD<S>,
}

/// Flat store of all learnable tensors of a model. Optimizer groups are
/// expressed as plain `Vec<ParamId>` owned by the model.
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<S>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar entries across the given parameter set.
    pub fn count_scalars(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.params[id.0].value.len()).sum()
    }

    pub fn count_all_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Order-insensitive content digest of a parameter group; used by tests
    /// that assert which groups an optimizer step touched.
    pub fn group_digest(&self, ids: &[ParamId]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for id in ids {
            for v in self.params[id.0].value.iter() {
                let bits = v.as_f64().to_bits();
                h ^= bits;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Gaussian tensor with the given standard deviation. Sampling happens in
/// `f64` so that `f32` and `f64` models built from the same seed agree.
pub fn normal<S: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<S> {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || s(dist.sample(rng)))
}

/// He initialization for layers followed by a ReLU family activation.
pub fn he_normal<S: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<S> {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Xavier initialization for linear maps inside the transformer.
pub fn xavier_normal<S: Scalar, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> ArrayD<S> {
    normal(shape, (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

pub fn zeros<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::ones(IxDyn(shape))
}
