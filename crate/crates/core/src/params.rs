//! Named parameter storage and deterministic initialisation.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter groups get their own learning rates (backbone stubs vs. the rest).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    /// The motion stub stands in for the frozen 3D backbone.
    MotionBackbone,
    Head,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {}",
            name
        );
        let n = value.numel();
        self.params.push(Param {
            name,
            value,
            grad: vec![0.0; n],
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Add `grads` (as returned by a backward pass) into the stored gradients.
    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<f64>)], scale: f64) {
        for (id, g) in grads {
            let dst = &mut self.params[id.0].grad;
            for (d, s) in dst.iter_mut().zip(g) {
                *d += scale * s;
            }
        }
    }
}

/// Seeded initialiser used by every module constructor.
pub struct Init {
    rng: ChaCha8Rng,
    pub group: ParamGroup,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            group: ParamGroup::Head,
        }
    }

    /// Glorot-uniform weight of shape `[fan_in, fan_out]`.
    pub fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        Tensor::from_fn(&[fan_in, fan_out], |_| self.rng.random_range(-a..a))
    }

    pub fn uniform(&mut self, shape: &[usize], a: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.random_range(-a..a))
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::from_fn(shape, |_| {
            // Box-Muller
            let u1: f64 = self.rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = self.rng.random();
            std * libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
        })
    }
}
