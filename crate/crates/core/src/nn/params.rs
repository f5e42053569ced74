//! Named parameter storage with gradient buffers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::array::{Elem, NdArray};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A trainable (or frozen) tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<E> {
    pub name: String,
    pub value: NdArray<E>,
    pub grad: NdArray<E>,
    pub trainable: bool,
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with std `sqrt(2 / (fan_in + fan_out))`; fans from a 2D shape.
    XavierNormal,
    /// Gaussian with the given std.
    Normal(f64),
}

/// Flat registry of every parameter in a model, in creation order.
///
/// Models hold [`ParamId`]s; the store owns values and gradients. This keeps
/// the optimizer, checkpointing, and gradient checks as plain iterations.
pub struct ParamStore<E> {
    entries: Vec<Parameter<E>>,
    rng: ChaCha8Rng,
}

impl<E: Elem> ParamStore<E> {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init, trainable: bool) -> ParamId {
        let value = match init {
            Init::Zeros => NdArray::zeros(shape),
            Init::Ones => NdArray::full(shape, E::one()),
            Init::XavierNormal => {
                let (fan_in, fan_out) = match shape.as_slice() {
                    [r, c] => (*r, *c),
                    [n] => (*n, *n),
                    s => panic!("xavier init expects 1D/2D shape, got {s:?}"),
                };
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                self.sample_normal(shape, std)
            }
            Init::Normal(std) => self.sample_normal(shape, std),
        };
        let grad = NdArray::zeros(value.shape().to_vec());
        let id = ParamId(self.entries.len());
        self.entries.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        id
    }

    fn sample_normal(&mut self, shape: Vec<usize>, std: f64) -> NdArray<E> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                E::lit(z * std)
            })
            .collect();
        NdArray::from_vec(shape, data)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<E> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<E> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &NdArray<E> {
        &self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &NdArray<E> {
        &self.entries[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<E>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<E>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Total scalar count across trainable parameters only.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Zero every gradient buffer.
    pub fn reset_grads(&mut self) {
        for p in &mut self.entries {
            for g in p.grad.data_mut() {
                *g = E::zero();
            }
        }
    }

    /// Add `grad` into the parameter's gradient buffer. Frozen parameters
    /// are skipped so their buffers stay exactly zero.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &NdArray<E>) {
        let p = &mut self.entries[id.0];
        if !p.trainable {
            return;
        }
        debug_assert_eq!(p.grad.shape(), grad.shape());
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *g += *d;
        }
    }

    /// Cast the whole store to another element type (used to build an f64
    /// twin of an f32 model for finite-difference checks).
    pub fn cast<F: Elem>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: NdArray::zeros(p.value.shape().to_vec()),
                    trainable: p.trainable,
                })
                .collect(),
            rng: self.rng.clone(),
        }
    }
}
