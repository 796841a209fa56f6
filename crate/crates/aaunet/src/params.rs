//! Named trainable parameters with their gradient and Adam moment buffers.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to one parameter in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

pub struct ParamSlot<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
}

/// All parameters of one model, in registration order. Names are unique and
/// hierarchical, e.g. "enc1.haam1.conv5.weight".
pub struct ParamStore<T: Scalar> {
    slots: Vec<ParamSlot<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            slots: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let shape = value.shape();
        self.slots.push(ParamSlot {
            name: name.clone(),
            value,
            grad: Tensor::zeros(shape),
            adam_m: Tensor::zeros(shape),
            adam_v: Tensor::zeros(shape),
        });
        let id = ParamId(self.slots.len() - 1);
        self.by_name.insert(name, id.0);
        id
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count_values(&self) -> usize {
        self.slots.iter().map(|s| s.value.shape().count()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamSlot<T>)> {
        self.slots.iter().enumerate().map(|(i, s)| (ParamId(i), s))
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].grad
    }

    pub fn slot(&self, id: ParamId) -> &ParamSlot<T> {
        &self.slots[id.0]
    }

    pub fn slot_mut(&mut self, id: ParamId) -> &mut ParamSlot<T> {
        &mut self.slots[id.0]
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.fill(T::zero());
        }
    }

    /// Fingerprint over values in registration order; used by determinism
    /// tests and run records.
    pub fn checksum(&self) -> u64 {
        let mut acc = 0xcbf29ce484222325u64;
        for s in &self.slots {
            acc ^= s.value.checksum();
            acc = acc.wrapping_mul(0x100000001b3);
        }
        acc
    }

    /// Convert every buffer to another scalar width (used by the 64-bit
    /// gradient-check suites).
    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for s in &self.slots {
            out.register(s.name.clone(), s.value.map(|v| U::from_f64(v.to_f64())));
        }
        out
    }
}

/// Kaiming-uniform fan-in init for a conv weight (out_c, in_c, kh, kw):
/// bound = sqrt(6 / fan_in) with fan_in = in_c * kh * kw. Samples are drawn
/// in f64 so f32 and f64 stores built from the same seed agree.
pub fn kaiming_conv_weight<T: Scalar>(
    rng: &mut ChaCha8Rng,
    out_c: usize,
    in_c: usize,
    kh: usize,
    kw: usize,
) -> Tensor<T> {
    let fan_in = (in_c * kh * kw) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let shape = Shape::new(out_c, in_c, kh, kw);
    let data = (0..shape.count())
        .map(|_| T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data sizes agree")
}

pub fn zero_bias<T: Scalar>(channels: usize) -> Tensor<T> {
    Tensor::zeros(Shape::new(1, channels, 1, 1))
}
