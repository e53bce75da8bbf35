use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal truncated to ±2 std.
    TruncNormal(f64),
    /// Kaiming normal over fan-out, for convolutions feeding a nonlinearity.
    KaimingFanOut(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as BatchNorm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named parameter and buffer registry. Layers register shapes at
/// construction; values exist only after [`ParamStore::materialize`], so the
/// complexity audit of a large variant never allocates weights.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { specs: Vec::new(), values: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.push(name.into(), shape, init, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.push(name.into(), shape, init, ParamKind::Buffer)
    }

    fn push(&mut self, name: String, shape: &[usize], init: Init, kind: ParamKind) -> ParamId {
        debug_assert!(self.values.is_empty(), "register after materialize");
        debug_assert!(self.specs.iter().all(|s| s.name != name), "duplicate parameter {name}");
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), init, kind });
        ParamId(self.specs.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.specs[id.0].kind == ParamKind::Trainable)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn numel(&self, id: ParamId) -> usize {
        self.specs[id.0].numel()
    }

    /// Trainable scalar count from the registered shapes.
    pub fn trainable_count(&self) -> usize {
        self.trainable_ids().map(|id| self.numel(id)).sum()
    }

    pub fn is_materialized(&self) -> bool {
        self.values.len() == self.specs.len()
    }

    /// Draws every value from its initializer with a seeded generator.
    pub fn materialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.values = self.specs.iter().map(|s| init_tensor(s, &mut rng)).collect();
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.specs[id.0].shape.as_slice() {
            return Err(shape_err!(
                "parameter {} expects {:?}, got {:?}",
                self.specs[id.0].name,
                self.specs[id.0].shape,
                value.shape()
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Replaces all values at once, checking shapes.
    pub fn load_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.specs.len() {
            return Err(Error::Format(format!("{} tensors for {} parameters", values.len(), self.specs.len())));
        }
        for (s, v) in self.specs.iter().zip(&values) {
            if v.shape() != s.shape.as_slice() {
                return Err(shape_err!("parameter {} expects {:?}, got {:?}", s.name, s.shape, v.shape()));
            }
        }
        self.values = values;
        Ok(())
    }

    /// Two distinct entries mutably at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor<T>, &mut Tensor<T>) {
        assert_ne!(a, b);
        if a.0 < b.0 {
            let (lo, hi) = self.values.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.values.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }

    /// Same layout with values converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { specs: self.specs.clone(), values: self.values.iter().map(|v| v.cast()).collect() }
    }
}

fn init_tensor<T: Scalar>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let shape = &spec.shape;
    match spec.init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::Const(v) => Tensor::full(shape, T::of(v)),
        Init::TruncNormal(std) => Tensor::from_fn(shape, |_| T::of(trunc_normal(rng) * std)),
        Init::KaimingFanOut(fan_out) => {
            let std = (2.0 / fan_out.max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
        }
    }
}

fn trunc_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn materialize_is_seeded() {
        let mut a = ParamStore::<f32>::new();
        a.register("w", &[4, 3], Init::TruncNormal(0.02));
        a.buffer("running_var", &[3], Init::Ones);
        let mut b = a.clone();
        a.materialize(7);
        b.materialize(7);
        assert_eq!(a.values(), b.values());
        assert_eq!(a.trainable_count(), 12);
        assert!(a.get(ParamId(0)).data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn set_rejects_wrong_shape() {
        let mut s = ParamStore::<f64>::new();
        let id = s.register("w", &[2], Init::Zeros);
        s.materialize(0);
        assert!(s.set(id, Tensor::zeros(&[3])).is_err());
    }
}
