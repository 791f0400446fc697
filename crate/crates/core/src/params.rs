//! Named parameter tensors and their binding onto a tape.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Ordered map from module path (e.g. `F.block3.branch2.conv1.weight`) to tensor.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<F> {
    tensors: IndexMap<String, Tensor<F>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParamError {
    #[error("missing parameter {0}")]
    Missing(String),
    #[error("parameter {path}: expected shape {expected:?}, found {found:?}")]
    Shape { path: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("parameter {0} is not finite")]
    NonFinite(String),
}

/// FNV-1a, used to give each parameter path its own RNG stream.
pub(crate) fn path_stream(path: &str) -> u64 {
    path.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { tensors: IndexMap::new() }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<F>> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Copy of the entries whose path satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self { tensors: self.tensors.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect() }
    }

    /// Overwrites (or inserts) every entry of `other`.
    pub fn merge(&mut self, other: &ParamStore<F>) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Records every tensor as a tape leaf; `trainable(path)` selects which carry gradients.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = tape.leaf(v.clone(), trainable(k));
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Every bit of every tensor equal.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(other.tensors.iter()).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Uniform `±sqrt(1/fan_in)` draw for one parameter, keyed by `(seed, path)`.
pub fn uniform_init<F: Scalar>(shape: &[usize], fan_in: usize, seed: u64, path: &str) -> Tensor<F> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_stream(path));
    Tensor::from_fn(shape.to_vec(), |_| F::from_f64_lossy(rng.random_range(-bound..bound)))
}

/// Tape variables of a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, path: &str) -> Result<Var, ParamError> {
        self.vars.get(path).copied().ok_or_else(|| ParamError::Missing(path.to_string()))
    }

    /// Gradients of the trainable leaves reached by `backward`, in `store` order.
    ///
    /// Trainable leaves the loss does not depend on get zero gradients.
    pub fn grads<F: Scalar>(&self, tape: &Tape<F>, store: &ParamStore<F>) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (path, t) in store.iter() {
            let Some(&v) = self.vars.get(path) else { continue };
            if !tape.requires_grad(v) {
                continue;
            }
            let g = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
            out.insert(path.clone(), g);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_path_not_order() {
        let a: Tensor<f32> = uniform_init(&[3, 4], 12, 7, "D.fc1.weight");
        let b: Tensor<f32> = uniform_init(&[3, 4], 12, 7, "D.fc1.weight");
        let c: Tensor<f32> = uniform_init(&[3, 4], 12, 7, "D.fc2.weight");
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (1.0f32 / 12.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn grads_only_for_trainable() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::scalar(2.0));
        store.insert("b", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |p| p == "a");
        let prod = tape.mul(bound.get("a").unwrap(), bound.get("b").unwrap()).unwrap();
        tape.backward(prod).unwrap();
        let g = bound.grads(&tape, &store);
        assert_eq!(g.len(), 1);
        assert_eq!(g.get("a").unwrap().data(), &[3.0]);
    }
}
