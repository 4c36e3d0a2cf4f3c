//! Named parameter storage and binding of parameters onto a tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::diffcore::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Adds a `rows×cols` tensor with entries drawn from `N(0, std²)`.
    pub fn add_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> ParamId {
        let normal = Normal::new(0.0, std.max(0.0)).unwrap();
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::new([rows, cols], data).unwrap())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Records every parameter on the tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            h.update(n.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_to(&self, c: &mut Container, prefix: &str) {
        for (n, v) in self.names.iter().zip(&self.values) {
            c.put_tensor(format!("{prefix}{n}"), v);
        }
    }

    /// Overwrites every parameter from `c`; names and shapes must match.
    pub fn read_from(&mut self, c: &Container, prefix: &str) -> Result<()> {
        for (n, v) in self.names.iter().zip(self.values.iter_mut()) {
            let t = c.tensor(&format!("{prefix}{n}"))?;
            if t.shape() != v.shape() {
                return Err(Error::shape(
                    "load parameters",
                    format!("{n}: stored {:?}, model {:?}", t.shape(), v.shape()),
                ));
            }
            *v = t;
        }
        Ok(())
    }
}

/// Tape variables of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables already on a tape, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient of every parameter, zeros where none reached it.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(tape, v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn container_round_trip_and_digest() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamStore::new();
        p.add_normal("a.w", 3, 4, 0.5, &mut rng);
        p.add("a.b", Tensor::zeros([1, 4]));
        let mut c = Container::new();
        p.write_to(&mut c, "m/");
        let mut q = p.clone();
        q.values_mut()[0].data_mut()[0] = 9.0;
        assert_ne!(p.digest(), q.digest());
        q.read_from(&c, "m/").unwrap();
        assert_eq!(p, q);
        assert_eq!(p.digest(), q.digest());
        assert_eq!(p.num_scalars(), 16);
    }

    #[test]
    fn shape_mismatch_on_load() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::zeros([2, 2]));
        let mut c = Container::new();
        c.put_tensor("w", &Tensor::zeros([2, 3]));
        assert!(p.read_from(&c, "").is_err());
    }
}
