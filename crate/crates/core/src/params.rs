//! Named parameter collections and their binding into a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Shape, Tensor};

/// How a freshly constructed parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    /// Uniform in `±sqrt(3 / fan_in)`, for layers not followed by a rectifier.
    LecunUniform { fan_in: usize },
    Zeros,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Shape, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn instantiate<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        match self.init {
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::uniform(self.shape, -bound, bound, rng)
            }
            Init::LecunUniform { fan_in } => {
                let bound = (3.0 / fan_in as f64).sqrt();
                Tensor::uniform(self.shape, -bound, bound, rng)
            }
            Init::Zeros => Tensor::zeros(self.shape),
            Init::Constant(v) => Tensor::full(self.shape, v),
        }
    }
}

/// Learnable tensors of one network, keyed by a dotted path such as
/// `enc1.1.dsd.pw`. Iteration order is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_specs<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut params = ModelParams::new();
        for spec in specs {
            params.insert(spec.name.clone(), spec.instantiate(rng))?;
        }
        Ok(params)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::NameMismatch(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Errors unless both collections hold the same names with the same shapes.
    pub fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        let a: Vec<_> = self.tensors.keys().collect();
        let b: Vec<_> = other.tensors.keys().collect();
        if a != b {
            let missing: Vec<_> = a.iter().filter(|n| !b.contains(n)).collect();
            let extra: Vec<_> = b.iter().filter(|n| !a.contains(n)).collect();
            return Err(Error::NameMismatch(format!(
                "missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (name, t) in &self.tensors {
            let s = other.tensors[name].shape();
            if t.shape() != s {
                return Err(Error::NameMismatch(format!(
                    "`{name}` has shape {s}, expected {}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Inserts every tensor as a graph leaf; trainable leaves track gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Binding> {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.tensors {
            let id = if trainable {
                g.param(t.clone())?
            } else {
                g.constant(t.clone())?
            };
            ids.insert(name.clone(), id);
        }
        Ok(Binding { ids })
    }
}

/// Parameter name to graph node mapping produced by [`ModelParams::bind`].
#[derive(Clone, Debug)]
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        Binding {
            ids: pairs.into_iter().collect(),
        }
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::NameMismatch(format!("no parameter named `{name}`")))
    }

    pub fn ids(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }

    /// Gradients after `Graph::backward`, zero-filled for parameters the loss
    /// did not reach.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.ids
            .iter()
            .map(|(name, &id)| {
                let grad = g
                    .grad(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(id).numel()]);
                (name.clone(), grad)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ModelParams::new();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            p.insert("a", Tensor::scalar(2.0)),
            Err(Error::NameMismatch(_))
        ));
    }

    #[test]
    fn kaiming_bound_respected() {
        let spec = ParamSpec::new("w", Shape::new(8, 4, 3, 3), Init::KaimingUniform { fan_in: 36 });
        let t = spec.instantiate(&mut ChaCha8Rng::seed_from_u64(0));
        let bound = (6.0f64 / 36.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn compatibility_check_names_mismatch() {
        let mut a = ModelParams::new();
        a.insert("x", Tensor::scalar(0.0)).unwrap();
        let mut b = ModelParams::new();
        b.insert("y", Tensor::scalar(0.0)).unwrap();
        assert!(a.check_compatible(&b).is_err());
        assert!(a.check_compatible(&a.clone()).is_ok());
    }
}
