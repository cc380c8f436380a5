//! Named parameter layouts and their materialized values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Index of a parameter within a [`Layout`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub component: &'static str,
}

impl ParamSpec {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

/// Ordered parameter declarations; shapes only, nothing allocated.
#[derive(Clone, Debug, Default)]
pub struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, component: &'static str) -> ParamId {
        self.specs.push(ParamSpec { name: name.into(), shape: shape.to_vec(), init, component });
        ParamId(self.specs.len() - 1)
    }

    /// Fan-in scaled normal init for a `[fan_in × fan_out]`-style weight.
    pub fn weight(&mut self, name: impl Into<String>, shape: &[usize], component: &'static str) -> ParamId {
        let std = 1.0 / (shape[0] as f64).sqrt();
        self.add(name, shape, Init::Normal(std), component)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn count(&self) -> u64 {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    /// Draws every parameter in declaration order from one seeded stream.
    pub fn materialize<T: Float>(&self, seed: u64) -> Vec<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.specs
            .iter()
            .map(|s| match s.init {
                Init::Normal(std) => Tensor::randn(s.shape.clone(), std, &mut rng),
                Init::Ones => Tensor::ones(s.shape.clone()),
                Init::Zeros => Tensor::zeros(s.shape.clone()),
            })
            .collect()
    }

    /// Checks that `values` match this layout's shapes one for one.
    pub fn check_values<T: Float>(&self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.specs.len() {
            return Err(Error::dim(format!("{} tensors for {} parameters", values.len(), self.specs.len())));
        }
        for (s, v) in self.specs.iter().zip(values) {
            if v.shape() != s.shape.as_slice() {
                return Err(Error::dim(format!("{}: shape {:?}, expected {:?}", s.name, v.shape(), s.shape)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn materialize_is_seeded_and_shaped() {
        let mut l = Layout::new();
        l.weight("a", &[3, 4], "x");
        l.add("b", &[4], Init::Ones, "x");
        assert_eq!(l.count(), 16);
        let v1 = l.materialize::<f64>(9);
        let v2 = l.materialize::<f64>(9);
        assert_eq!(v1, v2);
        l.check_values(&v1).unwrap();
        assert!(v1[1].data().iter().all(|&v| v == 1.0));
        assert_eq!(l.find("b"), Some(ParamId(1)));
    }
}
