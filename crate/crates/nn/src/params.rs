//! Named parameter storage and seeded initialization.

use rand::Rng;

use crate::{NnError, Scalar, Tensor};

/// Index of a parameter within its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Globally distinguishes parameters of different stores inside one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: u32,
    pub index: u32,
}

/// Ordered collection of named trainable tensors.
///
/// Stores that participate in the same graph must use different `group`s.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    group: u32,
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(group: u32) -> Self {
        Self {
            group,
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn group(&self) -> u32 {
        self.group
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            group: self.group,
            index: id.0 as u32,
        }
    }

    /// Registers a tensor. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn fill(&mut self, value: S) {
        for t in &mut self.values {
            t.data_mut().iter_mut().for_each(|x| *x = value);
        }
    }

    /// Replaces the value of `name`, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<(), NnError> {
        let id = self.find(name).ok_or_else(|| NnError::Missing(name.to_string()))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(NnError::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Order-sensitive FNV-1a hash over names, shapes and value bits
    /// (as `f64`). Used to verify that weights did or did not change.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Converts every tensor to another element type.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            group: self.group,
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Uniform `U(-1/√fan_in, 1/√fan_in)` initialization.
pub fn fan_in_uniform<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| S::lit(rng.gen_range(-bound..bound)))
}
