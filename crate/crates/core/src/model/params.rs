use std::collections::HashMap;

use crate::tensor::{Float, Tensor};

/// Role of a parameter; decides weight-decay treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    /// Weight decay applies to convolution kernels only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

/// Where in the network a parameter lives: a backbone layer, or the fusion
/// and head block of one tap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Backbone(usize),
    Tap(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub stage: Stage,
}

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    /// Appends a parameter and returns its position.
    ///
    /// # Panics
    /// On a duplicate name; the builder never produces one.
    pub fn push(&mut self, name: String, value: Tensor<T>, kind: ParamKind, stage: Stage) -> usize {
        let id = self.entries.len();
        let prev = self.index.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.entries.push(Param { name, value, kind, stage });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.entries[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.entries[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Order-sensitive FNV-1a checksum over names and bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in &self.entries {
            eat(p.name.as_bytes());
            for v in p.value.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Running batch-norm statistics of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, batch: &crate::tensor::BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + momentum * b;
        }
    }
}
