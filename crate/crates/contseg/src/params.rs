//! Named trainable parameters and their initialisers.
//!
//! A [`ParamSet`] owns every weight of a model as a flat, append-only list;
//! [`ParamId`]s are indices into it and stay valid across task expansion
//! (expansion only appends). Snapshotting a frozen teacher is a deep clone.
//! A [`Binder`] loads parameters onto a tape — as trainable leaves for the
//! live model or as constants for a frozen snapshot — caching the `Var` so a
//! weight used in several places becomes a single leaf with fan-out.

use std::collections::{BTreeMap, HashMap};

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Arr, ParamId, Tape, Var};

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arr,
    /// Whether weight decay applies (norm scales/biases/queries opt out).
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new parameter; names are unique and never reused.
    pub fn insert(&mut self, name: impl Into<String>, value: Arr, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.entries.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, decay });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0 as usize]
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.entries[id.0 as usize].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.entries[id.0 as usize].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i as u32), e))
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Loads parameters from a set onto a tape, one leaf per parameter.
pub struct Binder<'a> {
    set: &'a ParamSet,
    trainable: bool,
    cache: HashMap<ParamId, Var>,
}

impl<'a> Binder<'a> {
    /// Gradients will flow back to these parameters.
    pub fn trainable(set: &'a ParamSet) -> Self {
        Binder {
            set,
            trainable: true,
            cache: HashMap::new(),
        }
    }

    /// Parameters enter the tape as constants (frozen teacher).
    pub fn frozen(set: &'a ParamSet) -> Self {
        Binder {
            set,
            trainable: false,
            cache: HashMap::new(),
        }
    }

    pub fn set(&self) -> &ParamSet {
        self.set
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(&v) = self.cache.get(&id) {
            return v;
        }
        let value = self.set.value(id).clone();
        let v = if self.trainable {
            tape.param(id, value)
        } else {
            tape.constant(value)
        };
        self.cache.insert(id, v);
        v
    }

    /// Look a parameter up by name and load it.
    pub fn named(&mut self, tape: &mut Tape, name: &str) -> Var {
        let id = self
            .set
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        self.var(tape, id)
    }
}

/// Weight initialisers. All of them draw scalars in row-major order from the
/// given RNG, so values are reproducible across platforms.
pub mod init {
    use super::*;

    fn fill(rng: &mut impl Rng, shape: &[usize], std: f64) -> Arr {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite/positive");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        Arr::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Plain Gaussian.
    pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Arr {
        fill(rng, shape, std)
    }

    /// Glorot/Xavier for a `[out, in]` linear weight.
    pub fn xavier(rng: &mut impl Rng, out_dim: usize, in_dim: usize) -> Arr {
        fill(rng, &[out_dim, in_dim], (2.0 / (in_dim + out_dim) as f64).sqrt())
    }

    /// He/Kaiming for a `[out, in, kh, kw]` conv weight feeding a ReLU.
    pub fn kaiming_conv(
        rng: &mut impl Rng,
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
    ) -> Arr {
        fill(rng, &[out_ch, in_ch, kh, kw], (2.0 / (in_ch * kh * kw) as f64).sqrt())
    }

    pub fn zeros(shape: &[usize]) -> Arr {
        Arr::zeros(IxDyn(shape))
    }

    pub fn ones(shape: &[usize]) -> Arr {
        Arr::from_elem(IxDyn(shape), 1.0)
    }
}
