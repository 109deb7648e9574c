//! Named parameter registry and initializers.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a registered parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, redrawn outside ±2 std.
    TruncNormal(f64),
    Normal(f64),
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    decay: bool,
}

/// Trainable tensors addressed by unique dotted names.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Registers `value` under `name`. `decay` marks it for weight decay.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        decay: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidConfig(alloc::format!(
                "duplicate parameter {name}"
            )));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, value, decay });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Parameters in lexicographic name order.
    pub fn sorted(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.by_name
            .iter()
            .map(|(n, &i)| (n.as_str(), &self.entries[i].value))
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Overwrites a parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::UnknownParam(name.into()))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "param set",
                left: slot.shape().clone(),
                right: value.shape().clone(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Records every parameter as a leaf on `tape`, indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| tape.leaf(e.value.clone(), requires_grad))
                .collect(),
        )
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    decay: e.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Binds externally recorded vars, one per parameter in id order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl core::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

pub(crate) fn init_tensor<T: Real, R: Rng>(
    dims: &[usize],
    init: Init,
    rng: &mut R,
) -> Result<Tensor<T>> {
    match init {
        Init::Zeros => Tensor::zeros(dims),
        Init::Ones => Tensor::ones(dims),
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).map_err(|e| Error::Invalid(alloc::format!("{e}")))?;
            Tensor::from_fn(dims, |_| T::from_f64(dist.sample(rng)))
        }
        Init::TruncNormal(std) => {
            let dist = Normal::new(0.0, std).map_err(|e| Error::Invalid(alloc::format!("{e}")))?;
            Tensor::from_fn(dims, |_| loop {
                let v: f64 = dist.sample(rng);
                if v.abs() <= 2.0 * std {
                    break T::from_f64(v);
                }
            })
        }
    }
}
