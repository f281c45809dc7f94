//! Named parameters and their binding into a graph.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::tensor::{Real, Result as TensorResult, Tensor};

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Vision transformer weights.
    Backbone,
    /// Per-layer multi-view summary projections.
    Summary,
    /// Question projection into the vision width.
    Text,
    /// Memory cell.
    Tmsu,
    /// Token-adaptive gate.
    Tag,
    /// Feature projector and answer classifier.
    Head,
    /// Separate alignment projector, only present when it is not shared.
    Align,
}

impl ParamGroup {
    pub fn is_scvm(self) -> bool {
        matches!(
            self,
            ParamGroup::Summary | ParamGroup::Tmsu | ParamGroup::Tag | ParamGroup::Align
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen: bool,
    pub group: ParamGroup,
    /// Whether decoupled weight decay applies (weight matrices only).
    pub decay: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("duplicate parameter name `{0}`")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        group: ParamGroup,
        decay: bool,
    ) -> Result<ParamId, ParamError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            frozen: false,
            group,
            decay,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Overwrites a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<(), ParamError> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(ParamError::Shape {
                name: p.name.clone(),
                expected: p.tensor.shape().to_vec(),
                found: tensor.shape().to_vec(),
            });
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, tensor: Tensor<T>) -> Result<(), ParamError> {
        let id = self.id(name).ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        self.set(id, tensor)
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        self.params
            .iter_mut()
            .filter(|p| p.group == group)
            .for_each(|p| p.frozen = frozen);
    }

    /// Number of scalars, optionally restricted to one group.
    pub fn scalar_count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.map_or(true, |g| p.group == g))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                    group: p.group,
                    decay: p.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// FNV-1a over names and value bits of every parameter in `group`.
    pub fn fingerprint(&self, group: Option<ParamGroup>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in self.params.iter().filter(|p| group.map_or(true, |g| p.group == g)) {
            feed(p.name.as_bytes());
            for x in p.tensor.data() {
                feed(&x.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Lazily turns parameters into graph leaves, so a forward pass only adds
/// nodes for the parameters it actually reads.
pub struct Binder<'s, T> {
    store: &'s ParamStore<T>,
    vars: Vec<Option<Var>>,
    /// Bind frozen parameters as trainable too (gradient checks).
    all_trainable: bool,
}

impl<'s, T: Real> Binder<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            all_trainable: false,
        }
    }

    pub fn all_trainable(mut self) -> Self {
        self.all_trainable = true;
        self
    }

    /// Uses existing graph leaves, one per parameter in store order.
    pub fn prebound(store: &'s ParamStore<T>, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), store.len());
        Self {
            store,
            vars: vars.iter().copied().map(Some).collect(),
            all_trainable: true,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, g: &mut Graph<T>, id: ParamId) -> TensorResult<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let p = self.store.get(id);
        let v = g.leaf(p.tensor.clone(), self.all_trainable || !p.frozen)?;
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Gradients of every bound parameter that received one, in store order.
    pub fn grads(&self, g: &Graph<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|v| v.and_then(|v| g.grad(v).cloned())).collect()
    }
}

pub(crate) fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    uniform(rng, &[fan_in, fan_out], bound)
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}
