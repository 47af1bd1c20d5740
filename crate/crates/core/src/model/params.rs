//! Named parameter registry, parameter groups and the freeze policy.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    EncoderBackbone,
    PromptEncoder,
    Adapters,
    MaskDecoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::EncoderBackbone,
        ParamGroup::PromptEncoder,
        ParamGroup::Adapters,
        ParamGroup::MaskDecoder,
    ];

    /// Parameter-name prefix owned by the group.
    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::EncoderBackbone => "image_encoder.",
            ParamGroup::PromptEncoder => "prompt_encoder.",
            ParamGroup::Adapters => "adapter.",
            ParamGroup::MaskDecoder => "mask_decoder.",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        Self::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::EncoderBackbone => "encoder_backbone",
            ParamGroup::PromptEncoder => "prompt_encoder",
            ParamGroup::Adapters => "adapters",
            ParamGroup::MaskDecoder => "mask_decoder",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{s}`")))
    }
}

/// Which parameter groups receive optimizer updates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub trainable_groups: BTreeSet<ParamGroup>,
    pub frozen_groups: BTreeSet<ParamGroup>,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self::adapter_tuning()
    }
}

impl FreezePolicy {
    /// Frozen backbone and prompt encoder; adapters and mask decoder learn.
    pub fn adapter_tuning() -> Self {
        FreezePolicy {
            trainable_groups: [ParamGroup::Adapters, ParamGroup::MaskDecoder].into(),
            frozen_groups: [ParamGroup::EncoderBackbone, ParamGroup::PromptEncoder].into(),
        }
    }

    pub fn all_trainable() -> Self {
        FreezePolicy {
            trainable_groups: ParamGroup::ALL.into(),
            frozen_groups: BTreeSet::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.trainable_groups.intersection(&self.frozen_groups).next() {
            return Err(Error::Config(format!("group {g} is both trainable and frozen")));
        }
        for g in ParamGroup::ALL {
            if !self.trainable_groups.contains(&g) && !self.frozen_groups.contains(&g) {
                return Err(Error::Config(format!("group {g} is neither trainable nor frozen")));
            }
        }
        Ok(())
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable_groups.contains(&group)
    }
}

/// Named model parameters. Cloning is shallow: clones share the same variables.
#[derive(Clone, Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub(crate) fn insert(&mut self, name: String, var: Var) {
        self.vars.insert(name, var);
    }

    /// Names belonging to `group`.
    pub fn group_names(&self, group: ParamGroup) -> Vec<String> {
        self.vars
            .keys()
            .filter(|n| ParamGroup::of(n) == Some(group))
            .cloned()
            .collect()
    }

    /// Independent copy with fresh storage, optionally converted.
    pub fn deep_copy(&self, dtype: DType) -> Result<ParamStore> {
        let mut out = ParamStore::new(dtype);
        for (name, var) in &self.vars {
            let t = var.as_tensor().to_dtype(dtype)?.copy()?;
            out.insert(name.clone(), Var::from_tensor(&t)?);
        }
        Ok(out)
    }

    /// Copies of the current values of `names`.
    pub fn snapshot<'a>(&self, names: impl IntoIterator<Item = &'a String>) -> Result<BTreeMap<String, Tensor>> {
        names
            .into_iter()
            .map(|n| {
                let var = self.vars.get(n).ok_or_else(|| Error::Config(format!("unknown parameter {n}")))?;
                Ok((n.clone(), var.as_tensor().copy()?))
            })
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (n, t) in snapshot {
            let var = self.vars.get(n).ok_or_else(|| Error::Config(format!("unknown parameter {n}")))?;
            var.set(t)?;
        }
        Ok(())
    }

    /// SHA-256 over the names and raw bytes of the parameters in `groups`.
    pub fn fingerprint(&self, groups: &[ParamGroup]) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            if ParamGroup::of(name).is_some_and(|g| groups.contains(&g)) {
                hasher.update(name.as_bytes());
                let values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                for v in values {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

/// Splits the registry into (trainable, frozen) parameter names.
pub fn partition_parameters(store: &ParamStore, policy: &FreezePolicy) -> Result<(Vec<String>, Vec<String>)> {
    policy.validate()?;
    let mut trainable = Vec::new();
    let mut frozen = Vec::new();
    for name in store.names() {
        let group = ParamGroup::of(name)
            .ok_or_else(|| Error::Config(format!("parameter {name} belongs to no known group")))?;
        if policy.is_trainable(group) {
            trainable.push(name.clone());
        } else {
            frozen.push(name.clone());
        }
    }
    Ok((trainable, frozen))
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// U(-b, b)
    Uniform(f64),
    Normal(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
}

impl Init {
    /// PyTorch's default for linear/conv weights and biases.
    pub(crate) fn fan_in(fan_in: usize) -> Init {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }
}

enum Mode {
    Create(ChaCha8Rng),
    Load(BTreeSet<String>),
}

struct BuilderState {
    store: ParamStore,
    mode: Mode,
    device: Device,
    detached: BTreeSet<ParamGroup>,
}

/// Creates (seeded) or fetches (from a store) parameters by hierarchical name.
#[derive(Clone)]
pub(crate) struct Builder {
    state: Rc<RefCell<BuilderState>>,
    prefix: String,
}

impl Builder {
    pub(crate) fn create(dtype: DType, seed: u64) -> Self {
        Self::with_state(BuilderState {
            store: ParamStore::new(dtype),
            mode: Mode::Create(ChaCha8Rng::seed_from_u64(seed)),
            device: Device::Cpu,
            detached: BTreeSet::new(),
        })
    }

    /// Builds modules over an existing store. Groups in `detached` are handed
    /// out without gradient tracking (storage is still shared).
    pub(crate) fn load(store: ParamStore, detached: BTreeSet<ParamGroup>) -> Self {
        Self::with_state(BuilderState {
            store,
            mode: Mode::Load(BTreeSet::new()),
            device: Device::Cpu,
            detached,
        })
    }

    fn with_state(state: BuilderState) -> Self {
        Builder {
            state: Rc::new(RefCell::new(state)),
            prefix: String::new(),
        }
    }

    pub(crate) fn pp(&self, name: impl fmt::Display) -> Builder {
        Builder {
            state: self.state.clone(),
            prefix: format!("{}{}.", self.prefix, name),
        }
    }

    pub(crate) fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let shape: Shape = shape.into();
        let full = format!("{}{}", self.prefix, name);
        let mut st = self.state.borrow_mut();
        let dtype = st.store.dtype;
        let device = st.device.clone();
        let var = match &mut st.mode {
            Mode::Create(rng) => {
                let values = sample(rng, shape.elem_count(), init);
                let t = Tensor::from_vec(values, shape, &device)?.to_dtype(dtype)?;
                let var = Var::from_tensor(&t)?;
                st.store.insert(full.clone(), var.clone());
                var
            }
            Mode::Load(used) => {
                used.insert(full.clone());
                let var = st
                    .store
                    .get(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {full}")))?
                    .clone();
                if var.shape() != &shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {full} has shape {:?}, expected {:?}",
                        var.dims(),
                        shape.dims()
                    )));
                }
                var
            }
        };
        let detach = ParamGroup::of(&full).is_some_and(|g| st.detached.contains(&g));
        Ok(if detach {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }

    /// Returns the store; in load mode fails on entries no module consumed.
    pub(crate) fn finish(self) -> Result<ParamStore> {
        let st = Rc::try_unwrap(self.state)
            .map_err(|_| Error::Config("parameter builder still shared".into()))?
            .into_inner();
        if let Mode::Load(used) = &st.mode {
            if let Some(extra) = st.store.names().find(|n| !used.contains(*n)) {
                return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
            }
        }
        Ok(st.store)
    }
}

fn sample(rng: &mut ChaCha8Rng, n: usize, init: Init) -> Vec<f64> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b)).collect(),
        Init::Normal(std) => (0..n)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect(),
        Init::TruncNormal(std) => (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break std * z;
                }
            })
            .collect(),
    }
}
