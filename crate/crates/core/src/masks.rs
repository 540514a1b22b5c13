//! N:M masks: magnitude-based selection inside each group of `m`
//! consecutive innermost elements, per-layer plans, and the decaying-N
//! schedule.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, dim, Result};
use crate::exec::Exec;
use crate::models::ParamSet;
use crate::tensor::{check_groupable, Tensor};

/// Keep `n` out of every `m` consecutive weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NMRatio {
    n: usize,
    m: usize,
}

impl NMRatio {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || n > m {
            return Err(config(format!("invalid N:M ratio {n}:{m}, need 1 <= n <= m")));
        }
        Ok(Self { n, m })
    }

    pub fn n(self) -> usize {
        self.n
    }

    pub fn m(self) -> usize {
        self.m
    }

    pub fn sparsity(self) -> f64 {
        1.0 - self.n as f64 / self.m as f64
    }
}

impl fmt::Display for NMRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n, self.m)
    }
}

impl FromStr for NMRatio {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (n, m) = s.split_once(':').ok_or_else(|| config(format!("expected N:M, got {s:?}")))?;
        let parse =
            |x: &str| x.trim().parse::<usize>().map_err(|_| config(format!("expected N:M with integers, got {s:?}")));
        Self::new(parse(n)?, parse(m)?)
    }
}

impl Serialize for NMRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NMRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A {0, 1} tensor with exactly `n` ones in every innermost `m`-group.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    values: Tensor,
    ratio: NMRatio,
}

impl Mask {
    /// Validates an explicit mask.
    pub fn from_tensor(values: Tensor, ratio: NMRatio) -> Result<Self> {
        check_groupable(values.shape(), ratio.m)?;
        for (g, chunk) in values.data().chunks(ratio.m).enumerate() {
            if chunk.iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(dim(format!("group {g} holds a value outside {{0, 1}}")));
            }
            let ones = chunk.iter().filter(|&&x| x == 1.0).count();
            if ones != ratio.n {
                return Err(dim(format!("group {g} keeps {ones}, expected {}", ratio.n)));
            }
        }
        Ok(Self { values, ratio })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn ratio(&self) -> NMRatio {
        self.ratio
    }

    /// `1 - Π`.
    pub fn complement(&self) -> Tensor {
        self.values.map(|x| 1.0 - x)
    }
}

const PAR_MIN_GROUPS: usize = 4096;

/// Within each group keeps the `n` largest magnitudes. Ties go to the lower
/// flat index.
pub fn compute_nm_mask(weights: &Tensor, ratio: NMRatio) -> Result<Mask> {
    let exec = if weights.len() / ratio.m >= PAR_MIN_GROUPS { Exec::Parallel } else { Exec::Sequential };
    compute_nm_mask_with(exec, weights, ratio)
}

pub fn compute_nm_mask_with(exec: Exec, weights: &Tensor, ratio: NMRatio) -> Result<Mask> {
    check_groupable(weights.shape(), ratio.m)?;
    let (n, m) = (ratio.n, ratio.m);
    let mut out = weights.zeros_like();
    let w = weights.data();
    exec.for_each_chunk_mut(out.data_mut(), m, |g, dst| {
        let src = &w[g * m..(g + 1) * m];
        if n == m {
            dst.fill(1.0);
            return;
        }
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| src[b].abs().total_cmp(&src[a].abs()).then(a.cmp(&b)));
        for &i in &idx[..n] {
            dst[i] = 1.0;
        }
    });
    Ok(Mask { values: out, ratio })
}

/// `Π ⊙ w`.
pub fn apply_mask(weights: &Tensor, mask: &Mask) -> Result<Tensor> {
    weights.mul(&mask.values)
}

/// Kept count at decay stage `s`: `m - 1` at stage 0, then `⌊m / 2^s⌋`
/// floored at 1.
pub fn decayed_n(m: usize, s: u32) -> usize {
    if s == 0 {
        return m.saturating_sub(1).max(1);
    }
    let shifted = if s >= usize::BITS { 0 } else { m >> s };
    shifted.max(1)
}

/// Fraction of zeros.
pub fn mask_sparsity(mask: &Mask) -> f64 {
    let zeros = mask.values.data().iter().filter(|&&x| x == 0.0).count();
    zeros as f64 / mask.values.len() as f64
}

/// Layer name → ratio. Layers not listed stay dense.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SparsityPlan {
    layers: BTreeMap<String, NMRatio>,
}

impl SparsityPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_layer(mut self, name: impl Into<String>, ratio: NMRatio) -> Self {
        self.layers.insert(name.into(), ratio);
        self
    }

    /// Same ratio on every weight matrix of the parameter set.
    pub fn uniform_weights(params: &ParamSet, ratio: NMRatio) -> Self {
        let layers = params.iter().filter(|(_, t)| t.shape().len() >= 2).map(|(k, _)| (k.clone(), ratio)).collect();
        Self { layers }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> impl Iterator<Item = (&String, NMRatio)> {
        self.layers.iter().map(|(k, r)| (k, *r))
    }

    pub fn ratio(&self, layer: &str) -> Option<NMRatio> {
        self.layers.get(layer).copied()
    }

    /// Every listed layer exists and its innermost extent is divisible by m.
    pub fn validate(&self, params: &ParamSet) -> Result<()> {
        for (name, ratio) in &self.layers {
            let t = params.get(name).ok_or_else(|| config(format!("sparsity plan names unknown layer {name:?}")))?;
            check_groupable(t.shape(), ratio.m).map_err(|_| {
                config(format!("layer {name}: innermost extent {} is not divisible by {}", t.inner_extent(), ratio.m))
            })?;
        }
        Ok(())
    }

    /// Fresh masks from the current weights. `ratio_override` replaces every
    /// layer's ratio (used by the decay schedule).
    pub fn compute_masks(&self, params: &ParamSet, ratio_override: Option<NMRatio>) -> Result<LayerMasks> {
        let mut masks = BTreeMap::new();
        for (name, ratio) in &self.layers {
            let t = params.get(name).ok_or_else(|| config(format!("sparsity plan names unknown layer {name:?}")))?;
            masks.insert(name.clone(), compute_nm_mask(t, ratio_override.unwrap_or(*ratio))?);
        }
        Ok(LayerMasks(masks))
    }
}

/// Masks for the planned layers of a parameter set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerMasks(BTreeMap<String, Mask>);

impl LayerMasks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: impl Into<String>, mask: Mask) {
        self.0.insert(layer.into(), mask);
    }

    pub fn get(&self, layer: &str) -> Option<&Mask> {
        self.0.get(layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mask)> {
        self.0.iter()
    }

    /// Copy of `params` with every masked layer replaced by `Π ⊙ w`.
    pub fn apply(&self, params: &ParamSet) -> Result<ParamSet> {
        let mut out = params.clone();
        for (name, mask) in &self.0 {
            let t = out.get_mut(name).ok_or_else(|| dim(format!("mask for unknown layer {name}")))?;
            *t = apply_mask(t, mask)?;
        }
        Ok(out)
    }

    pub fn sparsity(&self) -> BTreeMap<String, f64> {
        self.0.iter().map(|(k, m)| (k.clone(), mask_sparsity(m))).collect()
    }
}

/// Stage `s` is the number of boundaries `<= step`; the kept count follows
/// [`decayed_n`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecaySchedule {
    pub m: usize,
    #[serde(default)]
    pub stage_boundaries: Vec<u64>,
}

impl DecaySchedule {
    pub fn new(m: usize, stage_boundaries: Vec<u64>) -> Result<Self> {
        let s = Self { m, stage_boundaries };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(config(format!("decay schedule needs m >= 2, got {}", self.m)));
        }
        if self.stage_boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config("decay stage boundaries must be strictly increasing"));
        }
        Ok(())
    }

    pub fn stage_at(&self, step: u64) -> u32 {
        self.stage_boundaries.iter().take_while(|&&b| b <= step).count() as u32
    }

    pub fn ratio_at(&self, step: u64) -> NMRatio {
        NMRatio::new(decayed_n(self.m, self.stage_at(step)), self.m).expect("decayed n lies in 1..=m")
    }
}
