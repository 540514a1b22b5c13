//! Deciding when the precondition phase ends.
//!
//! AutoSwitch samples the per-coordinate variance change `Z_t` every step,
//! averages it over a sliding window of `⌊1/(1-β₂)⌋` samples and switches
//! once that mean drops below Adam's ε. Two norm-based baselines (relative
//! change of `‖v‖₂`, staleness ratio of `‖v‖₁`) are provided for comparison,
//! along with the average-change metric used to score a chosen switch point.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::models::ParamSet;
use crate::tensor::Tensor;

/// Floor applied to `|Δ|` before the log in the geometric sampler.
pub const GEOMETRIC_FLOOR: f64 = 1e-30;
/// Number of steps summed by [`avg_change_metric`] beyond `t0` (inclusive
/// bounds, so `AVG_CHANGE_SPAN + 1` terms).
pub const AVG_CHANGE_SPAN: usize = 1000;
pub const RELATIVE_THRESHOLD: f64 = 0.5;
pub const STALENESS_THRESHOLD: f64 = 0.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerOption {
    /// Mean absolute coordinate change.
    #[default]
    Arithmetic,
    /// Geometric mean of absolute coordinate changes.
    Geometric,
}

/// `⌊1/(1-β₂)⌋`, the window length and the staleness lag. Values within
/// 1e-9 of an integer are rounded first so that e.g. β₂ = 0.99 gives 100.
pub fn window_len(beta2: f64) -> usize {
    let x = 1.0 / (1.0 - beta2);
    let r = x.round();
    let w = if (x - r).abs() <= 1e-9 * r.max(1.0) { r } else { x.floor() };
    (w as usize).max(1)
}

fn sample_from_diffs(diffs: impl Iterator<Item = f64>, option: SamplerOption) -> Result<f64> {
    let (mut acc, mut d) = (0.0, 0usize);
    for delta in diffs {
        acc += match option {
            SamplerOption::Arithmetic => delta.abs(),
            SamplerOption::Geometric => delta.abs().max(GEOMETRIC_FLOOR).ln(),
        };
        d += 1;
    }
    if d == 0 {
        return Err(domain("variance change of an empty tensor"));
    }
    Ok(match option {
        SamplerOption::Arithmetic => acc / d as f64,
        SamplerOption::Geometric => (acc / d as f64).exp(),
    })
}

/// `Z_t` from two consecutive variance tensors.
pub fn variance_change_sample(v_t: &Tensor, v_prev: &Tensor, option: SamplerOption) -> Result<f64> {
    v_t.check_same_shape(v_prev, "variance change")?;
    sample_from_diffs(v_t.data().iter().zip(v_prev.data()).map(|(a, b)| a - b), option)
}

/// `Z_t` over every coordinate of a parameter-shaped variance.
pub fn variance_change_sample_params(v_t: &ParamSet, v_prev: &ParamSet, option: SamplerOption) -> Result<f64> {
    v_t.check_congruent(v_prev)?;
    sample_from_diffs(v_t.flat_values().zip(v_prev.flat_values()).map(|(a, b)| a - b), option)
}

/// Ring buffer of the most recent `Z` samples.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    option: SamplerOption,
    capacity: usize,
    window: VecDeque<f64>,
}

impl WindowSampler {
    pub fn new(option: SamplerOption, capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self { option, capacity, window: VecDeque::with_capacity(capacity) }
    }

    pub fn for_beta2(option: SamplerOption, beta2: f64) -> Self {
        Self::new(option, window_len(beta2))
    }

    pub fn option(&self) -> SamplerOption {
        self.option
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.window.len() == self.capacity
    }

    pub fn push(&mut self, z: f64) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(z);
    }

    /// Mean of the held samples, accumulated as offsets from the oldest one
    /// so that a window of identical values returns that value exactly.
    pub fn mean(&self) -> Option<f64> {
        let first = *self.window.front()?;
        let offset: f64 = self.window.iter().map(|z| z - first).sum();
        Some(first + offset / self.window.len() as f64)
    }
}

/// Clamp bounds for the switch step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Clip {
    pub t_min: u64,
    pub t_max: u64,
}

impl Clip {
    pub fn new(t_min: u64, t_max: u64) -> Result<Self> {
        if t_min >= t_max {
            return Err(config(format!("clip needs t_min < t_max, got {t_min} >= {t_max}")));
        }
        Ok(Self { t_min, t_max })
    }

    /// `T_min = ⌊0.1 T⌋`, `T_max = ⌊0.5 T⌋`.
    pub fn default_for(total_steps: u64) -> Result<Self> {
        Self::new(total_steps / 10, total_steps / 2)
    }

    /// Never before `t_min` (inclusive), always from `t_max` on.
    pub fn gate(&self, t: u64, raw: bool) -> bool {
        t >= self.t_max || (raw && t > self.t_min)
    }
}

/// The AutoSwitch decision at step `t`. The statistical branch stays closed
/// until the window is full.
pub fn autoswitch_decide(sampler: &WindowSampler, t: u64, eps: f64, clip: Option<Clip>) -> Result<bool> {
    let z_bar = sampler.mean().ok_or_else(|| Error::State("autoswitch decision on an empty window".into()))?;
    let stat = sampler.is_full() && z_bar < eps;
    Ok(match clip {
        None => stat,
        Some(c) => c.gate(t, stat),
    })
}

/// Relative change of a variance norm: `|‖v_t‖ - ‖v_{t-1}‖| / ‖v_{t-1}‖ < threshold`.
pub fn relative_criterion(norm_t: f64, norm_prev: f64, threshold: f64) -> Result<bool> {
    if !(norm_prev > 0.0) {
        return Err(domain(format!("relative criterion needs a positive previous norm, got {norm_prev}")));
    }
    Ok((norm_t - norm_prev).abs() / norm_prev < threshold)
}

/// Staleness ratio: `‖v_t‖₁ / ‖v_{t-lag}‖₁ > threshold`.
pub fn staleness_criterion(l1_t: f64, l1_lagged: f64, threshold: f64) -> Result<bool> {
    if !(l1_lagged > 0.0) {
        return Err(domain(format!("staleness criterion needs a positive lagged norm, got {l1_lagged}")));
    }
    Ok(l1_t / l1_lagged > threshold)
}

/// `10⁻³ Σ_{t=t0}^{t0+1000} ‖v_{t+1} - v_t‖₁`. `diff_l1[t]` holds
/// `‖v_t - v_{t-1}‖₁` (index 0 unused), so the slice must reach `t0 + 1001`.
/// The inclusive bounds give 1001 terms against the 10⁻³ scale.
pub fn avg_change_metric(diff_l1: &[f64], t0: usize) -> Result<f64> {
    let last = t0 + AVG_CHANGE_SPAN + 1;
    if diff_l1.len() <= last {
        return Err(Error::Range(format!(
            "average change from t0 = {t0} needs the trajectory through step {last}, have {}",
            diff_l1.len().saturating_sub(1)
        )));
    }
    Ok(diff_l1[t0 + 1..=last].iter().sum::<f64>() * 1e-3)
}

fn default_relative() -> f64 {
    RELATIVE_THRESHOLD
}

fn default_staleness() -> f64 {
    STALENESS_THRESHOLD
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipPreset {
    /// `(⌊0.1 T⌋, ⌊0.5 T⌋)`.
    Default,
}

/// Clip bounds as written in a config: a preset or explicit steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClipSetting {
    Preset(ClipPreset),
    Explicit(Clip),
}

impl ClipSetting {
    pub fn resolve(self, total_steps: u64) -> Result<Clip> {
        match self {
            ClipSetting::Preset(ClipPreset::Default) => Clip::default_for(total_steps),
            ClipSetting::Explicit(c) => Clip::new(c.t_min, c.t_max),
        }
    }
}

/// A configured phase-switch rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SwitchCriterion {
    Autoswitch {
        #[serde(default)]
        option: SamplerOption,
        #[serde(default)]
        clip: Option<ClipSetting>,
    },
    Relative {
        #[serde(default = "default_relative")]
        threshold: f64,
        #[serde(default)]
        clip: Option<ClipSetting>,
    },
    Staleness {
        #[serde(default = "default_staleness")]
        threshold: f64,
        #[serde(default)]
        clip: Option<ClipSetting>,
    },
    /// Switch at a predetermined step.
    Fixed {
        step: u64,
    },
    Never,
}

impl SwitchCriterion {
    pub fn autoswitch() -> Self {
        Self::Autoswitch { option: SamplerOption::Arithmetic, clip: None }
    }

    pub fn autoswitch_clipped() -> Self {
        Self::Autoswitch { option: SamplerOption::Arithmetic, clip: Some(ClipSetting::Preset(ClipPreset::Default)) }
    }

    pub fn relative() -> Self {
        Self::Relative { threshold: RELATIVE_THRESHOLD, clip: None }
    }

    pub fn staleness() -> Self {
        Self::Staleness { threshold: STALENESS_THRESHOLD, clip: None }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Autoswitch { option, clip } => format!(
                "autoswitch({}{})",
                match option {
                    SamplerOption::Arithmetic => "arithmetic",
                    SamplerOption::Geometric => "geometric",
                },
                if clip.is_some() { ",clipped" } else { "" }
            ),
            Self::Relative { threshold, .. } => format!("relative({threshold})"),
            Self::Staleness { threshold, .. } => format!("staleness({threshold})"),
            Self::Fixed { step } => format!("fixed({step})"),
            Self::Never => "never".to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Relative { threshold, .. } | Self::Staleness { threshold, .. } if !(*threshold > 0.0) => {
                Err(config(format!("switch threshold must be positive, got {threshold}")))
            }
            _ => Ok(()),
        }
    }

    fn clip(&self) -> Option<ClipSetting> {
        match self {
            Self::Autoswitch { clip, .. } | Self::Relative { clip, .. } | Self::Staleness { clip, .. } => *clip,
            _ => None,
        }
    }

    fn sampler_option(&self) -> SamplerOption {
        match self {
            Self::Autoswitch { option, .. } => *option,
            _ => SamplerOption::Arithmetic,
        }
    }
}

/// Per-step variance summary fed to a [`SwitchDetector`]. `z` must be
/// computed with the detector's [`SwitchDetector::sampler_option`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub l1: f64,
    pub l2: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub z_bar: f64,
    pub fire: bool,
}

/// Stateful evaluation of a [`SwitchCriterion`] over a stream of
/// [`StepStats`]. Works the same online (inside training) and offline
/// (replaying a recorded profile).
#[derive(Debug, Clone)]
pub struct SwitchDetector {
    criterion: SwitchCriterion,
    eps: f64,
    clip: Option<Clip>,
    sampler: WindowSampler,
    lag: usize,
    prev_l2: f64,
    // ‖v‖₁ of the last `lag + 1` steps, starting from v₀ = 0
    l1_history: VecDeque<f64>,
}

impl SwitchDetector {
    pub fn new(criterion: &SwitchCriterion, beta2: f64, eps: f64, total_steps: u64) -> Result<Self> {
        criterion.validate()?;
        let clip = criterion.clip().map(|c| c.resolve(total_steps)).transpose()?;
        let lag = window_len(beta2);
        let mut l1_history = VecDeque::with_capacity(lag + 1);
        l1_history.push_back(0.0);
        Ok(Self {
            criterion: criterion.clone(),
            eps,
            clip,
            sampler: WindowSampler::new(criterion.sampler_option(), lag),
            lag,
            prev_l2: 0.0,
            l1_history,
        })
    }

    pub fn sampler_option(&self) -> SamplerOption {
        self.sampler.option()
    }

    pub fn clip(&self) -> Option<Clip> {
        self.clip
    }

    pub fn observe(&mut self, s: &StepStats) -> Result<Observation> {
        self.sampler.push(s.z);
        if self.l1_history.len() == self.lag + 1 {
            self.l1_history.pop_front();
        }
        self.l1_history.push_back(s.l1);
        let z_bar = self.sampler.mean().expect("just pushed");

        let t = s.step;
        let fire = match &self.criterion {
            SwitchCriterion::Autoswitch { .. } => autoswitch_decide(&self.sampler, t, self.eps, self.clip)?,
            SwitchCriterion::Relative { threshold, .. } => {
                let raw = relative_criterion(s.l2, self.prev_l2, *threshold).unwrap_or(false);
                self.gate(t, raw)
            }
            SwitchCriterion::Staleness { threshold, .. } => {
                let raw = if self.l1_history.len() == self.lag + 1 {
                    staleness_criterion(s.l1, self.l1_history[0], *threshold).unwrap_or(false)
                } else {
                    false
                };
                self.gate(t, raw)
            }
            SwitchCriterion::Fixed { step } => t >= *step,
            SwitchCriterion::Never => false,
        };
        self.prev_l2 = s.l2;
        Ok(Observation { z_bar, fire })
    }

    fn gate(&self, t: u64, raw: bool) -> bool {
        match self.clip {
            Some(c) => c.gate(t, raw),
            None => raw,
        }
    }
}

/// Variance norms recorded along a run; index `t` refers to `v_t`, with
/// `v_0 = 0` at index 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VarianceProfile {
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    /// `‖v_t - v_{t-1}‖₁`.
    pub diff_l1: Vec<f64>,
    /// Arithmetic `Z_t`.
    pub z_arith: Vec<f64>,
    /// Geometric `Z_t`.
    pub z_geom: Vec<f64>,
}

impl VarianceProfile {
    pub fn new() -> Self {
        Self { l1: vec![0.0], l2: vec![0.0], diff_l1: vec![0.0], z_arith: vec![0.0], z_geom: vec![0.0] }
    }

    /// Appends `v_t` given the previous variance.
    pub fn push(&mut self, v_t: &ParamSet, v_prev: &ParamSet) -> Result<()> {
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for x in v_t.flat_values() {
            l1 += x.abs();
            l2 += x * x;
        }
        let diff: f64 = v_t.flat_values().zip(v_prev.flat_values()).map(|(a, b)| (a - b).abs()).sum();
        self.l1.push(l1);
        self.l2.push(l2.sqrt());
        self.diff_l1.push(diff);
        self.z_arith.push(variance_change_sample_params(v_t, v_prev, SamplerOption::Arithmetic)?);
        self.z_geom.push(variance_change_sample_params(v_t, v_prev, SamplerOption::Geometric)?);
        Ok(())
    }

    /// Builds a profile from `v_1, v_2, …` (v₀ = 0 implied).
    pub fn from_states(states: &[ParamSet]) -> Result<Self> {
        let mut p = Self::new();
        let Some(first) = states.first() else { return Ok(p) };
        let mut prev = first.zeros_like();
        for v in states {
            p.push(v, &prev)?;
            prev = v.clone();
        }
        Ok(p)
    }

    /// Last recorded step.
    pub fn last_step(&self) -> usize {
        self.l1.len().saturating_sub(1)
    }

    /// Replays the profile through a detector and returns the first firing step.
    pub fn first_switch(
        &self,
        criterion: &SwitchCriterion,
        beta2: f64,
        eps: f64,
        total_steps: u64,
    ) -> Result<Option<u64>> {
        let mut det = SwitchDetector::new(criterion, beta2, eps, total_steps)?;
        for t in 1..self.l1.len() {
            let z = match det.sampler_option() {
                SamplerOption::Arithmetic => self.z_arith[t],
                SamplerOption::Geometric => self.z_geom[t],
            };
            let obs = det.observe(&StepStats { step: t as u64, l1: self.l1[t], l2: self.l2[t], z })?;
            if obs.fire {
                return Ok(Some(t as u64));
            }
        }
        Ok(None)
    }
}
