use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoswitch::SwitchCriterion;
use crate::error::{config, Result};
use crate::masks::{DecaySchedule, NMRatio, SparsityPlan};
use crate::models::{gen_synthetic, Dataset, ModelSpec, SyntheticSpec};
use crate::optim::{AdamHyper, Recipe, TrainSetup};
use crate::theory::{StationaryStream, StreamKind};

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Header row, float columns, targets in the last `target_cols` columns.
    Csv {
        path: PathBuf,
        #[serde(default = "one")]
        target_cols: usize,
        batch_size: usize,
    },
}

fn one() -> usize {
    1
}

/// Which layers are pruned and how.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsitySection {
    /// Ratio applied to every weight matrix.
    #[serde(default)]
    pub uniform: Option<NMRatio>,
    /// Per-layer ratios; these win over `uniform`.
    #[serde(default)]
    pub layers: SparsityPlan,
    #[serde(default)]
    pub decay: Option<DecaySchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    /// Forced switch points as fractions of `total_steps`.
    #[serde(default = "default_ratios")]
    pub precondition_ratios: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { precondition_ratios: default_ratios() }
    }
}

fn default_ratios() -> Vec<f64> {
    vec![0.0, 0.1, 0.25, 0.5, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    #[serde(default = "default_criteria")]
    pub criteria: Vec<SwitchCriterion>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self { criteria: default_criteria() }
    }
}

fn default_criteria() -> Vec<SwitchCriterion> {
    vec![SwitchCriterion::autoswitch_clipped(), SwitchCriterion::relative(), SwitchCriterion::staleness()]
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn default_log_every() -> u64 {
    1
}

fn default_switch() -> SwitchCriterion {
    SwitchCriterion::autoswitch_clipped()
}

/// A full experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub data: DataSource,
    #[serde(default)]
    pub optim: AdamHyper,
    #[serde(default)]
    pub sparsity: SparsitySection,
    pub recipe: Recipe,
    #[serde(default = "default_switch")]
    pub switch: SwitchCriterion,
    pub total_steps: u64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub compare: CompareSection,
}

/// Everything borrowed by [`TrainSetup`], resolved once per experiment.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub spec: ModelSpec,
    pub data: Dataset,
    pub hyper: AdamHyper,
    pub plan: SparsityPlan,
    pub decay: Option<DecaySchedule>,
}

impl Resolved {
    pub fn setup<'a>(
        &'a self,
        recipe: Recipe,
        switch: &'a SwitchCriterion,
        total_steps: u64,
        log_every: u64,
    ) -> TrainSetup<'a> {
        TrainSetup {
            spec: &self.spec,
            data: &self.data,
            hyper: &self.hyper,
            plan: &self.plan,
            decay: self.decay.as_ref(),
            recipe,
            switch,
            total_steps,
            log_every,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. A relative CSV path is taken
    /// relative to the config file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(&fs::read_to_string(path)?)?;
        if let DataSource::Csv { path: csv, .. } = &mut cfg.data {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    /// Checks everything that does not need the dataset on disk.
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(config("total_steps must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(config("seeds must not be empty"));
        }
        if self.log_every == 0 {
            return Err(config("log_every must be at least 1"));
        }
        self.model.validate()?;
        self.optim.validate()?;
        self.switch.validate()?;
        for c in &self.compare.criteria {
            c.validate()?;
        }
        if let Some(r) = self.ablation.precondition_ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(config(format!("precondition ratio {r} outside [0, 1]")));
        }
        if let Recipe::Srste { lambda } = self.recipe {
            if !(lambda >= 0.0) {
                return Err(config(format!("SR-STE λ must be non-negative, got {lambda}")));
            }
        }
        let params = self.model.init_params(0)?;
        let plan = self.plan_for(&params);
        plan.validate(&params)?;
        if let Some(d) = &self.sparsity.decay {
            d.validate()?;
        }
        if let DataSource::Synthetic(s) = &self.data {
            if s.n_features != self.model.layer_sizes[0] {
                return Err(config(format!(
                    "data has {} features but the model expects {}",
                    s.n_features, self.model.layer_sizes[0]
                )));
            }
        }
        Ok(())
    }

    fn plan_for(&self, params: &crate::models::ParamSet) -> SparsityPlan {
        let mut plan = match self.sparsity.uniform {
            Some(r) => SparsityPlan::uniform_weights(params, r),
            None => SparsityPlan::new(),
        };
        for (name, r) in self.sparsity.layers.layers() {
            plan = plan.with_layer(name.clone(), r);
        }
        plan
    }

    pub fn plan(&self) -> Result<SparsityPlan> {
        Ok(self.plan_for(&self.model.init_params(0)?))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let data = match &self.data {
            DataSource::Synthetic(s) => gen_synthetic(s)?,
            DataSource::Csv { path, target_cols, batch_size } => Dataset::from_csv(path, *target_cols, *batch_size)?,
        };
        if data.n_features() != self.model.layer_sizes[0] {
            return Err(config(format!(
                "data has {} features but the model expects {}",
                data.n_features(),
                self.model.layer_sizes[0]
            )));
        }
        Ok(data)
    }

    pub fn resolve(&self) -> Result<Resolved> {
        Ok(Resolved {
            spec: self.model.clone(),
            data: self.dataset()?,
            hyper: self.optim.clone(),
            plan: self.plan()?,
            decay: self.sparsity.decay.clone(),
        })
    }
}

fn default_beta2() -> f64 {
    0.999
}
fn default_t0() -> u64 {
    2000
}
fn default_t() -> u64 {
    12_000
}
fn default_delta() -> f64 {
    0.01
}
fn default_trials() -> u64 {
    500
}

/// Settings for a Monte Carlo run of the concentration bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremConfig {
    pub stream: StationaryStream,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_t0")]
    pub t0: u64,
    #[serde(default = "default_t")]
    pub t: u64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl Default for TheoremConfig {
    /// Bernoulli{0, 1}, β₂ = 0.999, t₀ = 2000, t = 12000, δ = 0.01, 500 trials.
    fn default() -> Self {
        Self {
            stream: StationaryStream { kind: StreamKind::Bernoulli { p: 0.5 }, g_max: 1.0, dim: 1, seed: 0 },
            beta2: default_beta2(),
            t0: default_t0(),
            t: default_t(),
            delta: default_delta(),
            trials: default_trials(),
            output_dir: default_output(),
        }
    }
}

impl TheoremConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(toml::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SAMPLE;

    #[test]
    fn parses_sample() {
        let cfg = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.recipe, Recipe::Step);
        let plan = cfg.plan().unwrap();
        assert_eq!(plan.layers().count(), 2);
        assert_eq!(cfg.dataset().unwrap().n_samples(), 64);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let typo = SAMPLE.replace("kind = \"step\"", "kind = \"stpe\"");
        assert!(ExperimentConfig::from_toml_str(&typo).is_err());
        let extra = SAMPLE.replace("log_every = 10", "log_every = 10\nlogevery = 3");
        assert!(ExperimentConfig::from_toml_str(&extra).is_err());
    }

    #[test]
    fn invariants_are_checked() {
        let bad = SAMPLE.replace("seeds = [0, 1]", "seeds = []");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(crate::Error::Config(_))));
        let bad = SAMPLE.replace("total_steps = 200", "total_steps = 0");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(crate::Error::Config(_))));
        let bad = SAMPLE.replace("uniform = \"1:4\"", "layers = { \"fc9.weight\" = \"2:4\" }");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(crate::Error::Config(_))));
        let bad = SAMPLE.replace("uniform = \"1:4\"", "uniform = \"1:3\"");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(crate::Error::Config(_))));
    }

    #[test]
    fn theorem_defaults() {
        let t: TheoremConfig =
            toml::from_str("[stream]\nkind = { kind = \"uniform\" }\ng_max = 1.0\ndim = 2\nseed = 4\n").unwrap();
        assert_eq!(t.t0, 2000);
        assert_eq!(t.stream.dim, 2);
        assert_eq!(TheoremConfig::default().trials, 500);
    }
}
