use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Resolved};
use crate::autoswitch::{avg_change_metric, SwitchCriterion, VarianceProfile};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::optim::{Recipe, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchStatus {
    Ok,
    /// The criterion never fired on the profile.
    NoSwitch,
    /// It fired too late for the metric window to fit in the profile.
    Insufficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchRow {
    pub seed: u64,
    pub criterion: String,
    pub t0: Option<u64>,
    pub metric: Option<f64>,
    pub status: SwitchStatus,
}

/// Records the variance norms of a dense Adam run, one entry per step.
pub fn profile_dense(resolved: &Resolved, total_steps: u64, seed: u64) -> Result<VarianceProfile> {
    let never = SwitchCriterion::Never;
    let setup = resolved.setup(Recipe::Dense, &never, total_steps, total_steps);
    let mut trainer = Trainer::new(setup, seed)?;
    let mut profile = VarianceProfile::new();
    while !trainer.is_done() {
        let prev = trainer.state().v.clone();
        trainer.step()?;
        profile.push(&trainer.state().v, &prev)?;
    }
    Ok(profile)
}

/// Evaluates each criterion offline on a recorded profile.
pub fn compare_profile(
    profile: &VarianceProfile,
    criteria: &[SwitchCriterion],
    beta2: f64,
    eps: f64,
    total_steps: u64,
    seed: u64,
) -> Result<Vec<SwitchRow>> {
    criteria
        .iter()
        .map(|c| {
            let t0 = profile.first_switch(c, beta2, eps, total_steps)?;
            let (metric, status) = match t0 {
                None => (None, SwitchStatus::NoSwitch),
                Some(t0) => match avg_change_metric(&profile.diff_l1, t0 as usize) {
                    Ok(m) => (Some(m), SwitchStatus::Ok),
                    Err(Error::Range(_)) => (None, SwitchStatus::Insufficient),
                    Err(e) => return Err(e),
                },
            };
            Ok(SwitchRow { seed, criterion: c.label(), t0, metric, status })
        })
        .collect()
}

/// Profiles one dense run per seed and compares the criteria on each.
pub fn compare_switch(cfg: &ExperimentConfig, criteria: &[SwitchCriterion], exec: Exec) -> Result<Vec<SwitchRow>> {
    cfg.validate()?;
    for c in criteria {
        c.validate()?;
    }
    let resolved = cfg.resolve()?;
    let (beta2, eps) = (cfg.optim.beta2, cfg.optim.eps);
    let per_seed = exec.map(cfg.seeds.len(), |i| {
        let seed = cfg.seeds[i];
        let profile = profile_dense(&resolved, cfg.total_steps, seed)?;
        compare_profile(&profile, criteria, beta2, eps, cfg.total_steps, seed)
    });
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ParamSet;
    use crate::tensor::Tensor;

    fn flat_profile(steps: usize) -> VarianceProfile {
        let mut v = ParamSet::new();
        v.insert("w", Tensor::from_vec(vec![0.5, 0.25]).unwrap());
        VarianceProfile::from_states(&vec![v; steps]).unwrap()
    }

    #[test]
    fn frozen_variance_fires_early_with_zero_metric() {
        let profile = flat_profile(3000);
        let criteria = [SwitchCriterion::autoswitch(), SwitchCriterion::relative(), SwitchCriterion::staleness()];
        let rows = compare_profile(&profile, &criteria, 0.99, 1e-8, 3000, 0).unwrap();
        assert_eq!(rows.len(), 3);
        // the window must slide past the jump from v₀ = 0; relative needs a
        // previous norm, staleness a positive lagged norm
        assert_eq!(rows.iter().map(|r| r.t0).collect::<Vec<_>>(), [Some(101), Some(2), Some(101)]);
        for r in &rows {
            assert_eq!(r.status, SwitchStatus::Ok);
            assert_eq!(r.metric, Some(0.0));
        }
    }

    #[test]
    fn single_criterion_single_row() {
        let rows = compare_profile(&flat_profile(50), &[SwitchCriterion::Never], 0.99, 1e-8, 50, 0).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].status, SwitchStatus::NoSwitch);
        let rows = compare_profile(&flat_profile(50), &[SwitchCriterion::relative()], 0.99, 1e-8, 50, 0).unwrap();
        assert_eq!(rows[0].status, SwitchStatus::Insufficient);
    }
}
