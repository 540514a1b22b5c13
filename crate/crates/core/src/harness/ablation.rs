use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::mean_std;
use crate::autoswitch::SwitchCriterion;
use crate::error::{config, Error, Result};
use crate::exec::Exec;
use crate::masks::DecaySchedule;
use crate::optim::{recipe_train, Recipe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// STEP with the switch forced at each configured fraction of T.
    PreconditionLength,
    /// STEP with the frozen variance against STEP whose variance keeps updating.
    FixedVsUpdatedVariance,
    /// The configured recipe with a constant ratio against the decay schedule.
    DecayingMask,
}

impl AblationKind {
    pub const ALL: [AblationKind; 3] =
        [AblationKind::PreconditionLength, AblationKind::FixedVsUpdatedVariance, AblationKind::DecayingMask];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::PreconditionLength => "precondition_length",
            AblationKind::FixedVsUpdatedVariance => "fixed_vs_updated_variance",
            AblationKind::DecayingMask => "decaying_mask",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| config(format!("unknown ablation {s:?}")))
    }
}

/// One variant of an ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub recipe: Recipe,
    pub switch: SwitchCriterion,
    pub decay: Option<DecaySchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: String,
    pub cell: String,
    pub seed: u64,
    pub sparse_eval_loss: f64,
    pub dense_eval_loss: f64,
    pub switched_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub ablation: String,
    pub cell: String,
    pub n_seeds: usize,
    pub sparse_eval_loss_mean: f64,
    pub sparse_eval_loss_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
    pub cells: Vec<CellSummary>,
}

/// Step at which a fraction `r` of the horizon has elapsed.
pub fn forced_switch_step(ratio: f64, total_steps: u64) -> u64 {
    (ratio * total_steps as f64).round() as u64
}

/// The variants an ablation runs, in report order.
pub fn cells(kind: AblationKind, cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    Ok(match kind {
        AblationKind::PreconditionLength => cfg
            .ablation
            .precondition_ratios
            .iter()
            .map(|&r| Cell {
                label: format!("precondition_ratio={r}"),
                recipe: Recipe::Step,
                switch: SwitchCriterion::Fixed { step: forced_switch_step(r, cfg.total_steps) },
                decay: None,
            })
            .collect(),
        AblationKind::FixedVsUpdatedVariance => [Recipe::Step, Recipe::StepUpdatedVariance]
            .into_iter()
            .map(|recipe| Cell { label: recipe.label(), recipe, switch: cfg.switch.clone(), decay: None })
            .collect(),
        AblationKind::DecayingMask => {
            let decay =
                cfg.sparsity.decay.clone().ok_or_else(|| config("decaying_mask ablation needs [sparsity.decay]"))?;
            vec![
                Cell { label: "constant".into(), recipe: cfg.recipe, switch: cfg.switch.clone(), decay: None },
                Cell { label: "decaying".into(), recipe: cfg.recipe, switch: cfg.switch.clone(), decay: Some(decay) },
            ]
        }
    })
}

/// Runs every cell on every seed; jobs are independent.
pub fn ablation(kind: AblationKind, cfg: &ExperimentConfig, exec: Exec) -> Result<AblationReport> {
    cfg.validate()?;
    let cells = cells(kind, cfg)?;
    let resolved = cfg.resolve()?;
    let n_seeds = cfg.seeds.len();
    let results = exec.map(cells.len() * n_seeds, |job| {
        let cell = &cells[job / n_seeds];
        let seed = cfg.seeds[job % n_seeds];
        let mut setup = resolved.setup(cell.recipe, &cell.switch, cfg.total_steps, cfg.total_steps);
        setup.decay = cell.decay.as_ref();
        let out = recipe_train(setup, seed)?;
        let f = out.trajectory.final_record;
        Ok(AblationRow {
            ablation: kind.name().into(),
            cell: cell.label.clone(),
            seed,
            sparse_eval_loss: f.sparse_eval_loss,
            dense_eval_loss: f.dense_eval_loss,
            switched_at: f.switched_at,
        })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let cells = rows
        .chunks(n_seeds)
        .map(|chunk| {
            let losses: Vec<f64> = chunk.iter().map(|r| r.sparse_eval_loss).collect();
            let (mean, std) = mean_std(&losses);
            CellSummary {
                ablation: kind.name().into(),
                cell: chunk[0].cell.clone(),
                n_seeds,
                sparse_eval_loss_mean: mean,
                sparse_eval_loss_std: std,
            }
        })
        .collect();
    Ok(AblationReport { kind, rows, cells })
}
