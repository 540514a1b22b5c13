//! Experiment configuration, seeded run orchestration, trajectory output and
//! the comparison and ablation drivers.

mod ablation;
mod compare;
mod config;
mod run;

pub use ablation::{ablation, cells, forced_switch_step, AblationKind, AblationReport, AblationRow, Cell, CellSummary};
pub use compare::{compare_profile, compare_switch, profile_dense, write_rows, SwitchRow, SwitchStatus};
pub use config::{
    AblationSection, CompareSection, DataSource, ExperimentConfig, Resolved, SparsitySection, TheoremConfig,
};
pub use run::{run, write_run, RunReport, RunSummary, SeedRun};

pub(crate) use run::write_json;

use std::path::Path;

use crate::error::Result;

/// Writes `ablation_{kind}.csv` (one row per cell and seed) and
/// `ablation_{kind}_summary.csv`.
pub fn write_ablation(report: &AblationReport, dir: &Path) -> Result<()> {
    write_rows(&report.rows, &dir.join(format!("ablation_{}.csv", report.kind)))?;
    write_rows(&report.cells, &dir.join(format!("ablation_{}_summary.csv", report.kind)))
}

/// Writes any serializable value as pretty JSON.
pub fn write_json_file<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_json(path, value)
}

#[cfg(test)]
pub(crate) const SAMPLE: &str = r#"
total_steps = 200
seeds = [0, 1]
log_every = 10

[model]
kind = "mlp_classifier"
layer_sizes = [8, 16, 2]
activation = "tanh"

[data]
source = "synthetic"
kind = "blobs"
n_samples = 64
n_features = 8
batch_size = 16
seed = 3

[optim]
beta2 = 0.99
lr = { kind = "constant", lr = 0.01 }

[sparsity]
uniform = "1:4"

[recipe]
kind = "step"

[switch]
kind = "autoswitch"
clip = "default"
"#;
