use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::Result;
use crate::exec::Exec;
use crate::optim::recipe_train;
use crate::trajectory::TrainTrajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub trajectory: TrainTrajectory,
}

/// Flat summary over seeds. Standard deviations use `n - 1` and are 0 for
/// a single seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub recipe: String,
    pub switch: String,
    pub total_steps: u64,
    pub n_seeds: usize,
    pub sparse_eval_loss_mean: f64,
    pub sparse_eval_loss_std: f64,
    pub dense_eval_loss_mean: f64,
    pub dense_eval_loss_std: f64,
    pub n_switched: usize,
    pub switched_at_min: Option<u64>,
    pub switched_at_max: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub runs: Vec<SeedRun>,
    pub summary: RunSummary,
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every seed of the config. Seeds are independent jobs.
pub fn run(cfg: &ExperimentConfig, exec: Exec) -> Result<RunReport> {
    cfg.validate()?;
    let resolved = cfg.resolve()?;
    let trajectories = exec.map(cfg.seeds.len(), |i| {
        let setup = resolved.setup(cfg.recipe, &cfg.switch, cfg.total_steps, cfg.log_every);
        recipe_train(setup, cfg.seeds[i]).map(|o| o.trajectory)
    });
    let runs = cfg
        .seeds
        .iter()
        .zip(trajectories)
        .map(|(&seed, t)| t.map(|trajectory| SeedRun { seed, trajectory }))
        .collect::<Result<Vec<_>>>()?;

    let sparse: Vec<f64> = runs.iter().map(|r| r.trajectory.final_record.sparse_eval_loss).collect();
    let dense: Vec<f64> = runs.iter().map(|r| r.trajectory.final_record.dense_eval_loss).collect();
    let switched: Vec<u64> = runs.iter().filter_map(|r| r.trajectory.switched_at()).collect();
    let (sparse_eval_loss_mean, sparse_eval_loss_std) = mean_std(&sparse);
    let (dense_eval_loss_mean, dense_eval_loss_std) = mean_std(&dense);
    let summary = RunSummary {
        recipe: cfg.recipe.label(),
        switch: cfg.switch.label(),
        total_steps: cfg.total_steps,
        n_seeds: runs.len(),
        sparse_eval_loss_mean,
        sparse_eval_loss_std,
        dense_eval_loss_mean,
        dense_eval_loss_std,
        n_switched: switched.len(),
        switched_at_min: switched.iter().copied().min(),
        switched_at_max: switched.iter().copied().max(),
    };
    Ok(RunReport { runs, summary })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

/// Writes `seed_{s}.jsonl`, `seed_{s}_final.json` and `summary.json`.
pub fn write_run(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in &report.runs {
        let f = BufWriter::new(File::create(dir.join(format!("seed_{}.jsonl", r.seed)))?);
        r.trajectory.write_jsonl(f)?;
        write_json(&dir.join(format!("seed_{}_final.json", r.seed)), &r.trajectory.final_record)?;
    }
    write_json(&dir.join("summary.json"), &report.summary)
}
