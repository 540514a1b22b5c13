use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use nmstep::harness::{self, AblationKind, ExperimentConfig, TheoremConfig};
use nmstep::models::finite_difference_check;
use nmstep::theory::validate_theorem;
use nmstep::Exec;

#[derive(Parser, Debug)]
#[command(name = "nmstep", version, about = "N:M sparse training with a preconditioned-variance switch")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run only this seed instead of the config's list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads: 1 runs sequentially, 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every seed and write trajectories plus a summary.
    Run,
    /// Profile dense runs and compare switch criteria offline.
    CompareSwitch,
    /// Run one ablation matrix.
    Ablate {
        /// precondition_length, fixed_vs_updated_variance or decaying_mask.
        #[arg(long)]
        kind: String,
    },
    /// Monte Carlo check of the variance concentration bound.
    ValidateTheorem,
    /// Compare analytic gradients with central differences.
    FdCheck {
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
}

impl Cli {
    fn experiment(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let path = self.config.as_deref().context("--config is required for this command")?;
        let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok((cfg, out))
    }

    fn exec(&self) -> Exec {
        Exec::from_jobs(self.jobs)
    }
}

/// Prints to stdout; a closed pipe (as with `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    emit(&serde_json::to_string_pretty(value)?)
}

fn save_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Run => {
            let (cfg, out) = cli.experiment()?;
            let report = harness::run(&cfg, cli.exec())?;
            save_config(&cfg, &out)?;
            harness::write_run(&report, &out)?;
            print_json(&report.summary)?;
        }
        Command::CompareSwitch => {
            let (cfg, out) = cli.experiment()?;
            let rows = harness::compare_switch(&cfg, &cfg.compare.criteria, cli.exec())?;
            save_config(&cfg, &out)?;
            harness::write_rows(&rows, &out.join("compare_switch.csv"))?;
            print_json(&rows)?;
        }
        Command::Ablate { kind } => {
            let kind: AblationKind = kind.parse()?;
            let (cfg, out) = cli.experiment()?;
            let report = harness::ablation(kind, &cfg, cli.exec())?;
            save_config(&cfg, &out)?;
            harness::write_ablation(&report, &out)?;
            print_json(&report.cells)?;
        }
        Command::ValidateTheorem => {
            let mut tc = match &cli.config {
                Some(p) => TheoremConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => TheoremConfig::default(),
            };
            if let Some(seed) = cli.seed {
                tc.stream.seed = seed;
            }
            let out = cli.out.clone().unwrap_or_else(|| tc.output_dir.clone());
            let report = validate_theorem(&tc.stream, tc.beta2, tc.t0, tc.t, tc.delta, tc.trials, cli.exec())?;
            harness::write_json_file(&report, &out.join("bound_report.json"))?;
            print_json(&report)?;
            return Ok(report.per_step_bound_ok && report.violation_rate <= tc.delta);
        }
        Command::FdCheck { h, tol } => {
            let (cfg, out) = cli.experiment()?;
            let resolved = cfg.resolve()?;
            let batch = resolved.data.full_batch();
            let mut all_pass = true;
            for &seed in &cfg.seeds {
                let params = resolved.spec.init_params(seed)?;
                let report = finite_difference_check(&resolved.spec, &params, &batch, *h, *tol)?;
                all_pass &= report.pass;
                harness::write_json_file(&report, &out.join(format!("fd_seed_{seed}.json")))?;
                emit(&format!(
                    "seed {seed}: {} coordinates, max relative error {:.3e}, {}",
                    report.checked,
                    report.max_rel_error,
                    if report.pass { "pass" } else { "FAIL" }
                ))?;
            }
            return Ok(all_pass);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_flags_after_subcommand() {
        let cli =
            Cli::try_parse_from(["nmstep", "ablate", "--kind", "decaying_mask", "--config", "x.toml", "--jobs", "1"])
                .unwrap();
        assert_eq!(cli.jobs, 1);
        assert!(matches!(cli.command, Command::Ablate { .. }));
        assert!(Cli::try_parse_from(["nmstep", "train"]).is_err());
    }
}
