use std::fs;
use std::path::Path;

use approx::assert_relative_eq;

use nmstep::autoswitch::SwitchCriterion;
use nmstep::harness::{self, AblationKind, DataSource, ExperimentConfig};
use nmstep::masks::DecaySchedule;
use nmstep::models::{gen_synthetic, SyntheticKind, SyntheticSpec};
use nmstep::optim::{recipe_train, Recipe, Trainer};
use nmstep::trajectory::{read_jsonl, Phase};
use nmstep::{Error, Exec};

const BASE: &str = r#"
total_steps = 400
seeds = [3, 4]
log_every = 1

[model]
kind = "mlp_classifier"
layer_sizes = [8, 12, 3]

[data]
source = "synthetic"
kind = "blobs"
n_samples = 96
n_features = 8
n_classes = 3
noise_std = 1.5
batch_size = 16
seed = 1

[optim]
beta2 = 0.99
lr = { kind = "constant", lr = 0.01 }

[sparsity]
uniform = "2:4"

[recipe]
kind = "step"

[switch]
kind = "autoswitch"
clip = "default"
"#;

fn base() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(BASE).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn runs_are_byte_identical() {
    let cfg = base();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    harness::write_run(&harness::run(&cfg, Exec::Parallel).unwrap(), a.path()).unwrap();
    harness::write_run(&harness::run(&cfg, Exec::Sequential).unwrap(), b.path()).unwrap();
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(fa.len(), 5);
    assert_eq!(fa, fb);
}

#[test]
fn trajectory_lines_parse_and_steps_increase() {
    let report = harness::run(&base(), Exec::Sequential).unwrap();
    let dir = tempfile::tempdir().unwrap();
    harness::write_run(&report, dir.path()).unwrap();
    let text = fs::read(dir.path().join("seed_3.jsonl")).unwrap();
    let records = read_jsonl(&text[..]).unwrap();
    assert_eq!(records.len(), 400);
    assert!(records.windows(2).all(|w| w[0].step < w[1].step));
    assert!(records.iter().filter(|r| r.switched_at.is_some()).count() <= 1);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert!(summary.as_object().unwrap().values().all(|v| !v.is_object() && !v.is_array()));
}

#[test]
fn dense_recipe_never_switches() {
    let mut cfg = base();
    cfg.recipe = Recipe::Dense;
    for r in harness::run(&cfg, Exec::Sequential).unwrap().runs {
        assert!(r.trajectory.records.iter().all(|x| x.phase == Phase::Precondition && x.switched_at.is_none()));
        assert_eq!(r.trajectory.switched_at(), None);
    }
}

#[test]
fn clipped_switch_lands_inside_the_window() {
    let mut cfg = base();
    cfg.seeds = (0..6).collect();
    let t = cfg.total_steps;
    for r in harness::run(&cfg, Exec::Parallel).unwrap().runs {
        let s = r.trajectory.switched_at().unwrap();
        assert!(s > t / 10 && s <= t / 2, "switched at {s}");
        let at = r.trajectory.records.iter().find(|x| x.switched_at.is_some()).unwrap();
        assert_eq!(at.step, s);
    }
}

#[test]
fn invalid_config_fails_before_compute() {
    let mut cfg = base();
    cfg.total_steps = 0;
    assert!(matches!(harness::run(&cfg, Exec::Sequential), Err(Error::Config(_))));
    let bad = BASE.replace("uniform = \"2:4\"", "uniform = \"2:5\"");
    assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(Error::Config(_))));
    let bad = BASE.replace("[recipe]\nkind = \"step\"", "[recipe]\nkind = \"steps\"");
    assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(Error::Toml(_))));
}

#[test]
fn full_precondition_ratio_is_dense_then_masked() {
    let cfg = base();
    let resolved = cfg.resolve().unwrap();
    let at_end = SwitchCriterion::Fixed { step: harness::forced_switch_step(1.0, cfg.total_steps) };
    let never = SwitchCriterion::Never;
    let step = recipe_train(resolved.setup(Recipe::Step, &at_end, cfg.total_steps, 1), 3).unwrap();
    let dense = recipe_train(resolved.setup(Recipe::Dense, &never, cfg.total_steps, 1), 3).unwrap();
    assert_eq!(step.trajectory.switched_at(), None);
    assert_eq!(step.final_params, dense.final_params);
    assert_eq!(step.trajectory.final_record, dense.trajectory.final_record);
}

#[test]
fn fixed_and_updated_variance_split_after_the_switch() {
    let cfg = base();
    let resolved = cfg.resolve().unwrap();
    let t0 = 150;
    let forced = SwitchCriterion::Fixed { step: t0 };
    let mut fixed = Trainer::new(resolved.setup(Recipe::Step, &forced, cfg.total_steps, 1), 9).unwrap();
    let mut updated =
        Trainer::new(resolved.setup(Recipe::StepUpdatedVariance, &forced, cfg.total_steps, 1), 9).unwrap();
    for t in 1..=t0 + 1 {
        fixed.step().unwrap();
        updated.step().unwrap();
        let same = fixed.state().v == updated.state().v;
        assert_eq!(same, t <= t0, "step {t}");
    }
}

#[test]
fn single_stage_decay_matches_constant_ratio() {
    let cfg = ExperimentConfig::from_toml_str(&BASE.replace("uniform = \"2:4\"", "uniform = \"3:4\"")).unwrap();
    let mut resolved = cfg.resolve().unwrap();
    let never = SwitchCriterion::Never;
    let constant = recipe_train(resolved.setup(Recipe::Ste, &never, 200, 1), 1).unwrap();
    resolved.decay = Some(DecaySchedule::new(4, vec![]).unwrap());
    let decayed = recipe_train(resolved.setup(Recipe::Ste, &never, 200, 1), 1).unwrap();
    assert_eq!(constant.final_params, decayed.final_params);
    assert_eq!(constant.trajectory, decayed.trajectory);
}

#[test]
fn decaying_ablation_reaches_the_last_stage() {
    let mut cfg = base();
    cfg.recipe = Recipe::Ste;
    cfg.sparsity.decay = Some(DecaySchedule::new(4, vec![100, 200]).unwrap());
    let report = harness::ablation(AblationKind::DecayingMask, &cfg, Exec::Parallel).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert_eq!(report.cells.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    harness::write_ablation(&report, dir.path()).unwrap();
    let table = fs::read_to_string(dir.path().join("ablation_decaying_mask.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    for c in &report.cells {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.cell == c.cell).map(|r| r.sparse_eval_loss).collect();
        assert_relative_eq!(c.sparse_eval_loss_mean, (rows[0] + rows[1]) / 2.0, max_relative = 1e-12);
    }
}

#[test]
fn precondition_ablation_has_one_cell_per_ratio() {
    let mut cfg = base();
    cfg.seeds = vec![0];
    cfg.ablation.precondition_ratios = vec![0.25, 1.0];
    let report = harness::ablation(AblationKind::PreconditionLength, &cfg, Exec::Sequential).unwrap();
    let switched: Vec<_> = report.rows.iter().map(|r| r.switched_at).collect();
    assert_eq!(switched, [Some(100), None]);
}

#[test]
fn csv_source_resolves_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_synthetic(&SyntheticSpec {
        kind: SyntheticKind::Regression,
        n_samples: 40,
        n_features: 4,
        n_classes: 2,
        noise_std: 0.1,
        batch_size: 8,
        seed: 0,
    })
    .unwrap();
    data.to_csv(&dir.path().join("train.csv")).unwrap();
    let text = r#"
total_steps = 50
seeds = [0]
[model]
kind = "linear_regression"
layer_sizes = [4, 1]
[data]
source = "csv"
path = "train.csv"
batch_size = 8
[sparsity]
uniform = "2:4"
[recipe]
kind = "ste"
"#;
    let cfg_path = dir.path().join("exp.toml");
    fs::write(&cfg_path, text).unwrap();
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    assert!(matches!(&cfg.data, DataSource::Csv { path, .. } if path.is_absolute()));
    let report = harness::run(&cfg, Exec::Sequential).unwrap();
    let f = &report.runs[0].trajectory.final_record;
    assert_eq!(f.mask_sparsity["linear.weight"], 0.5);
    assert!(f.sparse_eval_loss.is_finite());
}

#[test]
fn compare_switch_one_criterion_one_row_per_seed() {
    let mut cfg = base();
    cfg.seeds = vec![0];
    let rows = harness::compare_switch(&cfg, &[SwitchCriterion::relative()], Exec::Sequential).unwrap();
    assert_eq!(rows.len(), 1);
}
