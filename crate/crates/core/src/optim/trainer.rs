use serde::{Deserialize, Serialize};

use super::{adam_step, adam_step_frozen, srste_regularize, ste_grad_with_masks, AdamHyper, AdamState};
use crate::autoswitch::{variance_change_sample_params, StepStats, SwitchCriterion, SwitchDetector};
use crate::error::{config, Error, Result};
use crate::masks::{DecaySchedule, LayerMasks, NMRatio, SparsityPlan};
use crate::models::{forward_loss, loss_and_grad, BatchSampler, Dataset, ModelSpec, ParamSet};
use crate::trajectory::{FinalRecord, Phase, TrainRecord, TrainTrajectory};

/// Training recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Recipe {
    /// Plain Adam; masks applied once at the end.
    Dense,
    /// Masked forward from step 1, Adam with a live variance.
    Ste,
    Srste {
        lambda: f64,
    },
    /// Dense Adam until the switch, then STE with the variance frozen.
    Step,
    /// As `Step`, but the variance keeps updating after the switch.
    StepUpdatedVariance,
}

impl Recipe {
    pub fn label(&self) -> String {
        match self {
            Recipe::Dense => "dense".into(),
            Recipe::Ste => "ste".into(),
            Recipe::Srste { lambda } => format!("srste({lambda})"),
            Recipe::Step => "step".into(),
            Recipe::StepUpdatedVariance => "step_updated_variance".into(),
        }
    }

    fn is_two_phase(self) -> bool {
        matches!(self, Recipe::Step | Recipe::StepUpdatedVariance)
    }

    fn starting_phase(self) -> Phase {
        match self {
            Recipe::Ste | Recipe::Srste { .. } => Phase::MaskLearning,
            _ => Phase::Precondition,
        }
    }
}

/// Everything a run needs besides its seed.
#[derive(Debug, Clone)]
pub struct TrainSetup<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub hyper: &'a AdamHyper,
    pub plan: &'a SparsityPlan,
    pub decay: Option<&'a DecaySchedule>,
    pub recipe: Recipe,
    pub switch: &'a SwitchCriterion,
    pub total_steps: u64,
    /// Keep every `log_every`-th record (the switch step and the last step
    /// are always kept).
    pub log_every: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// `Π_T ⊙ w_T` on planned layers, dense elsewhere.
    pub final_params: ParamSet,
    pub dense_params: ParamSet,
    pub masks: LayerMasks,
    pub state: AdamState,
    pub v_star: Option<ParamSet>,
    pub trajectory: TrainTrajectory,
    /// Mask computations performed before the final masking.
    pub training_mask_evaluations: usize,
}

/// Step-by-step driver. `run` loops `step` to the horizon and evaluates.
#[derive(Debug)]
pub struct Trainer<'a> {
    setup: TrainSetup<'a>,
    params: ParamSet,
    state: AdamState,
    phase: Phase,
    v_star: Option<ParamSet>,
    sampler: BatchSampler,
    detector: SwitchDetector,
    switched_at: Option<u64>,
    records: Vec<TrainRecord>,
    mask_evaluations: usize,
}

impl<'a> Trainer<'a> {
    /// Initial weights and the batch order are both derived from `seed`.
    pub fn new(setup: TrainSetup<'a>, seed: u64) -> Result<Self> {
        let params = setup.spec.init_params(seed)?;
        Self::with_params(setup, params, seed)
    }

    pub fn with_params(setup: TrainSetup<'a>, params: ParamSet, seed: u64) -> Result<Self> {
        if setup.total_steps == 0 {
            return Err(config("total_steps must be at least 1"));
        }
        setup.hyper.validate()?;
        setup.plan.validate(&params)?;
        if let Some(d) = setup.decay {
            d.validate()?;
            for (name, _) in setup.plan.layers() {
                let extent = params.get(name).map(|t| t.inner_extent()).unwrap_or(0);
                if !extent.is_multiple_of(d.m) {
                    return Err(config(format!("layer {name}: extent {extent} not divisible by decay m = {}", d.m)));
                }
            }
        }
        if let Recipe::Srste { lambda } = setup.recipe {
            if !(lambda >= 0.0) {
                return Err(config(format!("SR-STE λ must be non-negative, got {lambda}")));
            }
        }
        let detector = SwitchDetector::new(setup.switch, setup.hyper.beta2, setup.hyper.eps, setup.total_steps)?;
        let sampler = BatchSampler::new(setup.data.n_samples(), setup.data.batch_size(), seed);
        Ok(Self {
            state: AdamState::new(&params),
            phase: setup.recipe.starting_phase(),
            params,
            v_star: None,
            sampler,
            detector,
            switched_at: None,
            records: Vec::new(),
            mask_evaluations: 0,
            setup,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn v_star(&self) -> Option<&ParamSet> {
        self.v_star.as_ref()
    }

    pub fn switched_at(&self) -> Option<u64> {
        self.switched_at
    }

    pub fn records(&self) -> &[TrainRecord] {
        &self.records
    }

    pub fn is_done(&self) -> bool {
        self.state.t >= self.setup.total_steps
    }

    fn ratio_override(&self, step: u64) -> Option<NMRatio> {
        self.setup.decay.map(|d| d.ratio_at(step))
    }

    /// Performs one optimization step and returns its record.
    pub fn step(&mut self) -> Result<TrainRecord> {
        if self.is_done() {
            return Err(Error::State(format!("all {} steps already taken", self.setup.total_steps)));
        }
        let TrainSetup { spec, data, hyper, plan, .. } = self.setup;
        let recipe = self.setup.recipe;
        let batch = data.batch(self.sampler.next_rows());

        let (loss, grads) = match self.phase {
            Phase::Precondition => loss_and_grad(spec, &self.params, &batch)?,
            Phase::MaskLearning => {
                let masks = plan.compute_masks(&self.params, self.ratio_override(self.state.t))?;
                self.mask_evaluations += 1;
                let (loss, mut grads) = ste_grad_with_masks(spec, &self.params, &masks, &batch)?;
                if let Recipe::Srste { lambda } = recipe {
                    srste_regularize(&mut grads, &self.params, &masks, lambda)?;
                }
                (loss, grads)
            }
        };
        if !loss.is_finite() {
            return Err(Error::Numerical { step: self.state.t + 1, message: format!("loss is {loss}") });
        }

        let v_prev = self.state.v.clone();
        match (&self.v_star, recipe) {
            (Some(v_star), Recipe::Step) => adam_step_frozen(&mut self.state, hyper, &mut self.params, &grads, v_star)?,
            _ => adam_step(&mut self.state, hyper, &mut self.params, &grads)?,
        }
        let t = self.state.t;

        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for x in self.state.v.flat_values() {
            l1 += x.abs();
            l2 += x * x;
        }
        let l2 = l2.sqrt();
        let z = variance_change_sample_params(&self.state.v, &v_prev, self.detector.sampler_option())?;
        let obs = self.detector.observe(&StepStats { step: t, l1, l2, z })?;

        let phase = self.phase;
        let mut switched_now = None;
        if recipe.is_two_phase() && phase == Phase::Precondition && obs.fire && t < self.setup.total_steps {
            self.v_star = Some(self.state.v.clone());
            self.phase = Phase::MaskLearning;
            self.switched_at = Some(t);
            switched_now = Some(t);
        }

        let record =
            TrainRecord { step: t, phase, loss, v_l1: l1, v_l2: l2, z, z_bar: obs.z_bar, switched_at: switched_now };
        let every = self.setup.log_every.max(1);
        if t.is_multiple_of(every) || switched_now.is_some() || t == self.setup.total_steps || t == 1 {
            self.records.push(record.clone());
        }
        Ok(record)
    }

    /// Runs to the horizon, masks the final weights and evaluates on the
    /// full dataset.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_done() {
            self.step()?;
        }
        self.finish()
    }

    pub fn finish(self) -> Result<TrainOutcome> {
        let TrainSetup { spec, data, plan, .. } = self.setup;
        let masks = plan.compute_masks(&self.params, self.ratio_override(self.state.t))?;
        let final_params = masks.apply(&self.params)?;
        let full = data.full_batch();
        let final_record = FinalRecord {
            sparse_eval_loss: forward_loss(spec, &final_params, &full)?,
            dense_eval_loss: forward_loss(spec, &self.params, &full)?,
            switched_at: self.switched_at,
            mask_sparsity: masks.sparsity(),
        };
        Ok(TrainOutcome {
            final_params,
            dense_params: self.params,
            masks,
            state: self.state,
            v_star: self.v_star,
            trajectory: TrainTrajectory { records: self.records, final_record },
            training_mask_evaluations: self.mask_evaluations,
        })
    }
}

/// Two-phase training with the frozen variance.
pub fn step_train(setup: TrainSetup<'_>, seed: u64) -> Result<TrainOutcome> {
    recipe_train(TrainSetup { recipe: Recipe::Step, ..setup }, seed)
}

pub fn recipe_train(setup: TrainSetup<'_>, seed: u64) -> Result<TrainOutcome> {
    Trainer::new(setup, seed)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{gen_synthetic, Activation, SyntheticKind, SyntheticSpec};

    fn fixture() -> (ModelSpec, Dataset, AdamHyper, SparsityPlan) {
        let data = gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::Blobs,
            n_samples: 64,
            n_features: 4,
            n_classes: 2,
            noise_std: 1.0,
            batch_size: 8,
            seed: 3,
        })
        .unwrap();
        let spec = ModelSpec::mlp(vec![4, 8, 2], Activation::Tanh);
        let params = spec.init_params(0).unwrap();
        let plan = SparsityPlan::uniform_weights(&params, NMRatio::new(1, 4).unwrap());
        (spec, data, AdamHyper::with_lr(0.01), plan)
    }

    fn setup<'a>(
        f: &'a (ModelSpec, Dataset, AdamHyper, SparsityPlan),
        recipe: Recipe,
        switch: &'a SwitchCriterion,
        total: u64,
    ) -> TrainSetup<'a> {
        TrainSetup {
            spec: &f.0,
            data: &f.1,
            hyper: &f.2,
            plan: &f.3,
            decay: None,
            recipe,
            switch,
            total_steps: total,
            log_every: 1,
        }
    }

    #[test]
    fn dense_recipe_stays_in_precondition() {
        let f = fixture();
        let sw = SwitchCriterion::Fixed { step: 3 };
        let out = recipe_train(setup(&f, Recipe::Dense, &sw, 20), 1).unwrap();
        assert!(out.trajectory.records.iter().all(|r| r.phase == Phase::Precondition && r.switched_at.is_none()));
        assert_eq!(out.training_mask_evaluations, 0);
        assert!(out.v_star.is_none());
        assert_eq!(out.trajectory.records.len(), 20);
    }

    #[test]
    fn fixed_switch_freezes_variance() {
        let f = fixture();
        let sw = SwitchCriterion::Fixed { step: 7 };
        let mut tr = Trainer::new(setup(&f, Recipe::Step, &sw, 30), 2).unwrap();
        while !tr.is_done() {
            tr.step().unwrap();
            if let Some(v_star) = tr.v_star() {
                assert_eq!(&tr.state().v, v_star);
            }
        }
        assert_eq!(tr.switched_at(), Some(7));
        let recs = tr.records();
        assert_eq!(recs[6].switched_at, Some(7));
        assert_eq!(recs[6].phase, Phase::Precondition);
        assert!(recs[7..].iter().all(|r| r.phase == Phase::MaskLearning && r.z == 0.0));
    }

    #[test]
    fn switch_at_horizon_is_not_taken() {
        let f = fixture();
        let sw = SwitchCriterion::Fixed { step: 10 };
        let out = step_train(setup(&f, Recipe::Step, &sw, 10), 1).unwrap();
        assert_eq!(out.trajectory.switched_at(), None);
    }

    #[test]
    fn zero_steps_rejected() {
        let f = fixture();
        let sw = SwitchCriterion::Never;
        assert!(matches!(Trainer::new(setup(&f, Recipe::Step, &sw, 0), 1), Err(Error::Config(_))));
    }

    #[test]
    fn thinning_keeps_switch_and_last() {
        let f = fixture();
        let sw = SwitchCriterion::Fixed { step: 7 };
        let mut s = setup(&f, Recipe::Step, &sw, 25);
        s.log_every = 10;
        let out = recipe_train(s, 1).unwrap();
        let steps: Vec<u64> = out.trajectory.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![1, 7, 10, 20, 25]);
    }
}
