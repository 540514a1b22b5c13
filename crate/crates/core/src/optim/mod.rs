//! Adam with bias correction, the straight-through gradient rules, and the
//! two-phase training driver.
//!
//! Bias correction divides by `1 - βᵏ` where `k` counts the gradients
//! accumulated so far (so the very first step uses `k = 1`). ε sits inside
//! the square root: `w ← w - γ m̂ / √(v̂ + ε)`.

mod ste;
mod trainer;

use serde::{Deserialize, Serialize};

pub use ste::{srste_grad, srste_grad_with_masks, srste_regularize, ste_grad, ste_grad_with_masks, SteOutput};
pub use trainer::{recipe_train, step_train, Recipe, TrainOutcome, TrainSetup, Trainer};

use crate::error::{config, Error, Result};
use crate::models::ParamSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Half-cosine from `lr` to `min_lr` over `period` steps, flat after.
    Cosine {
        lr: f64,
        #[serde(default)]
        min_lr: f64,
        #[serde(default)]
        period: Option<u64>,
    },
}

impl LrSchedule {
    /// γ for the step with 0-based index `t`.
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { lr, min_lr, period } => match period {
                Some(p) if p > 0 => {
                    let frac = t.min(p) as f64 / p as f64;
                    min_lr + (lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
                }
                _ => lr,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant { lr } => lr > 0.0 && lr.is_finite(),
            LrSchedule::Cosine { lr, min_lr, .. } => lr > 0.0 && lr.is_finite() && (0.0..=lr).contains(&min_lr),
        };
        if ok {
            Ok(())
        } else {
            Err(config(format!("invalid learning-rate schedule {self:?}")))
        }
    }

    /// Fills in a missing cosine period.
    pub fn with_default_period(self, total_steps: u64) -> Self {
        match self {
            LrSchedule::Cosine { lr, min_lr, period: None } => {
                LrSchedule::Cosine { lr, min_lr, period: Some(total_steps) }
            }
            other => other,
        }
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_lr() -> LrSchedule {
    LrSchedule::Constant { lr: 1e-3 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_lr")]
    pub lr: LrSchedule,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps(), lr: default_lr() }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr: LrSchedule::Constant { lr }, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config(format!("betas must lie in [0, 1): {} {}", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) {
            return Err(config(format!("eps must be positive, got {}", self.eps)));
        }
        self.lr.validate()
    }
}

/// Moment accumulators. `t` is the number of gradients folded in so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

fn check_inputs(state: &AdamState, params: &ParamSet, grads: &ParamSet) -> Result<()> {
    params.check_congruent(grads)?;
    params.check_congruent(&state.m)?;
    params.check_congruent(&state.v)?;
    if !grads.is_finite() {
        return Err(Error::Numerical { step: state.t + 1, message: "non-finite gradient".into() });
    }
    Ok(())
}

/// One Adam update of `params` and `state`.
pub fn adam_step(state: &mut AdamState, hyper: &AdamHyper, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
    check_inputs(state, params, grads)?;
    let lr = hyper.lr.at(state.t);
    let k = state.t + 1;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(k as i32);
    let c2 = 1.0 - b2.powi(k as i32);
    for (((name, w), (_, m)), (_, v)) in params.iter_mut().zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        let g = grads.get(name).expect("congruent").data();
        let (w, m, v) = (w.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= lr * m_hat / (v_hat + hyper.eps).sqrt();
        }
    }
    state.t = k;
    Ok(())
}

/// Mask-learning update: momentum as usual, variance untouched, step scaled
/// by the raw frozen `v_star`.
pub fn adam_step_frozen(
    state: &mut AdamState,
    hyper: &AdamHyper,
    params: &mut ParamSet,
    grads: &ParamSet,
    v_star: &ParamSet,
) -> Result<()> {
    check_inputs(state, params, grads)?;
    params.check_congruent(v_star)?;
    let lr = hyper.lr.at(state.t);
    let k = state.t + 1;
    let b1 = hyper.beta1;
    let c1 = 1.0 - b1.powi(k as i32);
    for ((name, w), (_, m)) in params.iter_mut().zip(state.m.iter_mut()) {
        let g = grads.get(name).expect("congruent").data();
        let vs = v_star.get(name).expect("congruent").data();
        let (w, m) = (w.data_mut(), m.data_mut());
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            w[i] -= lr * (m[i] / c1) / (vs[i] + hyper.eps).sqrt();
        }
    }
    state.t = k;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_set(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![x]).unwrap());
        p
    }

    fn one(p: &ParamSet, name: &str) -> f64 {
        p.get(name).unwrap().data()[0]
    }

    #[test]
    fn first_step_hand_values() {
        let mut params = scalar_set(0.5);
        let mut state = AdamState::new(&params);
        adam_step(&mut state, &AdamHyper::with_lr(0.001), &mut params, &scalar_set(2.0)).unwrap();
        assert!((one(&state.m, "w") - 0.2).abs() < 1e-15);
        assert!((one(&state.v, "w") - 0.004).abs() < 1e-15);
        // 0.5 - 0.001 * 2 / sqrt(4 + 1e-8)
        assert!((one(&params, "w") - 0.499_000_000_001_25).abs() < 1e-12);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut params = scalar_set(0.5);
        let mut state = AdamState::new(&params);
        let hyper = AdamHyper::default();
        for _ in 0..3 {
            adam_step(&mut state, &hyper, &mut params, &scalar_set(0.0)).unwrap();
        }
        assert_eq!(one(&params, "w"), 0.5);
        assert_eq!(one(&state.m, "w"), 0.0);
        assert_eq!(one(&state.v, "w"), 0.0);
    }

    #[test]
    fn identical_histories_identical_updates() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::from_vec(vec![0.3, 0.3]).unwrap());
        let mut state = AdamState::new(&params);
        let hyper = AdamHyper::with_lr(0.01);
        for g in [1.0, -0.5, 2.0] {
            let mut grads = ParamSet::new();
            grads.insert("a", Tensor::from_vec(vec![g, g]).unwrap());
            adam_step(&mut state, &hyper, &mut params, &grads).unwrap();
            let w = params.get("a").unwrap().data();
            assert_eq!(w[0].to_bits(), w[1].to_bits());
        }
    }

    #[test]
    fn non_finite_gradient_names_step() {
        let mut params = scalar_set(0.5);
        let mut state = AdamState::new(&params);
        let hyper = AdamHyper::default();
        adam_step(&mut state, &hyper, &mut params, &scalar_set(1.0)).unwrap();
        let err = adam_step(&mut state, &hyper, &mut params, &scalar_set(f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::Numerical { step: 2, .. }));
    }

    #[test]
    fn frozen_step_leaves_variance() {
        let mut params = scalar_set(1.0);
        let mut state = AdamState::new(&params);
        let hyper = AdamHyper::with_lr(0.1);
        adam_step(&mut state, &hyper, &mut params, &scalar_set(1.0)).unwrap();
        let v_star = state.v.clone();
        adam_step_frozen(&mut state, &hyper, &mut params, &scalar_set(3.0), &v_star).unwrap();
        assert_eq!(state.v, v_star);
        assert_eq!(state.t, 2);
        // m₂ = 0.9·0.1 + 0.1·3 = 0.39, m̂ = 0.39 / (1 - 0.81)
        let m_hat = 0.39 / (1.0 - 0.81);
        let w1 = 1.0 - 0.1 * 1.0 / (1.0f64 + 1e-8).sqrt();
        let expect = w1 - 0.1 * m_hat / (0.001f64 + 1e-8).sqrt();
        assert!((one(&params, "w") - expect).abs() < 1e-12);
    }

    #[test]
    fn hyper_validation() {
        assert!(AdamHyper { beta1: 1.0, ..AdamHyper::default() }.validate().is_err());
        assert!(AdamHyper { eps: 0.0, ..AdamHyper::default() }.validate().is_err());
        assert!(AdamHyper::with_lr(-1.0).validate().is_err());
        AdamHyper::default().validate().unwrap();
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine { lr: 1.0, min_lr: 0.1, period: Some(100) };
        assert_eq!(s.at(0), 1.0);
        assert!((s.at(50) - 0.55).abs() < 1e-12);
        assert!((s.at(100) - 0.1).abs() < 1e-12);
        assert!((s.at(500) - 0.1).abs() < 1e-12);
    }
}
