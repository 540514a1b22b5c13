//! Concentration of the bias-corrected variance under stationary squared
//! gradients.
//!
//! With `g²` i.i.d. in `[0, G]`, the increments of `v̂_t` form a martingale
//! difference sequence bounded by `(1-β₂)/(1-β₂^{k+1}) · G`, which is at most
//! `√2 (1-β₂) G` once `k` exceeds `log_{β₂}(1 - 1/√2)`. Azuma–Hoeffding then
//! bounds `‖v̂_t - v̂_{t0}‖∞` by `√(4 G² (1-β₂)² (t-t0) ln(2/δ))` with
//! probability at least `1 - δ`. This module evaluates the bound and checks
//! it by simulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::exec::Exec;

/// Slack allowed on the deterministic per-step bound.
pub const PER_STEP_SLACK: f64 = 1e-12;

/// Distribution of each coordinate of `g²`; all draws lie in `[0, G]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamKind {
    Constant {
        value: f64,
    },
    /// Uniform on `[0, G]`.
    Uniform,
    /// `G` with probability `p`, else 0.
    Bernoulli {
        #[serde(default = "half")]
        p: f64,
    },
    /// `(σ z)²` with `z` standard normal, truncated at `G`.
    TruncatedSquaredGaussian {
        sigma: f64,
    },
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationaryStream {
    pub kind: StreamKind,
    /// The bound `G` on `‖g²‖∞`.
    pub g_max: f64,
    pub dim: usize,
    pub seed: u64,
}

impl StationaryStream {
    pub fn new(kind: StreamKind, g_max: f64, dim: usize, seed: u64) -> Result<Self> {
        let s = Self { kind, g_max, dim, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.g_max > 0.0 && self.g_max.is_finite()) {
            return Err(config(format!("G must be positive and finite, got {}", self.g_max)));
        }
        if self.dim == 0 {
            return Err(config("stream dimension must be at least 1"));
        }
        match self.kind {
            StreamKind::Constant { value } if !(0.0..=self.g_max).contains(&value) => {
                Err(config(format!("constant {value} lies outside [0, {}]", self.g_max)))
            }
            StreamKind::Bernoulli { p } if !(0.0..=1.0).contains(&p) => Err(config(format!("Bernoulli p = {p}"))),
            StreamKind::TruncatedSquaredGaussian { sigma } if !(sigma > 0.0) => {
                Err(config(format!("sigma must be positive, got {sigma}")))
            }
            _ => Ok(()),
        }
    }

    /// `E[g²]` per coordinate where it has a closed form.
    pub fn mean(&self) -> Option<f64> {
        match self.kind {
            StreamKind::Constant { value } => Some(value),
            StreamKind::Uniform => Some(self.g_max / 2.0),
            StreamKind::Bernoulli { p } => Some(p * self.g_max),
            StreamKind::TruncatedSquaredGaussian { .. } => None,
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.kind {
            StreamKind::Constant { value } => value,
            StreamKind::Uniform => rng.gen::<f64>() * self.g_max,
            StreamKind::Bernoulli { p } => {
                if rng.gen::<f64>() < p {
                    self.g_max
                } else {
                    0.0
                }
            }
            StreamKind::TruncatedSquaredGaussian { sigma } => {
                let z: f64 = rng.sample(StandardNormal);
                (sigma * z).powi(2).min(self.g_max)
            }
        }
    }

    /// Independent generator for trial `trial`.
    pub fn trial_rng(&self, trial: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(trial);
        rng
    }
}

/// Runs the variance recursion `v ← β₂ v + (1-β₂) g²` from `v₀ = 0`.
#[derive(Debug, Clone)]
pub struct VarianceSim {
    beta2: f64,
    v: Vec<f64>,
    t: u64,
}

impl VarianceSim {
    pub fn new(beta2: f64, dim: usize) -> Self {
        Self { beta2, v: vec![0.0; dim], t: 0 }
    }

    pub fn step<R: Rng>(&mut self, stream: &StationaryStream, rng: &mut R) {
        for vi in &mut self.v {
            let g2 = stream.draw(rng);
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g2;
        }
        self.t += 1;
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// `v_t / (1 - β₂ᵗ)`; requires `t ≥ 1`.
    pub fn vhat(&self) -> Vec<f64> {
        let c = 1.0 - self.beta2.powi(self.t as i32);
        self.v.iter().map(|x| x / c).collect()
    }
}

/// Raw and bias-corrected variance for steps `1..=T` (index `t - 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct VhatTrajectory {
    pub v: Vec<Vec<f64>>,
    pub vhat: Vec<Vec<f64>>,
}

/// Simulates one trajectory with the stream's own seed.
pub fn simulate_vhat(stream: &StationaryStream, beta2: f64, steps: u64) -> Result<VhatTrajectory> {
    stream.validate()?;
    check_beta2(beta2)?;
    if steps == 0 {
        return Err(Error::Range("simulation needs at least one step".into()));
    }
    let mut rng = stream.trial_rng(0);
    let mut sim = VarianceSim::new(beta2, stream.dim);
    let mut out = VhatTrajectory { v: Vec::new(), vhat: Vec::new() };
    for _ in 0..steps {
        sim.step(stream, &mut rng);
        out.v.push(sim.v().to_vec());
        out.vhat.push(sim.vhat());
    }
    Ok(out)
}

fn check_beta2(beta2: f64) -> Result<()> {
    if beta2 > 0.0 && beta2 < 1.0 {
        Ok(())
    } else {
        Err(config(format!("β₂ must lie in (0, 1), got {beta2}")))
    }
}

/// `√(4 G² (1-β₂)² (t - t0) ln(2/δ))`.
pub fn azuma_bound(g_max: f64, beta2: f64, t: u64, t0: u64, delta: f64) -> Result<f64> {
    if t <= t0 {
        return Err(Error::Range(format!("bound needs t > t0, got t = {t}, t0 = {t0}")));
    }
    if !(g_max > 0.0) || !(delta > 0.0) {
        return Err(domain(format!("bound needs G > 0 and δ > 0, got G = {g_max}, δ = {delta}")));
    }
    let span = (t - t0) as f64;
    let r = (4.0 * g_max * g_max * (1.0 - beta2).powi(2) * span * (2.0 / delta).ln()).max(0.0);
    Ok(r.sqrt())
}

/// `ln(1 - 1/√2) / ln β₂`: precondition steps must exceed this.
pub fn min_precondition_step(beta2: f64) -> f64 {
    (1.0 - std::f64::consts::FRAC_1_SQRT_2).ln() / beta2.ln()
}

/// The weaker condition `ln(1/2) / ln β₂` used inside the per-step argument.
pub fn proof_precondition_step(beta2: f64) -> f64 {
    0.5f64.ln() / beta2.ln()
}

/// Smallest integer strictly above `x`.
pub fn first_integer_above(x: f64) -> u64 {
    (x.floor() as u64) + 1
}

/// Deterministic per-step increment bound `√2 (1-β₂) G`.
pub fn per_step_bound(g_max: f64, beta2: f64) -> f64 {
    std::f64::consts::SQRT_2 * (1.0 - beta2) * g_max
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub trials: u64,
    pub violations: u64,
    pub violation_rate: f64,
    pub bound_value: f64,
    pub max_observed_deviation: f64,
    pub per_step_bound: f64,
    pub max_per_step_change: f64,
    pub per_step_bound_ok: bool,
    pub beta2: f64,
    pub g_max: f64,
    pub dim: usize,
    pub t0: u64,
    pub t: u64,
    pub delta: f64,
    pub t0_min_statement: f64,
    pub t0_min_proof: f64,
}

#[derive(Debug, Clone, Copy)]
struct TrialResult {
    deviation: f64,
    max_step: f64,
}

fn run_trial(stream: &StationaryStream, beta2: f64, t0: u64, t: u64, trial: u64) -> TrialResult {
    let mut rng = stream.trial_rng(trial);
    let mut sim = VarianceSim::new(beta2, stream.dim);
    while sim.t() < t0 {
        sim.step(stream, &mut rng);
    }
    let anchor = sim.vhat();
    let mut prev = anchor.clone();
    let mut max_step = 0.0f64;
    while sim.t() < t {
        sim.step(stream, &mut rng);
        let cur = sim.vhat();
        for (a, b) in cur.iter().zip(&prev) {
            max_step = max_step.max((a - b).abs());
        }
        prev = cur;
    }
    let deviation = prev.iter().zip(&anchor).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    TrialResult { deviation, max_step }
}

/// Monte Carlo check of the concentration bound and the per-step increment
/// bound. A trial violates when any coordinate has `|v̂_t - v̂_{t0}| ≥ bound`.
pub fn validate_theorem(
    stream: &StationaryStream,
    beta2: f64,
    t0: u64,
    t: u64,
    delta: f64,
    trials: u64,
    exec: Exec,
) -> Result<BoundReport> {
    stream.validate()?;
    check_beta2(beta2)?;
    let t0_min = min_precondition_step(beta2);
    if !(t0 as f64 > t0_min) {
        return Err(config(format!(
            "t0 = {t0} is too small: need t0 > {t0_min:.4}, i.e. t0 >= {}",
            first_integer_above(t0_min)
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(config(format!("δ must lie in (0, 1), got {delta}")));
    }
    if trials == 0 {
        return Err(config("at least one trial is required"));
    }
    let bound = azuma_bound(stream.g_max, beta2, t, t0, delta)?;
    let results = exec.map(trials as usize, |i| run_trial(stream, beta2, t0, t, i as u64));

    let violations = results.iter().filter(|r| r.deviation >= bound).count() as u64;
    let max_dev = results.iter().fold(0.0f64, |m, r| m.max(r.deviation));
    let max_step = results.iter().fold(0.0f64, |m, r| m.max(r.max_step));
    let step_bound = per_step_bound(stream.g_max, beta2);
    Ok(BoundReport {
        trials,
        violations,
        violation_rate: violations as f64 / trials as f64,
        bound_value: bound,
        max_observed_deviation: max_dev,
        per_step_bound: step_bound,
        max_per_step_change: max_step,
        per_step_bound_ok: max_step <= step_bound + PER_STEP_SLACK,
        beta2,
        g_max: stream.g_max,
        dim: stream.dim,
        t0,
        t,
        delta,
        t0_min_statement: t0_min,
        t0_min_proof: proof_precondition_step(beta2),
    })
}

/// Mean over trials and coordinates of the raw `v_t`.
pub fn mean_raw_variance(stream: &StationaryStream, beta2: f64, t: u64, trials: u64, exec: Exec) -> Result<f64> {
    stream.validate()?;
    check_beta2(beta2)?;
    if trials == 0 || t == 0 {
        return Err(config("need at least one trial and one step"));
    }
    let sums = exec.map(trials as usize, |i| {
        let mut rng = stream.trial_rng(i as u64);
        let mut sim = VarianceSim::new(beta2, stream.dim);
        for _ in 0..t {
            sim.step(stream, &mut rng);
        }
        sim.v().iter().sum::<f64>()
    });
    Ok(sums.iter().sum::<f64>() / (trials as f64 * stream.dim as f64))
}
