//! Numerical checks of the NSF-versus-softmax flattening bounds.
//!
//! Score vectors are laid out canonically: indices `0..h` are the high
//! set, the next `ℓ` indices are the low set, the rest are free middles.
//! Highs lie in `[τ, τ + γ]`, lows are at most `−τ`, middles are unconstrained.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{nsf_slice, softmax_slice, ScoreVector};
use crate::error::{AsmilError, Result};

/// Stand-in for `−∞` in worst-case constructions; `e^{−20}` is below every
/// tolerance used here.
pub const WORST_CASE_FLOOR: f64 = -20.0;
/// Relative slack allowed when comparing observed values with bounds.
const BOUND_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSetSpec {
    pub tau: f64,
    pub gamma: f64,
    pub high: usize,
    pub low: usize,
    pub n_mid: usize,
}

impl ScoreSetSpec {
    pub fn new(tau: f64, gamma: f64, high: usize, low: usize, n_mid: usize) -> Result<Self> {
        let spec = Self {
            tau,
            gamma,
            high,
            low,
            n_mid,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(AsmilError::domain(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(AsmilError::domain(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        if self.high == 0 || self.low == 0 {
            return Err(AsmilError::domain(
                "need at least one high and one low index",
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.high + self.low + self.n_mid
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn highs(&self) -> std::ops::Range<usize> {
        0..self.high
    }

    pub fn lows(&self) -> std::ops::Range<usize> {
        self.high..self.high + self.low
    }

    /// Checks that `z` belongs to the score set.
    pub fn check_membership(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.len() {
            return Err(AsmilError::contract(format!(
                "score vector of length {}, set expects {}",
                z.len(),
                self.len()
            )));
        }
        for i in self.highs() {
            if z[i] < self.tau || z[i] > self.tau + self.gamma {
                return Err(AsmilError::contract(format!(
                    "high entry {i} = {} outside [{}, {}]",
                    z[i],
                    self.tau,
                    self.tau + self.gamma
                )));
            }
        }
        for j in self.lows() {
            if z[j] > -self.tau {
                return Err(AsmilError::contract(format!(
                    "low entry {j} = {} above {}",
                    z[j], -self.tau
                )));
            }
        }
        Ok(())
    }
}

/// Highs uniform in `[τ, τ+γ]`, lows uniform in `[−τ−5, −τ]`, middles
/// uniform in `(−τ, τ)`.
pub fn sample_score_set(spec: &ScoreSetSpec, rng: &mut impl Rng) -> Result<ScoreVector> {
    spec.validate()?;
    let tau = spec.tau;
    let mut z = Vec::with_capacity(spec.len());
    for _ in 0..spec.high {
        z.push(tau + spec.gamma * rng.random::<f64>());
    }
    for _ in 0..spec.low {
        z.push(-tau - 5.0 * rng.random::<f64>());
    }
    for _ in 0..spec.n_mid {
        let mut v = rng.random_range(-tau..tau);
        while v == -tau {
            v = rng.random_range(-tau..tau);
        }
        z.push(v);
    }
    ScoreVector::new(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsfBoundReport {
    /// Largest `α_i / α_h'` over pairs of high indices.
    pub max_high_ratio: f64,
    /// `(1 + e^{−τ}) / (1 + e^{−(τ+γ)})`.
    pub ratio_bound: f64,
    /// `1 + e^{−τ}`.
    pub ratio_bound_loose: f64,
    pub max_low_weight: f64,
    /// `e^{−τ} / h`.
    pub low_bound: f64,
    pub ratio_slack: f64,
    pub low_slack: f64,
    pub holds: bool,
}

pub fn nsf_ratio_bound(tau: f64, gamma: f64) -> f64 {
    (1.0 + (-tau).exp()) / (1.0 + (-(tau + gamma)).exp())
}

pub fn nsf_low_bound(tau: f64, h: usize) -> f64 {
    (-tau).exp() / h as f64
}

pub fn check_nsf_bounds(z: &ScoreVector, spec: &ScoreSetSpec) -> Result<NsfBoundReport> {
    spec.validate()?;
    spec.check_membership(z.as_slice())?;
    let alpha = nsf_slice(z.as_slice());
    let highs = &alpha[spec.highs()];
    let hi_max = highs.iter().copied().fold(f64::MIN, f64::max);
    let hi_min = highs.iter().copied().fold(f64::MAX, f64::min);
    let max_high_ratio = hi_max / hi_min;
    let max_low_weight = alpha[spec.lows()].iter().copied().fold(0.0, f64::max);
    let ratio_bound = nsf_ratio_bound(spec.tau, spec.gamma);
    let ratio_bound_loose = 1.0 + (-spec.tau).exp();
    let low_bound = nsf_low_bound(spec.tau, spec.high);
    let holds = max_high_ratio <= ratio_bound * (1.0 + BOUND_SLACK)
        && ratio_bound <= ratio_bound_loose * (1.0 + BOUND_SLACK)
        && max_low_weight <= low_bound * (1.0 + BOUND_SLACK);
    Ok(NsfBoundReport {
        max_high_ratio,
        ratio_bound,
        ratio_bound_loose,
        max_low_weight,
        low_bound,
        ratio_slack: ratio_bound - max_high_ratio,
        low_slack: low_bound - max_low_weight,
        holds,
    })
}

/// Summary of a sampling sweep over one score set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSweep {
    pub spec: ScoreSetSpec,
    pub samples: usize,
    pub violations: usize,
    pub max_high_ratio: f64,
    pub ratio_bound: f64,
    pub max_low_weight: f64,
    pub low_bound: f64,
}

pub fn sweep_nsf_bounds(
    spec: &ScoreSetSpec,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<BoundSweep> {
    let mut sweep = BoundSweep {
        spec: *spec,
        samples,
        violations: 0,
        max_high_ratio: 1.0,
        ratio_bound: nsf_ratio_bound(spec.tau, spec.gamma),
        max_low_weight: 0.0,
        low_bound: nsf_low_bound(spec.tau, spec.high),
    };
    for _ in 0..samples {
        let z = sample_score_set(spec, rng)?;
        let r = check_nsf_bounds(&z, spec)?;
        if !r.holds {
            sweep.violations += 1;
        }
        sweep.max_high_ratio = sweep.max_high_ratio.max(r.max_high_ratio);
        sweep.max_low_weight = sweep.max_low_weight.max(r.max_low_weight);
    }
    Ok(sweep)
}

/// `1 / (h·e^{2τ/T} + 1)`, the largest softmax weight a low index can get.
pub fn softmax_low_supremum(tau: f64, temperature: f64, h: usize) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(AsmilError::domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if h == 0 {
        return Err(AsmilError::domain("need at least one high index"));
    }
    Ok(1.0 / (h as f64 * (2.0 * tau / temperature).exp() + 1.0))
}

/// The score vector that maximizes the weight of the first low index:
/// highs at `τ`, that low at `−τ`, everything else at [`WORST_CASE_FLOOR`].
pub fn suppression_worst_case(spec: &ScoreSetSpec) -> Vec<f64> {
    worst_case_with_floor(spec, WORST_CASE_FLOOR)
}

/// The score vector with the widest spread among highs: one at `τ + γ`,
/// the others at `τ`.
pub fn equalization_worst_case(spec: &ScoreSetSpec) -> Vec<f64> {
    let mut z = suppression_worst_case(spec);
    z[0] = spec.tau + spec.gamma;
    z
}

/// Gap below `−τ`, in units of `T`, for the remaining entries of a
/// temperature-specific worst case. `e^{−40}` keeps their weight below 1e-17.
const FLOOR_MARGIN: f64 = 40.0;

/// [`suppression_worst_case`] with the floor pushed far enough down that
/// the remaining entries carry no weight at temperature `t`.
pub fn suppression_worst_case_at(spec: &ScoreSetSpec, t: f64) -> Vec<f64> {
    worst_case_with_floor(spec, WORST_CASE_FLOOR.min(-spec.tau - FLOOR_MARGIN * t))
}

pub fn equalization_worst_case_at(spec: &ScoreSetSpec, t: f64) -> Vec<f64> {
    let mut z = suppression_worst_case_at(spec, t);
    z[0] = spec.tau + spec.gamma;
    z
}

fn worst_case_with_floor(spec: &ScoreSetSpec, floor: f64) -> Vec<f64> {
    let mut z = vec![floor; spec.len()];
    for i in spec.highs() {
        z[i] = spec.tau;
    }
    z[spec.high] = -spec.tau;
    z
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityTargets {
    pub epsilon: f64,
    pub kappa: f64,
}

impl FeasibilityTargets {
    pub fn new(epsilon: f64, kappa: f64) -> Result<Self> {
        let t = Self { epsilon, kappa };
        t.validate()?;
        Ok(t)
    }

    /// The suppression and equalization levels NSF reaches on the set.
    pub fn nsf_achieved(spec: &ScoreSetSpec) -> Self {
        Self {
            epsilon: nsf_low_bound(spec.tau, spec.high),
            kappa: nsf_ratio_bound(spec.tau, spec.gamma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(AsmilError::domain(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.kappa > 1.0) {
            return Err(AsmilError::domain(format!(
                "kappa must exceed 1, got {}",
                self.kappa
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub temperature: f64,
    /// Low weight on the suppression worst case.
    pub low_weight: f64,
    /// High/high ratio on the equalization worst case.
    pub high_ratio: f64,
    pub suppression_ok: bool,
    pub equalization_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub targets: FeasibilityTargets,
    /// `γ / log κ`, or 0 when no two highs can differ.
    pub t_min: f64,
    /// `2τ / log(h/ε)`.
    pub t_max_loose: f64,
    /// `2τ / (log(1/ε − 1) − log h)`, infinite if the denominator is not positive.
    pub t_max_sharp: f64,
    pub feasible_loose: bool,
    /// Verdict from the sharper bound.
    pub feasible: bool,
    pub grid: Vec<GridPoint>,
    pub grid_feasible: usize,
    /// For infeasible targets, one vector on which every grid temperature
    /// misses a target, if such a vector is among the per-temperature
    /// worst cases.
    pub witness: Option<Vec<f64>>,
}

/// 64 log-spaced temperatures in `[1e-3, 1e3]`.
pub fn temperature_grid() -> Vec<f64> {
    (0..64)
        .map(|k| 10f64.powf(-3.0 + 6.0 * k as f64 / 63.0))
        .collect()
}

fn max_ratio(alpha: &[f64]) -> f64 {
    let hi = alpha.iter().copied().fold(f64::MIN, f64::max);
    let lo = alpha.iter().copied().fold(f64::MAX, f64::min);
    hi / lo
}

/// Largest low weight and high/high ratio of `softmax(z / t)`.
fn softmax_stats(z: &[f64], spec: &ScoreSetSpec, t: f64) -> (f64, f64) {
    let alpha = softmax_slice(z, t);
    let low = alpha[spec.lows()].iter().copied().fold(0.0, f64::max);
    (low, max_ratio(&alpha[spec.highs()]))
}

pub fn temperature_feasibility(
    spec: &ScoreSetSpec,
    targets: &FeasibilityTargets,
) -> Result<FeasibilityReport> {
    spec.validate()?;
    targets.validate()?;
    let h = spec.high as f64;
    let (tau, eps, kappa) = (spec.tau, targets.epsilon, targets.kappa);
    let loose_den = (h / eps).ln();
    if !(loose_den > 0.0) {
        return Err(AsmilError::domain(format!(
            "log(h/epsilon) = {loose_den} is not positive"
        )));
    }
    let t_min = if spec.high < 2 || spec.gamma == 0.0 {
        0.0
    } else {
        spec.gamma / kappa.ln()
    };
    let t_max_loose = 2.0 * tau / loose_den;
    let sharp_den = (1.0 / eps - 1.0).ln() - h.ln();
    let t_max_sharp = if sharp_den > 0.0 {
        2.0 * tau / sharp_den
    } else {
        f64::INFINITY
    };
    let grids = temperature_grid();
    let misses = |z: &[f64], t: f64| {
        let (low, ratio) = softmax_stats(z, spec, t);
        low > eps || ratio > kappa
    };
    let grid: Vec<GridPoint> = grids
        .iter()
        .map(|&t| {
            let (low_weight, _) = softmax_stats(&suppression_worst_case_at(spec, t), spec, t);
            let (_, high_ratio) = softmax_stats(&equalization_worst_case_at(spec, t), spec, t);
            GridPoint {
                temperature: t,
                low_weight,
                high_ratio,
                suppression_ok: low_weight <= eps,
                equalization_ok: high_ratio <= kappa,
            }
        })
        .collect();
    let grid_feasible = grid
        .iter()
        .filter(|p| p.suppression_ok && p.equalization_ok)
        .count();
    let feasible = t_min <= t_max_sharp;
    let witness = if feasible {
        None
    } else {
        // Both worst cases at once: the spread highs make equalization
        // demand a large T, the low at −τ then takes too much mass.
        grids
            .iter()
            .map(|&t| equalization_worst_case_at(spec, t))
            .find(|z| grids.iter().all(|&t| misses(z, t)))
    };
    Ok(FeasibilityReport {
        targets: *targets,
        t_min,
        t_max_loose,
        t_max_sharp,
        feasible_loose: t_min <= t_max_loose,
        feasible,
        grid,
        grid_feasible,
        witness,
    })
}
