//! Scenario sets, 1-norm Wasserstein ambiguity balls on a bounded scalar
//! support, and worst-case expectations of affine losses.
//!
//! The worst case has a closed form: an adversary moves probability mass
//! toward the support endpoint where the loss is largest, paying transport
//! distance against a budget of `radius`. A transportation LP over a
//! discretized support provides an independent check; its grid always
//! includes the empirical atoms, so for affine losses the LP value is
//! exact rather than merely convergent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{ConstraintOp, LpProblem, solve_lp};

#[derive(Debug, Error)]
pub enum DroError {
    #[error("scenario set must be nonempty")]
    Empty,
    #[error("probabilities must be nonnegative and sum to 1, got sum {sum}")]
    BadProbabilities { sum: f64 },
    #[error("sample {value} outside support [{lo}, {hi}]")]
    OutsideSupport { value: f64, lo: f64, hi: f64 },
    #[error("radius must be nonnegative, got {0}")]
    NegativeRadius(f64),
    #[error("transport LP failed: {0}")]
    Lp(#[from] crate::lp::LpError),
}

/// Discrete distribution of a scalar uncertain quantity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub samples: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ScenarioSet {
    pub fn uniform(samples: Vec<f64>) -> Result<Self, DroError> {
        if samples.is_empty() {
            return Err(DroError::Empty);
        }
        let p = 1.0 / samples.len() as f64;
        let probabilities = vec![p; samples.len()];
        Ok(Self { samples, probabilities })
    }

    pub fn weighted(samples: Vec<f64>, probabilities: Vec<f64>) -> Result<Self, DroError> {
        if samples.is_empty() || samples.len() != probabilities.len() {
            return Err(DroError::Empty);
        }
        let sum: f64 = probabilities.iter().sum();
        if probabilities.iter().any(|&p| p < -1e-12) || (sum - 1.0).abs() > 1e-9 {
            return Err(DroError::BadProbabilities { sum });
        }
        Ok(Self { samples, probabilities })
    }

    pub fn point_mass(x: f64) -> Self {
        Self { samples: vec![x], probabilities: vec![1.0] }
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().zip(&self.probabilities).map(|(x, p)| x * p).sum()
    }

    pub fn expectation(&self, loss: &AffineLoss) -> f64 {
        self.samples
            .iter()
            .zip(&self.probabilities)
            .map(|(&x, p)| loss.eval(x) * p)
            .sum()
    }

    /// Atoms sorted by location with zero-mass entries dropped and
    /// duplicates merged.
    fn normalized(&self) -> Vec<(f64, f64)> {
        let mut atoms: Vec<(f64, f64)> = self
            .samples
            .iter()
            .zip(&self.probabilities)
            .filter(|(_, &p)| p > 0.0)
            .map(|(&x, &p)| (x, p))
            .collect();
        atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (x, p) in atoms {
            match merged.last_mut() {
                Some((lx, lp)) if *lx == x => *lp += p,
                _ => merged.push((x, p)),
            }
        }
        merged
    }
}

/// Ambiguity ball of radius `radius` around an empirical center, with all
/// mass confined to `[support_lo, support_hi]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WassersteinBall {
    pub center: ScenarioSet,
    pub radius: f64,
    pub support_lo: f64,
    pub support_hi: f64,
}

impl WassersteinBall {
    pub fn new(center: ScenarioSet, radius: f64, support_lo: f64, support_hi: f64) -> Result<Self, DroError> {
        if radius < 0.0 {
            return Err(DroError::NegativeRadius(radius));
        }
        for &x in &center.samples {
            if x < support_lo - 1e-12 || x > support_hi + 1e-12 {
                return Err(DroError::OutsideSupport { value: x, lo: support_lo, hi: support_hi });
            }
        }
        Ok(Self { center, radius, support_lo, support_hi })
    }

    /// Radius as a fraction of the support width: `radius = lambda * u`
    /// with support `[0, u]`.
    pub fn from_coefficient(center: ScenarioSet, lambda: f64, u: f64) -> Result<Self, DroError> {
        Self::new(center, lambda * u, 0.0, u)
    }
}

/// `loss(x) = intercept + slope * x`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AffineLoss {
    pub intercept: f64,
    pub slope: f64,
}

impl AffineLoss {
    pub fn eval(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Exact 1-Wasserstein distance between two discrete distributions on the
/// line, via the coupling that pairs equal quantile slices in order.
pub fn wasserstein_1d(p: &ScenarioSet, q: &ScenarioSet) -> f64 {
    let pa = p.normalized();
    let qa = q.normalized();
    let mut dist = 0.0;
    let (mut i, mut j) = (0, 0);
    let (mut pi, mut qj) = (pa.first().map_or(0.0, |a| a.1), qa.first().map_or(0.0, |a| a.1));
    while i < pa.len() && j < qa.len() {
        let mass = pi.min(qj);
        dist += mass * (pa[i].0 - qa[j].0).abs();
        pi -= mass;
        qj -= mass;
        if pi <= 1e-15 {
            i += 1;
            pi = pa.get(i).map_or(0.0, |a| a.1);
        }
        if qj <= 1e-15 {
            j += 1;
            qj = qa.get(j).map_or(0.0, |a| a.1);
        }
    }
    dist
}

/// Supremum of `E[loss]` over the ball, with an explicit maximizing
/// distribution.
///
/// For an affine loss the optimum moves mass to the support endpoint in
/// the loss-increasing direction until the transport budget (or all the
/// mass) is spent:
/// `value = E_center[loss] + |slope| * min(radius, Σ p_i |x_i - x*|)`.
pub fn worst_case_expectation(loss: &AffineLoss, ball: &WassersteinBall) -> (f64, ScenarioSet) {
    let empirical = ball.center.expectation(loss);
    if ball.radius == 0.0 || loss.slope == 0.0 {
        return (empirical, ball.center.clone());
    }
    let target = if loss.slope > 0.0 { ball.support_hi } else { ball.support_lo };
    let mut budget = ball.radius;
    let mut samples = Vec::new();
    let mut probabilities = Vec::new();
    let mut moved_mass = 0.0;
    let mut spent = 0.0;
    for (&x, &p) in ball.center.samples.iter().zip(&ball.center.probabilities) {
        let d = (x - target).abs();
        if d <= 1e-15 || budget <= 0.0 {
            samples.push(x);
            probabilities.push(p);
            continue;
        }
        let full_cost = p * d;
        if full_cost <= budget {
            budget -= full_cost;
            spent += full_cost;
            moved_mass += p;
        } else {
            let frac = budget / d;
            spent += budget;
            budget = 0.0;
            moved_mass += frac;
            samples.push(x);
            probabilities.push(p - frac);
        }
    }
    if moved_mass > 0.0 {
        samples.push(target);
        probabilities.push(moved_mass);
    }
    let worst = ScenarioSet { samples, probabilities };
    (empirical + loss.slope.abs() * spent, worst)
}

/// Independent check of [`worst_case_expectation`] by direct optimization
/// over transport plans: maximize the expected loss of the pushed-forward
/// mass subject to marginal consistency and total transport cost within
/// the radius. The destination grid is `grid_points` equally spaced atoms
/// plus the empirical atoms themselves, so staying put costs nothing and
/// the LP is exact for affine losses.
pub fn transport_lp_oracle(loss: &AffineLoss, ball: &WassersteinBall, grid_points: usize) -> Result<f64, DroError> {
    assert!(grid_points >= 2);
    let mut grid: Vec<f64> = (0..grid_points)
        .map(|k| {
            ball.support_lo + (ball.support_hi - ball.support_lo) * k as f64 / (grid_points - 1) as f64
        })
        .collect();
    grid.extend(ball.center.samples.iter().copied());
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    let g = grid.len();
    let n = ball.center.samples.len();

    // Variables: plan[i][j], mass moved from atom i to grid point j.
    let mut objective = vec![0.0; n * g];
    for i in 0..n {
        for j in 0..g {
            objective[i * g + j] = -loss.eval(grid[j]);
        }
    }
    let mut p = LpProblem::new(objective);
    for i in 0..n {
        let mut row = vec![0.0; n * g];
        for j in 0..g {
            row[i * g + j] = 1.0;
        }
        p = p.row(row, ConstraintOp::Eq, ball.center.probabilities[i]);
    }
    let mut cost_row = vec![0.0; n * g];
    for i in 0..n {
        for j in 0..g {
            cost_row[i * g + j] = (ball.center.samples[i] - grid[j]).abs();
        }
    }
    p = p.row(cost_row, ConstraintOp::Le, ball.radius);
    let sol = solve_lp(&p)?;
    Ok(-sol.objective)
}

/// Worst-case expected deviation cost summed over a schedule: per step,
/// the adversary prices `cost_pv * (schedule_t - xi) * dt` over its own
/// independent ball.
pub fn s2_term(cost_pv: f64, schedule_kw: &[f64], balls: &[WassersteinBall], dt_h: f64) -> f64 {
    assert_eq!(schedule_kw.len(), balls.len());
    schedule_kw
        .iter()
        .zip(balls)
        .map(|(&sched, ball)| {
            let loss = AffineLoss { intercept: cost_pv * sched * dt_h, slope: -cost_pv * dt_h };
            worst_case_expectation(&loss, ball).0
        })
        .sum()
}
