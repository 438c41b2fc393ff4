//! Scalar and vector proximal / projection primitives.

use crate::error::{BeaconError, Result};

const BISECTION_MAX_ITERS: usize = 200;

pub fn clip(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

/// `sign(u) * max(|u| - tau, 0)`, the proximal map of `tau * |.|`.
pub fn soft_threshold(u: f64, tau: f64) -> f64 {
    debug_assert!(tau >= 0.0);
    if u > tau {
        u - tau
    } else if u < -tau {
        u + tau
    } else {
        0.0
    }
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
///
/// Points already on the simplex (nonnegative, sum within 1e-12 per entry of 1)
/// are returned unchanged, which makes the map exactly idempotent.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "simplex projection of an empty vector");
    let k = v.len();
    let sum: f64 = v.iter().sum();
    if v.iter().all(|&x| x >= 0.0) && (sum - 1.0).abs() <= 1e-12 * k as f64 {
        return v.to_vec();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Box `[lo_i, hi_i]` intersected with the hyperplane `sum q_i = budget`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSumSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub budget: f64,
}

impl BoxSumSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, budget: f64) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(BeaconError::Dimension { expected: lo.len(), got: hi.len() });
        }
        let spec = Self { lo, hi, budget };
        spec.check_feasible()?;
        Ok(spec)
    }

    /// Same upper bound for every coordinate.
    pub fn with_scalar_hi(lo: Vec<f64>, hi: f64, budget: f64) -> Result<Self> {
        let hi = vec![hi; lo.len()];
        Self::new(lo, hi, budget)
    }

    pub fn check_feasible(&self) -> Result<()> {
        if let Some(i) = (0..self.lo.len()).find(|&i| self.lo[i] > self.hi[i]) {
            return Err(BeaconError::Infeasible(format!(
                "lo[{i}] = {} exceeds hi[{i}] = {}",
                self.lo[i], self.hi[i]
            )));
        }
        let lo_sum: f64 = self.lo.iter().sum();
        let hi_sum: f64 = self.hi.iter().sum();
        let slack = 1e-12 * self.budget.abs().max(1.0);
        if self.budget < lo_sum - slack || self.budget > hi_sum + slack {
            return Err(BeaconError::Infeasible(format!(
                "budget {} outside [{lo_sum}, {hi_sum}]",
                self.budget
            )));
        }
        Ok(())
    }

    fn shifted(&self, v: &[f64], mu: f64) -> Vec<f64> {
        v.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&x, (&l, &h))| clip(x - mu, l, h))
            .collect()
    }

    fn shifted_sum(&self, v: &[f64], mu: f64) -> f64 {
        v.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&x, (&l, &h))| clip(x - mu, l, h))
            .sum()
    }
}

/// Euclidean projection of `v` onto a box-and-sum set: `q_i = clip(v_i - mu, lo_i, hi_i)`
/// with `mu` found by bisection on the budget residual.
pub fn project_box_sum(v: &[f64], spec: &BoxSumSpec) -> Result<Vec<f64>> {
    if v.len() != spec.lo.len() {
        return Err(BeaconError::Dimension { expected: spec.lo.len(), got: v.len() });
    }
    spec.check_feasible()?;
    if v.is_empty() {
        return Ok(Vec::new());
    }
    // sum(mu) is nonincreasing; at `left` every coordinate sits at hi, at `right` at lo.
    let mut left = v.iter().zip(&spec.hi).map(|(&x, &h)| x - h).fold(f64::INFINITY, f64::min);
    let mut right = v.iter().zip(&spec.lo).map(|(&x, &l)| x - l).fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-8 * spec.budget.abs().max(1.0);
    let mut mu = 0.5 * (left + right);
    for _ in 0..BISECTION_MAX_ITERS {
        mu = 0.5 * (left + right);
        let residual = spec.shifted_sum(v, mu) - spec.budget;
        if residual.abs() <= tol {
            break;
        }
        if residual > 0.0 {
            left = mu;
        } else {
            right = mu;
        }
    }
    let q = spec.shifted(v, mu);
    Ok(polish(v, spec, q, mu))
}

/// Solves for the shift exactly on the free set found by bisection; keeps the
/// polished point only if it is consistent and closer to the budget.
fn polish(v: &[f64], spec: &BoxSumSpec, q: Vec<f64>, mu: f64) -> Vec<f64> {
    let mut free = 0usize;
    let mut acc = 0.0;
    for ((&vi, &lo), &hi) in v.iter().zip(&spec.lo).zip(&spec.hi) {
        let x = vi - mu;
        if x > lo && x < hi {
            free += 1;
            acc += vi;
        } else if x <= lo {
            acc += lo;
        } else {
            acc += hi;
        }
    }
    if free == 0 {
        return q;
    }
    let exact_mu = (acc - spec.budget) / free as f64;
    let candidate = spec.shifted(v, exact_mu);
    let r_old = (q.iter().sum::<f64>() - spec.budget).abs();
    let r_new = (candidate.iter().sum::<f64>() - spec.budget).abs();
    if r_new < r_old {
        candidate
    } else {
        q
    }
}

/// Minimizes a unimodal function on `[lo, hi]` by ternary search.
///
/// On ties the left third is kept, so on a flat minimizing interval the
/// result converges to its left end. Returns `(t_star, f(t_star))`.
pub fn ternary_search_min<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> f64,
{
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(BeaconError::InvalidArgument(format!("ternary search needs lo < hi, got [{lo}, {hi}]")));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(BeaconError::InvalidArgument("ternary search tolerance must be positive".into()));
    }
    let (mut a, mut b) = (lo, hi);
    // Each iteration keeps 2/3 of the bracket; the cap guards against tol below ulp.
    for _ in 0..400 {
        if b - a <= tol {
            break;
        }
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        if f(m1) <= f(m2) {
            b = m2;
        } else {
            a = m1;
        }
    }
    let t = 0.5 * (a + b);
    Ok((t, f(t)))
}
