//! Brute-force reference solvers used to check the fast paths.
//!
//! Everything here minimizes by coarse-to-fine grid search over the constraint
//! set and shares no code with `proximal` or `weights`. It is slow and only
//! meant for small instances (at most six coordinates).

use rand::Rng;

use crate::config::{seed_rng, Estimator, HyperParams};
use crate::error::{BeaconError, Result};
use crate::proximal::{project_box_sum, project_simplex, BoxSumSpec};
use crate::types::{DiscrepancyScores, WeightState};
use crate::weights::q_solve_convex;

const GRID_POINTS: usize = 11;
const INFEASIBLE_PENALTY: f64 = 1e6;
const MAX_DIM: usize = 6;
const MAX_LEVELS: usize = 400;

/// Minimizes `f` over `{lo <= q <= hi, sum q = budget}` to a grid spacing below `tol`.
pub fn grid_minimize_box_sum<F>(f: F, lo: &[f64], hi: &[f64], budget: f64, tol: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let n = lo.len();
    if n == 0 || n > MAX_DIM || hi.len() != n {
        return Err(BeaconError::InvalidArgument(format!("grid oracle supports 1..={MAX_DIM} coordinates")));
    }
    if n == 1 {
        return Ok(vec![budget]);
    }
    let lo_sum: f64 = lo.iter().sum();
    let span: f64 = lo.iter().zip(hi).map(|(l, h)| h - l).sum();
    let t = if span > 0.0 { ((budget - lo_sum) / span).clamp(0.0, 1.0) } else { 0.0 };
    // feasible start with slack in every coordinate
    let mut best_q: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| l + t * (h - l)).collect();
    let mut best_val = f(&best_q);

    // Isotropic lattice around the incumbent, clamped to the box. Equal steps
    // keep sum-preserving moves (+h on one coordinate, -h on another) on the lattice.
    // The coordinate with the most slack absorbs the sum constraint, re-chosen every level
    // so a coordinate resting on a bound never blocks moves between the others.
    let half = (GRID_POINTS / 2) as i64;
    let mut h = lo.iter().zip(hi).map(|(l, h)| h - l).fold(0.0, f64::max) / half as f64;
    for _ in 0..MAX_LEVELS {
        let slack = |i: usize| (best_q[i] - lo[i]).min(hi[i] - best_q[i]);
        let dep = (0..n).max_by(|&a, &b| slack(a).total_cmp(&slack(b))).unwrap_or(0);
        let free: Vec<usize> = (0..n).filter(|&i| i != dep).collect();
        let center: Vec<f64> = free.iter().map(|&i| best_q[i]).collect();
        let mut best_edge = false;
        let mut offsets = vec![-half; free.len()];
        let mut q = vec![0.0; n];
        loop {
            let mut clamped_any = false;
            for (k, &i) in free.iter().enumerate() {
                let raw = center[k] + h * offsets[k] as f64;
                q[i] = raw.clamp(lo[i], hi[i]);
                clamped_any |= q[i] != raw;
            }
            q[dep] = budget - free.iter().map(|&i| q[i]).sum::<f64>();
            let violation = (lo[dep] - q[dep]).max(0.0) + (q[dep] - hi[dep]).max(0.0);
            let val = f(&q) + INFEASIBLE_PENALTY * violation;
            if val < best_val {
                best_val = val;
                best_q.copy_from_slice(&q);
                best_edge = !clamped_any && offsets.iter().any(|o| o.abs() == half);
            }
            // odometer increment
            let mut k = 0;
            while k < offsets.len() {
                offsets[k] += 1;
                if offsets[k] <= half {
                    break;
                }
                offsets[k] = -half;
                k += 1;
            }
            if k == offsets.len() {
                break;
            }
        }
        if !best_edge {
            if h <= tol {
                break;
            }
            h *= 0.4;
        }
    }
    Ok(best_q)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn oracle_project_box_sum(v: &[f64], lo: &[f64], hi: &[f64], budget: f64, tol: f64) -> Result<Vec<f64>> {
    grid_minimize_box_sum(|q| sq_dist(q, v), lo, hi, budget, tol)
}

pub fn oracle_project_simplex(v: &[f64], tol: f64) -> Result<Vec<f64>> {
    let n = v.len();
    oracle_project_box_sum(v, &vec![0.0; n], &vec![1.0; n], 1.0, tol)
}

/// Weight-subproblem objective with the learner held fixed; `capacity` is `gamma R(theta)`.
pub fn q_objective(q: &[f64], linear: &[f64], p0: &[f64], capacity: f64, lambda1: f64, lambda2: f64) -> f64 {
    let max_q = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = capacity * max_q;
    for i in 0..q.len() {
        total += q[i] * linear[i] + lambda1 * (q[i] - p0[i]).abs() + lambda2 * q[i] * q[i];
    }
    total
}

/// Grid minimizer of the weight subproblem.
pub fn oracle_q_solve(
    state: &WeightState,
    linear: &[f64],
    capacity: f64,
    lambda1: f64,
    lambda2: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    let hi = vec![state.hi; state.q.len()];
    grid_minimize_box_sum(
        |q| q_objective(q, linear, &state.p0, capacity, lambda1, lambda2),
        &state.lo,
        &hi,
        state.budget,
        tol,
    )
}

/// Largest L-infinity gaps between the fast solvers and the grid oracles.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProjectionCheck {
    pub instances: usize,
    pub box_sum: f64,
    pub simplex: f64,
    pub q_solve: f64,
}

impl ProjectionCheck {
    pub fn max_error(&self) -> f64 {
        self.box_sum.max(self.simplex).max(self.q_solve)
    }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A random well-conditioned weight-subproblem instance with at most `max_len` entries.
pub fn random_q_instance<R: Rng + ?Sized>(
    rng: &mut R,
    max_len: usize,
) -> (WeightState, Vec<f64>, DiscrepancyScores, HyperParams, f64) {
    let n = rng.random_range(1..=max_len.clamp(1, 3));
    let m = rng.random_range(1..=(max_len - n).max(1)).min(max_len - n);
    let hp = HyperParams {
        lambda1: rng.random_range(0.0..0.05),
        lambda2: rng.random_range(0.05..0.5),
        lambda_d: rng.random_range(0.0..1.0),
        gamma: rng.random_range(0.0..0.5),
        alpha: rng.random_range(0.1..1.0),
        q_max: rng.random_range(1.0..3.0),
        q_t_min: rng.random_range(0.0..0.1),
        ..HyperParams::default()
    };
    let state = WeightState::initial(m, n, &hp);
    let losses: Vec<f64> = (0..m + n).map(|_| rng.random_range(0.0..1.0)).collect();
    let d = DiscrepancyScores {
        d: (0..m).map(|_| rng.random_range(0.0..2.0)).collect(),
        ..DiscrepancyScores::zeros(m, Estimator::Knn)
    };
    let r_theta = rng.random_range(0.0..1.0);
    (state, losses, d, hp, r_theta)
}

/// Compares the fast solvers to the grid oracles on `instances` random problems.
pub fn check_projections(instances: usize, seed: u64, tol: f64) -> Result<ProjectionCheck> {
    let mut rng = seed_rng(seed);
    let mut out = ProjectionCheck { instances, ..ProjectionCheck::default() };
    for _ in 0..instances {
        let len = rng.random_range(2..=5);
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lo: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..0.3)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.5..2.0)).collect();
        let lo_sum: f64 = lo.iter().sum();
        let hi_sum: f64 = hi.iter().sum();
        let budget = lo_sum + rng.random_range(0.05..0.95) * (hi_sum - lo_sum);
        let fast = project_box_sum(&v, &BoxSumSpec::new(lo.clone(), hi.clone(), budget)?)?;
        let slow = oracle_project_box_sum(&v, &lo, &hi, budget, tol)?;
        out.box_sum = out.box_sum.max(linf(&fast, &slow));

        let fast = project_simplex(&v);
        let slow = oracle_project_simplex(&v, tol)?;
        out.simplex = out.simplex.max(linf(&fast, &slow));

        let (state, losses, d, hp, r_theta) = random_q_instance(&mut rng, 5);
        let fast = q_solve_convex(&state, &losses, &d, &hp, r_theta)?;
        let linear: Vec<f64> = (0..losses.len()).map(|i| losses[i] + hp.lambda_d * d.get(i)).collect();
        let slow = oracle_q_solve(&state, &linear, hp.gamma * r_theta, hp.lambda1, hp.lambda2, tol)?;
        out.q_solve = out.q_solve.max(linf(&fast.weights.q, &slow));
    }
    Ok(out)
}
