//! Weight updates for the q-phase.
//!
//! Two solvers for the per-sample weights at fixed learner parameters:
//! the stochastic projected-subgradient sweep and a closed-form convex solve
//! (soft-threshold per coordinate, bisection on the sum multiplier, ternary
//! search on the max-weight bound). The multi-source factorization
//! `q_i = w_{s(i)} * q~_i` adds a simplex-constrained domain weight vector.

use serde::{Deserialize, Serialize};

use crate::config::HyperParams;
use crate::error::{BeaconError, Result};
use crate::proximal::{clip, project_box_sum, project_simplex, soft_threshold, ternary_search_min, BoxSumSpec};
use crate::types::{DiscrepancyScores, WeightState};

/// Two weights within this distance of the maximum share the capacity subgradient.
pub const ARGMAX_TIE_TOL: f64 = 1e-12;
/// Domain weights below this are treated as zero when dividing back out.
pub const DOMAIN_WEIGHT_EPS: f64 = 1e-8;

const MULTIPLIER_MAX_ITERS: usize = 200;
const OUTER_TOL: f64 = 1e-12;

/// `sign` with `sign(0) = 0`.
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Indices attaining `max_j q_j` up to [`ARGMAX_TIE_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct ArgmaxSet {
    indices: Vec<usize>,
}

impl ArgmaxSet {
    pub fn of(q: &[f64]) -> Self {
        let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let indices = (0..q.len()).filter(|&i| q[i] >= max - ARGMAX_TIE_TOL).collect();
        Self { indices }
    }

    pub fn from_indices(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { indices }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-sample subgradient of the weight objective:
/// `loss + lambda_d d + gamma R [i in argmax]/|argmax| + lambda1 sign(q_i - p0_i) + 2 lambda2 q_i`.
#[allow(clippy::too_many_arguments)]
pub fn q_subgradient(
    i: usize,
    loss_i: f64,
    d_i: f64,
    q: &WeightState,
    hp: &HyperParams,
    r_theta: f64,
    argmax: &ArgmaxSet,
) -> f64 {
    subgradient_at(q.q[i], q.p0[i], i, loss_i, d_i, hp, r_theta, argmax)
}

#[allow(clippy::too_many_arguments)]
fn subgradient_at(
    qi: f64,
    p0i: f64,
    i: usize,
    loss_i: f64,
    d_i: f64,
    hp: &HyperParams,
    r_theta: f64,
    argmax: &ArgmaxSet,
) -> f64 {
    let capacity = if argmax.contains(i) { hp.gamma * r_theta / argmax.len() as f64 } else { 0.0 };
    loss_i + hp.lambda_d * d_i + capacity + hp.lambda1 * sign0(qi - p0i) + 2.0 * hp.lambda2 * qi
}

/// Sequential sweep over `order` in minibatches of `batch_size`, stepping on
/// `work` where the effective weight is `scale_i * work_i`.
///
/// Coordinates whose scale is below [`DOMAIN_WEIGHT_EPS`] are left unchanged.
/// With unit scales this is the single-source sweep on `q` itself.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scaled_sweep(
    work: &mut [f64],
    scale: &[f64],
    step: &[f64],
    state: &WeightState,
    losses: &[f64],
    d: &DiscrepancyScores,
    hp: &HyperParams,
    r_theta: f64,
    order: &[usize],
    batch_size: usize,
) {
    let mut composite: Vec<f64> = work.iter().zip(scale).map(|(a, s)| s * a).collect();
    for batch in order.chunks(batch_size.max(1)) {
        let argmax = ArgmaxSet::of(&composite);
        for &i in batch {
            let s = scale[i];
            if s < DOMAIN_WEIGHT_EPS {
                continue;
            }
            let g = subgradient_at(composite[i], state.p0[i], i, losses[i], d.get(i), hp, r_theta, &argmax);
            work[i] = clip(work[i] - step[i] * s * g, state.lo[i] / s, state.hi / s);
            composite[i] = s * work[i];
        }
    }
}

fn box_sum_spec(state: &WeightState) -> Result<BoxSumSpec> {
    BoxSumSpec::with_scalar_hi(state.lo.clone(), state.hi, state.budget)
}

/// Projects `state.q` onto its box-and-sum set.
pub fn project_weights(state: &WeightState) -> Result<WeightState> {
    let spec = box_sum_spec(state)?;
    let q = project_box_sum(&state.q, &spec)?;
    Ok(WeightState { q, ..state.clone() })
}

/// One stochastic sweep in the given sample order followed by a single global projection.
#[allow(clippy::too_many_arguments)]
pub fn q_sweep_ordered(
    state: &WeightState,
    losses: &[f64],
    d: &DiscrepancyScores,
    hp: &HyperParams,
    r_theta: f64,
    order: &[usize],
    batch_size: usize,
) -> Result<WeightState> {
    let len = state.q.len();
    if losses.len() != len {
        return Err(BeaconError::Dimension { expected: len, got: losses.len() });
    }
    state.check_feasible()?;
    let mut q = state.q.clone();
    let scale = vec![1.0; len];
    let step = vec![hp.eta_q; len];
    scaled_sweep(&mut q, &scale, &step, state, losses, d, hp, r_theta, order, batch_size);
    project_weights(&WeightState { q, ..state.clone() })
}

/// [`q_sweep_ordered`] over a fresh shuffle drawn from `rng`.
pub fn q_sweep_stochastic<R: rand::Rng + ?Sized>(
    state: &WeightState,
    losses: &[f64],
    d: &DiscrepancyScores,
    hp: &HyperParams,
    r_theta: f64,
    rng: &mut R,
) -> Result<WeightState> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..state.q.len()).collect();
    order.shuffle(rng);
    q_sweep_ordered(state, losses, d, hp, r_theta, &order, hp.batch_size)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexSolution {
    pub weights: WeightState,
    /// Bound on the largest weight chosen by the outer search.
    pub t_star: f64,
    /// Multiplier of the sum constraint.
    pub nu: f64,
    /// Outer objective `inner(t*) + gamma R t*`.
    pub objective: f64,
}

struct InnerProblem<'a> {
    state: &'a WeightState,
    /// `-(loss_i + lambda_d d_i) / (2 lambda2)`
    z: Vec<f64>,
    /// `loss_i + lambda_d d_i`
    linear: Vec<f64>,
    hp: &'a HyperParams,
}

impl InnerProblem<'_> {
    fn weights(&self, t: f64, nu: f64) -> Vec<f64> {
        let two_l2 = 2.0 * self.hp.lambda2;
        let tau = self.hp.lambda1 / two_l2;
        let shift = nu / two_l2;
        (0..self.z.len())
            .map(|i| {
                let p0 = self.state.p0[i];
                clip(p0 + soft_threshold(self.z[i] + shift - p0, tau), self.state.lo[i], t)
            })
            .collect()
    }

    fn value(&self, q: &[f64]) -> f64 {
        q.iter()
            .enumerate()
            .map(|(i, &qi)| {
                qi * self.linear[i]
                    + self.hp.lambda1 * (qi - self.state.p0[i]).abs()
                    + self.hp.lambda2 * qi * qi
            })
            .sum()
    }

    /// Bisection on the multiplier so the weights at bound `t` sum to the budget.
    fn solve_at(&self, t: f64) -> (Vec<f64>, f64) {
        let budget = self.state.budget;
        let total = |nu: f64| self.weights(t, nu).iter().sum::<f64>();
        let (mut lo, mut hi) = (-1.0, 1.0);
        for _ in 0..2000 {
            if total(lo) <= budget {
                break;
            }
            lo *= 2.0;
        }
        for _ in 0..2000 {
            if total(hi) >= budget {
                break;
            }
            hi *= 2.0;
        }
        let tol = 1e-13 * budget.abs().max(1.0);
        let mut nu = 0.5 * (lo + hi);
        for _ in 0..MULTIPLIER_MAX_ITERS {
            nu = 0.5 * (lo + hi);
            if nu <= lo || nu >= hi {
                break;
            }
            let r = total(nu) - budget;
            if r.abs() <= tol {
                break;
            }
            if r > 0.0 {
                hi = nu;
            } else {
                lo = nu;
            }
        }
        (self.weights(t, nu), nu)
    }
}

/// Closed-form solve of the weight subproblem at a fixed bound `t` on the largest weight.
pub fn q_solve_at_bound(
    template: &WeightState,
    losses: &[f64],
    d: &DiscrepancyScores,
    hp: &HyperParams,
    t: f64,
) -> Result<(WeightState, f64)> {
    let problem = inner_problem(template, losses, d, hp)?;
    if t * (template.q.len() as f64) < template.budget || template.lo.iter().any(|&l| l > t) {
        return Err(BeaconError::Infeasible(format!("bound t = {t} cannot hold the budget")));
    }
    let (q, nu) = problem.solve_at(t);
    Ok((WeightState { q, ..template.clone() }, nu))
}

fn inner_problem<'a>(
    template: &'a WeightState,
    losses: &[f64],
    d: &DiscrepancyScores,
    hp: &'a HyperParams,
) -> Result<InnerProblem<'a>> {
    if hp.lambda2 <= 0.0 {
        return Err(BeaconError::ZeroLambda2);
    }
    let len = template.q.len();
    if losses.len() != len {
        return Err(BeaconError::Dimension { expected: len, got: losses.len() });
    }
    template.check_feasible()?;
    let linear: Vec<f64> = (0..len).map(|i| losses[i] + hp.lambda_d * d.get(i)).collect();
    let z = linear.iter().map(|c| -c / (2.0 * hp.lambda2)).collect();
    Ok(InnerProblem { state: template, z, linear, hp })
}

/// Exact minimizer of the weight subproblem at fixed learner parameters,
/// including the `gamma R max_i q_i` capacity term.
pub fn q_solve_convex(
    template: &WeightState,
    losses: &[f64],
    d: &DiscrepancyScores,
    hp: &HyperParams,
    r_theta: f64,
) -> Result<ConvexSolution> {
    let problem = inner_problem(template, losses, d, hp)?;
    let len = template.q.len() as f64;
    let max_lo = template.lo.iter().copied().fold(0.0, f64::max);
    let t_lo = (template.budget / len).max(max_lo);
    let t_hi = template.hi;
    let outer = |t: f64| {
        let (q, _) = problem.solve_at(t);
        problem.value(&q) + hp.gamma * r_theta * t
    };
    let t_star = if t_hi - t_lo > OUTER_TOL {
        ternary_search_min(outer, t_lo, t_hi, OUTER_TOL)?.0
    } else {
        t_hi
    };
    let (q, nu) = problem.solve_at(t_star);
    let objective = problem.value(&q) + hp.gamma * r_theta * t_star;
    Ok(ConvexSolution { weights: WeightState { q, ..template.clone() }, t_star, nu, objective })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainWeights {
    pub w: Vec<f64>,
    pub w0: Vec<f64>,
    /// Domain index `s(i)` of each source sample.
    pub assignment: Vec<usize>,
}

impl DomainWeights {
    /// Uniform `w = w0 = 1/K`.
    pub fn uniform(num_domains: usize, assignment: Vec<usize>) -> Self {
        let w = vec![1.0 / num_domains as f64; num_domains];
        Self { w0: w.clone(), w, assignment }
    }

    pub fn num_domains(&self) -> usize {
        self.w.len()
    }

    /// `w_{s(i)}` for source samples and 1 for targets, over `len` samples.
    pub fn scale_vector(&self, len: usize) -> Vec<f64> {
        (0..len)
            .map(|i| self.assignment.get(i).map_or(1.0, |&k| self.w[k]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeWeights {
    /// Within-domain weights; target entries are the target weights themselves.
    pub q_tilde: Vec<f64>,
    pub w: DomainWeights,
}

/// Gradient of the multi-source objective in `w`, capacity term excluded.
pub fn w_gradient(
    dw: &DomainWeights,
    q_tilde: &[f64],
    losses: &[f64],
    d: &DiscrepancyScores,
    p0: &[f64],
    hp: &HyperParams,
) -> Vec<f64> {
    let mut grad: Vec<f64> = (0..dw.num_domains())
        .map(|k| hp.rho1 * sign0(dw.w[k] - dw.w0[k]) + 2.0 * hp.rho2 * dw.w[k])
        .collect();
    for (i, &k) in dw.assignment.iter().enumerate() {
        let wk = dw.w[k];
        let qt = q_tilde[i];
        grad[k] += qt * (losses[i] + hp.lambda_d * d.get(i))
            + 2.0 * hp.lambda2 * wk * qt * qt
            + hp.lambda1 * qt * sign0(wk * qt - p0[i]);
    }
    grad
}

/// Projected gradient step on the simplex.
pub fn w_step(dw: &DomainWeights, grad: &[f64], eta_w: f64) -> DomainWeights {
    let moved: Vec<f64> = dw.w.iter().zip(grad).map(|(w, g)| w - eta_w * g).collect();
    DomainWeights { w: project_simplex(&moved), ..dw.clone() }
}

/// Composite weights `q_i = w_{s(i)} q~_i` on sources, `q~_j` on targets.
pub fn compose_weights(cw: &CompositeWeights, template: &WeightState) -> WeightState {
    let scale = cw.w.scale_vector(cw.q_tilde.len());
    let q = cw.q_tilde.iter().zip(&scale).map(|(a, s)| s * a).collect();
    WeightState { q, ..template.clone() }
}

/// Reads `q~_i = q_i / w_{s(i)}` back; keeps the previous value where `w_{s(i)}` vanishes.
pub fn split_back(q: &WeightState, dw: &DomainWeights, prev_q_tilde: &[f64]) -> Vec<f64> {
    let scale = dw.scale_vector(q.q.len());
    q.q.iter()
        .zip(&scale)
        .zip(prev_q_tilde)
        .map(|((&qi, &s), &prev)| if s >= DOMAIN_WEIGHT_EPS { qi / s } else { prev })
        .collect()
}

/// The multi-source q~-step: sweep with step `eta_q` on sources and `eta_t` on targets,
/// joint projection of the composite weights, then split back.
#[allow(clippy::too_many_arguments)]
pub fn q_tilde_step(
    cw: &CompositeWeights,
    template: &WeightState,
    losses: &[f64],
    d: &DiscrepancyScores,
    hp: &HyperParams,
    r_theta: f64,
    order: &[usize],
    batch_size: usize,
) -> Result<(CompositeWeights, WeightState)> {
    let len = cw.q_tilde.len();
    if losses.len() != len {
        return Err(BeaconError::Dimension { expected: len, got: losses.len() });
    }
    template.check_feasible()?;
    let scale = cw.w.scale_vector(len);
    let step: Vec<f64> = (0..len).map(|i| if i < template.m { hp.eta_q } else { hp.eta_target() }).collect();
    let mut q_tilde = cw.q_tilde.clone();
    scaled_sweep(&mut q_tilde, &scale, &step, template, losses, d, hp, r_theta, order, batch_size);
    let swept = CompositeWeights { q_tilde, w: cw.w.clone() };
    let projected = project_weights(&compose_weights(&swept, template))?;
    let q_tilde = split_back(&projected, &cw.w, &swept.q_tilde);
    Ok((CompositeWeights { q_tilde, w: cw.w.clone() }, projected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Estimator;

    fn zero_hp() -> HyperParams {
        HyperParams {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda_d: 0.0,
            gamma: 0.0,
            rho1: 0.0,
            rho2: 0.0,
            ..HyperParams::default()
        }
    }

    fn state(q: Vec<f64>, p0: Vec<f64>, m: usize) -> WeightState {
        let len = q.len();
        WeightState { q, p0, lo: vec![0.0; len], hi: 5.0, budget: 1.0, m }
    }

    #[test]
    fn worked_subgradient_example() {
        let hp = HyperParams { lambda_d: 0.1, lambda1: 0.01, lambda2: 0.01, ..zero_hp() };
        let s = state(vec![0.5, 1.0], vec![0.0, 1.0], 1);
        let g = q_subgradient(0, 0.2, 1.0, &s, &hp, 3.0, &ArgmaxSet::from_indices(vec![1]));
        assert!((g - 0.32).abs() < 1e-15, "g = {g}");
    }

    #[test]
    fn degenerate_coefficients_return_loss() {
        let s = state(vec![0.5, 1.0], vec![0.0, 1.0], 1);
        let g = q_subgradient(0, 0.7, 2.0, &s, &zero_hp(), 3.0, &ArgmaxSet::of(&s.q));
        assert_eq!(g, 0.7);
    }

    #[test]
    fn kink_contributes_nothing() {
        let hp = HyperParams { lambda1: 0.5, ..zero_hp() };
        let s = state(vec![0.25, 0.25], vec![0.25, 0.25], 0);
        let g = q_subgradient(0, 0.1, 0.0, &s, &hp, 0.0, &ArgmaxSet::of(&s.q));
        assert_eq!(g, 0.1);
    }

    #[test]
    fn capacity_mass_splits_over_ties() {
        let hp = HyperParams { gamma: 1.0, ..zero_hp() };
        let s = state(vec![2.0, 2.0, 1.0], vec![0.0; 3], 3);
        let am = ArgmaxSet::of(&s.q);
        assert_eq!(am.len(), 2);
        assert_eq!(q_subgradient(0, 0.0, 0.0, &s, &hp, 4.0, &am), 2.0);
        assert_eq!(q_subgradient(2, 0.0, 0.0, &s, &hp, 4.0, &am), 0.0);
    }

    #[test]
    fn convex_solve_symmetric_case() {
        let hp = HyperParams { lambda1: 0.0, lambda_d: 0.0, gamma: 0.0, ..HyperParams::default() };
        let tmpl = WeightState { q: vec![0.0; 3], p0: vec![0.0, 0.0, 1.0], lo: vec![0.0; 3], hi: 5.0, budget: 1.5, m: 2 };
        let d = DiscrepancyScores::zeros(2, Estimator::Knn);
        let (w, _) = q_solve_at_bound(&tmpl, &[0.0; 3], &d, &hp, 5.0).unwrap();
        for q in &w.q {
            assert!((q - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn convex_solve_hand_derived_case() {
        let hp = HyperParams { lambda1: 0.01, lambda2: 0.01, lambda_d: 0.1, gamma: 0.0, ..HyperParams::default() };
        let tmpl = WeightState { q: vec![0.0; 3], p0: vec![0.0, 0.0, 1.0], lo: vec![0.0; 3], hi: 5.0, budget: 2.0, m: 2 };
        let d = DiscrepancyScores { d: vec![1.0, 0.2], ..DiscrepancyScores::zeros(2, Estimator::Knn) };
        let losses = [0.4, 0.1, 0.05];
        let (w, nu) = q_solve_at_bound(&tmpl, &losses, &d, &hp, 5.0).unwrap();
        for (q, e) in w.q.iter().zip([0.0, 0.0, 2.0]) {
            assert!((q - e).abs() < 1e-9, "{:?}", w.q);
        }
        assert!((nu - 0.10).abs() < 1e-9, "nu = {nu}");
        // closed form re-evaluated coordinatewise: z = (-25, -6, -2.5), shift 5, threshold 0.5
        let expected: Vec<f64> = [-25.0, -6.0, -2.5]
            .iter()
            .zip([0.0, 0.0, 1.0])
            .map(|(z, p0): (&f64, f64)| clip(p0 + soft_threshold(z + 5.0 - p0, 0.5), 0.0, 5.0))
            .collect();
        assert_eq!(expected, vec![0.0, 0.0, 2.0]);
        let full = q_solve_convex(&tmpl, &losses, &d, &hp, 1.0).unwrap();
        for (q, e) in full.weights.q.iter().zip([0.0, 0.0, 2.0]) {
            assert!((q - e).abs() < 1e-6, "{:?}", full.weights.q);
        }
    }

    #[test]
    fn convex_solve_rejects_zero_lambda2() {
        let hp = HyperParams { lambda2: 0.0, ..HyperParams::default() };
        let tmpl = WeightState { q: vec![0.0; 2], p0: vec![0.0, 1.0], lo: vec![0.0; 2], hi: 5.0, budget: 1.0, m: 1 };
        let d = DiscrepancyScores::zeros(1, Estimator::Knn);
        assert!(matches!(q_solve_convex(&tmpl, &[0.0; 2], &d, &hp, 0.0), Err(BeaconError::ZeroLambda2)));
    }

    #[test]
    fn sweep_with_zero_step_only_projects() {
        let hp = HyperParams { eta_q: 0.0, ..HyperParams::default() };
        let s = WeightState::initial(2, 2, &hp);
        let d = DiscrepancyScores::zeros(2, Estimator::Knn);
        let swept = q_sweep_ordered(&s, &[1.0, 2.0, 3.0, 4.0], &d, &hp, 1.0, &[0, 1, 2, 3], 2).unwrap();
        let projected = project_weights(&s).unwrap();
        assert_eq!(swept.q, projected.q);
    }

    #[test]
    fn sweep_rejects_infeasible_budget() {
        let hp = HyperParams::default();
        let mut s = WeightState::initial(2, 2, &hp);
        s.budget = 100.0;
        let d = DiscrepancyScores::zeros(2, Estimator::Knn);
        assert!(matches!(
            q_sweep_ordered(&s, &[0.0; 4], &d, &hp, 0.0, &[0, 1, 2, 3], 2),
            Err(BeaconError::Infeasible(_))
        ));
    }

    #[test]
    fn w_step_worked_example() {
        let dw = DomainWeights::uniform(2, vec![0, 1]);
        let hp = zero_hp();
        let d = DiscrepancyScores::zeros(2, Estimator::Knn);
        // domain sums of q~ * loss are (0.5, 0.1)
        let grad = w_gradient(&dw, &[1.0, 1.0, 1.0], &[0.5, 0.1, 0.0], &d, &[0.0, 0.0, 1.0], &hp);
        assert_eq!(grad, vec![0.5, 0.1]);
        let next = w_step(&dw, &grad, 0.1);
        assert!((next.w[0] - 0.48).abs() < 1e-12 && (next.w[1] - 0.52).abs() < 1e-12, "{:?}", next.w);
        assert_eq!(w_step(&dw, &[0.0, 0.0], 0.1).w, dw.w);
    }

    #[test]
    fn single_domain_step_is_fixed_point() {
        let dw = DomainWeights::uniform(1, vec![0, 0]);
        let next = w_step(&dw, &[123.0], 0.5);
        assert_eq!(next.w, vec![1.0]);
    }

    #[test]
    fn compose_and_split_cases() {
        let tmpl = WeightState { q: vec![0.0; 3], p0: vec![0.0, 0.0, 1.0], lo: vec![0.0; 3], hi: 5.0, budget: 3.0, m: 2 };
        let dw = DomainWeights::uniform(2, vec![0, 1]);
        let cw = CompositeWeights { q_tilde: vec![2.0, 2.0, 1.0], w: dw.clone() };
        let q = compose_weights(&cw, &tmpl);
        assert_eq!(q.q, vec![1.0, 1.0, 1.0]);
        assert_eq!(split_back(&q, &dw, &cw.q_tilde), cw.q_tilde);

        let single = DomainWeights::uniform(1, vec![0, 0]);
        let cw1 = CompositeWeights { q_tilde: vec![0.3, 0.7, 2.0], w: single };
        assert_eq!(compose_weights(&cw1, &tmpl).q, cw1.q_tilde);

        let dead = DomainWeights { w: vec![0.0, 1.0], ..dw };
        let back = split_back(&WeightState { q: vec![0.0, 1.0, 1.0], ..tmpl }, &dead, &[0.9, 0.1, 0.1]);
        assert_eq!(back, vec![0.9, 1.0, 1.0]);
    }
}
