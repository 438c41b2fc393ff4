//! Alternating training loops and the two baselines.
//!
//! Each epoch of the weighted loops has a q-phase (on refresh epochs) that
//! holds the learner fixed and updates the per-sample weights, followed by an
//! h-phase of `s_h` weighted minibatch steps whose decoupled weight decay is
//! `gamma * max_i q_i`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Estimator, HyperParams, QUpdate, RngState};
use crate::discrepancy::{classifier_discrepancy, knn_discrepancy, localized_discrepancy, EmbeddingSet};
use crate::error::{BeaconError, Result};
use crate::learner::{train_reference, LearnerState};
use crate::types::{Dataset, DiscrepancyScores, Domain, LabeledSample, WeightState};
use crate::weights::{
    compose_weights, project_weights, q_solve_convex, q_sweep_ordered, q_tilde_step, split_back, w_gradient,
    w_step, CompositeWeights, DomainWeights,
};

/// Per-run options that are not hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainOptions<'a> {
    /// Starting learner; shared across methods for a given seed.
    pub init: &'a LearnerState,
    /// Held-out target samples for the per-epoch risk.
    pub heldout: Option<&'a [LabeledSample]>,
    /// Keep a full weight vector and learner snapshot at every refresh.
    pub log_full_weights: bool,
    /// Record the weighted objective after every phase.
    pub track_objective: bool,
    /// Epochs and step size for the target-only reference of the localized estimator.
    pub reference_epochs: usize,
}

impl<'a> TrainOptions<'a> {
    pub fn new(init: &'a LearnerState) -> Self {
        Self { init, heldout: None, log_full_weights: false, track_objective: false, reference_epochs: 200 }
    }

    pub fn with_heldout(mut self, heldout: &'a [LabeledSample]) -> Self {
        self.heldout = Some(heldout);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub weighted_train_loss: f64,
    pub target_risk: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl GroupStats {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        Some(Self { mean, std: var.sqrt(), count: v.len() })
    }
}

/// Weight statistics logged at each refresh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub epoch: usize,
    pub source: Option<GroupStats>,
    pub target: Option<GroupStats>,
    pub clean_source: Option<GroupStats>,
    pub corrupt_source: Option<GroupStats>,
    pub max_q: f64,
    pub sum_q: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
}

impl WeightSummary {
    pub fn of(epoch: usize, state: &WeightState, data: &Dataset, full: bool) -> Self {
        let m = data.m();
        let src = data.source();
        Self {
            epoch,
            source: GroupStats::of(state.q[..m].iter().copied()),
            target: GroupStats::of(state.q[m..].iter().copied()),
            clean_source: GroupStats::of((0..m).filter(|&i| !src[i].corrupt).map(|i| state.q[i])),
            corrupt_source: GroupStats::of((0..m).filter(|&i| src[i].corrupt).map(|i| state.q[i])),
            max_q: state.max_weight(),
            sum_q: state.q.iter().sum(),
            q: full.then(|| state.q.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub epoch: usize,
    pub estimator: Estimator,
    pub mean_d: f64,
    pub aux: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Q,
    H,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseObjective {
    pub epoch: usize,
    pub phase: Phase,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub learner: LearnerState,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub learner: LearnerState,
    pub metrics: Vec<EpochMetrics>,
    pub weight_log: Vec<WeightSummary>,
    /// Domain weights after each w-step (multi-source only).
    pub domain_log: Vec<(usize, Vec<f64>)>,
    pub refresh_log: Vec<RefreshRecord>,
    pub objective_log: Vec<PhaseObjective>,
    /// Every post-projection weight state, in order.
    pub q_trajectory: Vec<WeightState>,
    pub final_weights: Option<WeightState>,
    pub final_scores: Option<DiscrepancyScores>,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainReport {
    fn new(learner: LearnerState) -> Self {
        Self {
            learner,
            metrics: Vec::new(),
            weight_log: Vec::new(),
            domain_log: Vec::new(),
            refresh_log: Vec::new(),
            objective_log: Vec::new(),
            q_trajectory: Vec::new(),
            final_weights: None,
            final_scores: None,
            checkpoints: Vec::new(),
        }
    }

    pub fn final_risk(&self) -> Option<f64> {
        self.metrics.last().and_then(|m| m.target_risk)
    }
}

/// Mean per-example loss over `heldout`.
pub fn evaluate(state: &LearnerState, heldout: &[LabeledSample]) -> Result<f64> {
    if heldout.is_empty() {
        return Err(BeaconError::InvalidArgument("evaluation on an empty set".into()));
    }
    Ok(state.losses(heldout)?.iter().sum::<f64>() / heldout.len() as f64)
}

/// The weighted objective: `sum q_i (loss_i + lambda_d d_i) + gamma max(q) R(theta)
/// + lambda1 ||q - p0||_1 + lambda2 ||q||^2`.
pub fn weighted_objective(
    learner: &LearnerState,
    data: &Dataset,
    q: &WeightState,
    d: &DiscrepancyScores,
    hp: &HyperParams,
) -> Result<f64> {
    let losses = learner.losses(data.samples())?;
    let mut total = hp.gamma * q.max_weight() * learner.complexity();
    for (i, &qi) in q.q.iter().enumerate() {
        total += qi * (losses[i] + hp.lambda_d * d.get(i)) + hp.lambda1 * (qi - q.p0[i]).abs() + hp.lambda2 * qi * qi;
    }
    Ok(total)
}

fn embedding_sets(learner: &LearnerState, data: &Dataset) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let src: Vec<Vec<f64>> = learner.embed_all(data.source())?;
    let origin: Vec<Domain> = data.source().iter().map(|s| s.domain()).collect();
    let tgt = learner.embed_all(data.target())?;
    Ok((EmbeddingSet::new(src, origin)?, EmbeddingSet::uniform(tgt, Domain::Target)?))
}

/// Recomputes `d` on the learner's current embeddings.
fn refresh_scores(
    learner: &LearnerState,
    data: &Dataset,
    hp: &HyperParams,
    epoch: usize,
    rng: &mut RngState,
) -> Result<DiscrepancyScores> {
    if data.m() == 0 {
        return Ok(DiscrepancyScores { refresh_epoch: epoch, ..DiscrepancyScores::zeros(0, hp.estimator) });
    }
    let (src, tgt) = embedding_sets(learner, data)?;
    let (d, aux) = match hp.estimator {
        Estimator::Knn => (knn_discrepancy(&src, &tgt, hp.k)?, None),
        Estimator::Classifier => {
            let (d, auc) = classifier_discrepancy(&src, &tgt, rng)?;
            (d, Some(auc))
        }
        Estimator::Localized => unreachable!("localized scores are computed once before training"),
    };
    Ok(DiscrepancyScores { d, estimator: hp.estimator, refresh_epoch: epoch, aux })
}

/// Frozen scores `d_i = max(d_hat, 0)` on sources from a target-trained reference.
fn localized_scores(data: &Dataset, hp: &HyperParams, opts: &TrainOptions<'_>) -> Result<DiscrepancyScores> {
    let spec = hp
        .localized
        .as_ref()
        .ok_or(BeaconError::OutOfRange { field: "localized", reason: "missing localized spec".into() })?;
    let reference = train_reference(opts.init, data, opts.reference_epochs, hp.eta_theta, hp.h_optimizer)?;
    let d_hat = if data.m() == 0 { 0.0 } else { localized_discrepancy(&reference, data, spec)? };
    Ok(DiscrepancyScores {
        d: vec![d_hat.max(0.0); data.m()],
        estimator: Estimator::Localized,
        refresh_epoch: 0,
        aux: Some(d_hat),
    })
}

/// Per-epoch sample order; h-step minibatches are consecutive chunks, wrapping around.
struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
}

impl BatchCursor {
    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let n = self.order.len();
        if size >= n {
            return self.order.clone();
        }
        let batch = (0..size).map(|j| self.order[(self.pos + j) % n]).collect();
        self.pos = (self.pos + size) % n;
        batch
    }
}

fn h_phase(
    learner: &mut LearnerState,
    samples: &[LabeledSample],
    weights: &[f64],
    cursor: &mut BatchCursor,
    hp: &HyperParams,
) -> Result<()> {
    let decay = hp.gamma * weights.iter().copied().fold(0.0, f64::max);
    for _ in 0..hp.s_h {
        let idx = cursor.next_batch(hp.batch_size);
        let batch: Vec<(&LabeledSample, f64)> = idx.iter().map(|&i| (&samples[i], weights[i])).collect();
        learner.weighted_update(&batch, hp.eta_theta, decay, hp.h_optimizer)?;
    }
    Ok(())
}

fn epoch_metrics(
    epoch: usize,
    learner: &LearnerState,
    samples: &[LabeledSample],
    weights: &[f64],
    heldout: Option<&[LabeledSample]>,
) -> Result<EpochMetrics> {
    let losses = learner.losses(samples)?;
    let weighted = losses.iter().zip(weights).map(|(l, q)| l * q).sum::<f64>() / samples.len() as f64;
    let target_risk = heldout.map(|h| evaluate(learner, h)).transpose()?;
    Ok(EpochMetrics { epoch, weighted_train_loss: weighted, target_risk })
}

fn shuffled(len: usize, rng: &mut RngState) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
}

fn effective_hp(hp: &HyperParams) -> HyperParams {
    let mut hp = hp.clone();
    if hp.estimator == Estimator::Localized {
        hp.lambda_d = 1.0;
    }
    hp
}

fn initial_scores(data: &Dataset, hp: &HyperParams, opts: &TrainOptions<'_>) -> Result<DiscrepancyScores> {
    if hp.estimator == Estimator::Localized {
        localized_scores(data, hp, opts)
    } else {
        Ok(DiscrepancyScores::zeros(data.m(), hp.estimator))
    }
}

struct Recorder<'a> {
    data: &'a Dataset,
    opts: &'a TrainOptions<'a>,
    report: TrainReport,
}

impl Recorder<'_> {
    fn weights(&mut self, epoch: usize, state: &WeightState, learner: &LearnerState) {
        self.report.weight_log.push(WeightSummary::of(epoch, state, self.data, self.opts.log_full_weights));
        self.report.q_trajectory.push(state.clone());
        if self.opts.log_full_weights {
            self.report.checkpoints.push(Checkpoint { epoch, learner: learner.clone(), q: state.q.clone() });
        }
    }

    fn scores(&mut self, epoch: usize, d: &DiscrepancyScores) {
        let mean_d = if d.d.is_empty() { 0.0 } else { d.d.iter().sum::<f64>() / d.d.len() as f64 };
        self.report.refresh_log.push(RefreshRecord { epoch, estimator: d.estimator, mean_d, aux: d.aux });
    }

    fn objective(
        &mut self,
        epoch: usize,
        phase: Phase,
        learner: &LearnerState,
        q: &WeightState,
        d: &DiscrepancyScores,
        hp: &HyperParams,
    ) -> Result<()> {
        if self.opts.track_objective {
            let value = weighted_objective(learner, self.data, q, d, hp)?;
            self.report.objective_log.push(PhaseObjective { epoch, phase, value });
        }
        Ok(())
    }
}

/// Single-source alternating loop.
pub fn train_beacon_single(
    data: &Dataset,
    hp: &HyperParams,
    opts: &TrainOptions<'_>,
    rng: &mut RngState,
) -> Result<TrainReport> {
    let hp_eff = effective_hp(hp);
    let hp = &hp_eff;
    let mut learner = opts.init.clone();
    learner.reset_optimizer();
    let mut q = project_weights(&WeightState::initial(data.m(), data.n(), hp))?;
    let mut d = initial_scores(data, hp, opts)?;
    let mut rec = Recorder { data, opts, report: TrainReport::new(learner.clone()) };
    rec.weights(0, &q, &learner);

    for epoch in 1..=hp.epochs {
        let order = shuffled(data.len(), rng);
        if epoch % hp.k_q == 0 {
            let losses = learner.losses(data.samples())?;
            if hp.estimator != Estimator::Localized {
                d = refresh_scores(&learner, data, hp, epoch, rng)?;
            }
            rec.scores(epoch, &d);
            let r_theta = learner.complexity();
            q = match hp.q_update {
                QUpdate::Stochastic => q_sweep_ordered(&q, &losses, &d, hp, r_theta, &order, hp.batch_size)?,
                QUpdate::ConvexSolve => q_solve_convex(&q, &losses, &d, hp, r_theta)?.weights,
            };
            rec.weights(epoch, &q, &learner);
            rec.objective(epoch, Phase::Q, &learner, &q, &d, hp)?;
        }
        let mut cursor = BatchCursor { order, pos: 0 };
        h_phase(&mut learner, data.samples(), &q.q, &mut cursor, hp)?;
        rec.objective(epoch, Phase::H, &learner, &q, &d, hp)?;
        rec.report.metrics.push(epoch_metrics(epoch, &learner, data.samples(), &q.q, opts.heldout)?);
    }
    let mut report = rec.report;
    report.learner = learner;
    report.final_weights = Some(q);
    report.final_scores = Some(d);
    Ok(report)
}

/// Multi-source loop with the factorization `q_i = w_{s(i)} q~_i`.
pub fn train_beacon_multi(
    data: &Dataset,
    hp: &HyperParams,
    opts: &TrainOptions<'_>,
    rng: &mut RngState,
) -> Result<TrainReport> {
    let hp_eff = effective_hp(hp);
    let hp = &hp_eff;
    if data.num_domains() == 0 {
        return Err(BeaconError::InvalidArgument("multi-source training needs K >= 1".into()));
    }
    let mut learner = opts.init.clone();
    learner.reset_optimizer();
    let template = WeightState::initial(data.m(), data.n(), hp);
    let dw = DomainWeights::uniform(data.num_domains(), data.assignment());
    let mut cw = CompositeWeights { q_tilde: template.p0.clone(), w: dw };
    let mut q = project_weights(&compose_weights(&cw, &template))?;
    cw.q_tilde = split_back(&q, &cw.w, &cw.q_tilde);
    let mut d = initial_scores(data, hp, opts)?;
    let mut rec = Recorder { data, opts, report: TrainReport::new(learner.clone()) };
    rec.weights(0, &q, &learner);
    rec.report.domain_log.push((0, cw.w.w.clone()));

    for epoch in 1..=hp.epochs {
        let order = shuffled(data.len(), rng);
        if epoch % hp.k_q == 0 {
            let losses = learner.losses(data.samples())?;
            if hp.estimator != Estimator::Localized {
                d = refresh_scores(&learner, data, hp, epoch, rng)?;
            }
            rec.scores(epoch, &d);
            let grad = w_gradient(&cw.w, &cw.q_tilde, &losses, &d, &template.p0, hp);
            cw.w = w_step(&cw.w, &grad, hp.eta_w);
            rec.report.domain_log.push((epoch, cw.w.w.clone()));
            let r_theta = learner.complexity();
            let (next, projected) = q_tilde_step(&cw, &q, &losses, &d, hp, r_theta, &order, hp.batch_size)?;
            cw = next;
            q = projected;
            rec.weights(epoch, &q, &learner);
            rec.objective(epoch, Phase::Q, &learner, &q, &d, hp)?;
        }
        let mut cursor = BatchCursor { order, pos: 0 };
        h_phase(&mut learner, data.samples(), &q.q, &mut cursor, hp)?;
        rec.objective(epoch, Phase::H, &learner, &q, &d, hp)?;
        rec.report.metrics.push(epoch_metrics(epoch, &learner, data.samples(), &q.q, opts.heldout)?);
    }
    let mut report = rec.report;
    report.learner = learner;
    report.final_weights = Some(q);
    report.final_scores = Some(d);
    Ok(report)
}

/// Uniform-weight training on the target samples alone.
pub fn train_target_only(
    data: &Dataset,
    hp: &HyperParams,
    opts: &TrainOptions<'_>,
    rng: &mut RngState,
) -> Result<TrainReport> {
    let mut learner = opts.init.clone();
    learner.reset_optimizer();
    let target = data.target();
    let weights = vec![1.0; target.len()];
    let mut report = TrainReport::new(learner.clone());
    for epoch in 1..=hp.epochs {
        let mut cursor = BatchCursor { order: shuffled(target.len(), rng), pos: 0 };
        h_phase(&mut learner, target, &weights, &mut cursor, hp)?;
        report.metrics.push(epoch_metrics(epoch, &learner, target, &weights, opts.heldout)?);
    }
    report.learner = learner;
    Ok(report)
}

/// Uniform-weight co-training where each minibatch slot is a source sample
/// with probability `mix_ratio` and a target sample otherwise.
pub fn train_cotrain_fixed(
    data: &Dataset,
    hp: &HyperParams,
    mix_ratio: f64,
    opts: &TrainOptions<'_>,
    rng: &mut RngState,
) -> Result<TrainReport> {
    if !(mix_ratio > 0.0 && mix_ratio < 1.0) {
        return Err(BeaconError::OutOfRange { field: "mix_ratio", reason: format!("{mix_ratio} not in (0, 1)") });
    }
    let mut learner = opts.init.clone();
    learner.reset_optimizer();
    let (m, n) = (data.m(), data.n());
    let samples = data.samples();
    let decay = hp.gamma;
    let ones = vec![1.0; samples.len()];
    let mut report = TrainReport::new(learner.clone());
    for epoch in 1..=hp.epochs {
        for _ in 0..hp.s_h {
            let batch: Vec<(&LabeledSample, f64)> = (0..hp.batch_size)
                .map(|_| {
                    let i = if m > 0 && rng.random::<f64>() < mix_ratio {
                        rng.random_range(0..m)
                    } else {
                        m + rng.random_range(0..n)
                    };
                    (&samples[i], 1.0)
                })
                .collect();
            learner.weighted_update(&batch, hp.eta_theta, decay, hp.h_optimizer)?;
        }
        report.metrics.push(epoch_metrics(epoch, &learner, samples, &ones, opts.heldout)?);
    }
    report.learner = learner;
    Ok(report)
}
