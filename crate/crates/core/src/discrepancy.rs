//! Source/target discrepancy estimators feeding the per-sample `d_i` scores.
//!
//! * [`knn_discrepancy`]: mean distance from a source embedding to its nearest
//!   target embeddings, normalized by the mean within-target neighbor distance.
//! * [`classifier_discrepancy`]: posterior `P(source | z)` of a logistic domain
//!   discriminator fit on a class-balanced subsample.
//! * [`localized_discrepancy`]: the largest target-minus-source loss gap over a
//!   parameter ball around a target-trained reference, found by projected ascent.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BeaconError, Result};
use crate::learner::LearnerState;
use crate::types::{Dataset, Domain, LabeledSample};

const CLASSIFIER_STEPS: usize = 500;
const CLASSIFIER_LR: f64 = 0.1;
const CLASSIFIER_L2: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    vectors: Vec<Vec<f64>>,
    origin: Vec<Domain>,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<Vec<f64>>, origin: Vec<Domain>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(BeaconError::InvalidArgument("empty embedding set".into()));
        }
        if origin.len() != vectors.len() {
            return Err(BeaconError::Dimension { expected: vectors.len(), got: origin.len() });
        }
        let dim = vectors[0].len();
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(BeaconError::Dimension { expected: dim, got: v.len() });
        }
        Ok(Self { vectors, origin })
    }

    /// All vectors tagged with the same origin.
    pub fn uniform(vectors: Vec<Vec<f64>>, origin: Domain) -> Result<Self> {
        let tags = vec![origin; vectors.len()];
        Self::new(vectors, tags)
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn origin(&self) -> &[Domain] {
        &self.origin
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean of the `k` smallest values; `dists` is reordered.
fn mean_of_smallest(dists: &mut [f64], k: usize) -> f64 {
    if k < dists.len() {
        dists.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    }
    let mut head = dists[..k].to_vec();
    // fixed summation order regardless of the selection's internal layout
    head.sort_by(|a, b| a.total_cmp(b));
    head.iter().sum::<f64>() / k as f64
}

/// Per-source k-NN discrepancy normalized by the within-target spread.
pub fn knn_discrepancy(source: &EmbeddingSet, target: &EmbeddingSet, k: usize) -> Result<Vec<f64>> {
    let n = target.len();
    if n < 2 {
        return Err(BeaconError::TooFewTargets(n));
    }
    if k == 0 {
        return Err(BeaconError::InvalidArgument("k must be at least 1".into()));
    }
    if source.dim() != target.dim() {
        return Err(BeaconError::Dimension { expected: target.dim(), got: source.dim() });
    }
    let k_cross = k.min(n);
    let k_within = k.min(n - 1);
    let tv = target.vectors();

    let mut spread = 0.0;
    let mut buf = Vec::with_capacity(n);
    for (j, zj) in tv.iter().enumerate() {
        buf.clear();
        buf.extend(tv.iter().enumerate().filter(|&(l, _)| l != j).map(|(_, zl)| euclidean(zj, zl)));
        spread += mean_of_smallest(&mut buf, k_within);
    }
    let spread = spread / n as f64;
    if spread <= 0.0 {
        return Err(BeaconError::DegenerateSpread);
    }

    Ok(source
        .vectors()
        .iter()
        .map(|zi| {
            let mut d: Vec<f64> = tv.iter().map(|zj| euclidean(zi, zj)).collect();
            mean_of_smallest(&mut d, k_cross) / spread
        })
        .collect())
}

fn sigmoid(p: f64) -> f64 {
    if p >= 0.0 {
        1.0 / (1.0 + (-p).exp())
    } else {
        let e = p.exp();
        e / (1.0 + e)
    }
}

/// Area under the ROC curve of `scores` for separating `positive` from the rest,
/// with ties counted as one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    // midranks handle ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum += mid_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos as f64 * n_neg as f64)
}

/// Logistic domain discriminator on embeddings (target = 1, source = 0).
/// Returns `d_i = 1 - g(z_i)` for every source embedding and the pooled AUC.
pub fn classifier_discrepancy<R: Rng + ?Sized>(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    if source.dim() != target.dim() {
        return Err(BeaconError::Dimension { expected: target.dim(), got: source.dim() });
    }
    let (m, n, dim) = (source.len(), target.len(), target.dim());
    let src_idx: Vec<usize> = if m > n {
        let mut idx = sample_indices(rng, m, n).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..m).collect()
    };
    let train: Vec<(&[f64], f64)> = src_idx
        .iter()
        .map(|&i| (source.vectors()[i].as_slice(), 0.0))
        .chain(target.vectors().iter().map(|z| (z.as_slice(), 1.0)))
        .collect();

    // standardize with training-set statistics
    let count = train.len() as f64;
    let mut mean = vec![0.0; dim];
    for (z, _) in &train {
        for (a, b) in mean.iter_mut().zip(z.iter()) {
            *a += b / count;
        }
    }
    let mut scale = vec![0.0; dim];
    for (z, _) in &train {
        for c in 0..dim {
            scale[c] += (z[c] - mean[c]).powi(2) / count;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 1.0 };
    }
    let standardize = |z: &[f64]| -> Vec<f64> { (0..dim).map(|c| (z[c] - mean[c]) * scale[c]).collect() };
    let features: Vec<(Vec<f64>, f64)> = train.iter().map(|(z, y)| (standardize(z), *y)).collect();

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..CLASSIFIER_STEPS {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, y) in &features {
            let p = sigmoid(w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b);
            let r = (p - y) / count;
            for (g, xc) in gw.iter_mut().zip(x) {
                *g += r * xc;
            }
            gb += r;
        }
        for (wc, g) in w.iter_mut().zip(&gw) {
            *wc -= CLASSIFIER_LR * (g + CLASSIFIER_L2 * *wc);
        }
        b -= CLASSIFIER_LR * gb;
    }

    let score = |z: &[f64]| -> f64 {
        let x = standardize(z);
        sigmoid(w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>() + b)
    };
    let src_scores: Vec<f64> = source.vectors().iter().map(|z| score(z)).collect();
    let tgt_scores: Vec<f64> = target.vectors().iter().map(|z| score(z)).collect();
    let d = src_scores.iter().map(|g| 1.0 - g).collect();
    let pooled: Vec<f64> = src_scores.iter().chain(&tgt_scores).copied().collect();
    let labels: Vec<bool> = (0..m + n).map(|i| i >= m).collect();
    Ok((d, auc(&pooled, &labels)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizedSpec {
    /// Radius of the parameter ball around the reference free block.
    pub radius: f64,
    #[serde(default = "LocalizedSpec::default_beta")]
    pub beta: f64,
    #[serde(default = "LocalizedSpec::default_steps")]
    pub steps: usize,
    #[serde(default = "LocalizedSpec::default_eval_period")]
    pub eval_period: usize,
    #[serde(default = "LocalizedSpec::default_noise_draws")]
    pub noise_draws: usize,
    #[serde(default = "LocalizedSpec::default_step_size")]
    pub step_size: f64,
}

impl LocalizedSpec {
    fn default_beta() -> f64 {
        0.01
    }
    fn default_steps() -> usize {
        200
    }
    fn default_eval_period() -> usize {
        5
    }
    fn default_noise_draws() -> usize {
        1
    }
    fn default_step_size() -> f64 {
        0.05
    }

    pub fn with_radius(radius: f64) -> Self {
        Self {
            radius,
            beta: Self::default_beta(),
            steps: Self::default_steps(),
            eval_period: Self::default_eval_period(),
            noise_draws: Self::default_noise_draws(),
            step_size: Self::default_step_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &'static str, reason: &str| BeaconError::OutOfRange { field, reason: reason.into() };
        if !(self.radius.is_finite() && self.radius >= 0.0) {
            return Err(err("radius", "must be finite and nonnegative"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(err("beta", "must be finite and nonnegative"));
        }
        if self.steps == 0 {
            return Err(err("steps", "must be at least 1"));
        }
        if self.eval_period == 0 || self.eval_period > self.steps {
            return Err(err("eval_period", "must lie in 1..=steps"));
        }
        if self.noise_draws == 0 {
            return Err(err("noise_draws", "must be at least 1"));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(err("step_size", "must be positive"));
        }
        Ok(())
    }
}

/// Euclidean projection onto the ball of `radius` around `center`.
pub fn ball_project(free: &[f64], center: &[f64], radius: f64) -> Vec<f64> {
    assert_eq!(free.len(), center.len(), "ball projection of mismatched vectors");
    let dist = euclidean(free, center);
    if dist <= radius {
        return free.to_vec();
    }
    let s = radius / dist;
    center.iter().zip(free).map(|(c, f)| c + s * (f - c)).collect()
}

fn mean_loss(learner: &LearnerState, samples: &[LabeledSample]) -> Result<f64> {
    Ok(learner.losses(samples)?.iter().sum::<f64>() / samples.len() as f64)
}

/// Target-minus-source mean loss; averaged over `draws` evaluations.
fn loss_gap(learner: &LearnerState, data: &Dataset, draws: usize) -> Result<f64> {
    let mut acc = 0.0;
    for _ in 0..draws {
        acc += mean_loss(learner, data.target())? - mean_loss(learner, data.source())?;
    }
    Ok(acc / draws as f64)
}

/// Largest loss gap found by projected gradient ascent on the free block,
/// starting from (and including) the reference point itself.
pub fn localized_discrepancy(reference: &LearnerState, data: &Dataset, spec: &LocalizedSpec) -> Result<f64> {
    spec.validate()?;
    if data.m() == 0 {
        return Err(BeaconError::InvalidArgument("localized discrepancy needs source samples".into()));
    }
    let center = reference.free_params();
    let enc_len = reference.encoder_len();
    let mut probe = reference.clone();
    let mut best = loss_gap(&probe, data, spec.noise_draws)?;

    let tgt_batch: Vec<(&LabeledSample, f64)> = data.target().iter().map(|s| (s, 1.0)).collect();
    let src_batch: Vec<(&LabeledSample, f64)> = data.source().iter().map(|s| (s, 1.0)).collect();
    let mut theta = center.clone();
    for step in 1..=spec.steps {
        let g_t = probe.batch_gradient(&tgt_batch)?;
        let g_s = probe.batch_gradient(&src_batch)?;
        let ascent: Vec<f64> = (0..theta.len())
            .map(|i| g_t[enc_len + i] - g_s[enc_len + i] - 2.0 * spec.beta * (theta[i] - center[i]))
            .collect();
        let moved: Vec<f64> = theta.iter().zip(&ascent).map(|(t, g)| t + spec.step_size * g).collect();
        theta = ball_project(&moved, &center, spec.radius);
        probe.set_free_params(&theta)?;
        if step % spec.eval_period == 0 {
            best = best.max(loss_gap(&probe, data, spec.noise_draws)?);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::seed_rng;

    fn set1d(v: &[f64], origin: Domain) -> EmbeddingSet {
        EmbeddingSet::uniform(v.iter().map(|&x| vec![x]).collect(), origin).unwrap()
    }

    #[test]
    fn knn_hand_cases() {
        let t = set1d(&[0.0, 1.0], Domain::Target);
        assert_eq!(knn_discrepancy(&set1d(&[0.5], Domain::Source(0)), &t, 1).unwrap(), vec![0.5]);
        assert_eq!(knn_discrepancy(&set1d(&[0.0], Domain::Source(0)), &t, 1).unwrap(), vec![0.0]);
        assert_eq!(knn_discrepancy(&set1d(&[3.0], Domain::Source(0)), &t, 1).unwrap(), vec![2.0]);
    }

    #[test]
    fn knn_clamps_k_to_available_neighbors() {
        // k = 5 with n = 2: cross k_eff = 2, within k_eff = 1
        let t = set1d(&[0.0, 1.0], Domain::Target);
        let d = knn_discrepancy(&set1d(&[3.0], Domain::Source(0)), &t, 5).unwrap();
        assert!((d[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn knn_errors() {
        let s = set1d(&[0.0], Domain::Source(0));
        assert!(matches!(
            knn_discrepancy(&s, &set1d(&[1.0], Domain::Target), 1),
            Err(BeaconError::TooFewTargets(1))
        ));
        assert!(matches!(
            knn_discrepancy(&s, &set1d(&[1.0, 1.0, 1.0], Domain::Target), 2),
            Err(BeaconError::DegenerateSpread)
        ));
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), 0.0);
        assert_eq!(auc(&[0.5; 4], &[false, false, true, true]), 0.5);
    }

    #[test]
    fn classifier_on_identical_sets_is_uninformative() {
        let mut rng = seed_rng(0);
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let s = EmbeddingSet::uniform(pts.clone(), Domain::Source(0)).unwrap();
        let t = EmbeddingSet::uniform(pts, Domain::Target).unwrap();
        let (d, a) = classifier_discrepancy(&s, &t, &mut rng).unwrap();
        assert!((a - 0.5).abs() <= 0.1, "auc {a}");
        assert!(d.iter().all(|&x| (x - 0.5).abs() <= 0.1));
    }

    #[test]
    fn classifier_separates_distant_clusters() {
        let mut rng = seed_rng(1);
        let src: Vec<f64> = (0..20).map(|i| -10.0 + 0.1 * ((i as f64) * 0.7).sin()).collect();
        let tgt: Vec<f64> = (0..20).map(|i| 10.0 + 0.1 * ((i as f64) * 1.3).cos()).collect();
        let (d, a) =
            classifier_discrepancy(&set1d(&src, Domain::Source(0)), &set1d(&tgt, Domain::Target), &mut rng).unwrap();
        assert!(a > 0.99);
        assert!(d.iter().all(|&x| x > 0.9), "{d:?}");
    }

    #[test]
    fn classifier_ranks_centroid_below_outlier() {
        let mut rng = seed_rng(2);
        let tgt: Vec<Vec<f64>> =
            (0..20).map(|i| vec![1.0 + 0.05 * (i as f64).sin(), 1.0 + 0.05 * (i as f64 * 2.0).cos()]).collect();
        let centroid: Vec<f64> = (0..2).map(|c| tgt.iter().map(|v| v[c]).sum::<f64>() / 20.0).collect();
        let src = EmbeddingSet::uniform(vec![centroid, vec![-4.0, -3.0]], Domain::Source(0)).unwrap();
        let (d, _) =
            classifier_discrepancy(&src, &EmbeddingSet::uniform(tgt, Domain::Target).unwrap(), &mut rng).unwrap();
        assert!(d[0] < d[1], "{d:?}");
    }

    #[test]
    fn ball_projection_cases() {
        assert_eq!(ball_project(&[0.5, 0.0], &[0.0, 0.0], 1.0), vec![0.5, 0.0]);
        assert_eq!(ball_project(&[0.0, 0.0], &[0.0, 0.0], 1.0), vec![0.0, 0.0]);
        assert_eq!(ball_project(&[2.0, 0.0], &[0.0, 0.0], 1.0), vec![1.0, 0.0]);
        assert_eq!(ball_project(&[2.0, 3.0], &[1.0, 1.0], 0.0), vec![1.0, 1.0]);
    }

    #[test]
    fn localized_spec_validation() {
        let mut s = LocalizedSpec::with_radius(1.0);
        assert!(s.validate().is_ok());
        s.eval_period = s.steps + 1;
        assert!(s.validate().is_err());
        assert!(LocalizedSpec::with_radius(-1.0).validate().is_err());
    }
}
