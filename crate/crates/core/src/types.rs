//! Shared domain types: labeled samples, the source/target dataset layout,
//! the per-sample weight state and discrepancy scores.

use serde::{Deserialize, Serialize};

use crate::config::{Estimator, HyperParams};
use crate::error::{BeaconError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Source(usize),
    Target,
}

impl Domain {
    pub fn is_target(self) -> bool {
        matches!(self, Domain::Target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    domain: Domain,
    /// Benchmark ground truth; training code never reads it.
    pub corrupt: bool,
}

impl LabeledSample {
    pub fn new(x: Vec<f64>, y: Vec<f64>, domain: Domain) -> Self {
        Self { x, y, domain, corrupt: false }
    }

    pub fn with_corrupt(mut self, corrupt: bool) -> Self {
        self.corrupt = corrupt;
        self
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }
}

/// Source samples occupy indices `0..m`, target samples `m..m+n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    m: usize,
    n: usize,
    num_domains: usize,
}

impl Dataset {
    /// Builds a dataset from separate source and target lists. The source
    /// list keeps its order; every `Source(k)` tag must satisfy `k < num_domains`.
    pub fn from_parts(
        source: Vec<LabeledSample>,
        target: Vec<LabeledSample>,
        num_domains: usize,
    ) -> Result<Self> {
        if target.is_empty() {
            return Err(BeaconError::InvalidArgument("dataset needs at least one target sample".into()));
        }
        let mut samples = source;
        let m = samples.len();
        let n = target.len();
        samples.extend(target);
        Self::new(samples, m, n, num_domains)
    }

    fn new(samples: Vec<LabeledSample>, m: usize, n: usize, num_domains: usize) -> Result<Self> {
        let (dx, dy) = (samples[0].x.len(), samples[0].y.len());
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != dx {
                return Err(BeaconError::Dimension { expected: dx, got: s.x.len() });
            }
            if s.y.len() != dy {
                return Err(BeaconError::Dimension { expected: dy, got: s.y.len() });
            }
            match (i < m, s.domain) {
                (true, Domain::Source(k)) if k < num_domains => {}
                (true, Domain::Source(k)) => {
                    return Err(BeaconError::InvalidArgument(format!(
                        "source domain {k} out of range for K={num_domains}"
                    )))
                }
                (false, Domain::Target) => {}
                _ => {
                    return Err(BeaconError::InvalidArgument(format!(
                        "sample {i} is on the wrong side of the source/target boundary"
                    )))
                }
            }
        }
        Ok(Self { samples, m, n, num_domains })
    }

    /// Target-only view (used for the reference learner and held-out sets).
    pub fn target_only(&self) -> Dataset {
        Dataset {
            samples: self.samples[self.m..].to_vec(),
            m: 0,
            n: self.n,
            num_domains: self.num_domains,
        }
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }
    pub fn source(&self) -> &[LabeledSample] {
        &self.samples[..self.m]
    }
    pub fn target(&self) -> &[LabeledSample] {
        &self.samples[self.m..]
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn len(&self) -> usize {
        self.m + self.n
    }
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
    pub fn num_domains(&self) -> usize {
        self.num_domains
    }
    pub fn input_dim(&self) -> usize {
        self.samples[0].x.len()
    }
    pub fn output_dim(&self) -> usize {
        self.samples[0].y.len()
    }
    pub fn is_source_index(&self, i: usize) -> bool {
        i < self.m
    }

    /// Domain index s(i) for each source sample.
    pub fn assignment(&self) -> Vec<usize> {
        self.source()
            .iter()
            .map(|s| match s.domain {
                Domain::Source(k) => k,
                Domain::Target => unreachable!("source block holds only source samples"),
            })
            .collect()
    }
}

/// Per-sample weights together with the constraint set they live in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    pub q: Vec<f64>,
    pub p0: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: f64,
    pub budget: f64,
    /// Number of source entries; source indices come first.
    pub m: usize,
}

impl WeightState {
    /// `q = p0` with p0 the uniform target distribution; bounds and budget from `hp`.
    pub fn initial(m: usize, n: usize, hp: &HyperParams) -> Self {
        let mut p0 = vec![0.0; m + n];
        let mut lo = vec![0.0; m + n];
        for j in m..m + n {
            p0[j] = 1.0 / n as f64;
            lo[j] = hp.q_t_min;
        }
        Self {
            q: p0.clone(),
            p0,
            lo,
            hi: hp.q_max,
            budget: n as f64 + hp.alpha * m as f64,
            m,
        }
    }

    pub fn n(&self) -> usize {
        self.q.len() - self.m
    }

    /// Checks that the constraint set is nonempty.
    pub fn check_feasible(&self) -> Result<()> {
        let lo_sum: f64 = self.lo.iter().sum();
        let hi_sum = self.hi * self.q.len() as f64;
        if lo_sum > self.budget + 1e-12 || self.budget > hi_sum + 1e-12 {
            return Err(BeaconError::Infeasible(format!(
                "budget {} outside [{lo_sum}, {hi_sum}]",
                self.budget
            )));
        }
        if self.lo.iter().any(|&l| l > self.hi) {
            return Err(BeaconError::Infeasible("lower bound exceeds q_max".into()));
        }
        Ok(())
    }

    /// Bounds and budget hold to `tol`.
    pub fn satisfies_invariants(&self, tol: f64) -> bool {
        let sum: f64 = self.q.iter().sum();
        (sum - self.budget).abs() <= tol
            && self
                .q
                .iter()
                .zip(&self.lo)
                .all(|(&q, &l)| q >= l - 1e-12 && q <= self.hi + 1e-12)
    }

    pub fn max_weight(&self) -> f64 {
        self.q.iter().copied().fold(0.0, f64::max)
    }

    pub fn source_weights(&self) -> &[f64] {
        &self.q[..self.m]
    }

    pub fn target_weights(&self) -> &[f64] {
        &self.q[self.m..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyScores {
    /// One score per source sample; target scores are implicitly zero.
    pub d: Vec<f64>,
    pub estimator: Estimator,
    pub refresh_epoch: usize,
    /// AUC for the classifier estimator, the raw d-hat for the localized one.
    pub aux: Option<f64>,
}

impl DiscrepancyScores {
    pub fn zeros(m: usize, estimator: Estimator) -> Self {
        Self { d: vec![0.0; m], estimator, refresh_epoch: 0, aux: None }
    }

    /// Score of sample `i` in the full index space.
    pub fn get(&self, i: usize) -> f64 {
        self.d.get(i).copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(domain: Domain) -> LabeledSample {
        LabeledSample::new(vec![0.0, 1.0], vec![0.5], domain)
    }

    #[test]
    fn rejects_out_of_range_domain() {
        let err = Dataset::from_parts(vec![sample(Domain::Source(2))], vec![sample(Domain::Target)], 2);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_empty_target() {
        assert!(Dataset::from_parts(vec![sample(Domain::Source(0))], vec![], 1).is_err());
    }

    #[test]
    fn rejects_ragged_features() {
        let bad = LabeledSample::new(vec![0.0], vec![0.5], Domain::Target);
        assert!(Dataset::from_parts(vec![sample(Domain::Source(0))], vec![bad], 1).is_err());
    }

    #[test]
    fn initial_weights_follow_target_distribution() {
        let hp = HyperParams::default();
        let w = WeightState::initial(3, 4, &hp);
        assert_eq!(w.p0, vec![0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25]);
        assert!((w.p0.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w.lo[..3], [0.0; 3]);
        assert!(w.lo[3..].iter().all(|&l| l == hp.q_t_min));
        assert!((w.budget - (4.0 + hp.alpha * 3.0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn partition_boundaries_match_layout(m in 0usize..20, n in 1usize..20, k in 1usize..4) {
            let source: Vec<_> = (0..m).map(|i| sample(Domain::Source(i % k))).collect();
            let target: Vec<_> = (0..n).map(|_| sample(Domain::Target)).collect();
            let data = Dataset::from_parts(source, target, k).unwrap();
            prop_assert_eq!(data.m(), m);
            prop_assert_eq!(data.n(), n);
            for i in 0..m + n {
                prop_assert_eq!(data.is_source_index(i), i < m);
                prop_assert_eq!(data.samples()[i].domain().is_target(), i >= m);
            }
            prop_assert!(data.assignment().iter().all(|&s| s < k));
        }
    }
}
