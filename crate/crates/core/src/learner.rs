//! Reference learner: a one-hidden-layer network `y ≈ B·tanh(A·x + a) + c`.
//!
//! The encoder block `(A, a)` produces the embedding used by the discrepancy
//! estimators; the head `(B, c)` is the free block. Parameters are stored as
//! flat row-major vectors so checkpoints serialize to plain JSON arrays.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::HOptimizer;
use crate::error::{BeaconError, Result};
use crate::types::{Dataset, LabeledSample};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `0.5 * ||prediction - y||^2`
    Squared,
    /// Binary cross-entropy on logits, averaged over outputs; labels in `{0, 1}`.
    Logistic,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub output_dim: usize,
    pub loss: LossKind,
    pub frozen_encoder: bool,
    pub truncate_loss: bool,
    /// `embed_dim x input_dim`, row-major.
    pub encoder_weight: Vec<f64>,
    pub encoder_bias: Vec<f64>,
    /// `output_dim x embed_dim`, row-major.
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
    #[serde(skip)]
    moments: Moments,
}

fn softplus(p: f64) -> f64 {
    if p > 0.0 {
        p + (-p).exp().ln_1p()
    } else {
        p.exp().ln_1p()
    }
}

fn sigmoid(p: f64) -> f64 {
    if p >= 0.0 {
        1.0 / (1.0 + (-p).exp())
    } else {
        let e = p.exp();
        e / (1.0 + e)
    }
}

impl LearnerState {
    /// All entries drawn uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        embed_dim: usize,
        output_dim: usize,
        loss: LossKind,
        rng: &mut R,
    ) -> Self {
        let enc_bound = 1.0 / (input_dim.max(1) as f64).sqrt();
        let head_bound = 1.0 / (embed_dim.max(1) as f64).sqrt();
        let mut draw = |n: usize, b: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-b..=b)).collect() };
        let encoder_weight = draw(embed_dim * input_dim, enc_bound);
        let encoder_bias = draw(embed_dim, enc_bound);
        let head_weight = draw(output_dim * embed_dim, head_bound);
        let head_bias = draw(output_dim, head_bound);
        Self {
            input_dim,
            embed_dim,
            output_dim,
            loss,
            frozen_encoder: false,
            truncate_loss: false,
            encoder_weight,
            encoder_bias,
            head_weight,
            head_bias,
            moments: Moments::default(),
        }
    }

    /// All-zero parameters.
    pub fn zeros(input_dim: usize, embed_dim: usize, output_dim: usize, loss: LossKind) -> Self {
        Self {
            input_dim,
            embed_dim,
            output_dim,
            loss,
            frozen_encoder: false,
            truncate_loss: false,
            encoder_weight: vec![0.0; embed_dim * input_dim],
            encoder_bias: vec![0.0; embed_dim],
            head_weight: vec![0.0; output_dim * embed_dim],
            head_bias: vec![0.0; output_dim],
            moments: Moments::default(),
        }
    }

    pub fn with_frozen_encoder(mut self, frozen: bool) -> Self {
        self.frozen_encoder = frozen;
        self
    }

    pub fn with_truncation(mut self, truncate: bool) -> Self {
        self.truncate_loss = truncate;
        self
    }

    /// Drops optimizer moments, e.g. before starting a fresh run from a shared init.
    pub fn reset_optimizer(&mut self) {
        self.moments = Moments::default();
    }

    pub fn num_params(&self) -> usize {
        self.encoder_len() + self.free_len()
    }

    /// Length of the encoder block at the front of the flat parameter vector.
    pub fn encoder_len(&self) -> usize {
        self.encoder_weight.len() + self.encoder_bias.len()
    }

    pub fn free_len(&self) -> usize {
        self.head_weight.len() + self.head_bias.len()
    }

    /// Flat parameters: encoder weight, encoder bias, head weight, head bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(&self.encoder_weight);
        p.extend_from_slice(&self.encoder_bias);
        p.extend_from_slice(&self.head_weight);
        p.extend_from_slice(&self.head_bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(BeaconError::Dimension { expected: self.num_params(), got: p.len() });
        }
        let (enc, free) = p.split_at(self.encoder_len());
        let (w, b) = enc.split_at(self.encoder_weight.len());
        self.encoder_weight.copy_from_slice(w);
        self.encoder_bias.copy_from_slice(b);
        self.set_free_params(free)
    }

    pub fn free_params(&self) -> Vec<f64> {
        let mut p = self.head_weight.clone();
        p.extend_from_slice(&self.head_bias);
        p
    }

    pub fn set_free_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.free_len() {
            return Err(BeaconError::Dimension { expected: self.free_len(), got: p.len() });
        }
        let (w, b) = p.split_at(self.head_weight.len());
        self.head_weight.copy_from_slice(w);
        self.head_bias.copy_from_slice(b);
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(BeaconError::Dimension { expected: self.input_dim, got: x.len() });
        }
        Ok(())
    }

    fn embed_unchecked(&self, x: &[f64]) -> Vec<f64> {
        (0..self.embed_dim)
            .map(|r| {
                let row = &self.encoder_weight[r * self.input_dim..(r + 1) * self.input_dim];
                let pre: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.encoder_bias[r];
                pre.tanh()
            })
            .collect()
    }

    fn head_unchecked(&self, z: &[f64]) -> Vec<f64> {
        (0..self.output_dim)
            .map(|o| {
                let row = &self.head_weight[o * self.embed_dim..(o + 1) * self.embed_dim];
                row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.head_bias[o]
            })
            .collect()
    }

    /// `tanh(A·x + a)`.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.embed_unchecked(x))
    }

    /// Embeddings of every sample, in dataset order.
    pub fn embed_all(&self, samples: &[LabeledSample]) -> Result<Vec<Vec<f64>>> {
        samples.iter().map(|s| self.embed(&s.x)).collect()
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.head_unchecked(&self.embed_unchecked(x)))
    }

    fn raw_loss(&self, prediction: &[f64], y: &[f64]) -> f64 {
        match self.loss {
            LossKind::Squared => 0.5 * prediction.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>(),
            LossKind::Logistic => {
                prediction.iter().zip(y).map(|(&p, &t)| softplus(p) - t * p).sum::<f64>()
                    / self.output_dim as f64
            }
        }
    }

    pub fn per_example_loss(&self, sample: &LabeledSample) -> Result<f64> {
        if sample.y.len() != self.output_dim {
            return Err(BeaconError::Dimension { expected: self.output_dim, got: sample.y.len() });
        }
        let prediction = self.predict(&sample.x)?;
        let loss = self.raw_loss(&prediction, &sample.y);
        Ok(if self.truncate_loss { loss.min(1.0) } else { loss })
    }

    /// Per-example losses of every sample in a forward-only pass.
    pub fn losses(&self, samples: &[LabeledSample]) -> Result<Vec<f64>> {
        samples.iter().map(|s| self.per_example_loss(s)).collect()
    }

    /// Gradient of `(1/|B|) sum_i q_i loss_i` with respect to the flat parameters.
    pub fn batch_gradient(&self, batch: &[(&LabeledSample, f64)]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.num_params()];
        if batch.is_empty() {
            return Ok(grad);
        }
        let scale = 1.0 / batch.len() as f64;
        let (ew, eb) = (self.encoder_weight.len(), self.encoder_bias.len());
        let hw = self.head_weight.len();
        for &(sample, q) in batch {
            self.check_input(&sample.x)?;
            if sample.y.len() != self.output_dim {
                return Err(BeaconError::Dimension { expected: self.output_dim, got: sample.y.len() });
            }
            if q == 0.0 {
                continue;
            }
            let z = self.embed_unchecked(&sample.x);
            let p = self.head_unchecked(&z);
            if self.truncate_loss && self.raw_loss(&p, &sample.y) > 1.0 {
                continue;
            }
            let dp: Vec<f64> = match self.loss {
                LossKind::Squared => p.iter().zip(&sample.y).map(|(a, b)| a - b).collect(),
                LossKind::Logistic => p
                    .iter()
                    .zip(&sample.y)
                    .map(|(&a, &b)| (sigmoid(a) - b) / self.output_dim as f64)
                    .collect(),
            };
            let w = q * scale;
            let mut dz = vec![0.0; self.embed_dim];
            for o in 0..self.output_dim {
                let g = w * dp[o];
                let row = o * self.embed_dim;
                for e in 0..self.embed_dim {
                    grad[ew + eb + row + e] += g * z[e];
                    dz[e] += g * self.head_weight[row + e];
                }
                grad[ew + eb + hw + o] += g;
            }
            for e in 0..self.embed_dim {
                let dpre = dz[e] * (1.0 - z[e] * z[e]);
                let row = e * self.input_dim;
                for (i, &xi) in sample.x.iter().enumerate() {
                    grad[row + i] += dpre * xi;
                }
                grad[ew + e] += dpre;
            }
        }
        Ok(grad)
    }

    /// One optimizer step on `(1/|B|) sum q_i loss_i` followed by decoupled decay:
    /// every trainable parameter is multiplied by `1 - lr * decay`.
    pub fn weighted_update(
        &mut self,
        batch: &[(&LabeledSample, f64)],
        lr: f64,
        decay: f64,
        optimizer: HOptimizer,
    ) -> Result<()> {
        if batch.is_empty() {
            return Err(BeaconError::InvalidArgument("weighted update on an empty batch".into()));
        }
        if lr < 0.0 || decay < 0.0 {
            return Err(BeaconError::InvalidArgument("lr and decay must be nonnegative".into()));
        }
        let grad = self.batch_gradient(batch)?;
        let mut params = self.params();
        let start = if self.frozen_encoder { self.encoder_len() } else { 0 };
        match optimizer {
            HOptimizer::Sgd => {
                for i in start..params.len() {
                    params[i] -= lr * grad[i];
                }
            }
            HOptimizer::AdamW => {
                let n = params.len();
                if self.moments.first.len() != n {
                    self.moments = Moments { first: vec![0.0; n], second: vec![0.0; n], steps: 0 };
                }
                self.moments.steps += 1;
                let c1 = 1.0 - BETA1.powi(self.moments.steps);
                let c2 = 1.0 - BETA2.powi(self.moments.steps);
                for i in start..n {
                    let m = &mut self.moments.first[i];
                    let v = &mut self.moments.second[i];
                    *m = BETA1 * *m + (1.0 - BETA1) * grad[i];
                    *v = BETA2 * *v + (1.0 - BETA2) * grad[i] * grad[i];
                    params[i] -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        let shrink = 1.0 - lr * decay;
        for p in &mut params[start..] {
            *p *= shrink;
        }
        self.set_params(&params)
    }

    /// `R(theta) = 0.5 * ||theta||^2` over all parameters.
    pub fn complexity(&self) -> f64 {
        0.5 * self.params().iter().map(|p| p * p).sum::<f64>()
    }
}

/// Fits `init` on the target samples of `data` with full-batch uniform-weight steps.
pub fn train_reference(
    init: &LearnerState,
    data: &Dataset,
    epochs: usize,
    lr: f64,
    optimizer: HOptimizer,
) -> Result<LearnerState> {
    let mut state = init.clone();
    state.reset_optimizer();
    let batch: Vec<(&LabeledSample, f64)> = data.target().iter().map(|s| (s, 1.0)).collect();
    for _ in 0..epochs {
        state.weighted_update(&batch, lr, 0.0, optimizer)?;
    }
    state.reset_optimizer();
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::seed_rng;
    use crate::types::Domain;

    fn sample(x: Vec<f64>, y: Vec<f64>) -> LabeledSample {
        LabeledSample::new(x, y, Domain::Target)
    }

    #[test]
    fn zero_encoder_embeds_to_zero() {
        let s = LearnerState::zeros(3, 2, 1, LossKind::Squared);
        assert_eq!(s.embed(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_encoder_at_origin() {
        let mut s = LearnerState::zeros(2, 2, 1, LossKind::Squared);
        s.encoder_weight = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(s.embed(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn embed_matches_direct_formula() {
        let s = LearnerState::init(3, 4, 2, LossKind::Squared, &mut seed_rng(3));
        let x = [0.3, -1.1, 2.0];
        let z = s.embed(&x).unwrap();
        for (r, &zr) in z.iter().enumerate() {
            let mut pre = s.encoder_bias[r];
            for (c, &xc) in x.iter().enumerate() {
                pre += s.encoder_weight[r * 3 + c] * xc;
            }
            assert!((zr - pre.tanh()).abs() < 1e-15);
            assert!(zr.abs() < 1.0);
        }
    }

    #[test]
    fn embed_dimension_mismatch() {
        let s = LearnerState::zeros(3, 2, 1, LossKind::Squared);
        assert!(matches!(s.embed(&[1.0]), Err(BeaconError::Dimension { expected: 3, got: 1 })));
    }

    #[test]
    fn squared_loss_cases() {
        let mut s = LearnerState::zeros(1, 1, 2, LossKind::Squared);
        s.head_bias = vec![1.0, -2.0];
        assert_eq!(s.per_example_loss(&sample(vec![0.5], vec![1.0, -2.0])).unwrap(), 0.0);
        assert!((s.per_example_loss(&sample(vec![0.5], vec![0.0, 0.0])).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_independent_formula() {
        let s = LearnerState::init(2, 3, 2, LossKind::Squared, &mut seed_rng(9));
        let smp = sample(vec![0.4, -0.7], vec![0.2, 1.5]);
        let mut expected = 0.0;
        for o in 0..2 {
            let mut p = s.head_bias[o];
            for e in 0..3 {
                let mut pre = s.encoder_bias[e];
                for i in 0..2 {
                    pre += s.encoder_weight[e * 2 + i] * smp.x[i];
                }
                p += s.head_weight[o * 3 + e] * pre.tanh();
            }
            expected += 0.5 * (p - smp.y[o]).powi(2);
        }
        assert!((s.per_example_loss(&smp).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn logistic_loss_at_zero_is_log2() {
        let s = LearnerState::zeros(2, 2, 1, LossKind::Logistic);
        for y in [0.0, 1.0] {
            let l = s.per_example_loss(&sample(vec![1.0, 2.0], vec![y])).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn truncation_caps_loss() {
        let s = LearnerState::zeros(1, 1, 1, LossKind::Squared).with_truncation(true);
        assert_eq!(s.per_example_loss(&sample(vec![0.0], vec![10.0])).unwrap(), 1.0);
    }

    #[test]
    fn zero_weights_zero_decay_is_noop() {
        let mut s = LearnerState::init(2, 3, 1, LossKind::Squared, &mut seed_rng(1));
        let before = s.params();
        let a = sample(vec![1.0, 2.0], vec![3.0]);
        s.weighted_update(&[(&a, 0.0)], 0.1, 0.0, HOptimizer::AdamW).unwrap();
        assert_eq!(s.params(), before);
    }

    #[test]
    fn decay_shrinks_every_parameter() {
        let mut s = LearnerState::init(2, 3, 1, LossKind::Squared, &mut seed_rng(1));
        let before = s.params();
        let a = sample(vec![1.0, 2.0], vec![3.0]);
        s.weighted_update(&[(&a, 0.0)], 0.1, 0.5, HOptimizer::AdamW).unwrap();
        for (b, a) in before.iter().zip(s.params()) {
            assert!((a - b * 0.95).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_encoder_is_untouched() {
        let mut s = LearnerState::init(2, 3, 1, LossKind::Squared, &mut seed_rng(2)).with_frozen_encoder(true);
        let enc = s.encoder_weight.clone();
        let head = s.head_weight.clone();
        let a = sample(vec![1.0, 2.0], vec![3.0]);
        s.weighted_update(&[(&a, 1.0)], 0.1, 0.1, HOptimizer::AdamW).unwrap();
        assert_eq!(s.encoder_weight, enc);
        assert_ne!(s.head_weight, head);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut s = LearnerState::zeros(1, 1, 1, LossKind::Squared);
        assert!(s.weighted_update(&[], 0.1, 0.0, HOptimizer::Sgd).is_err());
    }

    #[test]
    fn complexity_cases() {
        let mut s = LearnerState::zeros(1, 1, 1, LossKind::Squared);
        assert_eq!(s.complexity(), 0.0);
        s.head_bias = vec![2.0];
        assert_eq!(s.complexity(), 2.0);
        let r = LearnerState::init(3, 2, 2, LossKind::Squared, &mut seed_rng(5));
        let direct: f64 = r
            .encoder_weight
            .iter()
            .chain(&r.encoder_bias)
            .chain(&r.head_weight)
            .chain(&r.head_bias)
            .map(|v| v * v)
            .sum();
        assert!((r.complexity() - 0.5 * direct).abs() < 1e-14);
    }

    #[test]
    fn reference_fits_single_point() {
        let init = LearnerState::init(2, 4, 1, LossKind::Squared, &mut seed_rng(0));
        let data = Dataset::from_parts(vec![], vec![sample(vec![0.5, -0.5], vec![0.8])], 1).unwrap();
        let fitted = train_reference(&init, &data, 2000, 0.01, HOptimizer::AdamW).unwrap();
        assert!(fitted.per_example_loss(&data.target()[0]).unwrap() < 1e-4);
        let same = train_reference(&init, &data, 0, 0.01, HOptimizer::AdamW).unwrap();
        assert_eq!(same.params(), init.params());
    }
}
