//! Configuration schema, defaults and seeded randomness.
//!
//! A configuration file is a single JSON document with three top-level keys:
//! `hyper` (training coefficients), `benchmark` (synthetic task generator) and
//! `run` (seed, output directory, method list, learner settings). Every field
//! is optional; missing fields take the defaults below.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::ShiftSpec;
use crate::discrepancy::LocalizedSpec;
use crate::error::{BeaconError, Result};
use crate::learner::LossKind;

pub type RngState = ChaCha8Rng;

/// Deterministic random stream for `seed`.
pub fn seed_rng(seed: u64) -> RngState {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` derived from `seed`.
pub fn seed_rng_stream(seed: u64, stream: u64) -> RngState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Knn,
    Classifier,
    Localized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QUpdate {
    Stochastic,
    ConvexSolve,
}

/// Optimizer used for the learner's h-steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HOptimizer {
    #[serde(rename = "adamw", alias = "adam_w")]
    AdamW,
    /// Plain gradient descent with the same decoupled decay.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_d: f64,
    /// Capacity coefficient; scales the decoupled weight decay by the largest weight.
    pub gamma: f64,
    pub rho1: f64,
    pub rho2: f64,
    /// Source share of the sum budget `n + alpha * m`.
    pub alpha: f64,
    pub q_max: f64,
    pub q_t_min: f64,
    pub eta_q: f64,
    pub eta_theta: f64,
    pub eta_w: f64,
    /// Target step size in the multi-source q-tilde step; defaults to `eta_q`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_t: Option<f64>,
    /// Refresh period of discrepancy scores and weights, in epochs.
    pub k_q: usize,
    /// h-steps per epoch.
    pub s_h: usize,
    pub epochs: usize,
    /// Neighbor count of the k-NN estimator.
    pub k: usize,
    pub batch_size: usize,
    pub estimator: Estimator,
    pub q_update: QUpdate,
    pub h_optimizer: HOptimizer,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub localized: Option<LocalizedSpec>,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.01,
            lambda_d: 0.1,
            gamma: 1e-4,
            rho1: 0.01,
            rho2: 0.01,
            alpha: 0.45,
            q_max: 5.0,
            q_t_min: 0.05,
            eta_q: 0.01,
            eta_theta: 0.01,
            eta_w: 0.05,
            eta_t: None,
            k_q: 1,
            s_h: 10,
            epochs: 100,
            k: 5,
            batch_size: 32,
            estimator: Estimator::Knn,
            q_update: QUpdate::Stochastic,
            h_optimizer: HOptimizer::AdamW,
            localized: None,
        }
    }
}

fn range_err(field: &'static str, reason: impl Into<String>) -> BeaconError {
    BeaconError::OutOfRange { field, reason: reason.into() }
}

impl HyperParams {
    pub fn eta_target(&self) -> f64 {
        self.eta_t.unwrap_or(self.eta_q)
    }

    pub fn validate(&self) -> Result<()> {
        let reals: [(&'static str, f64); 13] = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_d", self.lambda_d),
            ("gamma", self.gamma),
            ("rho1", self.rho1),
            ("rho2", self.rho2),
            ("alpha", self.alpha),
            ("q_max", self.q_max),
            ("q_t_min", self.q_t_min),
            ("eta_q", self.eta_q),
            ("eta_theta", self.eta_theta),
            ("eta_w", self.eta_w),
            ("eta_t", self.eta_target()),
        ];
        for (field, v) in reals {
            if !v.is_finite() {
                return Err(range_err(field, format!("{v} is not finite")));
            }
        }
        for (field, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_d", self.lambda_d),
            ("gamma", self.gamma),
            ("rho1", self.rho1),
            ("rho2", self.rho2),
            ("q_t_min", self.q_t_min),
        ] {
            if v < 0.0 {
                return Err(range_err(field, format!("{v} must be nonnegative")));
            }
        }
        for (field, v) in [
            ("eta_q", self.eta_q),
            ("eta_theta", self.eta_theta),
            ("eta_w", self.eta_w),
            ("eta_t", self.eta_target()),
        ] {
            if v <= 0.0 {
                return Err(range_err(field, format!("{v} must be positive")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(range_err("alpha", format!("{} not in (0, 1]", self.alpha)));
        }
        if self.q_max < 1.0 {
            return Err(range_err("q_max", format!("{} must be at least 1", self.q_max)));
        }
        if self.q_t_min >= self.q_max {
            return Err(range_err("q_t_min", "must be below q_max"));
        }
        for (field, v) in [
            ("k_q", self.k_q),
            ("s_h", self.s_h),
            ("k", self.k),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(range_err(field, "must be a positive integer"));
            }
        }
        match (&self.localized, self.estimator) {
            (Some(spec), _) => spec.validate()?,
            (None, Estimator::Localized) => {
                return Err(range_err("localized", "required when estimator is `localized`"))
            }
            (None, _) => {}
        }
        Ok(())
    }

    /// Reads a numeric field by its config name.
    pub fn get_field(&self, name: &str) -> Result<f64> {
        let name = canonical_field(name);
        let value = serde_json::to_value(self)?;
        match value.get(name) {
            Some(v) if v.is_number() => Ok(v.as_f64().unwrap_or(f64::NAN)),
            None if name == "eta_t" => Ok(self.eta_target()),
            _ => Err(BeaconError::UnknownField(name.to_string())),
        }
    }

    /// Returns a copy with one numeric field replaced, validated.
    pub fn with_field(&self, name: &str, value: f64) -> Result<HyperParams> {
        let name = canonical_field(name);
        let mut json = serde_json::to_value(self)?;
        let obj = json.as_object_mut().expect("hyperparameters serialize to an object");
        let is_numeric = obj.get(name).is_some_and(|v| v.is_number()) || name == "eta_t";
        if !is_numeric {
            return Err(BeaconError::UnknownField(name.to_string()));
        }
        let is_integer = matches!(name, "k_q" | "s_h" | "epochs" | "k" | "batch_size");
        let v = if is_integer {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(BeaconError::OutOfRange {
                    field: "sweep value",
                    reason: format!("{name} needs a nonnegative integer, got {value}"),
                });
            }
            serde_json::json!(value as u64)
        } else {
            serde_json::json!(value)
        };
        obj.insert(name.to_string(), v);
        let hp: HyperParams =
            serde_json::from_value(json).map_err(|e| BeaconError::ConfigParse(e.to_string()))?;
        hp.validate()?;
        Ok(hp)
    }
}

/// Maps the Greek-letter spellings accepted on the command line to config names.
pub fn canonical_field(name: &str) -> &str {
    match name {
        "λ1" => "lambda1",
        "λ2" => "lambda2",
        "λd" => "lambda_d",
        "γ" => "gamma",
        "α" => "alpha",
        "ρ1" => "rho1",
        "ρ2" => "rho2",
        "η_q" | "ηq" => "eta_q",
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TargetOnly,
    CotrainFixed,
    Beacon,
    BeaconMulti,
}

impl Method {
    pub const ALL: [Method; 4] =
        [Method::TargetOnly, Method::CotrainFixed, Method::Beacon, Method::BeaconMulti];

    pub fn name(self) -> &'static str {
        match self {
            Method::TargetOnly => "target_only",
            Method::CotrainFixed => "cotrain_fixed",
            Method::Beacon => "beacon",
            Method::BeaconMulti => "beacon_multi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogWeights {
    Summary,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerSpec {
    pub embed_dim: usize,
    pub loss: LossKind,
    pub freeze_encoder: bool,
    /// Truncate per-example losses to `min(loss, 1)`.
    pub truncate_loss: bool,
    /// Epochs used to fit the target-only reference for the localized estimator.
    pub reference_epochs: usize,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            loss: LossKind::Squared,
            freeze_encoder: false,
            truncate_loss: false,
            reference_epochs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub methods: Vec<Method>,
    /// Expected source fraction of each minibatch for fixed-ratio co-training.
    pub mix_ratio: f64,
    pub log_weights: LogWeights,
    pub learner: LearnerSpec,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            methods: Method::ALL.to_vec(),
            mix_ratio: 0.5,
            log_weights: LogWeights::Summary,
            learner: LearnerSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub hyper: HyperParams,
    pub benchmark: ShiftSpec,
    pub run: RunSpec,
}

impl Config {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: Config =
            serde_json::from_str(text).map_err(|e| BeaconError::ConfigParse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.benchmark.validate()?;
        if !(self.run.mix_ratio > 0.0 && self.run.mix_ratio < 1.0) {
            return Err(range_err("mix_ratio", format!("{} not in (0, 1)", self.run.mix_ratio)));
        }
        if self.run.learner.embed_dim == 0 {
            return Err(range_err("embed_dim", "must be at least 1"));
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

/// Loads and validates a configuration file, filling defaults for missing fields.
pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    let text = std::fs::read_to_string(path)?;
    Config::from_json_str(&text)
}
