//! Synthetic domain-shift benchmark: task generation, experiment orchestration,
//! greedy coordinate-wise hyperparameter sweeps and metric export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{seed_rng_stream, Config, HyperParams, LogWeights, Method};
use crate::error::{BeaconError, Result};
use crate::learner::LearnerState;
use crate::trainer::{
    train_beacon_multi, train_beacon_single, train_cotrain_fixed, train_target_only, TrainOptions, TrainReport,
    WeightSummary,
};
use crate::types::{Dataset, Domain, LabeledSample};

const DATA_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;
const CORRUPT_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// `y -> -y`
    LabelFlip,
    /// `y -> y + c` on every output.
    LabelOffset(f64),
}

/// Generator settings. Per-domain lists of length 1 apply to every source domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub n_target: usize,
    pub m_per_source: usize,
    pub num_domains: usize,
    /// Mean offset of each source domain's features; shorter vectors are zero-padded.
    pub covariate_shift: Vec<Vec<f64>>,
    /// Rotation angle (radians) of the true weights in the first two input coordinates.
    pub concept_shift: Vec<f64>,
    pub corrupt_fraction: Vec<f64>,
    pub label_noise_sigma: f64,
    pub corruption: Corruption,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            input_dim: 5,
            output_dim: 1,
            n_target: 20,
            m_per_source: 400,
            num_domains: 1,
            covariate_shift: vec![vec![1.0]],
            concept_shift: vec![0.0],
            corrupt_fraction: vec![0.4],
            label_noise_sigma: 0.1,
            corruption: Corruption::LabelOffset(5.0),
        }
    }
}

fn spec_err(reason: impl Into<String>) -> BeaconError {
    BeaconError::OutOfRange { field: "benchmark", reason: reason.into() }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(spec_err("input_dim and output_dim must be positive"));
        }
        if self.n_target < 2 {
            return Err(BeaconError::OutOfRange { field: "n_target", reason: "must be at least 2".into() });
        }
        if self.num_domains == 0 {
            return Err(BeaconError::OutOfRange { field: "num_domains", reason: "must be at least 1".into() });
        }
        let k = self.num_domains;
        let per_domain_ok = |len: usize| len == 1 || len == k;
        if !per_domain_ok(self.covariate_shift.len())
            || !per_domain_ok(self.concept_shift.len())
            || !per_domain_ok(self.corrupt_fraction.len())
        {
            return Err(spec_err(format!("per-domain lists must have length 1 or {k}")));
        }
        if self.covariate_shift.iter().any(|v| v.len() > self.input_dim) {
            return Err(spec_err("covariate shift longer than input_dim"));
        }
        if self.corrupt_fraction.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(BeaconError::OutOfRange { field: "corrupt_fraction", reason: "must lie in [0, 1]".into() });
        }
        if self.concept_shift.iter().any(|&a| a != 0.0) && self.input_dim < 2 {
            return Err(spec_err("concept shift needs input_dim >= 2"));
        }
        if !(self.label_noise_sigma >= 0.0 && self.label_noise_sigma.is_finite()) {
            return Err(BeaconError::OutOfRange { field: "label_noise_sigma", reason: "must be nonnegative".into() });
        }
        Ok(())
    }

    fn per_domain<T: Copy>(list: &[T], k: usize) -> T {
        if list.len() == 1 {
            list[0]
        } else {
            list[k]
        }
    }

    fn shift_of(&self, k: usize) -> Vec<f64> {
        let v = if self.covariate_shift.len() == 1 { &self.covariate_shift[0] } else { &self.covariate_shift[k] };
        let mut out = v.clone();
        out.resize(self.input_dim, 0.0);
        out
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn apply(weights: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    weights.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn rotate(weights: &[Vec<f64>], angle: f64) -> Vec<Vec<f64>> {
    let (s, c) = angle.sin_cos();
    weights
        .iter()
        .map(|row| {
            let mut r = row.clone();
            if angle != 0.0 {
                r[0] = c * row[0] - s * row[1];
                r[1] = s * row[0] + c * row[1];
            }
            r
        })
        .collect()
}

/// Training set (sources then `n_target` targets) and a disjoint held-out target set of the same size.
pub fn gen_shifted_task(spec: &ShiftSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = seed_rng_stream(seed, DATA_STREAM);
    let scale = 1.0 / (spec.input_dim as f64).sqrt();
    let truth: Vec<Vec<f64>> = (0..spec.output_dim)
        .map(|_| gaussian_vec(&mut rng, spec.input_dim).into_iter().map(|v| v * scale).collect())
        .collect();
    let sigma = spec.label_noise_sigma;
    let noisy = |rng: &mut rand_chacha::ChaCha8Rng, clean: Vec<f64>| -> Vec<f64> {
        clean.into_iter().map(|y| {
            let e: f64 = StandardNormal.sample(rng);
            y + sigma * e
        }).collect()
    };

    let mut targets = Vec::with_capacity(2 * spec.n_target);
    for _ in 0..2 * spec.n_target {
        let x = gaussian_vec(&mut rng, spec.input_dim);
        let y = noisy(&mut rng, apply(&truth, &x));
        targets.push(LabeledSample::new(x, y, Domain::Target));
    }
    let heldout = targets.split_off(spec.n_target);

    // Separate stream so the corrupted subset does not perturb the features.
    let mut corrupt_rng = seed_rng_stream(seed, CORRUPT_STREAM);
    let mut sources = Vec::with_capacity(spec.num_domains * spec.m_per_source);
    for k in 0..spec.num_domains {
        let shift = spec.shift_of(k);
        let rotated = rotate(&truth, ShiftSpec::per_domain(&spec.concept_shift, k));
        let rho = ShiftSpec::per_domain(&spec.corrupt_fraction, k);
        let n_corrupt = (rho * spec.m_per_source as f64).round() as usize;
        let mut corrupt = vec![false; spec.m_per_source];
        for i in sample_indices(&mut corrupt_rng, spec.m_per_source, n_corrupt) {
            corrupt[i] = true;
        }
        for &is_corrupt in &corrupt {
            let x: Vec<f64> = gaussian_vec(&mut rng, spec.input_dim).iter().zip(&shift).map(|(a, b)| a + b).collect();
            let mut y = noisy(&mut rng, apply(&rotated, &x));
            if is_corrupt {
                match spec.corruption {
                    Corruption::LabelFlip => y.iter_mut().for_each(|v| *v = -*v),
                    Corruption::LabelOffset(c) => y.iter_mut().for_each(|v| *v += c),
                }
            }
            sources.push(LabeledSample::new(x, y, Domain::Source(k)).with_corrupt(is_corrupt));
        }
    }
    let train = Dataset::from_parts(sources, targets, spec.num_domains)?;
    let heldout = Dataset::from_parts(Vec::new(), heldout, spec.num_domains)?;
    Ok((train, heldout))
}

/// Hex SHA-256 of the dataset's JSON serialization.
pub fn dataset_hash(data: &Dataset) -> Result<String> {
    let bytes = serde_json::to_vec(data)?;
    let digest = Sha256::digest(&bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(out, "{b:02x}");
    }
    Ok(out)
}

/// The shared initial learner for `seed`.
pub fn initial_learner(config: &Config, seed: u64) -> LearnerState {
    let l = &config.run.learner;
    let b = &config.benchmark;
    LearnerState::init(b.input_dim, l.embed_dim, b.output_dim, l.loss, &mut seed_rng_stream(seed, INIT_STREAM))
        .with_frozen_encoder(l.freeze_encoder)
        .with_truncation(l.truncate_loss)
}

/// Runs one method with the per-seed training stream.
pub fn run_method(
    method: Method,
    config: &Config,
    hp: &HyperParams,
    data: &Dataset,
    heldout: &Dataset,
    init: &LearnerState,
    seed: u64,
) -> Result<TrainReport> {
    let mut rng = seed_rng_stream(seed, TRAIN_STREAM);
    let mut opts = TrainOptions::new(init).with_heldout(heldout.samples());
    opts.log_full_weights = config.run.log_weights == LogWeights::Full;
    opts.reference_epochs = config.run.learner.reference_epochs;
    match method {
        Method::TargetOnly => train_target_only(data, hp, &opts, &mut rng),
        Method::CotrainFixed => train_cotrain_fixed(data, hp, config.run.mix_ratio, &opts, &mut rng),
        Method::Beacon => train_beacon_single(data, hp, &opts, &mut rng),
        Method::BeaconMulti => train_beacon_multi(data, hp, &opts, &mut rng),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub seed: u64,
    pub dataset_hash: String,
    pub final_risk: f64,
    pub final_weights: Option<WeightSummary>,
    pub final_domain_weights: Option<Vec<f64>>,
    pub wall_time_s: f64,
    #[serde(skip)]
    pub report: Option<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: Method,
    pub runs: usize,
    pub mean_risk: f64,
    pub std_risk: f64,
    pub stderr_risk: f64,
    /// Seeds on which this method had the lowest risk.
    pub wins: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub aggregate: Vec<MethodAggregate>,
}

impl BenchReport {
    pub fn rows_for(&self, method: Method) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }

    pub fn risk(&self, method: Method, seed: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method && r.seed == seed).map(|r| r.final_risk)
    }

    pub fn aggregate_for(&self, method: Method) -> Option<&MethodAggregate> {
        self.aggregate.iter().find(|a| a.method == method)
    }

    fn compute_aggregate(&mut self) {
        let methods: Vec<Method> = {
            let mut m: Vec<Method> = self.rows.iter().map(|r| r.method).collect();
            m.sort();
            m.dedup();
            m
        };
        let seeds: Vec<u64> = {
            let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
            s.sort_unstable();
            s.dedup();
            s
        };
        let mut wins: BTreeMap<Method, usize> = BTreeMap::new();
        for &seed in &seeds {
            let best = self
                .rows
                .iter()
                .filter(|r| r.seed == seed)
                .min_by(|a, b| a.final_risk.total_cmp(&b.final_risk).then(a.method.cmp(&b.method)));
            if let Some(b) = best {
                *wins.entry(b.method).or_default() += 1;
            }
        }
        self.aggregate = methods
            .into_iter()
            .map(|method| {
                let risks: Vec<f64> = self.rows_for(method).map(|r| r.final_risk).collect();
                let n = risks.len() as f64;
                let mean = risks.iter().sum::<f64>() / n;
                let var = if risks.len() > 1 {
                    risks.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                MethodAggregate {
                    method,
                    runs: risks.len(),
                    mean_risk: mean,
                    std_risk: var.sqrt(),
                    stderr_risk: (var / n).sqrt(),
                    wins: wins.get(&method).copied().unwrap_or(0),
                }
            })
            .collect();
    }
}

/// Runs every method on every seed. All methods share the dataset and the
/// initial learner of a seed.
pub fn run_experiment(config: &Config, methods: &[Method], seeds: &[u64]) -> Result<BenchReport> {
    config.validate()?;
    let mut report = BenchReport::default();
    for &seed in seeds {
        let (data, heldout) = gen_shifted_task(&config.benchmark, seed)?;
        let hash = dataset_hash(&data)?;
        let init = initial_learner(config, seed);
        for &method in methods {
            let start = Instant::now();
            let run = run_method(method, config, &config.hyper, &data, &heldout, &init, seed)?;
            let wall_time_s = start.elapsed().as_secs_f64();
            let final_risk = run
                .final_risk()
                .map_or_else(|| crate::trainer::evaluate(&run.learner, heldout.samples()), Ok)?;
            report.rows.push(BenchRow {
                method,
                seed,
                dataset_hash: hash.clone(),
                final_risk,
                final_weights: run.weight_log.last().cloned(),
                final_domain_weights: run.domain_log.last().map(|(_, w)| w.clone()),
                wall_time_s,
                report: Some(run),
            });
        }
    }
    report.compute_aggregate();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub field: String,
    pub value: f64,
    pub mean_risk: f64,
    pub risks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Selected value per field, in sweep order.
    pub selected: Vec<(String, f64)>,
    pub cells: Vec<SweepCell>,
    pub final_hyper: HyperParams,
}

fn risks_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Greedy coordinate-wise sweep of the single-source loop: each field in
/// `order` is swept over its grid with the earlier fields fixed at their
/// selected values. Ties go to the default value, then to the smaller value.
pub fn run_sweep(
    config: &Config,
    order: &[String],
    grids: &BTreeMap<String, Vec<f64>>,
    seeds: &[u64],
) -> Result<SweepReport> {
    config.validate()?;
    let defaults = HyperParams::default();
    for field in order {
        defaults.get_field(field)?;
        if grids.get(field).is_none_or(|g| g.is_empty()) {
            return Err(BeaconError::InvalidArgument(format!("no grid values for `{field}`")));
        }
    }
    let tasks: Vec<(Dataset, Dataset, LearnerState)> = seeds
        .iter()
        .map(|&s| gen_shifted_task(&config.benchmark, s).map(|(d, h)| (d, h, initial_learner(config, s))))
        .collect::<Result<_>>()?;

    let mut hp = config.hyper.clone();
    let mut cells = Vec::new();
    let mut selected = Vec::new();
    for field in order {
        let default_value = defaults.get_field(field)?;
        let mut best: Option<(f64, f64)> = None;
        for &value in &grids[field] {
            let candidate = hp.with_field(field, value)?;
            let risks = seeds
                .iter()
                .zip(&tasks)
                .map(|(&seed, (data, heldout, init))| {
                    let run = run_method(Method::Beacon, config, &candidate, data, heldout, init, seed)?;
                    crate::trainer::evaluate(&run.learner, heldout.samples())
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean_risk = risks.iter().sum::<f64>() / risks.len() as f64;
            cells.push(SweepCell { field: field.clone(), value, mean_risk, risks });
            best = Some(match best {
                None => (value, mean_risk),
                Some((bv, br)) if risks_equal(mean_risk, br) => {
                    let prefer_new = if value == default_value {
                        true
                    } else if bv == default_value {
                        false
                    } else {
                        value < bv
                    };
                    if prefer_new {
                        (value, mean_risk)
                    } else {
                        (bv, br)
                    }
                }
                Some((_, br)) if mean_risk < br => (value, mean_risk),
                Some(keep) => keep,
            });
        }
        let (value, _) = best.expect("grid is nonempty");
        hp = hp.with_field(field, value)?;
        selected.push((field.clone(), value));
    }
    Ok(SweepReport { selected, cells, final_hyper: hp })
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `metrics.csv`, `weights.jsonl` and `summary.json` into `dir`, plus
/// per-refresh checkpoints when full weight logs are present.
pub fn export_metrics(report: &BenchReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;

    let mut csv = csv::Writer::from_path(dir.join("metrics.csv"))?;
    csv.write_record([
        "method",
        "seed",
        "epoch",
        "target_risk",
        "mean_q_source",
        "mean_q_target",
        "mean_q_clean",
        "mean_q_corrupt",
    ])?;
    let mut jsonl = std::io::BufWriter::new(std::fs::File::create(dir.join("weights.jsonl"))?);
    for row in &report.rows {
        let Some(run) = &row.report else { continue };
        let mut current: Option<&WeightSummary> = None;
        let mut log = run.weight_log.iter().peekable();
        for m in &run.metrics {
            while let Some(w) = log.next_if(|w| w.epoch <= m.epoch) {
                current = Some(w);
            }
            csv.write_record([
                row.method.name().to_string(),
                row.seed.to_string(),
                m.epoch.to_string(),
                opt_num(m.target_risk),
                opt_num(current.and_then(|w| w.source.map(|s| s.mean))),
                opt_num(current.and_then(|w| w.target.map(|s| s.mean))),
                opt_num(current.and_then(|w| w.clean_source.map(|s| s.mean))),
                opt_num(current.and_then(|w| w.corrupt_source.map(|s| s.mean))),
            ])?;
        }
        let domain: BTreeMap<usize, &Vec<f64>> = run.domain_log.iter().map(|(e, w)| (*e, w)).collect();
        for w in &run.weight_log {
            let record = serde_json::json!({
                "method": row.method.name(),
                "seed": row.seed,
                "epoch": w.epoch,
                "summary": w,
                "domain_weights": domain.get(&w.epoch),
            });
            serde_json::to_writer(&mut jsonl, &record)?;
            jsonl.write_all(b"\n")?;
        }
        if !run.checkpoints.is_empty() {
            let cdir = dir.join("checkpoints");
            std::fs::create_dir_all(&cdir)?;
            for c in &run.checkpoints {
                let name = format!("{}_seed{}_epoch{}.json", row.method.name(), row.seed, c.epoch);
                std::fs::write(cdir.join(name), serde_json::to_string(c)?)?;
            }
        }
    }
    csv.flush()?;
    jsonl.flush()?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}
