use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use beacon::bench::{export_metrics, run_experiment, run_sweep};
use beacon::config::{load_config, seed_rng, LogWeights};
use beacon::discrepancy::{
    classifier_discrepancy, knn_discrepancy, localized_discrepancy, EmbeddingSet, LocalizedSpec,
};
use beacon::learner::{train_reference, LearnerState, LossKind};
use beacon::oracle::check_projections;
use beacon::{BeaconError, Config, Dataset, Domain, HyperParams, LabeledSample};

#[derive(Parser)]
#[command(name = "beacon", version, about = "Discrepancy-aware sample reweighting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogArg {
    Summary,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Knn,
    Classifier,
    Localized,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured method once with the config's seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        log_weights: Option<LogArg>,
    },
    /// Run every configured method over several seeds.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy coordinate-wise hyperparameter sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated field names, swept in this order.
        #[arg(long, value_delimiter = ',')]
        order: Vec<String>,
        /// JSON object mapping field names to value lists.
        #[arg(long)]
        grids: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score source rows against target rows. Columns whose name starts with `y` are labels.
    Discrepancy {
        #[arg(long, value_enum)]
        estimator: EstimatorArg,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ball radius for the localized estimator.
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, default_value_t = 16)]
        embed_dim: usize,
    },
    /// Compare the projection and weight solvers against brute-force grid search.
    CheckProjections {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn seeds_from(config: &Config, count: u64) -> Vec<u64> {
    (config.run.seed..config.run.seed + count).collect()
}

fn out_dir(out: Option<PathBuf>, config: &Config) -> PathBuf {
    out.or_else(|| config.run.out_dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"))
}

/// Feature rows and label rows.
type Rows = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn read_rows(path: &Path) -> anyhow::Result<Rows> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let is_label: Vec<bool> = headers.iter().map(|h| h.trim().starts_with('y')).collect();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record?;
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (field, &label) in record.iter().zip(&is_label) {
            let v: f64 = field.trim().parse().with_context(|| format!("bad number `{field}` in {}", path.display()))?;
            if label {
                y.push(v);
            } else {
                x.push(v);
            }
        }
        xs.push(x);
        ys.push(y);
    }
    Ok((xs, ys))
}

fn discrepancy_cmd(
    estimator: EstimatorArg,
    source: &Path,
    target: &Path,
    k: usize,
    seed: u64,
    radius: Option<f64>,
    embed_dim: usize,
) -> anyhow::Result<()> {
    let (sx, sy) = read_rows(source)?;
    let (tx, ty) = read_rows(target)?;
    let (scores, aux) = match estimator {
        EstimatorArg::Knn | EstimatorArg::Classifier => {
            let src = EmbeddingSet::uniform(sx, Domain::Source(0))?;
            let tgt = EmbeddingSet::uniform(tx, Domain::Target)?;
            if let EstimatorArg::Knn = estimator {
                (knn_discrepancy(&src, &tgt, k)?, None)
            } else {
                let (d, auc) = classifier_discrepancy(&src, &tgt, &mut seed_rng(seed))?;
                (d, Some(auc))
            }
        }
        EstimatorArg::Localized => {
            let radius = radius.ok_or_else(|| BeaconError::OutOfRange {
                field: "radius",
                reason: "the localized estimator needs --radius".into(),
            })?;
            let spec = LocalizedSpec::with_radius(radius);
            spec.validate()?;
            let sources = sx.into_iter().zip(sy).map(|(x, y)| LabeledSample::new(x, y, Domain::Source(0))).collect();
            let targets = tx.into_iter().zip(ty).map(|(x, y)| LabeledSample::new(x, y, Domain::Target)).collect();
            let data = Dataset::from_parts(sources, targets, 1)?;
            let hp = HyperParams::default();
            let init = LearnerState::init(
                data.input_dim(),
                embed_dim,
                data.output_dim(),
                LossKind::Squared,
                &mut seed_rng(seed),
            );
            let reference = train_reference(&init, &data, 200, hp.eta_theta, hp.h_optimizer)?;
            let d_hat = localized_discrepancy(&reference, &data, &spec)?;
            (vec![d_hat.max(0.0); data.m()], Some(d_hat))
        }
    };
    println!("index,d");
    for (i, d) in scores.iter().enumerate() {
        println!("{i},{d}");
    }
    if let Some(aux) = aux {
        println!("aux,{aux}");
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, out, log_weights } => {
            let mut config = load_config(&config)?;
            if let Some(LogArg::Full) = log_weights {
                config.run.log_weights = LogWeights::Full;
            }
            let dir = out_dir(out, &config);
            let report = run_experiment(&config, &config.run.methods, &[config.run.seed])?;
            export_metrics(&report, &dir)?;
            for row in &report.rows {
                println!("{} seed={} risk={:.6}", row.method.name(), row.seed, row.final_risk);
            }
        }
        Command::Bench { config, seeds, out } => {
            let config = load_config(&config)?;
            let dir = out_dir(out, &config);
            let report = run_experiment(&config, &config.run.methods, &seeds_from(&config, seeds))?;
            export_metrics(&report, &dir)?;
            for a in &report.aggregate {
                println!(
                    "{:<14} risk {:.6} +- {:.6} (wins {}/{})",
                    a.method.name(),
                    a.mean_risk,
                    a.std_risk,
                    a.wins,
                    seeds
                );
            }
        }
        Command::Sweep { config, order, grids, seeds, out } => {
            let config = load_config(&config)?;
            let text = std::fs::read_to_string(&grids).with_context(|| format!("reading {}", grids.display()))?;
            let grids: BTreeMap<String, Vec<f64>> =
                serde_json::from_str(&text).map_err(|e| BeaconError::ConfigParse(e.to_string()))?;
            let report = run_sweep(&config, &order, &grids, &seeds_from(&config, seeds))?;
            let dir = out_dir(out, &config);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&report)?)?;
            for (field, value) in &report.selected {
                println!("{field} = {value}");
            }
        }
        Command::Discrepancy { estimator, source, target, k, seed, radius, embed_dim } => {
            discrepancy_cmd(estimator, &source, &target, k, seed, radius, embed_dim)?;
        }
        Command::CheckProjections { instances, seed, tol } => {
            let check = check_projections(instances, seed, tol)?;
            println!("instances {}", check.instances);
            println!("box_sum max error {:.3e}", check.box_sum);
            println!("simplex max error {:.3e}", check.simplex);
            println!("q_solve max error {:.3e}", check.q_solve);
            println!("max error {:.3e}", check.max_error());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.downcast_ref::<BeaconError>().is_some_and(BeaconError::is_config_error);
            ExitCode::from(if config_error { 1 } else { 2 })
        }
    }
}
