//! Command-line driver: generate synthetic worlds, train deferral systems,
//! tune the out-of-distribution gate, evaluate on held-out data, run full
//! experiments, and compare result samples.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use deferral_core::dataset::{CostFunction, CounterfactualTable, FeatureVector};
use deferral_core::datagen::{
    gen_cluster_labels, gen_covshift_world, gen_deterministic_world, multilabel_to_bandit,
    CovShiftConfig, DetWorldConfig, ProbitExpert, QuantileExpert,
};
use deferral_core::harness::{evaluate_team, run_experiment, ExperimentConfig, TrainSettings};
use deferral_core::hbm::{multilabel_pool_from_counterfactuals, ReplayHbm, WorkerPool};
use deferral_core::io::{read_file, write_file, DatasetFile};
use deferral_core::models::Activation;
use deferral_core::ood::{fit_ood, tune_ood, DetectorKind};
use deferral_core::propensity::{
    detect_deterministic_support, fit_assignment, fit_per_human_propensity, fit_propensity,
    EstimatorKind, FitOptions,
};
use deferral_core::rng::Seed;
use deferral_core::stats::welch_t_test;
use deferral_core::training::{
    config_fingerprint, train_ao, train_ec_variant, train_joint, train_joint_personalized,
    train_two_stage, ArchSpec, DeferralSystem, Method, Router, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "deferral",
    about = "Offline policy learning and human-AI deferral routing",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world into a directory of dataset files.
    GenData(GenDataArgs),
    /// Train a deferral system on a generated dataset directory.
    Train(TrainArgs),
    /// Tune the out-of-distribution gate on post-deployment data.
    TuneOod(TuneOodArgs),
    /// Evaluate a trained system bundle on a test file with live humans.
    Evaluate(EvaluateArgs),
    /// Run a full multi-method, multi-repetition experiment from a config.
    Experiment(ExperimentArgs),
    /// Welch two-sample t-test between two result samples.
    Ttest(TtestArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// World kind: deterministic | covshift | multilabel
    #[arg(long)]
    world: String,
    /// Comma-separated key=value parameters, e.g. "s=0.3,n_train=500,n_test=10000"
    #[arg(long, default_value = "")]
    params: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Method tag: ao | ts | jc | jcp | ao-ec | ts-ec | jc-ec
    #[arg(long)]
    method: String,
    /// Dataset directory produced by gen-data (reads train.csv).
    #[arg(long)]
    data: PathBuf,
    /// Optional TOML settings file (train table plus cost).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TuneOodArgs {
    /// Trained bundle directory.
    #[arg(long)]
    system: PathBuf,
    /// Post-deployment tuning log (csv).
    #[arg(long)]
    tuning_data: PathBuf,
    /// Comma-separated contamination grid, e.g. "0.01,0.05,0.2,0.99"
    #[arg(long)]
    grid: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    system: PathBuf,
    /// Test file with counterfactual columns.
    #[arg(long)]
    test: PathBuf,
    /// Human behavior description (toml).
    #[arg(long)]
    hbm: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TtestArgs {
    /// File with one number per line.
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

// ── Sidecar formats ──────────────────────────────────────────────────────

/// Description of the humans answering test-time queries.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum HbmSpec {
    /// Uniform-accuracy workers; optimal actions come from the test file's
    /// counterfactual columns.
    Noise { rhos: Vec<f64>, costs: Vec<f64> },
    /// Probit sampler over binary actions.
    Probit { scale: f64, cost: f64 },
    /// Deterministic above an x0 threshold, probit below.
    QuantileExpert {
        threshold_x0: f64,
        alpha: f64,
        strict_ec: bool,
        cost: f64,
    },
    /// Replay recorded annotations (`instance_id, annotator_id, action`).
    Replay { annotations: PathBuf, cost: f64 },
}

impl HbmSpec {
    fn build_pool(
        &self,
        num_instances: usize,
        counterfactuals: &CounterfactualTable,
    ) -> Result<(WorkerPool, CostFunction), String> {
        match self {
            HbmSpec::Noise { rhos, costs } => {
                if rhos.len() != costs.len() || rhos.is_empty() {
                    return Err("need one cost per noise worker".to_string());
                }
                let pool = multilabel_pool_from_counterfactuals(rhos, costs, counterfactuals)
                    .map_err(|e| e.to_string())?;
                Ok((pool, CostFunction::PerHuman(costs.clone())))
            }
            HbmSpec::Probit { scale, cost } => {
                let pool =
                    WorkerPool::new(vec![Box::new(ProbitExpert { scale: *scale })], vec![*cost])
                        .map_err(|e| e.to_string())?;
                Ok((pool, CostFunction::Constant(*cost)))
            }
            HbmSpec::QuantileExpert {
                threshold_x0,
                alpha,
                strict_ec,
                cost,
            } => {
                let expert = QuantileExpert {
                    threshold_x0: *threshold_x0,
                    alpha: *alpha,
                    strict_ec: *strict_ec,
                };
                let pool = WorkerPool::new(vec![Box::new(expert)], vec![*cost])
                    .map_err(|e| e.to_string())?;
                Ok((pool, CostFunction::Constant(*cost)))
            }
            HbmSpec::Replay { annotations, cost } => {
                let text = std::fs::read_to_string(annotations).map_err(|e| e.to_string())?;
                let hbm = ReplayHbm::from_annotation_text(
                    &text,
                    num_instances,
                    counterfactuals.num_actions(),
                )
                .map_err(|e| e.to_string())?;
                let pool = WorkerPool::new(vec![Box::new(hbm)], vec![*cost])
                    .map_err(|e| e.to_string())?;
                Ok((pool, CostFunction::Constant(*cost)))
            }
        }
    }
}

/// Settings file for `train`: the shared training knobs plus the cost.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainFileConfig {
    #[serde(default = "CostFunction::zero")]
    cost: CostFunction,
    #[serde(default)]
    train: TrainSettings,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        TrainFileConfig {
            cost: CostFunction::zero(),
            train: TrainSettings::default(),
        }
    }
}

fn parse_params(s: &str) -> Result<std::collections::BTreeMap<String, String>, String> {
    let mut map = std::collections::BTreeMap::new();
    for piece in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = piece
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got '{piece}'"))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn param_f64(
    map: &std::collections::BTreeMap<String, String>,
    key: &str,
    default: f64,
) -> Result<f64, String> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| format!("bad {key}: {v}")),
    }
}

fn param_usize(
    map: &std::collections::BTreeMap<String, String>,
    key: &str,
    default: usize,
) -> Result<usize, String> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| format!("bad {key}: {v}")),
    }
}

fn param_list(
    map: &std::collections::BTreeMap<String, String>,
    key: &str,
    default: &[f64],
) -> Result<Vec<f64>, String> {
    match map.get(key) {
        None => Ok(default.to_vec()),
        Some(v) => v
            .split(';')
            .map(|p| p.trim().parse().map_err(|_| format!("bad {key}: {p}")))
            .collect(),
    }
}

// ── Subcommand implementations ───────────────────────────────────────────

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), String> {
    let params = parse_params(&args.params)?;
    let seed = Seed(args.seed);
    std::fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
    match args.world.as_str() {
        "deterministic" => {
            let s = param_f64(&params, "s", 0.3)?;
            let alpha = param_f64(&params, "alpha", 0.0)?;
            let strict = params.get("strict").map_or(true, |v| v == "true");
            let n_train = param_usize(&params, "n_train", 500)?;
            let n_test = param_usize(&params, "n_test", 10_000)?;
            let make = |n: usize, child: &str| {
                gen_deterministic_world(
                    DetWorldConfig {
                        s,
                        alpha,
                        n,
                        strict_ec: strict,
                    },
                    seed.derive(child),
                )
                .map_err(|e| e.to_string())
            };
            let train = make(n_train, "world-train")?;
            let test = make(n_test, "world-test")?;
            write_file(
                &args.out.join("train.csv"),
                &train.log,
                Some(&train.counterfactuals),
                Some(&train.oracle_mask),
            )
            .map_err(|e| e.to_string())?;
            write_file(
                &args.out.join("test.csv"),
                &test.log,
                Some(&test.counterfactuals),
                Some(&test.oracle_mask),
            )
            .map_err(|e| e.to_string())?;
            let hbm = HbmSpec::QuantileExpert {
                threshold_x0: test.threshold_x0,
                alpha,
                strict_ec: strict,
                cost: param_f64(&params, "cost", 0.0)?,
            };
            std::fs::write(
                args.out.join("hbm.toml"),
                toml::to_string_pretty(&hbm).map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            println!(
                "wrote deterministic world: {n_train} train / {n_test} test records (s={s}, alpha={alpha})"
            );
        }
        "covshift" => {
            let mu = param_f64(&params, "mu", 1.0)?;
            let world = gen_covshift_world(
                CovShiftConfig {
                    mu,
                    n_train: param_usize(&params, "n_train", 2000)?,
                    n_test: param_usize(&params, "n_test", 10_000)?,
                    n_tune: param_usize(&params, "n_tune", 300)?,
                },
                seed.derive("world"),
            )
            .map_err(|e| e.to_string())?;
            write_file(
                &args.out.join("train.csv"),
                &world.train_log,
                Some(&world.train_counterfactuals),
                None,
            )
            .map_err(|e| e.to_string())?;
            write_file(
                &args.out.join("test.csv"),
                &world.test_log,
                Some(&world.test_counterfactuals),
                None,
            )
            .map_err(|e| e.to_string())?;
            write_file(
                &args.out.join("tuning.csv"),
                &world.tune_log,
                Some(&world.tune_counterfactuals),
                None,
            )
            .map_err(|e| e.to_string())?;
            let hbm = HbmSpec::Probit {
                scale: 0.5,
                cost: param_f64(&params, "cost", 0.1)?,
            };
            std::fs::write(
                args.out.join("hbm.toml"),
                toml::to_string_pretty(&hbm).map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            println!("wrote covariate-shift world (mu={mu}): train/test/tuning splits");
        }
        "multilabel" => {
            let classes = param_usize(&params, "classes", 6)?;
            let separation = param_f64(&params, "separation", 2.5)?;
            let extra = param_f64(&params, "extra_label_prob", 0.0)?;
            let n_train = param_usize(&params, "n_train", 400)?;
            let n_test = param_usize(&params, "n_test", 400)?;
            let rhos = param_list(&params, "rhos", &[0.6, 0.7, 0.8])?;
            let costs = param_list(&params, "costs", &vec![0.0; rhos.len()])?;
            if rhos.len() != costs.len() {
                return Err("rhos and costs must have matching lengths".to_string());
            }
            let label_row = |labels: &Vec<usize>| {
                let mut row = vec![0.0; classes];
                for &l in labels {
                    row[l] = 1.0;
                }
                row
            };
            let (train_x, train_labels) =
                gen_cluster_labels(n_train, classes, separation, extra, seed.derive("train"));
            let train_cf =
                CounterfactualTable::new(train_labels.iter().map(label_row).collect(), classes)
                    .map_err(|e| e.to_string())?;
            let pool = multilabel_pool_from_counterfactuals(&rhos, &costs, &train_cf)
                .map_err(|e| e.to_string())?;
            let (train_log, train_cf) =
                multilabel_to_bandit(&train_x, &train_labels, classes, &pool, seed.derive("log"))
                    .map_err(|e| e.to_string())?;
            let (test_x, test_labels) =
                gen_cluster_labels(n_test, classes, separation, extra, seed.derive("test"));
            let test_cf =
                CounterfactualTable::new(test_labels.iter().map(label_row).collect(), classes)
                    .map_err(|e| e.to_string())?;
            let test_pool = multilabel_pool_from_counterfactuals(&rhos, &costs, &test_cf)
                .map_err(|e| e.to_string())?;
            let (test_log, test_cf) = multilabel_to_bandit(
                &test_x,
                &test_labels,
                classes,
                &test_pool,
                seed.derive("test-log"),
            )
            .map_err(|e| e.to_string())?;
            write_file(&args.out.join("train.csv"), &train_log, Some(&train_cf), None)
                .map_err(|e| e.to_string())?;
            write_file(&args.out.join("test.csv"), &test_log, Some(&test_cf), None)
                .map_err(|e| e.to_string())?;
            let hbm = HbmSpec::Noise { rhos, costs };
            std::fs::write(
                args.out.join("hbm.toml"),
                toml::to_string_pretty(&hbm).map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            println!("wrote multilabel world: {n_train} train / {n_test} test records");
        }
        other => return Err(format!("unknown world kind: {other}")),
    }
    Ok(())
}

fn estimator_kind(settings: &TrainSettings) -> Result<EstimatorKind, String> {
    let activation = match settings.activation.as_str() {
        "tanh" => Activation::Tanh,
        "relu" => Activation::Relu,
        other => return Err(format!("unknown activation: {other}")),
    };
    Ok(match settings.propensity.as_str() {
        "knn" => EstimatorKind::KnnFrequency { k: settings.knn_k },
        "mlp" => EstimatorKind::SoftmaxMlp {
            hidden: settings.policy_hidden.unwrap_or((16, 16)),
            activation,
        },
        "linear" => EstimatorKind::SoftmaxLinear,
        other => return Err(format!("unknown propensity estimator: {other}")),
    })
}

fn to_train_config(
    method: Method,
    settings: &TrainSettings,
    cost: &CostFunction,
    seed: Seed,
) -> Result<TrainConfig, String> {
    let activation = match settings.activation.as_str() {
        "tanh" => Activation::Tanh,
        "relu" => Activation::Relu,
        other => return Err(format!("unknown activation: {other}")),
    };
    let mut config = TrainConfig::new(method, seed);
    config.policy_arch = ArchSpec {
        hidden: settings.policy_hidden,
        activation,
    };
    config.router_arch = ArchSpec {
        hidden: settings.router_hidden,
        activation,
    };
    config.adam.learning_rate = settings.learning_rate;
    config.max_epochs = settings.max_epochs;
    config.patience = settings.patience;
    config.tolerance = settings.tolerance;
    if let Some(size) = settings.minibatch {
        config.batch = deferral_core::training::BatchMode::Minibatch(size);
    }
    config.cost = cost.clone();
    config.ec.tau_det = settings.tau_det;
    config.ec.r_subopt = settings.r_subopt;
    config.ec.r_opt = settings.r_opt;
    config.ec.use_oracle_mask = settings.oracle_mask;
    Ok(config)
}

fn cmd_train(args: &TrainArgs) -> Result<(), String> {
    let method =
        Method::parse(&args.method).ok_or_else(|| format!("unknown method: {}", args.method))?;
    let file: TrainFileConfig = match &args.config {
        None => TrainFileConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
            toml::from_str(&text).map_err(|e| e.to_string())?
        }
    };
    let dataset = read_file(&args.data.join("train.csv")).map_err(|e| e.to_string())?;
    let log = dataset.log;
    let seed = Seed(args.seed);
    let kind = estimator_kind(&file.train)?;
    let fit_opts = FitOptions::default();
    let fitted = fit_propensity(
        &log,
        kind,
        file.train.cross_fit,
        file.train.floor,
        &fit_opts,
        seed.derive("propensity"),
    )
    .map_err(|e| e.to_string())?;
    let propensities = fitted.logged_floored(&log);
    let config = to_train_config(method, &file.train, &file.cost, seed.derive("train"))?;

    let trained = match method {
        Method::Ao => train_ao(&log, &propensities, &config),
        Method::Ts => train_two_stage(&log, &propensities, &config),
        Method::Jc => train_joint(&log, &propensities, &config),
        Method::Jcp => {
            let per_human = fit_per_human_propensity(
                &log,
                kind,
                file.train.cross_fit,
                file.train.floor,
                &fit_opts,
                seed.derive("per-human"),
            )
            .map_err(|e| e.to_string())?;
            let assignment = fit_assignment(
                &log,
                kind,
                file.train.randomized_assignment,
                file.train.cross_fit,
                file.train.floor,
                &fit_opts,
                seed.derive("assignment"),
            )
            .map_err(|e| e.to_string())?;
            let php = per_human.logged_floored(&log);
            let ap = assignment.logged_floored(&log).map_err(|e| e.to_string())?;
            train_joint_personalized(&log, &php, &ap, &config)
        }
        Method::AoEc | Method::TsEc | Method::JcEc => {
            let mask = if config.ec.use_oracle_mask && dataset.oracle_mask.is_some() {
                dataset.oracle_mask.clone().unwrap()
            } else {
                detect_deterministic_support(&log, &fitted.train_probs_raw, config.ec.tau_det)
                    .map_err(|e| e.to_string())?
            };
            train_ec_variant(&log, &propensities, &mask, &config)
        }
    }
    .map_err(|e| e.to_string())?;

    let router = match (method, trained.router.clone()) {
        (Method::Ao | Method::AoEc, _) => Router::Algorithm,
        (Method::Jcp, Some(r)) => Router::PerHuman {
            model: r,
            num_humans: log.num_humans,
        },
        (_, Some(r)) => Router::Binary(r),
        (_, None) => Router::Algorithm,
    };
    let system = DeferralSystem::new(trained.policy, router, file.cost.clone())
        .with_propensity(fitted.model.clone(), fitted.floor)
        .with_tag(method.as_str(), seed, config_fingerprint(&config));
    system.save_bundle(&args.out).map_err(|e| e.to_string())?;

    // Embed a detector fit on the training covariates so tune-ood can
    // re-threshold later without the original data. Stored inactive.
    let train_features: Vec<Vec<f64>> = log
        .records
        .iter()
        .map(|r| r.features.as_slice().to_vec())
        .collect();
    let detector =
        fit_ood(&train_features, DetectorKind::Mahalanobis, 0.05).map_err(|e| e.to_string())?;
    std::fs::write(args.out.join("ood.detector"), detector.to_text())
        .map_err(|e| e.to_string())?;

    println!(
        "trained {} on {} records ({} epochs); bundle written to {}",
        method.as_str(),
        log.len(),
        trained.policy_stats.epochs_run,
        args.out.display()
    );
    Ok(())
}

fn cmd_tune_ood(args: &TuneOodArgs) -> Result<(), String> {
    let mut system = DeferralSystem::load_bundle(&args.system).map_err(|e| e.to_string())?;
    let detector_text = std::fs::read_to_string(args.system.join("ood.detector"))
        .map_err(|_| "bundle has no embedded detector (re-train first)".to_string())?;
    let detector =
        deferral_core::ood::OodDetector::from_text(&detector_text).map_err(|e| e.to_string())?;
    let tuning = read_file(&args.tuning_data).map_err(|e| e.to_string())?;
    let grid: Vec<f64> = args
        .grid
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad grid value: {p}")))
        .collect::<Result<_, _>>()?;
    let (prop_model, floor) = system
        .propensity
        .clone()
        .ok_or_else(|| "bundle carries no propensity model".to_string())?;
    let props: Vec<f64> = tuning
        .log
        .records
        .iter()
        .map(|r| prop_model.predict(r.features.as_slice(), floor)[r.action])
        .collect();
    let router = match &system.router {
        Router::Binary(m) => m.clone(),
        _ => return Err("tune-ood needs a binary-router system (ts/jc variants)".to_string()),
    };
    let outcome = tune_ood(
        &detector,
        &grid,
        &tuning.log,
        &system.policy,
        &router,
        &props,
        &system.cost,
    )
    .map_err(|e| e.to_string())?;
    for (p, obj) in &outcome.objectives {
        println!("p = {p:<8} objective = {obj:.4}");
    }
    if outcome.excluded > 0 {
        eprintln!(
            "warning: {} flagged records lacked a human id and were excluded",
            outcome.excluded
        );
    }
    println!("selected contamination p = {}", outcome.best_p);
    system.ood = Some(
        detector
            .with_contamination(outcome.best_p)
            .map_err(|e| e.to_string())?,
    );
    system.save_bundle(&args.out).map_err(|e| e.to_string())?;
    // Keep the raw detector alongside for any further tuning.
    std::fs::write(args.out.join("ood.detector"), detector.to_text())
        .map_err(|e| e.to_string())?;
    println!("gated bundle written to {}", args.out.display());
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), String> {
    let system = DeferralSystem::load_bundle(&args.system).map_err(|e| e.to_string())?;
    let dataset: DatasetFile = read_file(&args.test).map_err(|e| e.to_string())?;
    let counterfactuals = dataset
        .counterfactuals
        .ok_or_else(|| "test file carries no counterfactual columns".to_string())?;
    let hbm_text = std::fs::read_to_string(&args.hbm).map_err(|e| e.to_string())?;
    let spec: HbmSpec = toml::from_str(&hbm_text).map_err(|e| e.to_string())?;
    let instances: Vec<FeatureVector> = dataset
        .log
        .records
        .iter()
        .map(|r| r.features.clone())
        .collect();
    let (pool, cost) = spec.build_pool(instances.len(), &counterfactuals)?;
    let outcome = evaluate_team(
        &system,
        &instances,
        &counterfactuals,
        &pool,
        &cost,
        Seed(args.seed),
    )
    .map_err(|e| e.to_string())?;
    println!("instances        {}", outcome.n);
    println!("total reward     {:.4}", outcome.total_reward);
    println!("human fraction   {:.4}", outcome.human_fraction);
    println!("per-human counts {:?}", outcome.per_human_counts);
    Ok(())
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<(), String> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| e.to_string())?;
    let config = ExperimentConfig::from_toml_str(&text).map_err(|e| e.to_string())?;
    let result = run_experiment(&config).map_err(|e| e.to_string())?;
    result.write_csvs(&args.out).map_err(|e| e.to_string())?;
    println!("{:<10} {:>12} {:>10}", "method", "mean", "stderr");
    for s in &result.summaries {
        println!("{:<10} {:>12.2} {:>10.2}", s.method, s.mean, s.stderr);
    }
    for f in &result.failures {
        eprintln!(
            "failure: {} repetition {}: {}",
            f.method, f.repetition, f.error
        );
    }
    println!(
        "reports written to {} (results.csv, summary.csv, significance.csv)",
        args.out.display()
    );
    Ok(())
}

fn read_sample(path: &Path) -> Result<Vec<f64>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse().map_err(|_| format!("bad number: {l}")))
        .collect()
}

fn cmd_ttest(args: &TtestArgs) -> Result<(), String> {
    let a = read_sample(&args.a)?;
    let b = read_sample(&args.b)?;
    let out = welch_t_test(&a, &b).map_err(|e| e.to_string())?;
    println!("t            {:.6}", out.t);
    println!("dof          {:.4}", out.dof);
    println!("p            {:.6}", out.p);
    println!("significant  {}", out.significant);
    if out.degenerate {
        eprintln!("warning: both samples have zero variance");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::TuneOod(args) => cmd_tune_ood(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Experiment(args) => cmd_experiment(args),
        Command::Ttest(args) => cmd_ttest(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
