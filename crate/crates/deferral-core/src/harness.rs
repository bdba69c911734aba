//! End-to-end experiment runner: build a world, train every requested
//! method, evaluate team reward on held-out data with live human queries,
//! aggregate over repetitions, and report Welch significance tests.
//!
//! Evaluation respects bandit-feedback discipline even though the full
//! counterfactual table is available: exactly one reward cell is read per
//! test instance — the one for the action actually taken. The
//! [`RewardSource`] trait exists so tests can audit that access pattern.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BanditLog, CostFunction, CounterfactualTable, DataError, FeatureVector};
use crate::datagen::{
    gen_cluster_labels, gen_covshift_world, gen_deterministic_world, multilabel_to_bandit,
    CovShiftConfig, DatagenError, DetWorldConfig, ProbitExpert,
};
use crate::estimators::{DeterministicSupportMask, EstimatorError};
use crate::hbm::{DecisionMaker, HbmError, NoiseHbm, WorkerPool};
use crate::models::Activation;
use crate::ood::{fit_ood, tune_ood, DetectorKind, OodError};
use crate::propensity::{
    detect_deterministic_support, fit_assignment, fit_per_human_propensity, fit_propensity,
    EstimatorKind, FitOptions, PropensityError,
};
use crate::rng::Seed;
use crate::stats::{mean_stderr, welch_t_test, StatsError, TTestOutcome};
use crate::training::{
    config_fingerprint, train_ao, train_ec_variant, train_joint, train_joint_personalized,
    train_two_stage, ArchSpec, Decision, DeferralSystem, HumanChoice, Method, Router, TrainConfig,
    TrainError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    World(#[from] DatagenError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Hbm(#[from] HbmError),
    #[error(transparent)]
    Propensity(#[from] PropensityError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Ood(#[from] OodError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing counterfactual row for instance {0}")]
    MissingCounterfactual(usize),
}

// ── Team evaluation ──────────────────────────────────────────────────────

/// Read-only reward lookup; evaluation reads one cell per instance.
pub trait RewardSource {
    fn reward(&self, instance: usize, action: usize) -> f64;
    fn num_rows(&self) -> usize;
}

impl RewardSource for CounterfactualTable {
    fn reward(&self, instance: usize, action: usize) -> f64 {
        CounterfactualTable::reward(self, instance, action)
    }

    fn num_rows(&self) -> usize {
        CounterfactualTable::num_rows(self)
    }
}

/// Team performance on a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub total_reward: f64,
    pub n: usize,
    pub human_fraction: f64,
    pub per_human_counts: Vec<usize>,
    pub algorithm_count: usize,
}

/// Run the deployed system over test instances: algorithm decisions read the
/// chosen action's counterfactual reward; human decisions query the worker
/// pool live and subtract the worker's cost.
pub fn evaluate_team(
    system: &DeferralSystem,
    instances: &[FeatureVector],
    rewards: &dyn RewardSource,
    pool: &WorkerPool,
    cost: &CostFunction,
    seed: Seed,
) -> Result<EvalOutcome, HarnessError> {
    if rewards.num_rows() < instances.len() {
        return Err(HarnessError::MissingCounterfactual(rewards.num_rows()));
    }
    let mut rng = seed.derive("evaluate").rng();
    let mut total = 0.0;
    let mut per_human_counts = vec![0usize; pool.len()];
    let mut algorithm_count = 0usize;
    for (i, x) in instances.iter().enumerate() {
        match system.decide(x.as_slice()) {
            Decision::Algorithm(a) => {
                total += rewards.reward(i, a);
                algorithm_count += 1;
            }
            Decision::Human(choice) => {
                let h = match choice {
                    HumanChoice::Specific(h) => h.min(pool.len() - 1),
                    HumanChoice::Any => rng.random_range(0..pool.len()),
                };
                let action = pool.worker(h).sample(i, x.as_slice(), &mut rng)?;
                total += rewards.reward(i, action) - cost.cost(i, h);
                per_human_counts[h] += 1;
            }
        }
    }
    let n = instances.len();
    let humans: usize = per_human_counts.iter().sum();
    Ok(EvalOutcome {
        total_reward: total,
        n,
        human_fraction: humans as f64 / n as f64,
        per_human_counts,
        algorithm_count,
    })
}

/// Welch two-sample t-test at significance level 0.05.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<TTestOutcome, StatsError> {
    welch_t_test(a, b)
}

// ── Experiment configuration ─────────────────────────────────────────────

fn default_repetitions() -> usize {
    10
}
fn default_activation() -> String {
    "tanh".into()
}
fn default_lr() -> f64 {
    0.001
}
fn default_epochs() -> usize {
    500
}
fn default_patience() -> usize {
    20
}
fn default_tolerance() -> f64 {
    1e-6
}
fn default_propensity() -> String {
    "knn".into()
}
fn default_knn_k() -> usize {
    25
}
fn default_cross_fit() -> usize {
    2
}
fn default_floor() -> f64 {
    crate::propensity::DEFAULT_FLOOR
}
fn default_tau_det() -> f64 {
    crate::propensity::DEFAULT_TAU_DET
}
fn default_r_subopt() -> f64 {
    0.0
}
fn default_r_opt() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_hidden() -> Option<(usize, usize)> {
    Some((16, 16))
}
fn default_ood_grid() -> Vec<f64> {
    vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 0.99]
}
fn default_ood_kind() -> String {
    "mahalanobis".into()
}
fn default_ood_knn_k() -> usize {
    10
}
fn default_ood_p() -> f64 {
    0.05
}

/// Which data the experiment runs on.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WorldConfig {
    /// Deterministic-action world.
    Deterministic {
        s: f64,
        #[serde(default)]
        alpha: f64,
        n_train: usize,
        n_test: usize,
        #[serde(default = "default_true")]
        strict_ec: bool,
    },
    /// Covariate-shift world.
    Covshift {
        mu: f64,
        n_train: usize,
        n_test: usize,
        #[serde(default)]
        n_tune: usize,
    },
    /// Gaussian-cluster multi-label data with simulated noisy workers.
    MultilabelBlobs {
        n_train: usize,
        n_test: usize,
        num_classes: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        extra_label_prob: f64,
        /// Per-worker decision accuracies.
        rhos: Vec<f64>,
        /// Per-worker query costs (also the evaluation cost).
        worker_costs: Vec<f64>,
    },
}

fn default_separation() -> f64 {
    6.0
}

/// Model and fitting settings shared by every trained method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    #[serde(default = "default_hidden")]
    pub policy_hidden: Option<(usize, usize)>,
    #[serde(default = "default_hidden")]
    pub router_hidden: Option<(usize, usize)>,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub minibatch: Option<usize>,
    #[serde(default = "default_propensity")]
    pub propensity: String,
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    #[serde(default = "default_cross_fit")]
    pub cross_fit: usize,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default = "default_tau_det")]
    pub tau_det: f64,
    #[serde(default = "default_r_subopt")]
    pub r_subopt: f64,
    #[serde(default = "default_r_opt")]
    pub r_opt: f64,
    /// Use the generator's oracle deterministic-support mask when available.
    #[serde(default = "default_true")]
    pub oracle_mask: bool,
    #[serde(default = "default_true")]
    pub randomized_assignment: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

/// Out-of-distribution gate settings (for the `jc-od` method).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodSettings {
    #[serde(default = "default_ood_kind")]
    pub kind: String,
    #[serde(default = "default_ood_knn_k")]
    pub knn_k: usize,
    #[serde(default = "default_ood_p")]
    pub initial_p: f64,
    #[serde(default = "default_ood_grid")]
    pub grid: Vec<f64>,
    /// Refit the propensity model on the tuning log instead of reusing the
    /// training-time model.
    #[serde(default)]
    pub refit_propensity: bool,
}

impl Default for OodSettings {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

/// A full experiment: world, methods, repetitions, and settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub seed: u64,
    /// Method tags: `human`, `ao`, `ts`, `jc`, `jcp`, `ao-ec`, `ts-ec`,
    /// `jc-ec`, `jc-od`.
    pub methods: Vec<String>,
    pub world: WorldConfig,
    #[serde(default)]
    pub train: TrainSettings,
    /// Human decision cost used in objectives and evaluation. For the
    /// multilabel world, per-worker costs override this when present.
    #[serde(default = "CostFunction::zero")]
    pub cost: CostFunction,
    #[serde(default)]
    pub ood: OodSettings,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn estimator_kind(&self) -> Result<EstimatorKind, HarnessError> {
        let activation = match self.train.activation.as_str() {
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            other => {
                return Err(HarnessError::Config(format!("unknown activation: {other}")))
            }
        };
        Ok(match self.train.propensity.as_str() {
            "knn" => EstimatorKind::KnnFrequency { k: self.train.knn_k },
            "mlp" => EstimatorKind::SoftmaxMlp {
                hidden: self.train.policy_hidden.unwrap_or((16, 16)),
                activation,
            },
            "linear" => EstimatorKind::SoftmaxLinear,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown propensity estimator: {other}"
                )))
            }
        })
    }

    fn train_config(&self, method: Method, seed: Seed) -> Result<TrainConfig, HarnessError> {
        let activation = match self.train.activation.as_str() {
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            other => {
                return Err(HarnessError::Config(format!("unknown activation: {other}")))
            }
        };
        let mut config = TrainConfig::new(method, seed);
        config.policy_arch = ArchSpec {
            hidden: self.train.policy_hidden,
            activation,
        };
        config.router_arch = ArchSpec {
            hidden: self.train.router_hidden,
            activation,
        };
        config.adam.learning_rate = self.train.learning_rate;
        config.max_epochs = self.train.max_epochs;
        config.patience = self.train.patience;
        config.tolerance = self.train.tolerance;
        config.batch = match self.train.minibatch {
            Some(size) => crate::training::BatchMode::Minibatch(size),
            None => crate::training::BatchMode::Full,
        };
        config.cost = self.cost.clone();
        config.ec.tau_det = self.train.tau_det;
        config.ec.r_subopt = self.train.r_subopt;
        config.ec.r_opt = self.train.r_opt;
        config.ec.use_oracle_mask = self.train.oracle_mask;
        Ok(config)
    }

    fn detector_kind(&self) -> Result<DetectorKind, HarnessError> {
        Ok(match self.ood.kind.as_str() {
            "mahalanobis" => DetectorKind::Mahalanobis,
            "knn" => DetectorKind::KnnDistance { k: self.ood.knn_k },
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown detector kind: {other}"
                )))
            }
        })
    }
}

// ── Experiment results ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub repetition: usize,
    pub total_reward: f64,
    pub human_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub method_a: String,
    pub method_b: String,
    pub t: f64,
    pub dof: f64,
    pub p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureRow {
    pub method: String,
    pub repetition: usize,
    pub error: String,
}

/// Aggregated outcome of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub summaries: Vec<SummaryRow>,
    pub pairwise: Vec<PairRow>,
    pub failures: Vec<FailureRow>,
}

impl ExperimentResult {
    pub fn method_totals(&self, method: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.total_reward)
            .collect()
    }

    pub fn summary(&self, method: &str) -> Option<&SummaryRow> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn results_csv(&self) -> String {
        let mut s = String::from("method,repetition,total_reward,human_fraction,seed\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:?},{:?},{}\n",
                r.method, r.repetition, r.total_reward, r.human_fraction, r.seed
            ));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("method,mean,stderr\n");
        for r in &self.summaries {
            s.push_str(&format!("{},{:?},{:?}\n", r.method, r.mean, r.stderr));
        }
        s
    }

    pub fn significance_csv(&self) -> String {
        let mut s = String::from("method_a,method_b,t,dof,p,significant\n");
        for r in &self.pairwise {
            s.push_str(&format!(
                "{},{},{:?},{:?},{:?},{}\n",
                r.method_a, r.method_b, r.t, r.dof, r.p, r.significant
            ));
        }
        s
    }

    /// Write the three report files into a directory.
    pub fn write_csvs(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.csv"), self.results_csv())?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        std::fs::write(dir.join("significance.csv"), self.significance_csv())?;
        Ok(())
    }
}

// ── World preparation ────────────────────────────────────────────────────

// Everything one repetition needs: a training log, held-out instances with
// counterfactuals, a worker pool answering test-time queries, and (when the
// generator provides them) the oracle mask and a post-shift tuning log.
struct PreparedWorld {
    train_log: BanditLog,
    test_instances: Vec<FeatureVector>,
    test_counterfactuals: CounterfactualTable,
    pool: WorkerPool,
    eval_cost: CostFunction,
    oracle_mask: Option<DeterministicSupportMask>,
    tune_log: Option<BanditLog>,
}

fn prepare_world(config: &ExperimentConfig, seed: Seed) -> Result<PreparedWorld, HarnessError> {
    match &config.world {
        WorldConfig::Deterministic {
            s,
            alpha,
            n_train,
            n_test,
            strict_ec,
        } => {
            let train = gen_deterministic_world(
                DetWorldConfig {
                    s: *s,
                    alpha: *alpha,
                    n: *n_train,
                    strict_ec: *strict_ec,
                },
                seed.derive("world-train"),
            )?;
            let test = gen_deterministic_world(
                DetWorldConfig {
                    s: *s,
                    alpha: *alpha,
                    n: *n_test,
                    strict_ec: *strict_ec,
                },
                seed.derive("world-test"),
            )?;
            let pool = WorkerPool::new(vec![Box::new(test.expert())], vec![0.0])?;
            Ok(PreparedWorld {
                train_log: train.log,
                test_instances: test.instances,
                test_counterfactuals: test.counterfactuals,
                pool,
                eval_cost: config.cost.clone(),
                oracle_mask: Some(train.oracle_mask),
                tune_log: None,
            })
        }
        WorldConfig::Covshift {
            mu,
            n_train,
            n_test,
            n_tune,
        } => {
            let world = gen_covshift_world(
                CovShiftConfig {
                    mu: *mu,
                    n_train: *n_train,
                    n_test: *n_test,
                    n_tune: *n_tune,
                },
                seed.derive("world"),
            )?;
            let pool = WorkerPool::new(vec![Box::new(ProbitExpert { scale: 0.5 })], vec![0.0])?;
            Ok(PreparedWorld {
                train_log: world.train_log,
                test_instances: world.test_instances,
                test_counterfactuals: world.test_counterfactuals,
                pool,
                eval_cost: config.cost.clone(),
                oracle_mask: None,
                tune_log: if *n_tune > 0 {
                    Some(world.tune_log)
                } else {
                    None
                },
            })
        }
        WorldConfig::MultilabelBlobs {
            n_train,
            n_test,
            num_classes,
            separation,
            extra_label_prob,
            rhos,
            worker_costs,
        } => {
            if rhos.is_empty() || rhos.len() != worker_costs.len() {
                return Err(HarnessError::Config(
                    "need one accuracy and one cost per worker".to_string(),
                ));
            }
            let (train_x, train_labels) = gen_cluster_labels(
                *n_train,
                *num_classes,
                *separation,
                *extra_label_prob,
                seed.derive("blobs-train"),
            );
            let (test_x, test_labels) = gen_cluster_labels(
                *n_test,
                *num_classes,
                *separation,
                *extra_label_prob,
                seed.derive("blobs-test"),
            );
            let label_row = |labels: &Vec<usize>| {
                let mut row = vec![0.0; *num_classes];
                for &l in labels {
                    row[l] = 1.0;
                }
                row
            };
            let train_cf =
                CounterfactualTable::new(train_labels.iter().map(label_row).collect(), *num_classes)?;
            let test_cf =
                CounterfactualTable::new(test_labels.iter().map(label_row).collect(), *num_classes)?;
            let train_pool = WorkerPool::new(
                rhos.iter()
                    .map(|&rho| {
                        Box::new(NoiseHbm::from_counterfactuals(rho, &train_cf))
                            as Box<dyn DecisionMaker>
                    })
                    .collect(),
                worker_costs.clone(),
            )?;
            let (train_log, _) = multilabel_to_bandit(
                &train_x,
                &train_labels,
                *num_classes,
                &train_pool,
                seed.derive("blobs-log"),
            )?;
            let test_pool = WorkerPool::new(
                rhos.iter()
                    .map(|&rho| {
                        Box::new(NoiseHbm::from_counterfactuals(rho, &test_cf))
                            as Box<dyn DecisionMaker>
                    })
                    .collect(),
                worker_costs.clone(),
            )?;
            Ok(PreparedWorld {
                train_log,
                test_instances: test_x,
                test_counterfactuals: test_cf,
                pool: test_pool,
                eval_cost: CostFunction::PerHuman(worker_costs.clone()),
                oracle_mask: None,
                tune_log: None,
            })
        }
    }
}

// ── Running one experiment ───────────────────────────────────────────────

fn run_method(
    tag: &str,
    config: &ExperimentConfig,
    world: &PreparedWorld,
    rep_seed: Seed,
) -> Result<EvalOutcome, HarnessError> {
    let log = &world.train_log;
    let kind = config.estimator_kind()?;
    let fit_opts = FitOptions::default();

    if tag == "human" {
        let policy = crate::models::SoftmaxModel::zeros(
            ArchSpec::linear().to_architecture(log.dim, log.num_actions()),
        );
        let system = DeferralSystem::new(policy, Router::Human, world.eval_cost.clone());
        return evaluate_team(
            &system,
            &world.test_instances,
            &world.test_counterfactuals,
            &world.pool,
            &world.eval_cost,
            rep_seed.derive("eval-human"),
        );
    }

    let fitted = fit_propensity(
        log,
        kind,
        config.train.cross_fit,
        config.train.floor,
        &fit_opts,
        rep_seed.derive("propensity"),
    )?;
    let propensities = fitted.logged_floored(log);

    let method = Method::parse(if tag == "jc-od" { "jc" } else { tag })
        .ok_or_else(|| HarnessError::Config(format!("unknown method: {tag}")))?;
    let train_config = config.train_config(method, rep_seed.derive("train"))?;

    let mask = if method.is_ec() {
        Some(if train_config.ec.use_oracle_mask {
            world.oracle_mask.clone().ok_or_else(|| {
                HarnessError::Config("oracle mask requested but the world has none".to_string())
            })?
        } else {
            detect_deterministic_support(log, &fitted.train_probs_raw, train_config.ec.tau_det)?
        })
    } else {
        None
    };

    let trained = match method {
        Method::Ao => train_ao(log, &propensities, &train_config)?,
        Method::Ts => train_two_stage(log, &propensities, &train_config)?,
        Method::Jc => train_joint(log, &propensities, &train_config)?,
        Method::Jcp => {
            let per_human = fit_per_human_propensity(
                log,
                kind,
                config.train.cross_fit,
                config.train.floor,
                &fit_opts,
                rep_seed.derive("per-human"),
            )?;
            let assignment = fit_assignment(
                log,
                kind,
                config.train.randomized_assignment,
                config.train.cross_fit,
                config.train.floor,
                &fit_opts,
                rep_seed.derive("assignment"),
            )?;
            let per_human_props = per_human.logged_floored(log);
            let assignment_probs = assignment.logged_floored(log)?;
            train_joint_personalized(log, &per_human_props, &assignment_probs, &train_config)?
        }
        Method::AoEc | Method::TsEc | Method::JcEc => {
            train_ec_variant(log, &propensities, mask.as_ref().unwrap(), &train_config)?
        }
    };

    let router = match (method, trained.router.clone()) {
        (Method::Ao | Method::AoEc, _) => Router::Algorithm,
        (Method::Jcp, Some(r)) => Router::PerHuman {
            model: r,
            num_humans: log.num_humans,
        },
        (_, Some(r)) => Router::Binary(r),
        (_, None) => Router::Algorithm,
    };
    let mut system = DeferralSystem::new(trained.policy, router, config.cost.clone())
        .with_propensity(fitted.model.clone(), fitted.floor)
        .with_tag(
            tag,
            train_config.seed,
            config_fingerprint(&train_config),
        );

    if tag == "jc-od" {
        let tune_log = world.tune_log.as_ref().ok_or_else(|| {
            HarnessError::Config("jc-od needs a world with a tuning log".to_string())
        })?;
        let train_features: Vec<Vec<f64>> = log
            .records
            .iter()
            .map(|r| r.features.as_slice().to_vec())
            .collect();
        let detector = fit_ood(&train_features, config.detector_kind()?, config.ood.initial_p)?;
        // Propensities for the tuning log: reuse the training-time model by
        // default, refit on the tuning log when asked.
        let tune_props: Vec<f64> = if config.ood.refit_propensity {
            let refit = fit_propensity(
                tune_log,
                kind,
                config.train.cross_fit,
                config.train.floor,
                &fit_opts,
                rep_seed.derive("tune-propensity"),
            )?;
            refit.logged_floored(tune_log)
        } else {
            tune_log
                .records
                .iter()
                .map(|r| fitted.predict(r.features.as_slice())[r.action])
                .collect()
        };
        let router_model = match &system.router {
            Router::Binary(m) => m.clone(),
            _ => unreachable!("jc-od trains a binary router"),
        };
        let outcome = tune_ood(
            &detector,
            &config.ood.grid,
            tune_log,
            &system.policy,
            &router_model,
            &tune_props,
            &config.cost,
        )?;
        system = system.with_ood(detector.with_contamination(outcome.best_p)?);
    }

    evaluate_team(
        &system,
        &world.test_instances,
        &world.test_counterfactuals,
        &world.pool,
        &world.eval_cost,
        rep_seed.derive_index("eval", fnv_str(tag)),
    )
}

fn fnv_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h = (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Run every method over every repetition; aggregate means, standard errors,
/// and all pairwise Welch tests. A failure aborts only its own
/// (method, repetition) cell.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    if config.repetitions == 0 {
        return Err(HarnessError::Config("repetitions must be >= 1".to_string()));
    }
    let master = Seed(config.seed);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for rep in 0..config.repetitions {
        let rep_seed = master.derive_index("repetition", rep as u64);
        let world = match prepare_world(config, rep_seed) {
            Ok(w) => w,
            Err(e) => {
                for tag in &config.methods {
                    failures.push(FailureRow {
                        method: tag.clone(),
                        repetition: rep,
                        error: e.to_string(),
                    });
                }
                continue;
            }
        };
        for tag in &config.methods {
            match run_method(tag, config, &world, rep_seed) {
                Ok(outcome) => rows.push(ResultRow {
                    method: tag.clone(),
                    repetition: rep,
                    total_reward: outcome.total_reward,
                    human_fraction: outcome.human_fraction,
                    seed: rep_seed.0,
                }),
                Err(e) => failures.push(FailureRow {
                    method: tag.clone(),
                    repetition: rep,
                    error: e.to_string(),
                }),
            }
        }
    }

    let mut summaries = Vec::new();
    for tag in &config.methods {
        let totals: Vec<f64> = rows
            .iter()
            .filter(|r| &r.method == tag)
            .map(|r| r.total_reward)
            .collect();
        if !totals.is_empty() {
            let (mean, stderr) = mean_stderr(&totals);
            summaries.push(SummaryRow {
                method: tag.clone(),
                mean,
                stderr,
            });
        }
    }

    let mut pairwise = Vec::new();
    for (i, a) in config.methods.iter().enumerate() {
        for b in config.methods.iter().skip(i + 1) {
            let sa: Vec<f64> = rows
                .iter()
                .filter(|r| &r.method == a)
                .map(|r| r.total_reward)
                .collect();
            let sb: Vec<f64> = rows
                .iter()
                .filter(|r| &r.method == b)
                .map(|r| r.total_reward)
                .collect();
            if sa.len() >= 2 && sb.len() >= 2 {
                let out = welch_t_test(&sa, &sb)?;
                pairwise.push(PairRow {
                    method_a: a.clone(),
                    method_b: b.clone(),
                    t: out.t,
                    dof: out.dof,
                    p: out.p,
                    significant: out.significant,
                });
            }
        }
    }

    Ok(ExperimentResult {
        rows,
        summaries,
        pairwise,
        failures,
    })
}
