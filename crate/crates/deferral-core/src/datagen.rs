//! Synthetic experiment worlds with complete counterfactuals.
//!
//! Two fully specified generators drive the controlled experiments:
//!
//! * [`gen_deterministic_world`] — two gaussian features, probit logging
//!   `p0(a=1|x) = Phi(x0)`, rewards `±0.5` by the sign of `x0*x1`, and
//!   deterministic human actions on the top `s`-quantile of `x0` (optionally
//!   corrupted with a uniform bias fraction `alpha`).
//! * [`gen_covshift_world`] — probit logging `Phi(0.5*x0)`, noisy linear
//!   rewards, and a mean shift `mu` on the second training covariate while
//!   test data stays standard normal.
//!
//! Both freeze all reward noise into the counterfactual table at generation
//! time, so evaluation is deterministic given the seed. A multi-label to
//! bandit conversion and a score-based covariate-shift splitter round out the
//! semi-synthetic tooling.

use rand::Rng;
use thiserror::Error;

use crate::dataset::{
    ActionSpace, BanditLog, BanditRecord, CounterfactualTable, DataError, FeatureVector,
};
use crate::estimators::DeterministicSupportMask;
use crate::hbm::{generate_log, DecisionMaker, HbmError, WorkerPool};
use crate::rng::{sample_normal, Seed};
use crate::stats::normal_cdf;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("deterministic fraction s must lie in [0, 1), got {0}")]
    BadFraction(f64),
    #[error("bias fraction alpha must lie in [0, 1], got {0}")]
    BadBias(f64),
    #[error("need at least one instance")]
    Empty,
    #[error("label universe is empty")]
    EmptyLabelUniverse,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Hbm(#[from] HbmError),
}

// ── Deterministic-action world ───────────────────────────────────────────

/// Configuration of the deterministic-action world.
#[derive(Debug, Clone, Copy)]
pub struct DetWorldConfig {
    /// Fraction of instances (top quantile of `x0`) decided deterministically.
    pub s: f64,
    /// Probability that a deterministic action is flipped to the suboptimal one.
    pub alpha: f64,
    /// Number of instances.
    pub n: usize,
    /// When set, deterministic experts take the reward-optimal action; when
    /// clear they take the probit-preferred action `a = 1`.
    pub strict_ec: bool,
}

/// One generated deterministic-action dataset.
#[derive(Debug, Clone)]
pub struct DetWorld {
    pub instances: Vec<FeatureVector>,
    pub counterfactuals: CounterfactualTable,
    pub log: BanditLog,
    /// Oracle deterministic-support mask (ground truth from the generator).
    pub oracle_mask: DeterministicSupportMask,
    /// Exact behavior-policy probabilities per record.
    pub logging_probs: Vec<Vec<f64>>,
    /// Instances with `x0 >= threshold_x0` are decided deterministically.
    pub threshold_x0: f64,
    pub config: DetWorldConfig,
}

/// Potential rewards of the deterministic world: `+-0.5` by the sign of
/// `x0*x1` (the indicator at the measure-zero boundary `x0*x1 = 0` is 0).
pub fn det_world_rewards(x: &[f64]) -> (f64, f64) {
    let ind = if x[0] * x[1] > 0.0 { 1.0 } else { 0.0 };
    let r0 = -0.5 * (ind * 2.0 - 1.0);
    let r1 = 0.5 * (ind * 2.0 - 1.0);
    (r0, r1)
}

fn det_world_optimal(x: &[f64]) -> usize {
    let (r0, r1) = det_world_rewards(x);
    usize::from(r1 > r0)
}

/// Generate the deterministic-action world: features, full counterfactuals,
/// an observational log, the oracle support mask, and exact logging
/// probabilities.
pub fn gen_deterministic_world(cfg: DetWorldConfig, seed: Seed) -> Result<DetWorld, DatagenError> {
    if !(0.0..1.0).contains(&cfg.s) {
        return Err(DatagenError::BadFraction(cfg.s));
    }
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(DatagenError::BadBias(cfg.alpha));
    }
    if cfg.n == 0 {
        return Err(DatagenError::Empty);
    }
    let mut feat_rng = seed.derive("detworld/features").rng();
    let instances: Vec<FeatureVector> = (0..cfg.n)
        .map(|_| {
            FeatureVector::new(vec![sample_normal(&mut feat_rng), sample_normal(&mut feat_rng)])
                .unwrap()
        })
        .collect();
    let rows: Vec<Vec<f64>> = instances
        .iter()
        .map(|x| {
            let (r0, r1) = det_world_rewards(x.as_slice());
            vec![r0, r1]
        })
        .collect();
    let counterfactuals = CounterfactualTable::new(rows, 2)?;

    // Deterministic set: the ceil(s*n) largest x0 values, ties by index.
    let m = (cfg.s * cfg.n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..cfg.n).collect();
    order.sort_by(|&i, &j| {
        instances[j][0]
            .partial_cmp(&instances[i][0])
            .unwrap()
            .then(i.cmp(&j))
    });
    let det_set: Vec<usize> = order[..m].to_vec();
    let threshold_x0 = det_set
        .last()
        .map_or(f64::INFINITY, |&i| instances[i][0]);
    let mut in_det = vec![false; cfg.n];
    for &i in &det_set {
        in_det[i] = true;
    }

    let mut act_rng = seed.derive("detworld/actions").rng();
    let mut bias_rng = seed.derive("detworld/bias").rng();
    let mut records = Vec::with_capacity(cfg.n);
    let mut logging_probs = Vec::with_capacity(cfg.n);
    let mut complements = Vec::with_capacity(cfg.n);
    for (i, x) in instances.iter().enumerate() {
        let (action, probs) = if in_det[i] {
            let optimal = det_world_optimal(x.as_slice());
            let base = if cfg.strict_ec { optimal } else { 1 };
            let subopt = 1 - optimal;
            let flipped = bias_rng.random::<f64>() < cfg.alpha;
            let action = if flipped { subopt } else { base };
            let mut probs = vec![0.0, 0.0];
            probs[base] += 1.0 - cfg.alpha;
            probs[subopt] += cfg.alpha;
            (action, probs)
        } else {
            let p1 = normal_cdf(x[0]);
            let action = usize::from(act_rng.random::<f64>() < p1);
            (action, vec![1.0 - p1, p1])
        };
        let reward = counterfactuals.reward(i, action);
        records.push(BanditRecord::new(x.clone(), action, reward).with_human(0));
        logging_probs.push(probs);
        complements.push(if in_det[i] { Some(1 - action) } else { None });
    }
    let log = BanditLog::new(records, ActionSpace::new(2)?, 2, 1)?;
    Ok(DetWorld {
        instances,
        counterfactuals,
        log,
        oracle_mask: DeterministicSupportMask::from_complements(complements),
        logging_probs,
        threshold_x0,
        config: cfg,
    })
}

/// The deterministic-world human: probit sampling below the quantile
/// threshold, deterministic (possibly biased) above it.
#[derive(Debug, Clone, Copy)]
pub struct QuantileExpert {
    pub threshold_x0: f64,
    pub alpha: f64,
    pub strict_ec: bool,
}

impl DetWorld {
    pub fn expert(&self) -> QuantileExpert {
        QuantileExpert {
            threshold_x0: self.threshold_x0,
            alpha: self.config.alpha,
            strict_ec: self.config.strict_ec,
        }
    }
}

impl DecisionMaker for QuantileExpert {
    fn action_probs(&self, _instance: usize, x: &[f64]) -> Result<Vec<f64>, HbmError> {
        if x[0] >= self.threshold_x0 {
            let optimal = det_world_optimal(x);
            let base = if self.strict_ec { optimal } else { 1 };
            let subopt = 1 - optimal;
            let mut probs = vec![0.0, 0.0];
            probs[base] += 1.0 - self.alpha;
            probs[subopt] += self.alpha;
            Ok(probs)
        } else {
            let p1 = normal_cdf(x[0]);
            Ok(vec![1.0 - p1, p1])
        }
    }
}

// ── Covariate-shift world ────────────────────────────────────────────────

/// Configuration of the covariate-shift world.
#[derive(Debug, Clone, Copy)]
pub struct CovShiftConfig {
    /// Mean shift of the second training covariate.
    pub mu: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Size of the post-shift tuning log (drawn from the test distribution).
    pub n_tune: usize,
}

/// One generated covariate-shift dataset: a shifted training log plus
/// unshifted test and tuning splits.
#[derive(Debug, Clone)]
pub struct CovShiftWorld {
    pub train_instances: Vec<FeatureVector>,
    pub train_counterfactuals: CounterfactualTable,
    pub train_log: BanditLog,
    pub test_instances: Vec<FeatureVector>,
    pub test_counterfactuals: CounterfactualTable,
    pub test_log: BanditLog,
    pub tune_instances: Vec<FeatureVector>,
    pub tune_counterfactuals: CounterfactualTable,
    pub tune_log: BanditLog,
    pub config: CovShiftConfig,
}

/// The covariate-shift human: `P(a = 1 | x) = Phi(0.5 * x0)`.
#[derive(Debug, Clone, Copy)]
pub struct ProbitExpert {
    pub scale: f64,
}

impl DecisionMaker for ProbitExpert {
    fn action_probs(&self, _instance: usize, x: &[f64]) -> Result<Vec<f64>, HbmError> {
        let p1 = normal_cdf(self.scale * x[0]);
        Ok(vec![1.0 - p1, p1])
    }
}

fn covshift_sample(
    n: usize,
    mu: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<FeatureVector>, CounterfactualTable) {
    let mut instances = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = sample_normal(rng);
        let x1 = mu + sample_normal(rng);
        // Reward noise drawn per (instance, action) and frozen into the table.
        let r0 = x0 + sample_normal(rng);
        let r1 = 2.0 * x0 + x1 + sample_normal(rng);
        instances.push(FeatureVector::new(vec![x0, x1]).unwrap());
        rows.push(vec![r0, r1]);
    }
    (instances, CounterfactualTable::new(rows, 2).unwrap())
}

fn probit_log(
    instances: &[FeatureVector],
    counterfactuals: &CounterfactualTable,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<BanditLog, DatagenError> {
    let mut records = Vec::with_capacity(instances.len());
    for (i, x) in instances.iter().enumerate() {
        let p1 = normal_cdf(0.5 * x[0]);
        let action = usize::from(rng.random::<f64>() < p1);
        records.push(
            BanditRecord::new(x.clone(), action, counterfactuals.reward(i, action)).with_human(0),
        );
    }
    Ok(BanditLog::new(records, ActionSpace::new(2)?, 2, 1)?)
}

/// Generate the covariate-shift world. Training covariates have
/// `x1 ~ N(mu, 1)`; test and tuning covariates are standard normal. All logs
/// are produced by the probit human.
pub fn gen_covshift_world(cfg: CovShiftConfig, seed: Seed) -> Result<CovShiftWorld, DatagenError> {
    if cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(DatagenError::Empty);
    }
    let mut train_rng = seed.derive("covshift/train").rng();
    let (train_instances, train_counterfactuals) =
        covshift_sample(cfg.n_train, cfg.mu, &mut train_rng);
    let train_log = probit_log(&train_instances, &train_counterfactuals, &mut train_rng)?;

    let mut test_rng = seed.derive("covshift/test").rng();
    let (test_instances, test_counterfactuals) = covshift_sample(cfg.n_test, 0.0, &mut test_rng);
    let test_log = probit_log(&test_instances, &test_counterfactuals, &mut test_rng)?;

    let mut tune_rng = seed.derive("covshift/tune").rng();
    let (tune_instances, tune_counterfactuals) =
        covshift_sample(cfg.n_tune.max(1), 0.0, &mut tune_rng);
    let tune_log = probit_log(&tune_instances, &tune_counterfactuals, &mut tune_rng)?;

    Ok(CovShiftWorld {
        train_instances,
        train_counterfactuals,
        train_log,
        test_instances,
        test_counterfactuals,
        test_log,
        tune_instances,
        tune_counterfactuals,
        tune_log,
        config: cfg,
    })
}

// ── Multi-label conversion and semi-synthetic helpers ────────────────────

/// Convert multi-label ground truth into bandit data: the counterfactual
/// reward of action `a` is 1 when `a` is one of the instance's labels, else
/// 0; the log is generated by querying the worker pool.
pub fn multilabel_to_bandit(
    features: &[FeatureVector],
    label_sets: &[Vec<usize>],
    num_actions: usize,
    pool: &WorkerPool,
    seed: Seed,
) -> Result<(BanditLog, CounterfactualTable), DatagenError> {
    if num_actions == 0 {
        return Err(DatagenError::EmptyLabelUniverse);
    }
    let rows: Vec<Vec<f64>> = label_sets
        .iter()
        .map(|labels| {
            let mut row = vec![0.0; num_actions];
            for &l in labels {
                row[l] = 1.0;
            }
            row
        })
        .collect();
    let table = CounterfactualTable::new(rows, num_actions)?;
    let log = generate_log(pool, features, &table, seed)?;
    Ok((log, table))
}

/// Probability that an instance lands in the training split of the
/// score-based covariate-shift protocol: `1 / (2 (1 + exp(-gamma + eps)))`.
pub fn train_split_probability(gamma: f64, eps: f64) -> f64 {
    1.0 / (2.0 * (1.0 + (-gamma + eps).exp()))
}

/// Split instances into train/test with covariate-dependent probability.
/// `gamma(x)` sums the first `min(d, 200)` coordinates, optionally weighted.
pub fn covshift_split_by_score(
    features: &[FeatureVector],
    weights: Option<&[f64]>,
    seed: Seed,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seed.derive("covshift-split").rng();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, x) in features.iter().enumerate() {
        let take = x.dim().min(200);
        let gamma: f64 = (0..take)
            .map(|j| x[j] * weights.map_or(1.0, |w| w[j]))
            .sum();
        let eps = sample_normal(&mut rng);
        let p = train_split_probability(gamma, eps);
        if rng.random::<f64>() < p {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    (train, test)
}

/// Gaussian-cluster multi-label data: `k` class centers on a circle, one
/// label per instance (its cluster), plus a second label with probability
/// `extra_label_prob`. A stand-in for multi-label corpora in experiments
/// that only need instance-dependent ground truth.
pub fn gen_cluster_labels(
    n: usize,
    num_classes: usize,
    separation: f64,
    extra_label_prob: f64,
    seed: Seed,
) -> (Vec<FeatureVector>, Vec<Vec<usize>>) {
    let mut rng = seed.derive("clusters").rng();
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..num_classes);
        let angle = std::f64::consts::TAU * c as f64 / num_classes as f64;
        let x = vec![
            separation * angle.cos() + sample_normal(&mut rng),
            separation * angle.sin() + sample_normal(&mut rng),
        ];
        let mut set = vec![c];
        if rng.random::<f64>() < extra_label_prob {
            set.push((c + 1) % num_classes);
        }
        features.push(FeatureVector::new(x).unwrap());
        labels.push(set);
    }
    (features, labels)
}
