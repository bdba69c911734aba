//! Estimation of the historical behavior policy and assignment model.
//!
//! The logging humans' policy `p0(a|x)` is unknown in practice and estimated
//! by a supervised classifier of the logged action given features. Two
//! estimator families are provided behind one interface: a multinomial
//! softmax (linear or mlp) and a k-nearest-neighbor class-frequency
//! estimator. Fitted predictions are floored away from zero before they are
//! used as divisors anywhere.
//!
//! Cross-fitting (optional, on by default in the training drivers) predicts
//! each training record from a model fit on the other folds, so a record
//! never scores itself; the model fit on all records serves held-out data.

use thiserror::Error;

use crate::dataset::BanditLog;
use crate::estimators::DeterministicSupportMask;
use crate::models::{Activation, AdamParams, AdamState, Architecture, ModelError, SoftmaxModel};
use crate::rng::Seed;

/// Default floor applied to estimated propensities before division.
pub const DEFAULT_FLOOR: f64 = 0.01;
/// Default threshold above which a logged action counts as deterministic.
pub const DEFAULT_TAU_DET: f64 = 0.99;

#[derive(Debug, Error)]
pub enum PropensityError {
    #[error("cannot fit on an empty log")]
    EmptyLog,
    #[error("record {index} carries no human id")]
    MissingHumanId { index: usize },
    #[error("deterministic-support detection requires a binary action space, got {k}")]
    NonBinaryActions { k: usize },
    #[error("floor {floor} is infeasible for {k} classes (k * floor must stay below 1)")]
    InfeasibleFloor { floor: f64, k: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed propensity text: {0}")]
    Parse(String),
}

/// Estimator family for behavior-policy and assignment models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorKind {
    SoftmaxLinear,
    SoftmaxMlp {
        hidden: (usize, usize),
        activation: Activation,
    },
    /// Class frequencies among the k nearest training points.
    KnnFrequency { k: usize },
}

impl Default for EstimatorKind {
    fn default() -> Self {
        EstimatorKind::KnnFrequency { k: 25 }
    }
}

/// Options for the maximum-likelihood softmax fits.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub adam: AdamParams,
    pub max_epochs: usize,
    pub patience: usize,
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            adam: AdamParams {
                learning_rate: 0.01,
                ..AdamParams::default()
            },
            max_epochs: 1000,
            patience: 20,
            tolerance: 1e-7,
        }
    }
}

/// Mix a simplex point toward uniform so every entry reaches at least `eps`:
/// `(1 - k*eps) * p + eps`. Affine in `p`, so the argmax never moves.
pub fn floor_simplex(p: &[f64], eps: f64) -> Vec<f64> {
    let k = p.len() as f64;
    let scale = 1.0 - k * eps;
    p.iter().map(|&v| scale * v + eps).collect()
}

/// A fitted conditional class-probability model.
#[derive(Debug, Clone)]
pub enum PropensityModel {
    Softmax(SoftmaxModel),
    Knn {
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        k: usize,
        num_classes: usize,
    },
}

impl PropensityModel {
    /// Raw (un-floored) class probabilities.
    pub fn predict_raw(&self, x: &[f64]) -> Vec<f64> {
        match self {
            PropensityModel::Softmax(m) => m.probs(x),
            PropensityModel::Knn {
                features,
                labels,
                k,
                num_classes,
            } => knn_frequencies(features, labels, *num_classes, *k, x, |_| false),
        }
    }

    /// Floored class probabilities, every entry at least `floor`.
    pub fn predict(&self, x: &[f64], floor: f64) -> Vec<f64> {
        floor_simplex(&self.predict_raw(x), floor)
    }

    pub fn num_classes(&self) -> usize {
        match self {
            PropensityModel::Softmax(m) => m.output_dim(),
            PropensityModel::Knn { num_classes, .. } => *num_classes,
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            PropensityModel::Softmax(m) => format!("propensity-softmax v1\n{}", m.to_text()),
            PropensityModel::Knn {
                features,
                labels,
                k,
                num_classes,
            } => {
                let mut s = format!(
                    "propensity-knn v1\nk {k}\nclasses {num_classes}\nn {} dim {}\n",
                    labels.len(),
                    features.first().map_or(0, Vec::len)
                );
                for (f, l) in features.iter().zip(labels) {
                    s.push_str(&format!("{l}"));
                    for v in f {
                        s.push_str(&format!(" {v:?}"));
                    }
                    s.push('\n');
                }
                s
            }
        }
    }

    pub fn from_text(text: &str) -> Result<PropensityModel, PropensityError> {
        let mut lines = text.lines();
        match lines.next() {
            Some("propensity-softmax v1") => {
                let rest: String = lines.collect::<Vec<_>>().join("\n");
                Ok(PropensityModel::Softmax(SoftmaxModel::from_text(&rest)?))
            }
            Some("propensity-knn v1") => {
                let mut k = None;
                let mut classes = None;
                let mut n = None;
                for line in lines.by_ref() {
                    let parts: Vec<&str> = line.split_whitespace().collect();
                    match parts.as_slice() {
                        ["k", v] => k = v.parse().ok(),
                        ["classes", v] => classes = v.parse().ok(),
                        ["n", v, "dim", _] => {
                            n = v.parse().ok();
                            break;
                        }
                        _ => return Err(PropensityError::Parse(format!("bad line: {line}"))),
                    }
                }
                let (k, classes, n): (usize, usize, usize) = match (k, classes, n) {
                    (Some(a), Some(b), Some(c)) => (a, b, c),
                    _ => return Err(PropensityError::Parse("missing knn header".into())),
                };
                let mut features = Vec::with_capacity(n);
                let mut labels = Vec::with_capacity(n);
                for line in lines {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let mut parts = line.split_whitespace();
                    let label: usize = parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| PropensityError::Parse(format!("bad row: {line}")))?;
                    let row: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
                    let row =
                        row.map_err(|_| PropensityError::Parse(format!("bad row: {line}")))?;
                    labels.push(label);
                    features.push(row);
                }
                if labels.len() != n {
                    return Err(PropensityError::Parse(format!(
                        "expected {n} rows, found {}",
                        labels.len()
                    )));
                }
                Ok(PropensityModel::Knn {
                    features,
                    labels,
                    k,
                    num_classes: classes,
                })
            }
            other => Err(PropensityError::Parse(format!("unknown header: {other:?}"))),
        }
    }
}

// Class frequencies among the k nearest reference points, skipping masked
// indices. Ties in distance break by index for determinism.
fn knn_frequencies(
    refs: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    k: usize,
    x: &[f64],
    skip: impl Fn(usize) -> bool,
) -> Vec<f64> {
    let mut dists: Vec<(f64, usize)> = refs
        .iter()
        .enumerate()
        .filter(|(i, _)| !skip(*i))
        .map(|(i, r)| {
            let d2: f64 = r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2, i)
        })
        .collect();
    let take = k.min(dists.len());
    dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut counts = vec![0.0; num_classes];
    for &(_, i) in dists.iter().take(take) {
        counts[labels[i]] += 1.0;
    }
    if take > 0 {
        for c in counts.iter_mut() {
            *c /= take as f64;
        }
    }
    counts
}

/// Maximum-likelihood fit of a softmax classifier (full-batch Adam with
/// early stopping on the mean log-likelihood).
pub fn fit_softmax_classifier(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    kind: EstimatorKind,
    opts: &FitOptions,
    seed: Seed,
) -> Result<SoftmaxModel, PropensityError> {
    if features.is_empty() {
        return Err(PropensityError::EmptyLog);
    }
    let dim = features[0].len();
    let arch = match kind {
        EstimatorKind::SoftmaxLinear => Architecture::Linear {
            input: dim,
            output: num_classes,
        },
        EstimatorKind::SoftmaxMlp { hidden, activation } => Architecture::Mlp {
            input: dim,
            hidden,
            output: num_classes,
            activation,
        },
        EstimatorKind::KnnFrequency { .. } => {
            unreachable!("knn estimators are not fit by gradient descent")
        }
    };
    let mut model = SoftmaxModel::init(arch, seed);
    let mut adam = AdamState::new(model.params().len(), opts.adam);
    let n = features.len() as f64;
    let mut best = f64::NEG_INFINITY;
    let mut stall = 0;
    let mut grad = vec![0.0; model.params().len()];
    for _ in 0..opts.max_epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut ll = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            ll += model.probs(x)[y].ln();
            model.accumulate_logprob_grad(x, y, 1.0 / n, &mut grad);
        }
        ll /= n;
        adam.step(model.params_mut(), &grad)?;
        if ll > best + opts.tolerance {
            best = ll;
            stall = 0;
        } else {
            stall += 1;
            if stall >= opts.patience {
                break;
            }
        }
    }
    Ok(model)
}

/// A behavior-policy estimate bound to the log it was fit on: the final
/// model plus per-record (out-of-fold when cross-fit) raw probabilities.
#[derive(Debug, Clone)]
pub struct FittedPropensity {
    pub model: PropensityModel,
    pub floor: f64,
    /// Raw per-record action distributions for the training log.
    pub train_probs_raw: Vec<Vec<f64>>,
    /// Fold of each training record (all zero without cross-fitting).
    pub fold_of: Vec<usize>,
}

impl FittedPropensity {
    /// Floored propensity of the logged action, per record.
    pub fn logged_floored(&self, log: &BanditLog) -> Vec<f64> {
        self.train_probs_raw
            .iter()
            .zip(&log.records)
            .map(|(p, rec)| floor_simplex(p, self.floor)[rec.action])
            .collect()
    }

    /// Floored prediction for a new instance (final model).
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.model.predict(x, self.floor)
    }
}

fn check_floor(floor: f64, k: usize) -> Result<(), PropensityError> {
    if floor < 0.0 || (k as f64) * floor >= 1.0 {
        return Err(PropensityError::InfeasibleFloor { floor, k });
    }
    Ok(())
}

fn fold_assignments(n: usize, folds: usize, seed: Seed) -> Vec<usize> {
    if folds <= 1 {
        return vec![0; n];
    }
    use rand::Rng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed.derive("cross-fit-folds").rng();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut fold = vec![0; n];
    for (pos, &idx) in order.iter().enumerate() {
        fold[idx] = pos % folds;
    }
    fold
}

// Shared machinery: fit a classifier of `labels` given `inputs`, with
// optional cross-fitting for the per-record predictions.
fn fit_classifier_with_oof(
    inputs: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    kind: EstimatorKind,
    folds: usize,
    opts: &FitOptions,
    seed: Seed,
) -> Result<(PropensityModel, Vec<Vec<f64>>, Vec<usize>), PropensityError> {
    let n = inputs.len();
    if n == 0 {
        return Err(PropensityError::EmptyLog);
    }
    let fold_of = fold_assignments(n, folds, seed);
    let n_folds = fold_of.iter().copied().max().unwrap_or(0) + 1;

    let mut oof: Vec<Vec<f64>> = vec![Vec::new(); n];
    match kind {
        EstimatorKind::KnnFrequency { k } => {
            for i in 0..n {
                // Out-of-fold when cross-fitting; plain in-sample (the record
                // may be its own neighbor) otherwise.
                oof[i] = knn_frequencies(inputs, labels, num_classes, k, &inputs[i], |j| {
                    n_folds > 1 && fold_of[j] == fold_of[i]
                });
            }
            let model = PropensityModel::Knn {
                features: inputs.to_vec(),
                labels: labels.to_vec(),
                k,
                num_classes,
            };
            Ok((model, oof, fold_of))
        }
        _ => {
            if n_folds > 1 {
                for f in 0..n_folds {
                    let train_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
                    let fx: Vec<Vec<f64>> = train_idx.iter().map(|&i| inputs[i].clone()).collect();
                    let fy: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
                    let m = fit_softmax_classifier(
                        &fx,
                        &fy,
                        num_classes,
                        kind,
                        opts,
                        seed.derive_index("fold", f as u64),
                    )?;
                    for i in (0..n).filter(|&i| fold_of[i] == f) {
                        oof[i] = m.probs(&inputs[i]);
                    }
                }
            }
            let model = fit_softmax_classifier(
                inputs,
                labels,
                num_classes,
                kind,
                opts,
                seed.derive("full"),
            )?;
            if n_folds <= 1 {
                for i in 0..n {
                    oof[i] = model.probs(&inputs[i]);
                }
            }
            Ok((PropensityModel::Softmax(model), oof, fold_of))
        }
    }
}

/// Fit the behavior policy `p0(a|x)` on a log.
pub fn fit_propensity(
    log: &BanditLog,
    kind: EstimatorKind,
    cross_fit_folds: usize,
    floor: f64,
    opts: &FitOptions,
    seed: Seed,
) -> Result<FittedPropensity, PropensityError> {
    check_floor(floor, log.num_actions())?;
    let inputs: Vec<Vec<f64>> = log
        .records
        .iter()
        .map(|r| r.features.as_slice().to_vec())
        .collect();
    let labels: Vec<usize> = log.records.iter().map(|r| r.action).collect();
    let (model, oof, fold_of) = fit_classifier_with_oof(
        &inputs,
        &labels,
        log.num_actions(),
        kind,
        cross_fit_folds,
        opts,
        seed.derive("propensity"),
    )?;
    Ok(FittedPropensity {
        model,
        floor,
        train_probs_raw: oof,
        fold_of,
    })
}

/// The behavior policy conditioned on the decision-maker: one model over
/// features extended with a one-hot human id.
#[derive(Debug, Clone)]
pub struct PerHumanPropensity {
    pub fitted: FittedPropensity,
    pub num_humans: usize,
    pub dim: usize,
}

impl PerHumanPropensity {
    pub fn encode(&self, x: &[f64], h: usize) -> Vec<f64> {
        encode_with_human(x, h, self.num_humans)
    }

    /// Floored action distribution for (x, h).
    pub fn predict(&self, x: &[f64], h: usize) -> Vec<f64> {
        self.fitted.model.predict(&self.encode(x, h), self.fitted.floor)
    }

    /// Floored propensity of each logged action under its own human.
    pub fn logged_floored(&self, log: &BanditLog) -> Vec<f64> {
        self.fitted.logged_floored(log)
    }
}

fn encode_with_human(x: &[f64], h: usize, num_humans: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + num_humans);
    v.extend_from_slice(x);
    for j in 0..num_humans {
        v.push(if j == h { 1.0 } else { 0.0 });
    }
    v
}

/// Fit `p0(a|x,h)` with the human id as an additional one-hot covariate.
pub fn fit_per_human_propensity(
    log: &BanditLog,
    kind: EstimatorKind,
    cross_fit_folds: usize,
    floor: f64,
    opts: &FitOptions,
    seed: Seed,
) -> Result<PerHumanPropensity, PropensityError> {
    check_floor(floor, log.num_actions())?;
    let mut inputs = Vec::with_capacity(log.len());
    for (i, rec) in log.records.iter().enumerate() {
        let h = rec.human.ok_or(PropensityError::MissingHumanId { index: i })?;
        inputs.push(encode_with_human(rec.features.as_slice(), h, log.num_humans));
    }
    let labels: Vec<usize> = log.records.iter().map(|r| r.action).collect();
    let (model, oof, fold_of) = fit_classifier_with_oof(
        &inputs,
        &labels,
        log.num_actions(),
        kind,
        cross_fit_folds,
        opts,
        seed.derive("per-human-propensity"),
    )?;
    Ok(PerHumanPropensity {
        fitted: FittedPropensity {
            model,
            floor,
            train_probs_raw: oof,
            fold_of,
        },
        num_humans: log.num_humans,
        dim: log.dim,
    })
}

/// The historical assignment model `d0(h|x)`.
#[derive(Debug, Clone)]
pub enum AssignmentModel {
    /// Randomized assignment: constant `1/K`.
    Uniform { num_humans: usize },
    Fitted {
        model: PropensityModel,
        floor: f64,
        train_probs_raw: Vec<Vec<f64>>,
    },
}

impl AssignmentModel {
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        match self {
            AssignmentModel::Uniform { num_humans } => {
                vec![1.0 / *num_humans as f64; *num_humans]
            }
            AssignmentModel::Fitted { model, floor, .. } => model.predict(x, *floor),
        }
    }

    /// Floored probability of the logged human, per record.
    pub fn logged_floored(&self, log: &BanditLog) -> Result<Vec<f64>, PropensityError> {
        match self {
            AssignmentModel::Uniform { num_humans } => {
                Ok(vec![1.0 / *num_humans as f64; log.len()])
            }
            AssignmentModel::Fitted {
                floor,
                train_probs_raw,
                ..
            } => {
                let mut out = Vec::with_capacity(log.len());
                for (i, rec) in log.records.iter().enumerate() {
                    let h = rec.human.ok_or(PropensityError::MissingHumanId { index: i })?;
                    out.push(floor_simplex(&train_probs_raw[i], *floor)[h]);
                }
                Ok(out)
            }
        }
    }
}

/// Fit `d0(h|x)`: the constant `1/K` model under declared randomization,
/// otherwise a supervised fit of the human id given features.
pub fn fit_assignment(
    log: &BanditLog,
    kind: EstimatorKind,
    randomized: bool,
    cross_fit_folds: usize,
    floor: f64,
    opts: &FitOptions,
    seed: Seed,
) -> Result<AssignmentModel, PropensityError> {
    if randomized {
        return Ok(AssignmentModel::Uniform {
            num_humans: log.num_humans,
        });
    }
    check_floor(floor, log.num_humans)?;
    let inputs: Vec<Vec<f64>> = log
        .records
        .iter()
        .map(|r| r.features.as_slice().to_vec())
        .collect();
    let mut labels = Vec::with_capacity(log.len());
    for (i, rec) in log.records.iter().enumerate() {
        labels.push(rec.human.ok_or(PropensityError::MissingHumanId { index: i })?);
    }
    let (model, oof, _) = fit_classifier_with_oof(
        &inputs,
        &labels,
        log.num_humans,
        kind,
        cross_fit_folds,
        opts,
        seed.derive("assignment"),
    )?;
    Ok(AssignmentModel::Fitted {
        model,
        floor,
        train_probs_raw: oof,
    })
}

/// Flag records whose logged action looks deterministic: the raw estimated
/// propensity of some action reaches `tau_det` and the logged action attains
/// it. The complement of the logged action is recorded for imputation.
///
/// `record_probs` are the raw (pre-floor) per-record action distributions; a
/// small slack absorbs float rounding right at the threshold.
pub fn detect_deterministic_support(
    log: &BanditLog,
    record_probs: &[Vec<f64>],
    tau_det: f64,
) -> Result<DeterministicSupportMask, PropensityError> {
    if !log.action_space.is_binary() {
        return Err(PropensityError::NonBinaryActions {
            k: log.num_actions(),
        });
    }
    let mut complements = Vec::with_capacity(log.len());
    for (rec, probs) in log.records.iter().zip(record_probs) {
        let p_logged = probs[rec.action];
        let p_other = probs[1 - rec.action];
        let in_s = p_logged + 1e-12 >= tau_det && p_logged >= p_other;
        complements.push(if in_s { Some(1 - rec.action) } else { None });
    }
    Ok(DeterministicSupportMask::from_complements(complements))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ActionSpace, BanditRecord, FeatureVector};
    use crate::stats::normal_cdf;
    use proptest::prelude::*;

    fn probit_log(n: usize, seed: u64) -> BanditLog {
        use rand::Rng;
        let mut rng = Seed(seed).rng();
        let records: Vec<BanditRecord> = (0..n)
            .map(|_| {
                let x0 = crate::rng::sample_normal(&mut rng);
                let x1 = crate::rng::sample_normal(&mut rng);
                let a = usize::from(rng.random::<f64>() < normal_cdf(x0));
                BanditRecord::new(FeatureVector::new(vec![x0, x1]).unwrap(), a, 0.0)
                    .with_human(0)
            })
            .collect();
        BanditLog::new(records, ActionSpace::new(2).unwrap(), 2, 1).unwrap()
    }

    #[test]
    fn floor_simplex_matches_degenerate_contract() {
        // A degenerate prediction (1, 0) floors to (1-(k-1)e, e).
        let f = floor_simplex(&[1.0, 0.0], 0.01);
        assert!((f[0] - 0.99).abs() < 1e-12);
        assert!((f[1] - 0.01).abs() < 1e-12);
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn flooring_preserves_argmax_and_floor(raw in proptest::collection::vec(0.0f64..1.0, 2..6)) {
            let sum: f64 = raw.iter().sum();
            prop_assume!(sum > 1e-6);
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let eps = 0.01;
            prop_assume!((p.len() as f64) * eps < 1.0);
            let f = floor_simplex(&p, eps);
            prop_assert!(f.iter().all(|&v| v >= eps - 1e-12));
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            prop_assert_eq!(argmax(&p), argmax(&f));
        }
    }

    #[test]
    fn mlp_propensity_recovers_probit_logging() {
        let log = probit_log(5000, 21);
        let fitted = fit_propensity(
            &log,
            EstimatorKind::SoftmaxMlp {
                hidden: (16, 16),
                activation: Activation::Tanh,
            },
            0,
            DEFAULT_FLOOR,
            &FitOptions::default(),
            Seed(3),
        )
        .unwrap();
        let mut mae = 0.0;
        let mut count = 0.0;
        let mut x0 = -2.0;
        while x0 <= 2.0 {
            let pred = fitted.predict(&[x0, 0.0])[1];
            mae += (pred - normal_cdf(x0)).abs();
            count += 1.0;
            x0 += 0.1;
        }
        mae /= count;
        assert!(mae < 0.05, "mean absolute error {mae}");
    }

    #[test]
    fn knn_propensity_recovers_uniform_logging() {
        use rand::Rng;
        let mut rng = Seed(31).rng();
        let records: Vec<BanditRecord> = (0..5000)
            .map(|_| {
                let x = vec![
                    crate::rng::sample_normal(&mut rng),
                    crate::rng::sample_normal(&mut rng),
                ];
                let a = rng.random_range(0..4usize);
                BanditRecord::new(FeatureVector::new(x).unwrap(), a, 0.0)
            })
            .collect();
        let log = BanditLog::new(records, ActionSpace::new(4).unwrap(), 2, 1).unwrap();
        let fitted = fit_propensity(
            &log,
            EstimatorKind::KnnFrequency { k: 25 },
            0,
            DEFAULT_FLOOR,
            &FitOptions::default(),
            Seed(5),
        )
        .unwrap();
        for probe in [[0.0, 0.0], [1.0, -1.0], [-0.5, 0.5]] {
            let p = fitted.predict(&probe);
            for v in &p {
                assert!((v - 0.25).abs() < 0.2, "prediction {p:?}");
            }
        }
        // Floor honored everywhere.
        let p = fitted.predict(&[10.0, 10.0]);
        assert!(p.iter().all(|&v| v >= DEFAULT_FLOOR - 1e-12));
    }

    #[test]
    fn degenerate_single_action_log() {
        let records: Vec<BanditRecord> = (0..60)
            .map(|i| {
                BanditRecord::new(
                    FeatureVector::new(vec![i as f64 / 10.0, 0.0]).unwrap(),
                    0,
                    1.0,
                )
            })
            .collect();
        let log = BanditLog::new(records, ActionSpace::new(2).unwrap(), 2, 1).unwrap();
        let fitted = fit_propensity(
            &log,
            EstimatorKind::KnnFrequency { k: 25 },
            0,
            DEFAULT_FLOOR,
            &FitOptions::default(),
            Seed(6),
        )
        .unwrap();
        let p = fitted.predict(&[1.0, 0.0]);
        assert!((p[0] - 0.99).abs() < 1e-12, "got {p:?}");
    }

    #[test]
    fn per_human_identical_humans_agree() {
        use rand::Rng;
        let mut rng = Seed(41).rng();
        // Two humans with the same probit behavior.
        let records: Vec<BanditRecord> = (0..4000)
            .map(|_| {
                let x0 = crate::rng::sample_normal(&mut rng);
                let x1 = crate::rng::sample_normal(&mut rng);
                let a = usize::from(rng.random::<f64>() < normal_cdf(x0));
                BanditRecord::new(FeatureVector::new(vec![x0, x1]).unwrap(), a, 0.0)
                    .with_human(rng.random_range(0..2))
            })
            .collect();
        let log = BanditLog::new(records, ActionSpace::new(2).unwrap(), 2, 2).unwrap();
        // A wide neighborhood keeps the per-human frequency estimates stable
        // enough to compare the two humans across held-out instances.
        let fitted = fit_per_human_propensity(
            &log,
            EstimatorKind::KnnFrequency { k: 250 },
            0,
            DEFAULT_FLOOR,
            &FitOptions::default(),
            Seed(7),
        )
        .unwrap();
        let mut disagreement = 0.0;
        let mut count = 0.0;
        let mut x0 = -2.0;
        while x0 <= 2.0 {
            let p0 = fitted.predict(&[x0, 0.0], 0);
            let p1 = fitted.predict(&[x0, 0.0], 1);
            disagreement += (p0[1] - p1[1]).abs();
            count += 1.0;
            assert!((p0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            x0 += 0.1;
        }
        disagreement /= count;
        assert!(disagreement < 0.05, "mean disagreement {disagreement}");
    }

    #[test]
    fn per_human_degenerate_human_pins_action() {
        use rand::Rng;
        let mut rng = Seed(43).rng();
        // Human 0 always picks 0; human 1 uniform.
        let records: Vec<BanditRecord> = (0..2000)
            .map(|_| {
                let x = vec![
                    crate::rng::sample_normal(&mut rng),
                    crate::rng::sample_normal(&mut rng),
                ];
                let h = rng.random_range(0..2usize);
                let a = if h == 0 { 0 } else { rng.random_range(0..2usize) };
                BanditRecord::new(FeatureVector::new(x).unwrap(), a, 0.0).with_human(h)
            })
            .collect();
        let log = BanditLog::new(records, ActionSpace::new(2).unwrap(), 2, 2).unwrap();
        let fitted = fit_per_human_propensity(
            &log,
            EstimatorKind::KnnFrequency { k: 25 },
            0,
            DEFAULT_FLOOR,
            &FitOptions::default(),
            Seed(8),
        )
        .unwrap();
        let p = fitted.predict(&[0.0, 0.0], 0);
        assert!(p[0] >= 1.0 - DEFAULT_FLOOR - 1e-9, "got {p:?}");
    }

    #[test]
    fn assignment_randomized_is_uniform() {
        let log = probit_log(50, 51);
        let model = fit_assignment(
            &log,
            EstimatorKind::default(),
            true,
            0,
            DEFAULT_FLOOR,
            &FitOptions::default(),
            Seed(9),
        )
        .unwrap();
        let p = model.predict(&[0.3, -0.4]);
        assert_eq!(p, vec![1.0]);
        // K = 3 case.
        let mut log3 = probit_log(30, 52);
        log3.num_humans = 3;
        let model = fit_assignment(
            &log3,
            EstimatorKind::default(),
            true,
            0,
            DEFAULT_FLOOR,
            &FitOptions::default(),
            Seed(9),
        )
        .unwrap();
        let p = model.predict(&[0.0, 0.0]);
        assert_eq!(p, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn assignment_by_rule_is_learned() {
        use rand::Rng;
        let mut rng = Seed(53).rng();
        let records: Vec<BanditRecord> = (0..2000)
            .map(|_| {
                let x0 = crate::rng::sample_normal(&mut rng);
                let x1 = crate::rng::sample_normal(&mut rng);
                let h = usize::from(x0 > 0.0);
                BanditRecord::new(
                    FeatureVector::new(vec![x0, x1]).unwrap(),
                    rng.random_range(0..2usize),
                    0.0,
                )
                .with_human(h)
            })
            .collect();
        let log = BanditLog::new(records, ActionSpace::new(2).unwrap(), 2, 2).unwrap();
        let model = fit_assignment(
            &log,
            EstimatorKind::KnnFrequency { k: 25 },
            false,
            0,
            DEFAULT_FLOOR,
            &FitOptions::default(),
            Seed(10),
        )
        .unwrap();
        // Held-out accuracy of argmax prediction against the rule.
        let mut correct = 0;
        let total = 500;
        let mut rng2 = Seed(54).rng();
        for _ in 0..total {
            let x0 = crate::rng::sample_normal(&mut rng2);
            let x1 = crate::rng::sample_normal(&mut rng2);
            let p = model.predict(&[x0, x1]);
            let got = usize::from(p[1] > p[0]);
            if got == usize::from(x0 > 0.0) {
                correct += 1;
            }
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn detection_threshold_and_monotonicity() {
        let log = probit_log(4, 61);
        let probs = vec![
            vec![0.995, 0.005],
            vec![0.6, 0.4],
            vec![0.005, 0.995],
            vec![0.99, 0.01],
        ];
        // Force logged actions to match the dominant side where flagged.
        let mut log = log;
        log.records[0].action = 0;
        log.records[1].action = 0;
        log.records[2].action = 1;
        log.records[3].action = 1; // dominant is 0 but the human took 1
        let mask = detect_deterministic_support(&log, &probs, 0.99).unwrap();
        assert!(mask.in_s(0));
        assert!(!mask.in_s(1));
        assert!(mask.in_s(2));
        assert_eq!(mask.complement(2), Some(0));
        // Record 3: threshold reached by the *other* action, so not flagged.
        assert!(!mask.in_s(3));

        // Raising tau never adds records.
        let lo = detect_deterministic_support(&log, &probs, 0.9).unwrap();
        let hi = detect_deterministic_support(&log, &probs, 0.999).unwrap();
        for i in 0..4 {
            assert!(!hi.in_s(i) || lo.in_s(i));
        }
    }

    #[test]
    fn detection_requires_binary_actions() {
        use rand::Rng;
        let mut rng = Seed(62).rng();
        let records: Vec<BanditRecord> = (0..5)
            .map(|_| {
                BanditRecord::new(
                    FeatureVector::new(vec![rng.random(), rng.random()]).unwrap(),
                    0,
                    0.0,
                )
            })
            .collect();
        let log = BanditLog::new(records, ActionSpace::new(3).unwrap(), 2, 1).unwrap();
        let probs = vec![vec![1.0, 0.0, 0.0]; 5];
        assert!(matches!(
            detect_deterministic_support(&log, &probs, 0.99),
            Err(PropensityError::NonBinaryActions { k: 3 })
        ));
    }

    #[test]
    fn cross_fit_predictions_never_use_own_fold() {
        let log = probit_log(200, 71);
        let fitted = fit_propensity(
            &log,
            EstimatorKind::KnnFrequency { k: 5 },
            2,
            DEFAULT_FLOOR,
            &FitOptions::default(),
            Seed(11),
        )
        .unwrap();
        // Recompute each record's prediction using only the other fold and
        // compare exactly.
        let inputs: Vec<Vec<f64>> = log
            .records
            .iter()
            .map(|r| r.features.as_slice().to_vec())
            .collect();
        let labels: Vec<usize> = log.records.iter().map(|r| r.action).collect();
        for i in 0..log.len() {
            let expect = knn_frequencies(&inputs, &labels, 2, 5, &inputs[i], |j| {
                fitted.fold_of[j] == fitted.fold_of[i]
            });
            assert_eq!(fitted.train_probs_raw[i], expect, "record {i}");
        }
    }

    #[test]
    fn propensity_text_roundtrip() {
        let log = probit_log(40, 81);
        for kind in [
            EstimatorKind::KnnFrequency { k: 5 },
            EstimatorKind::SoftmaxLinear,
        ] {
            let fitted = fit_propensity(
                &log,
                kind,
                0,
                DEFAULT_FLOOR,
                &FitOptions {
                    max_epochs: 10,
                    ..FitOptions::default()
                },
                Seed(12),
            )
            .unwrap();
            let back = PropensityModel::from_text(&fitted.model.to_text()).unwrap();
            let x = [0.123, -0.456];
            let a = fitted.model.predict_raw(&x);
            let b = back.predict_raw(&x);
            for (u, v) in a.iter().zip(&b) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn infeasible_floor_rejected() {
        let log = probit_log(10, 91);
        assert!(matches!(
            fit_propensity(
                &log,
                EstimatorKind::default(),
                0,
                0.5,
                &FitOptions::default(),
                Seed(13)
            ),
            Err(PropensityError::InfeasibleFloor { .. })
        ));
    }
}
