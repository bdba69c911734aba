//! Out-of-distribution gating: detect test instances that look unlike the
//! training covariates and route them to humans before the router is
//! consulted.
//!
//! Two closed-form detectors sit behind one interface: squared Mahalanobis
//! distance to the training mean (ridge-regularized covariance) and distance
//! to the k-th nearest training point. The contamination quantile `p` plays
//! the role of the one-class training-error bound: the decision threshold is
//! the empirical `(1-p)`-quantile of training scores, so roughly a fraction
//! `p` of the training set itself is flagged.
//!
//! After deployment, [`tune_ood`] picks the contamination level from a small
//! post-shift log by maximizing the realized team objective: flagged records
//! score their logged (human) reward net of cost, unflagged records score the
//! usual deferral objective.

use thiserror::Error;

use crate::dataset::{BanditLog, CostFunction};
use crate::estimators::ROUTER_HUMAN;
use crate::models::SoftmaxModel;

#[derive(Debug, Error)]
pub enum OodError {
    #[error("need at least {needed} training points for this detector, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("contamination must lie strictly inside (0, 1), got {0}")]
    BadContamination(f64),
    #[error("covariance matrix is singular even after ridge regularization")]
    SingularCovariance,
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error("tuning log is empty")]
    EmptyTuningLog,
    #[error("record {index}: propensity must be positive, got {value}")]
    NonPositivePropensity { index: usize, value: f64 },
    #[error("malformed detector text: {0}")]
    Parse(String),
}

/// Detector family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetectorKind {
    Mahalanobis,
    KnnDistance { k: usize },
}

#[derive(Debug, Clone)]
enum DetectorState {
    Mahalanobis {
        mean: Vec<f64>,
        cov_inv: Vec<Vec<f64>>,
    },
    KnnDistance {
        refs: Vec<Vec<f64>>,
        k: usize,
    },
}

/// A fitted novelty detector with a contamination-quantile threshold.
#[derive(Debug, Clone)]
pub struct OodDetector {
    state: DetectorState,
    /// Training scores, ascending; kept so the threshold can be re-derived
    /// for any contamination level without refitting.
    train_scores: Vec<f64>,
    threshold: f64,
    contamination: f64,
}

fn quantile_threshold(sorted_scores: &[f64], p: f64) -> f64 {
    let n = sorted_scores.len();
    let idx = (((1.0 - p) * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted_scores[idx]
}

/// Fit a detector on training covariates with contamination level `p`.
pub fn fit_ood(
    train_features: &[Vec<f64>],
    kind: DetectorKind,
    p: f64,
) -> Result<OodDetector, OodError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(OodError::BadContamination(p));
    }
    let n = train_features.len();
    let state = match kind {
        DetectorKind::Mahalanobis => {
            let d = train_features.first().map_or(0, Vec::len);
            if n < d + 2 {
                return Err(OodError::InsufficientData { needed: d + 2, got: n });
            }
            let mut mean = vec![0.0; d];
            for x in train_features {
                for (m, v) in mean.iter_mut().zip(x) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut cov = vec![vec![0.0; d]; d];
            for x in train_features {
                for i in 0..d {
                    let di = x[i] - mean[i];
                    for j in 0..d {
                        cov[i][j] += di * (x[j] - mean[j]);
                    }
                }
            }
            for row in cov.iter_mut() {
                for v in row.iter_mut() {
                    *v /= (n - 1) as f64;
                }
            }
            let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
            let ridge = 1e-6 * trace / d as f64;
            for i in 0..d {
                cov[i][i] += ridge;
            }
            let cov_inv = invert_matrix(cov).ok_or(OodError::SingularCovariance)?;
            DetectorState::Mahalanobis { mean, cov_inv }
        }
        DetectorKind::KnnDistance { k } => {
            if n < k + 1 {
                return Err(OodError::InsufficientData { needed: k + 1, got: n });
            }
            DetectorState::KnnDistance {
                refs: train_features.to_vec(),
                k,
            }
        }
    };
    // Score the training set; knn scores exclude the point itself.
    let mut train_scores: Vec<f64> = (0..n)
        .map(|i| score_with(&state, &train_features[i], Some(i)))
        .collect();
    train_scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let threshold = quantile_threshold(&train_scores, p);
    Ok(OodDetector {
        state,
        train_scores,
        threshold,
        contamination: p,
    })
}

fn score_with(state: &DetectorState, x: &[f64], exclude: Option<usize>) -> f64 {
    match state {
        DetectorState::Mahalanobis { mean, cov_inv } => {
            let d = mean.len();
            let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
            let mut acc = 0.0;
            for i in 0..d {
                for j in 0..d {
                    acc += diff[i] * cov_inv[i][j] * diff[j];
                }
            }
            acc
        }
        DetectorState::KnnDistance { refs, k } => {
            let mut dists: Vec<f64> = refs
                .iter()
                .enumerate()
                .filter(|(i, _)| Some(*i) != exclude)
                .map(|(_, r)| {
                    r.iter()
                        .zip(x)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            dists[(*k - 1).min(dists.len() - 1)]
        }
    }
}

// Gauss-Jordan with partial pivoting; None when a pivot vanishes.
fn invert_matrix(a: Vec<Vec<f64>>) -> Option<Vec<Vec<f64>>> {
    let d = a.len();
    let mut aug: Vec<Vec<f64>> = a
        .into_iter()
        .enumerate()
        .map(|(i, mut row)| {
            row.extend((0..d).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..d {
        let pivot_row = (col..d)
            .max_by(|&i, &j| aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap())?;
        if aug[pivot_row][col].abs() < 1e-300 {
            return None;
        }
        aug.swap(col, pivot_row);
        let pivot = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= pivot;
        }
        for row in 0..d {
            if row != col {
                let factor = aug[row][col];
                if factor != 0.0 {
                    for j in 0..2 * d {
                        aug[row][j] -= factor * aug[col][j];
                    }
                }
            }
        }
    }
    Some(aug.into_iter().map(|row| row[d..].to_vec()).collect())
}

impl OodDetector {
    /// Novelty score; larger is farther from the training distribution.
    pub fn score(&self, x: &[f64]) -> f64 {
        score_with(&self.state, x, None)
    }

    /// Flag as out-of-distribution.
    pub fn flag(&self, x: &[f64]) -> bool {
        self.score(x) > self.threshold
    }

    pub fn contamination(&self) -> f64 {
        self.contamination
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Same fitted state, re-thresholded for a new contamination level.
    pub fn with_contamination(&self, p: f64) -> Result<OodDetector, OodError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(OodError::BadContamination(p));
        }
        Ok(OodDetector {
            state: self.state.clone(),
            train_scores: self.train_scores.clone(),
            threshold: quantile_threshold(&self.train_scores, p),
            contamination: p,
        })
    }

    pub fn kind(&self) -> DetectorKind {
        match &self.state {
            DetectorState::Mahalanobis { .. } => DetectorKind::Mahalanobis,
            DetectorState::KnnDistance { k, .. } => DetectorKind::KnnDistance { k: *k },
        }
    }

    // ── Text serialization (bundled with a deferral system) ─────────────

    pub fn to_text(&self) -> String {
        let mut s = String::from("ood-detector v1\n");
        s.push_str(&format!("contamination {:?}\n", self.contamination));
        match &self.state {
            DetectorState::Mahalanobis { mean, cov_inv } => {
                s.push_str(&format!("kind mahalanobis\ndim {}\n", mean.len()));
                s.push_str("mean");
                for v in mean {
                    s.push_str(&format!(" {v:?}"));
                }
                s.push('\n');
                for row in cov_inv {
                    s.push_str("cov");
                    for v in row {
                        s.push_str(&format!(" {v:?}"));
                    }
                    s.push('\n');
                }
            }
            DetectorState::KnnDistance { refs, k } => {
                s.push_str(&format!(
                    "kind knn\nk {k}\nn {} dim {}\n",
                    refs.len(),
                    refs.first().map_or(0, Vec::len)
                ));
                for r in refs {
                    s.push_str("ref");
                    for v in r {
                        s.push_str(&format!(" {v:?}"));
                    }
                    s.push('\n');
                }
            }
        }
        s.push_str(&format!("scores {}\n", self.train_scores.len()));
        for v in &self.train_scores {
            s.push_str(&format!("{v:?}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<OodDetector, OodError> {
        let bad = |m: &str| OodError::Parse(m.to_string());
        let mut lines = text.lines().peekable();
        if lines.next() != Some("ood-detector v1") {
            return Err(bad("unknown header"));
        }
        let contam_line = lines.next().ok_or_else(|| bad("missing contamination"))?;
        let contamination: f64 = contam_line
            .strip_prefix("contamination ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad contamination"))?;
        let kind_line = lines.next().ok_or_else(|| bad("missing kind"))?;
        let parse_floats = |line: &str, prefix: &str| -> Result<Vec<f64>, OodError> {
            line.strip_prefix(prefix)
                .ok_or_else(|| OodError::Parse(format!("expected {prefix}: {line}")))?
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| OodError::Parse(v.into())))
                .collect()
        };
        let state = match kind_line {
            "kind mahalanobis" => {
                let dim: usize = lines
                    .next()
                    .and_then(|l| l.strip_prefix("dim "))
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("bad dim"))?;
                let mean = parse_floats(lines.next().ok_or_else(|| bad("missing mean"))?, "mean")?;
                let mut cov_inv = Vec::with_capacity(dim);
                for _ in 0..dim {
                    cov_inv.push(parse_floats(
                        lines.next().ok_or_else(|| bad("missing cov row"))?,
                        "cov",
                    )?);
                }
                DetectorState::Mahalanobis { mean, cov_inv }
            }
            "kind knn" => {
                let k: usize = lines
                    .next()
                    .and_then(|l| l.strip_prefix("k "))
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("bad k"))?;
                let header = lines.next().ok_or_else(|| bad("missing n/dim"))?;
                let n: usize = header
                    .strip_prefix("n ")
                    .and_then(|rest| rest.split_whitespace().next())
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("bad n"))?;
                let mut refs = Vec::with_capacity(n);
                for _ in 0..n {
                    refs.push(parse_floats(
                        lines.next().ok_or_else(|| bad("missing ref"))?,
                        "ref",
                    )?);
                }
                DetectorState::KnnDistance { refs, k }
            }
            other => return Err(OodError::Parse(format!("unknown kind: {other}"))),
        };
        let n_scores: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("scores "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad scores header"))?;
        let mut train_scores = Vec::with_capacity(n_scores);
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            train_scores.push(line.parse::<f64>().map_err(|_| bad("bad score"))?);
        }
        if train_scores.len() != n_scores {
            return Err(bad("score count mismatch"));
        }
        let threshold = quantile_threshold(&train_scores, contamination);
        Ok(OodDetector {
            state,
            train_scores,
            threshold,
            contamination,
        })
    }
}

/// Outcome of post-deployment contamination tuning.
#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub best_p: f64,
    /// `(p, objective)` per grid point, in grid order.
    pub objectives: Vec<(f64, f64)>,
    /// Flagged records skipped because they were not human-generated.
    pub excluded: usize,
}

/// Pick the contamination level maximizing the realized team objective on a
/// post-shift tuning log, with the trained policy and router frozen.
///
/// Flagged records contribute their logged reward net of cost (the log is
/// human-generated); records lacking a human id are excluded from the
/// flagged branch and counted in `excluded`. Ties break toward smaller `p`.
pub fn tune_ood(
    detector: &OodDetector,
    p_grid: &[f64],
    tuning_log: &BanditLog,
    policy: &SoftmaxModel,
    router: &SoftmaxModel,
    propensities: &[f64],
    cost: &CostFunction,
) -> Result<TuneOutcome, OodError> {
    if p_grid.is_empty() {
        return Err(OodError::EmptyGrid);
    }
    if tuning_log.is_empty() {
        return Err(OodError::EmptyTuningLog);
    }
    for (i, &p) in propensities.iter().enumerate() {
        if !(p > 0.0) || !p.is_finite() {
            return Err(OodError::NonPositivePropensity { index: i, value: p });
        }
    }
    // Scores and per-record deferral terms are independent of p; compute once.
    let n = tuning_log.len();
    let mut scores = Vec::with_capacity(n);
    let mut in_dist_term = Vec::with_capacity(n);
    let mut human_term = Vec::with_capacity(n);
    for (i, rec) in tuning_log.records.iter().enumerate() {
        let x = rec.features.as_slice();
        scores.push(detector.score(x));
        let d = router.probs(x)[ROUTER_HUMAN];
        let pi = policy.probs(x)[rec.action];
        let c = cost.cost(i, rec.human.unwrap_or(0));
        in_dist_term.push(d * (rec.reward - c) + (1.0 - d) * (pi / propensities[i] * rec.reward));
        human_term.push(if rec.human.is_some() {
            Some(rec.reward - c)
        } else {
            None
        });
    }

    let mut sorted_grid: Vec<f64> = p_grid.to_vec();
    sorted_grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut objectives = Vec::with_capacity(p_grid.len());
    let mut excluded_max = 0usize;
    let mut best: Option<(f64, f64)> = None;
    for &p in &sorted_grid {
        let gated = detector.with_contamination(p)?;
        let mut obj = 0.0;
        let mut excluded = 0usize;
        for i in 0..n {
            if scores[i] > gated.threshold() {
                match human_term[i] {
                    Some(t) => obj += t,
                    None => excluded += 1,
                }
            } else {
                obj += in_dist_term[i];
            }
        }
        excluded_max = excluded_max.max(excluded);
        objectives.push((p, obj));
        // Strictly-greater keeps the smallest p on ties.
        if best.map_or(true, |(_, b)| obj > b) {
            best = Some((p, obj));
        }
    }
    let (best_p, _) = best.expect("non-empty grid");
    Ok(TuneOutcome {
        best_p,
        objectives,
        excluded: excluded_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ActionSpace, BanditRecord, FeatureVector};
    use crate::datagen::{gen_covshift_world, CovShiftConfig};
    use crate::models::{Architecture, SoftmaxModel};
    use crate::rng::{sample_normal, Seed};

    fn gaussian(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Seed(seed).rng();
        (0..n)
            .map(|_| vec![sample_normal(&mut rng), sample_normal(&mut rng)])
            .collect()
    }

    #[test]
    fn training_mean_is_never_flagged() {
        let data = gaussian(500, 1);
        let mut mean = vec![0.0; 2];
        for x in &data {
            mean[0] += x[0];
            mean[1] += x[1];
        }
        mean.iter_mut().for_each(|m| *m /= 500.0);
        for p in [0.01, 0.05, 0.5, 0.99] {
            let det = fit_ood(&data, DetectorKind::Mahalanobis, p).unwrap();
            assert!(!det.flag(&mean), "flagged at p = {p}");
        }
    }

    #[test]
    fn train_flag_rate_tracks_contamination() {
        let data = gaussian(5000, 2);
        for kind in [DetectorKind::Mahalanobis, DetectorKind::KnnDistance { k: 10 }] {
            let det = fit_ood(&data, kind, 0.05).unwrap();
            let flagged = data.iter().filter(|x| det.flag(x)).count();
            assert!(
                (flagged as i64 - 250).unsigned_abs() <= 25,
                "{kind:?}: flagged {flagged}"
            );
        }
    }

    #[test]
    fn shifted_test_data_is_flagged_much_more() {
        let w = gen_covshift_world(
            CovShiftConfig {
                mu: 9.0,
                n_train: 5000,
                n_test: 5000,
                n_tune: 10,
            },
            Seed(3),
        )
        .unwrap();
        let train: Vec<Vec<f64>> = w
            .train_instances
            .iter()
            .map(|x| x.as_slice().to_vec())
            .collect();
        for kind in [DetectorKind::Mahalanobis, DetectorKind::KnnDistance { k: 10 }] {
            let det = fit_ood(&train, kind, 0.05).unwrap();
            let train_rate =
                train.iter().filter(|x| det.flag(x)).count() as f64 / train.len() as f64;
            let test_rate = w
                .test_instances
                .iter()
                .filter(|x| det.flag(x.as_slice()))
                .count() as f64
                / w.test_instances.len() as f64;
            assert!(
                test_rate >= 10.0 * train_rate,
                "{kind:?}: test {test_rate} vs train {train_rate}"
            );
        }
    }

    #[test]
    fn raising_contamination_never_unflags() {
        let data = gaussian(1000, 4);
        let det = fit_ood(&data, DetectorKind::Mahalanobis, 0.01).unwrap();
        let probes = gaussian(200, 5);
        let grid = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 0.99];
        for pair in grid.windows(2) {
            let lo = det.with_contamination(pair[0]).unwrap();
            let hi = det.with_contamination(pair[1]).unwrap();
            assert!(hi.threshold() <= lo.threshold());
            for x in &probes {
                if lo.flag(x) {
                    assert!(hi.flag(x), "unflagged when p rose to {}", pair[1]);
                }
            }
        }
    }

    #[test]
    fn insufficient_data_and_bad_p_rejected() {
        let data = gaussian(3, 6);
        assert!(matches!(
            fit_ood(&data, DetectorKind::Mahalanobis, 0.05),
            Err(OodError::InsufficientData { .. })
        ));
        let data = gaussian(100, 7);
        assert!(matches!(
            fit_ood(&data, DetectorKind::Mahalanobis, 0.0),
            Err(OodError::BadContamination(_))
        ));
        assert!(matches!(
            fit_ood(&data, DetectorKind::KnnDistance { k: 200 }, 0.05),
            Err(OodError::InsufficientData { .. })
        ));
    }

    #[test]
    fn matrix_inversion_identity_check() {
        let a = vec![vec![2.0, 0.3], vec![0.3, 1.5]];
        let inv = invert_matrix(a.clone()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let got: f64 = (0..2).map(|k| a[i][k] * inv[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((got - want).abs() < 1e-12);
            }
        }
        assert!(invert_matrix(vec![vec![1.0, 1.0], vec![1.0, 1.0]]).is_none());
    }

    fn tuning_log(entries: &[(Vec<f64>, usize, f64, bool)]) -> BanditLog {
        let records = entries
            .iter()
            .map(|(x, a, r, human)| {
                let rec = BanditRecord::new(FeatureVector::new(x.clone()).unwrap(), *a, *r);
                if *human {
                    rec.with_human(0)
                } else {
                    rec
                }
            })
            .collect();
        BanditLog::new(records, ActionSpace::new(2).unwrap(), 2, 1).unwrap()
    }

    #[test]
    fn tune_singleton_grid_returns_it() {
        let data = gaussian(100, 8);
        let det = fit_ood(&data, DetectorKind::Mahalanobis, 0.05).unwrap();
        let log = tuning_log(&[(vec![0.0, 0.0], 0, 1.0, true), (vec![1.0, 1.0], 1, 0.0, true)]);
        let policy = SoftmaxModel::zeros(Architecture::Linear { input: 2, output: 2 });
        let router = SoftmaxModel::zeros(Architecture::Linear { input: 2, output: 2 });
        let out = tune_ood(
            &det,
            &[0.2],
            &log,
            &policy,
            &router,
            &[0.5, 0.5],
            &CostFunction::zero(),
        )
        .unwrap();
        assert_eq!(out.best_p, 0.2);
        assert!(tune_ood(
            &det,
            &[],
            &log,
            &policy,
            &router,
            &[0.5, 0.5],
            &CostFunction::zero()
        )
        .is_err());
    }

    #[test]
    fn tune_matches_brute_force_and_prefers_flagging_when_humans_dominate() {
        // 20-record log: humans always reward 1, the policy puts most mass on
        // the wrong action, so flagging everything wins.
        let train = gaussian(200, 9);
        let det = fit_ood(&train, DetectorKind::Mahalanobis, 0.05).unwrap();
        let mut rng = Seed(10).rng();
        let entries: Vec<(Vec<f64>, usize, f64, bool)> = (0..20)
            .map(|_| {
                (
                    vec![sample_normal(&mut rng), sample_normal(&mut rng)],
                    0usize,
                    1.0,
                    true,
                )
            })
            .collect();
        let log = tuning_log(&entries);
        // Policy heavily on action 1 (logged action is 0 -> tiny pi ratio).
        let mut policy = SoftmaxModel::zeros(Architecture::Linear { input: 2, output: 2 });
        policy.params_mut()[5] = 500.0;
        // Router prefers the algorithm.
        let mut router = SoftmaxModel::zeros(Architecture::Linear { input: 2, output: 2 });
        router.params_mut()[5] = 500.0;
        let props = vec![0.5; 20];
        let grid = [0.05, 0.5, 0.99];
        let out = tune_ood(&det, &grid, &log, &policy, &router, &props, &CostFunction::zero())
            .unwrap();

        // Independent brute force of the tuning objective.
        for &(p, got) in &out.objectives {
            let gated = det.with_contamination(p).unwrap();
            let mut want = 0.0;
            for (i, rec) in log.records.iter().enumerate() {
                let x = rec.features.as_slice();
                if gated.flag(x) {
                    want += rec.reward - 0.0;
                } else {
                    let d = router.probs(x)[ROUTER_HUMAN];
                    let pi = policy.probs(x)[rec.action];
                    want += d * rec.reward + (1.0 - d) * pi / props[i] * rec.reward;
                }
            }
            assert!((got - want).abs() < 1e-12, "p = {p}: {got} vs {want}");
        }
        // The largest contamination flags the most and wins here.
        assert_eq!(out.best_p, 0.99);
    }

    #[test]
    fn tune_prefers_smallest_p_when_algorithm_dominates() {
        let train = gaussian(200, 11);
        let det = fit_ood(&train, DetectorKind::Mahalanobis, 0.05).unwrap();
        let mut rng = Seed(12).rng();
        // Algorithm matches the logged action with probability ~1 and the
        // propensity is 0.5, so unflagged records are worth ~2x the human's.
        let entries: Vec<(Vec<f64>, usize, f64, bool)> = (0..20)
            .map(|_| {
                (
                    vec![sample_normal(&mut rng), sample_normal(&mut rng)],
                    0usize,
                    1.0,
                    true,
                )
            })
            .collect();
        let log = tuning_log(&entries);
        let mut policy = SoftmaxModel::zeros(Architecture::Linear { input: 2, output: 2 });
        policy.params_mut()[4] = 500.0; // all mass on the logged action 0
        let mut router = SoftmaxModel::zeros(Architecture::Linear { input: 2, output: 2 });
        router.params_mut()[5] = 500.0; // prefer algorithm
        let props = vec![0.5; 20];
        let grid = [0.01, 0.2, 0.99];
        let out = tune_ood(&det, &grid, &log, &policy, &router, &props, &CostFunction::zero())
            .unwrap();
        assert_eq!(out.best_p, 0.01);
        // Flag rate at the winner does not exceed the smallest grid value's.
        let smallest = det.with_contamination(0.01).unwrap();
        let winner = det.with_contamination(out.best_p).unwrap();
        let rate = |g: &OodDetector| {
            log.records
                .iter()
                .filter(|r| g.flag(r.features.as_slice()))
                .count()
        };
        assert!(rate(&winner) <= rate(&smallest));
    }

    #[test]
    fn tune_excludes_non_human_flagged_records() {
        let train = gaussian(300, 13);
        let det = fit_ood(&train, DetectorKind::Mahalanobis, 0.05).unwrap();
        // One far-out record without a human id: flagged but excluded.
        let log = tuning_log(&[
            (vec![0.0, 0.0], 0, 1.0, true),
            (vec![9.0, 9.0], 0, 1.0, false),
        ]);
        let policy = SoftmaxModel::zeros(Architecture::Linear { input: 2, output: 2 });
        let router = SoftmaxModel::zeros(Architecture::Linear { input: 2, output: 2 });
        let out = tune_ood(
            &det,
            &[0.05],
            &log,
            &policy,
            &router,
            &[0.5, 0.5],
            &CostFunction::zero(),
        )
        .unwrap();
        assert_eq!(out.excluded, 1);
    }

    #[test]
    fn detector_text_roundtrip() {
        let data = gaussian(50, 14);
        for kind in [DetectorKind::Mahalanobis, DetectorKind::KnnDistance { k: 5 }] {
            let det = fit_ood(&data, kind, 0.1).unwrap();
            let back = OodDetector::from_text(&det.to_text()).unwrap();
            assert_eq!(det.kind(), back.kind());
            assert_eq!(det.threshold().to_bits(), back.threshold().to_bits());
            let probe = [0.3, -0.8];
            assert_eq!(det.score(&probe).to_bits(), back.score(&probe).to_bits());
        }
        assert!(OodDetector::from_text("garbage").is_err());
    }
}
