//! Counterfactual value objectives and their analytic gradients.
//!
//! All estimators are pure functions of (models, log, per-record logged
//! propensities). Propensities arrive pre-floored from the propensity module;
//! every function rejects non-positive values before dividing.
//!
//! Conventions:
//!
//! * The plain importance-weighted policy objective ([`ipw_value`],
//!   [`ipw_grad`], [`ec_ipw_value`], [`ec_ipw_grad`]) is stated per instance,
//!   so its gradient carries the `1/N` factor.
//! * The deferral objectives ([`two_stage_value`], [`joint_value_and_grads`],
//!   [`personalized_value_and_grads`], [`ec_joint_value_and_grads`]) are
//!   stated as sums over the log; their gradients are of `total`. Adam is
//!   invariant to the constant factor between the two conventions.
//! * A binary router reports the probability of deferring to the human at
//!   output index [`ROUTER_HUMAN`]; a personalized router over `K` humans
//!   puts humans at `0..K` and the algorithm at index `K`.

use thiserror::Error;

use crate::dataset::{BanditLog, CostFunction, CounterfactualTable};
use crate::models::SoftmaxModel;

/// Output index of the "defer to human" probability in a binary router.
pub const ROUTER_HUMAN: usize = 0;
/// Output index of the "use the algorithm" probability in a binary router.
pub const ROUTER_ALGO: usize = 1;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("record {index}: propensity must be positive after flooring, got {value}")]
    NonPositivePropensity { index: usize, value: f64 },
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("record {index} carries no human id")]
    MissingHumanId { index: usize },
    #[error("expert-consistency objectives require a binary action space, got {k} actions")]
    NonBinaryActions { k: usize },
    #[error("record {index}: biased set B must be a subset of the deterministic set S")]
    BiasOutsideSupport { index: usize },
}

/// An objective evaluated over a log, exposed both as the raw sum and as the
/// per-instance mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub mean: f64,
}

impl ObjectiveValue {
    pub fn from_total(total: f64, n: usize) -> ObjectiveValue {
        ObjectiveValue {
            total,
            mean: total / n as f64,
        }
    }
}

/// Anything that maps features to action probabilities. Lets brute-force
/// oracles evaluate hand-built table policies alongside trained models.
pub trait PolicyProbs {
    fn action_probs(&self, x: &[f64]) -> Vec<f64>;
}

impl PolicyProbs for SoftmaxModel {
    fn action_probs(&self, x: &[f64]) -> Vec<f64> {
        self.probs(x)
    }
}

/// Which records the logging humans decided deterministically, and the unseen
/// complementary action for each. Only defined for binary action spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicSupportMask {
    complement: Vec<Option<usize>>,
}

impl DeterministicSupportMask {
    /// Mask flagging nothing.
    pub fn empty(n: usize) -> DeterministicSupportMask {
        DeterministicSupportMask {
            complement: vec![None; n],
        }
    }

    /// Build from per-record complements; `Some(a_c)` marks membership in S.
    pub fn from_complements(complement: Vec<Option<usize>>) -> DeterministicSupportMask {
        DeterministicSupportMask { complement }
    }

    pub fn len(&self) -> usize {
        self.complement.len()
    }

    pub fn is_empty(&self) -> bool {
        self.complement.is_empty()
    }

    pub fn in_s(&self, i: usize) -> bool {
        self.complement[i].is_some()
    }

    pub fn complement(&self, i: usize) -> Option<usize> {
        self.complement[i]
    }

    pub fn flagged_count(&self) -> usize {
        self.complement.iter().filter(|c| c.is_some()).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.complement.is_empty() {
            0.0
        } else {
            self.flagged_count() as f64 / self.complement.len() as f64
        }
    }

    pub fn subset(&self, indices: &[usize]) -> DeterministicSupportMask {
        DeterministicSupportMask {
            complement: indices.iter().map(|&i| self.complement[i]).collect(),
        }
    }
}

fn check_propensities(props: &[f64], log: &BanditLog) -> Result<(), EstimatorError> {
    if props.len() != log.len() {
        return Err(EstimatorError::LengthMismatch {
            what: "propensities",
            got: props.len(),
            expected: log.len(),
        });
    }
    for (i, &p) in props.iter().enumerate() {
        if !(p > 0.0) || !p.is_finite() {
            return Err(EstimatorError::NonPositivePropensity { index: i, value: p });
        }
    }
    Ok(())
}

fn check_mask(mask: &DeterministicSupportMask, log: &BanditLog) -> Result<(), EstimatorError> {
    if mask.len() != log.len() {
        return Err(EstimatorError::LengthMismatch {
            what: "support mask",
            got: mask.len(),
            expected: log.len(),
        });
    }
    if mask.flagged_count() > 0 && !log.action_space.is_binary() {
        return Err(EstimatorError::NonBinaryActions {
            k: log.num_actions(),
        });
    }
    Ok(())
}

fn record_cost(cost: &CostFunction, log: &BanditLog, i: usize) -> f64 {
    cost.cost(i, log.records[i].human.unwrap_or(0))
}

// ── Importance-weighted policy value (per-instance form) ─────────────────

/// Importance-weighted estimate of the policy value: the per-instance mean of
/// `r_i * pi(a_i|x_i) / p0(a_i|x_i)`.
pub fn ipw_value(
    policy: &SoftmaxModel,
    log: &BanditLog,
    propensities: &[f64],
) -> Result<ObjectiveValue, EstimatorError> {
    check_propensities(propensities, log)?;
    let mut total = 0.0;
    for (rec, &p) in log.records.iter().zip(propensities) {
        let pi = policy.probs(rec.features.as_slice())[rec.action];
        total += pi / p * rec.reward;
    }
    Ok(ObjectiveValue::from_total(total, log.len()))
}

/// Gradient of [`ipw_value`]'s mean with respect to the policy parameters:
/// `(1/N) sum_i grad pi(a_i|x_i) * r_i / p0_i`.
pub fn ipw_grad(
    policy: &SoftmaxModel,
    log: &BanditLog,
    propensities: &[f64],
) -> Result<Vec<f64>, EstimatorError> {
    check_propensities(propensities, log)?;
    let n = log.len() as f64;
    let k = log.num_actions();
    let mut grad = vec![0.0; policy.params().len()];
    let mut coeffs = vec![0.0; k];
    for (rec, &p) in log.records.iter().zip(propensities) {
        coeffs[rec.action] = rec.reward / p;
        policy.accumulate_grad_linear(rec.features.as_slice(), &coeffs, 1.0 / n, &mut grad);
        coeffs[rec.action] = 0.0;
    }
    Ok(grad)
}

// ── Deferral objectives (sum form) ───────────────────────────────────────

// Per-record term of the joint-collaboration objective for a record outside
// the deterministic set. Shared verbatim between the plain and the
// expert-consistency paths so that an empty mask reduces one to the other
// bit for bit.
#[inline]
fn jc_record_term(d: f64, pi: f64, p: f64, r: f64, c: f64) -> (f64, f64, f64) {
    let q = pi / p * r;
    let value = d * (r - c) + (1.0 - d) * q;
    let policy_coeff = (1.0 - d) * (r / p);
    let router_coeff = (r - c) - q;
    (value, policy_coeff, router_coeff)
}

/// Value of the two-stage deferral objective for a frozen policy:
/// `sum_i d(h|x_i)(r_i - C(x_i)) + (1 - d(h|x_i)) * pi(a_i|x_i)/p0_i * r_i`.
pub fn two_stage_value(
    router: &SoftmaxModel,
    frozen_policy: &SoftmaxModel,
    log: &BanditLog,
    propensities: &[f64],
    cost: &CostFunction,
) -> Result<ObjectiveValue, EstimatorError> {
    check_propensities(propensities, log)?;
    let mut total = 0.0;
    for (i, (rec, &p)) in log.records.iter().zip(propensities).enumerate() {
        let x = rec.features.as_slice();
        let d = router.probs(x)[ROUTER_HUMAN];
        let pi = frozen_policy.probs(x)[rec.action];
        let c = record_cost(cost, log, i);
        total += d * (rec.reward - c) + (1.0 - d) * (pi / p * rec.reward);
    }
    Ok(ObjectiveValue::from_total(total, log.len()))
}

/// Joint-collaboration objective and its gradients with respect to both the
/// policy and the router.
///
/// Same functional form as [`two_stage_value`]; here the policy gradient
/// flows through `pi` weighted by `(1 - d)` and the router gradient flows
/// through `d` in both terms.
pub fn joint_value_and_grads(
    policy: &SoftmaxModel,
    router: &SoftmaxModel,
    log: &BanditLog,
    propensities: &[f64],
    cost: &CostFunction,
) -> Result<(ObjectiveValue, Vec<f64>, Vec<f64>), EstimatorError> {
    check_propensities(propensities, log)?;
    let k = log.num_actions();
    let mut total = 0.0;
    let mut grad_policy = vec![0.0; policy.params().len()];
    let mut grad_router = vec![0.0; router.params().len()];
    let mut pol_coeffs = vec![0.0; k];
    let mut rtr_coeffs = vec![0.0; router.output_dim()];
    for (i, (rec, &p)) in log.records.iter().zip(propensities).enumerate() {
        let x = rec.features.as_slice();
        let d = router.probs(x)[ROUTER_HUMAN];
        let pi = policy.probs(x)[rec.action];
        let c = record_cost(cost, log, i);
        let (value, policy_coeff, router_coeff) = jc_record_term(d, pi, p, rec.reward, c);
        total += value;

        pol_coeffs[rec.action] = policy_coeff;
        policy.accumulate_grad_linear(x, &pol_coeffs, 1.0, &mut grad_policy);
        pol_coeffs[rec.action] = 0.0;

        rtr_coeffs[ROUTER_HUMAN] = router_coeff;
        router.accumulate_grad_linear(x, &rtr_coeffs, 1.0, &mut grad_router);
        rtr_coeffs[ROUTER_HUMAN] = 0.0;
    }
    Ok((
        ObjectiveValue::from_total(total, log.len()),
        grad_policy,
        grad_router,
    ))
}

/// Personalized deferral objective over `K` humans plus the algorithm, with
/// gradients for both models.
///
/// Per record: `(r_i - C_{h_i}(x_i)) * d(h_i|x_i)/d0_i
///             + r_i * d(algo|x_i) * pi(a_i|x_i) / (d0_i * p0(a_i|x_i,h_i))`
/// where `d0_i` is the historical assignment probability of the logged human
/// and `p0(..,h_i)` the per-human propensity, both pre-floored.
pub fn personalized_value_and_grads(
    policy: &SoftmaxModel,
    router: &SoftmaxModel,
    log: &BanditLog,
    per_human_propensities: &[f64],
    assignment_probs: &[f64],
    cost: &CostFunction,
) -> Result<(ObjectiveValue, Vec<f64>, Vec<f64>), EstimatorError> {
    check_propensities(per_human_propensities, log)?;
    if assignment_probs.len() != log.len() {
        return Err(EstimatorError::LengthMismatch {
            what: "assignment probabilities",
            got: assignment_probs.len(),
            expected: log.len(),
        });
    }
    for (i, &g) in assignment_probs.iter().enumerate() {
        if !(g > 0.0) || !g.is_finite() {
            return Err(EstimatorError::NonPositivePropensity { index: i, value: g });
        }
    }
    let algo_index = router.output_dim() - 1;
    let k = log.num_actions();
    let mut total = 0.0;
    let mut grad_policy = vec![0.0; policy.params().len()];
    let mut grad_router = vec![0.0; router.params().len()];
    let mut pol_coeffs = vec![0.0; k];
    let mut rtr_coeffs = vec![0.0; router.output_dim()];
    for (i, rec) in log.records.iter().enumerate() {
        let h = rec.human.ok_or(EstimatorError::MissingHumanId { index: i })?;
        let x = rec.features.as_slice();
        let rtr = router.probs(x);
        let g = rtr[h];
        let b = rtr[algo_index];
        let d0 = assignment_probs[i];
        let p0h = per_human_propensities[i];
        let pi = policy.probs(x)[rec.action];
        let c = cost.cost(i, h);
        let human_weight = (rec.reward - c) / d0;
        let algo_weight = rec.reward * pi / (d0 * p0h);
        total += human_weight * g + algo_weight * b;

        pol_coeffs[rec.action] = rec.reward * b / (d0 * p0h);
        policy.accumulate_grad_linear(x, &pol_coeffs, 1.0, &mut grad_policy);
        pol_coeffs[rec.action] = 0.0;

        rtr_coeffs[h] = human_weight;
        rtr_coeffs[algo_index] = rec.reward * pi / (d0 * p0h);
        router.accumulate_grad_linear(x, &rtr_coeffs, 1.0, &mut grad_router);
        rtr_coeffs[h] = 0.0;
        rtr_coeffs[algo_index] = 0.0;
    }
    Ok((
        ObjectiveValue::from_total(total, log.len()),
        grad_policy,
        grad_router,
    ))
}

// ── Expert-consistency objectives ────────────────────────────────────────

/// Expert-consistency imputed policy value (per-instance form): records in
/// the deterministic set contribute `pi(a_i|x)r_i + pi(a_c|x)r_s`, all others
/// the plain importance-weighted term.
pub fn ec_ipw_value(
    policy: &SoftmaxModel,
    log: &BanditLog,
    propensities: &[f64],
    mask: &DeterministicSupportMask,
    r_subopt: f64,
) -> Result<ObjectiveValue, EstimatorError> {
    check_propensities(propensities, log)?;
    check_mask(mask, log)?;
    let mut total = 0.0;
    for (i, (rec, &p)) in log.records.iter().zip(propensities).enumerate() {
        let probs = policy.probs(rec.features.as_slice());
        total += match mask.complement(i) {
            Some(a_c) => probs[rec.action] * rec.reward + probs[a_c] * r_subopt,
            None => probs[rec.action] / p * rec.reward,
        };
    }
    Ok(ObjectiveValue::from_total(total, log.len()))
}

/// Gradient of [`ec_ipw_value`]'s mean with respect to the policy parameters.
pub fn ec_ipw_grad(
    policy: &SoftmaxModel,
    log: &BanditLog,
    propensities: &[f64],
    mask: &DeterministicSupportMask,
    r_subopt: f64,
) -> Result<Vec<f64>, EstimatorError> {
    check_propensities(propensities, log)?;
    check_mask(mask, log)?;
    let n = log.len() as f64;
    let k = log.num_actions();
    let mut grad = vec![0.0; policy.params().len()];
    let mut coeffs = vec![0.0; k];
    for (i, (rec, &p)) in log.records.iter().zip(propensities).enumerate() {
        match mask.complement(i) {
            Some(a_c) => {
                coeffs[rec.action] = rec.reward;
                coeffs[a_c] += r_subopt;
                policy.accumulate_grad_linear(rec.features.as_slice(), &coeffs, 1.0 / n, &mut grad);
                coeffs[rec.action] = 0.0;
                coeffs[a_c] = 0.0;
            }
            None => {
                coeffs[rec.action] = rec.reward / p;
                policy.accumulate_grad_linear(rec.features.as_slice(), &coeffs, 1.0 / n, &mut grad);
                coeffs[rec.action] = 0.0;
            }
        }
    }
    Ok(grad)
}

/// Expert-consistency deferral objective (sum form) with gradients for both
/// models. Reduces exactly to [`joint_value_and_grads`] when the mask is
/// empty.
pub fn ec_joint_value_and_grads(
    policy: &SoftmaxModel,
    router: &SoftmaxModel,
    log: &BanditLog,
    propensities: &[f64],
    mask: &DeterministicSupportMask,
    r_subopt: f64,
    cost: &CostFunction,
) -> Result<(ObjectiveValue, Vec<f64>, Vec<f64>), EstimatorError> {
    check_propensities(propensities, log)?;
    check_mask(mask, log)?;
    let k = log.num_actions();
    let mut total = 0.0;
    let mut grad_policy = vec![0.0; policy.params().len()];
    let mut grad_router = vec![0.0; router.params().len()];
    let mut pol_coeffs = vec![0.0; k];
    let mut rtr_coeffs = vec![0.0; router.output_dim()];
    for (i, (rec, &p)) in log.records.iter().zip(propensities).enumerate() {
        let x = rec.features.as_slice();
        let probs = policy.probs(x);
        let d = router.probs(x)[ROUTER_HUMAN];
        let c = record_cost(cost, log, i);
        match mask.complement(i) {
            Some(a_c) => {
                let imputed = probs[rec.action] * rec.reward + probs[a_c] * r_subopt;
                total += d * (rec.reward - c) + imputed * (1.0 - d);

                pol_coeffs[rec.action] = (1.0 - d) * rec.reward;
                pol_coeffs[a_c] += (1.0 - d) * r_subopt;
                policy.accumulate_grad_linear(x, &pol_coeffs, 1.0, &mut grad_policy);
                pol_coeffs[rec.action] = 0.0;
                pol_coeffs[a_c] = 0.0;

                rtr_coeffs[ROUTER_HUMAN] = (rec.reward - c) - imputed;
                router.accumulate_grad_linear(x, &rtr_coeffs, 1.0, &mut grad_router);
                rtr_coeffs[ROUTER_HUMAN] = 0.0;
            }
            None => {
                let (value, policy_coeff, router_coeff) =
                    jc_record_term(d, probs[rec.action], p, rec.reward, c);
                total += value;

                pol_coeffs[rec.action] = policy_coeff;
                policy.accumulate_grad_linear(x, &pol_coeffs, 1.0, &mut grad_policy);
                pol_coeffs[rec.action] = 0.0;

                rtr_coeffs[ROUTER_HUMAN] = router_coeff;
                router.accumulate_grad_linear(x, &rtr_coeffs, 1.0, &mut grad_router);
                rtr_coeffs[ROUTER_HUMAN] = 0.0;
            }
        }
    }
    Ok((
        ObjectiveValue::from_total(total, log.len()),
        grad_policy,
        grad_router,
    ))
}

// ── Closed-form bias oracles ─────────────────────────────────────────────

/// Asymptotic bias of the plain importance-weighted estimator under
/// zero-support (deterministic) logging:
/// `E_x[ -sum_{a: pi0(a|x) = 0} pi(a|x) r(x,a) ]`,
/// taken as an empirical mean over the supplied instances. The logging
/// probabilities must be exact; zero support means literal `0.0`.
pub fn deterministic_bias_oracle(
    policy: &dyn PolicyProbs,
    features: &[Vec<f64>],
    counterfactuals: &CounterfactualTable,
    logging_probs: &[Vec<f64>],
) -> f64 {
    let n = features.len();
    let mut acc = 0.0;
    for i in 0..n {
        let pi = policy.action_probs(&features[i]);
        for (a, &p0) in logging_probs[i].iter().enumerate() {
            if p0 == 0.0 {
                acc -= pi[a] * counterfactuals.reward(i, a);
            }
        }
    }
    acc / n as f64
}

/// Asymptotic bias of the expert-consistency imputed estimator when humans
/// act suboptimally on a biased subset `B` of the deterministic set:
/// `delta' = (r_s - r_o) E_{x, a ~ h(a|x)}[ pi(a_c|x) 1(x in B) ]`,
/// together with the average human regret
/// `delta = (r_s - r_o) E_x[ 1(x in B) ]`. By construction
/// `|delta'| <= |delta|`.
pub fn imputation_bias_oracle(
    policy: &dyn PolicyProbs,
    features: &[Vec<f64>],
    human_probs: &[Vec<f64>],
    mask: &DeterministicSupportMask,
    in_b: &[bool],
    r_subopt: f64,
    r_opt: f64,
) -> Result<(f64, f64), EstimatorError> {
    let n = features.len();
    for (i, &b) in in_b.iter().enumerate() {
        if b && !mask.in_s(i) {
            return Err(EstimatorError::BiasOutsideSupport { index: i });
        }
    }
    let gap = r_subopt - r_opt;
    let mut acc = 0.0;
    let mut b_mass = 0.0;
    for i in 0..n {
        if !in_b[i] {
            continue;
        }
        b_mass += 1.0;
        let pi = policy.action_probs(&features[i]);
        // E over the human's action of pi(complement | x); binary actions.
        for (a, &h) in human_probs[i].iter().enumerate() {
            acc += h * pi[1 - a];
        }
    }
    let delta_prime = gap * acc / n as f64;
    let delta = gap * b_mass / n as f64;
    debug_assert!(delta_prime.abs() <= delta.abs() + 1e-12);
    Ok((delta_prime, delta))
}
