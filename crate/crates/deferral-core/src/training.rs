//! Training orchestration: gradient-ascent drivers for every method variant
//! and assembly of the deployable [`DeferralSystem`].
//!
//! Methods:
//!
//! * `ao` — policy only, importance-weighted objective.
//! * `ts` — two stages: the `ao` policy, then a router trained with the
//!   policy frozen.
//! * `jc` — policy and router ascend jointly, one update per step from one
//!   pass.
//! * `jcp` — personalized: the router ranges over `K` humans plus the
//!   algorithm.
//! * `ao-ec` / `ts-ec` / `jc-ec` — expert-consistency counterparts that
//!   impute the unseen complement of deterministic actions.
//!
//! All training is full-batch by default with Adam and early stopping on the
//! per-instance mean objective; a minibatch mode is available. With an empty
//! deterministic-support mask, each `-ec` variant reproduces its plain
//! counterpart bit for bit, epoch for epoch.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BanditLog, CostFunction};
use crate::estimators::{
    ec_ipw_grad, ec_ipw_value, ec_joint_value_and_grads, ipw_grad, ipw_value,
    joint_value_and_grads, personalized_value_and_grads, DeterministicSupportMask, EstimatorError,
    ROUTER_HUMAN,
};
use crate::models::{
    Activation, AdamParams, AdamState, Architecture, ModelError, SoftmaxModel,
};
use crate::ood::{OodDetector, OodError};
use crate::propensity::{PropensityError, PropensityModel};
use crate::rng::Seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Propensity(#[from] PropensityError),
    #[error(transparent)]
    Ood(#[from] OodError),
    #[error("method {method} requires {what}")]
    MissingInput {
        method: &'static str,
        what: &'static str,
    },
    #[error("expert-consistency training requires a binary action space, got {k}")]
    NonBinaryActions { k: usize },
    #[error("bundle io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed bundle: {0}")]
    Parse(String),
}

/// Training method tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ao,
    Ts,
    Jc,
    Jcp,
    AoEc,
    TsEc,
    JcEc,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ao => "ao",
            Method::Ts => "ts",
            Method::Jc => "jc",
            Method::Jcp => "jcp",
            Method::AoEc => "ao-ec",
            Method::TsEc => "ts-ec",
            Method::JcEc => "jc-ec",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Some(match s {
            "ao" => Method::Ao,
            "ts" => Method::Ts,
            "jc" => Method::Jc,
            "jcp" => Method::Jcp,
            "ao-ec" => Method::AoEc,
            "ts-ec" => Method::TsEc,
            "jc-ec" => Method::JcEc,
            _ => return None,
        })
    }

    pub fn is_ec(&self) -> bool {
        matches!(self, Method::AoEc | Method::TsEc | Method::JcEc)
    }
}

/// Model shape requested by configuration: linear, or an mlp with two hidden
/// layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub hidden: Option<(usize, usize)>,
    pub activation: Activation,
}

impl ArchSpec {
    pub fn mlp(h1: usize, h2: usize) -> ArchSpec {
        ArchSpec {
            hidden: Some((h1, h2)),
            activation: Activation::Tanh,
        }
    }

    pub fn linear() -> ArchSpec {
        ArchSpec {
            hidden: None,
            activation: Activation::Tanh,
        }
    }

    pub fn to_architecture(&self, input: usize, output: usize) -> Architecture {
        match self.hidden {
            None => Architecture::Linear { input, output },
            Some(hidden) => Architecture::Mlp {
                input,
                hidden,
                output,
                activation: self.activation,
            },
        }
    }
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec::mlp(16, 16)
    }
}

/// Expert-consistency settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcConfig {
    /// Propensity threshold flagging a logged action as deterministic.
    pub tau_det: f64,
    /// Imputed reward of the unseen complementary action.
    pub r_subopt: f64,
    /// Reward of an optimal action (the bias oracles need the gap).
    pub r_opt: f64,
    /// Use the generator's oracle mask instead of the detected one.
    pub use_oracle_mask: bool,
}

impl Default for EcConfig {
    fn default() -> Self {
        EcConfig {
            tau_det: crate::propensity::DEFAULT_TAU_DET,
            r_subopt: 0.0,
            r_opt: 1.0,
            use_oracle_mask: false,
        }
    }
}

/// Full- or minibatch gradient steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchMode {
    Full,
    Minibatch(usize),
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    pub policy_arch: ArchSpec,
    pub router_arch: ArchSpec,
    pub adam: AdamParams,
    pub max_epochs: usize,
    pub patience: usize,
    pub tolerance: f64,
    pub batch: BatchMode,
    pub cost: CostFunction,
    pub ec: EcConfig,
    pub seed: Seed,
}

impl TrainConfig {
    pub fn new(method: Method, seed: Seed) -> TrainConfig {
        TrainConfig {
            method,
            policy_arch: ArchSpec::default(),
            router_arch: ArchSpec::default(),
            adam: AdamParams::default(),
            max_epochs: 500,
            patience: 20,
            tolerance: 1e-6,
            batch: BatchMode::Full,
            cost: CostFunction::zero(),
            ec: EcConfig::default(),
            seed,
        }
    }
}

/// Hex fingerprint of a configuration, recorded in bundle manifests.
pub fn config_fingerprint(config: &TrainConfig) -> String {
    let repr = format!("{config:?}");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in repr.as_bytes() {
        h = (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Optimizer trace of one trained model.
#[derive(Debug, Clone)]
pub struct TrainStats {
    pub epochs_run: usize,
    /// Per-instance mean objective at the start of each epoch.
    pub objective_trace: Vec<f64>,
}

/// Output of a training run.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub policy: SoftmaxModel,
    pub router: Option<SoftmaxModel>,
    pub policy_stats: TrainStats,
    pub router_stats: Option<TrainStats>,
}

// Epoch driver: repeatedly evaluate (mean objective, gradients), update the
// requested models, stop early when the objective stalls.
//
// `eval` returns the mean-form objective along with gradients for the policy
// and (optionally) the router; gradient scale does not matter to Adam.
fn ascend<F>(
    policy: &mut SoftmaxModel,
    router: Option<&mut SoftmaxModel>,
    update_policy: bool,
    config: &TrainConfig,
    mut eval: F,
) -> Result<TrainStats, TrainError>
where
    F: FnMut(&SoftmaxModel, Option<&SoftmaxModel>) -> Result<(f64, Vec<f64>, Option<Vec<f64>>), TrainError>,
{
    let mut adam_policy = AdamState::new(policy.params().len(), config.adam);
    let mut router = router;
    let mut adam_router = router
        .as_ref()
        .map(|r| AdamState::new(r.params().len(), config.adam));
    let mut best = f64::NEG_INFINITY;
    let mut stall = 0usize;
    let mut trace = Vec::with_capacity(config.max_epochs);
    let mut epochs_run = 0usize;
    for _ in 0..config.max_epochs {
        let (value, grad_policy, grad_router) = eval(policy, router.as_deref())?;
        trace.push(value);
        epochs_run += 1;
        if update_policy {
            adam_policy.step(policy.params_mut(), &grad_policy)?;
        }
        if let (Some(r), Some(adam), Some(g)) =
            (router.as_deref_mut(), adam_router.as_mut(), grad_router.as_ref())
        {
            adam.step(r.params_mut(), g)?;
        }
        if value > best + config.tolerance {
            best = value;
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.patience {
                break;
            }
        }
    }
    Ok(TrainStats {
        epochs_run,
        objective_trace: trace,
    })
}

// Shuffled minibatch index schedule for one epoch.
fn epoch_batches(n: usize, size: usize, seed: Seed, epoch: usize) -> Vec<Vec<usize>> {
    use rand::Rng;
    let size = size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed.derive_index("minibatch", epoch as u64).rng();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn subset_f64(values: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| values[i]).collect()
}

// Minibatch epoch driver: several Adam steps per epoch on shuffled batches,
// early stopping on the full objective evaluated once per epoch.
//
// `batch_eval` sees (policy, router, batch log, batch indices) and returns
// gradients on the batch; `full_value` reports the per-instance objective on
// the whole log for the stopping rule.
#[allow(clippy::too_many_arguments)]
fn ascend_minibatch<FB, FV>(
    policy: &mut SoftmaxModel,
    router: Option<&mut SoftmaxModel>,
    update_policy: bool,
    log: &BanditLog,
    batch_size: usize,
    config: &TrainConfig,
    mut batch_eval: FB,
    mut full_value: FV,
) -> Result<TrainStats, TrainError>
where
    FB: FnMut(
        &SoftmaxModel,
        Option<&SoftmaxModel>,
        &BanditLog,
        &[usize],
    ) -> Result<(Vec<f64>, Option<Vec<f64>>), TrainError>,
    FV: FnMut(&SoftmaxModel, Option<&SoftmaxModel>) -> Result<f64, TrainError>,
{
    let mut adam_policy = AdamState::new(policy.params().len(), config.adam);
    let mut router = router;
    let mut adam_router = router
        .as_ref()
        .map(|r| AdamState::new(r.params().len(), config.adam));
    let mut best = f64::NEG_INFINITY;
    let mut stall = 0usize;
    let mut trace = Vec::with_capacity(config.max_epochs);
    let mut epochs_run = 0usize;
    for epoch in 0..config.max_epochs {
        let value = full_value(policy, router.as_deref())?;
        trace.push(value);
        epochs_run += 1;
        for idx in epoch_batches(log.len(), batch_size, config.seed, epoch) {
            let batch = log.subset(&idx);
            let (grad_policy, grad_router) =
                batch_eval(policy, router.as_deref(), &batch, &idx)?;
            if update_policy {
                adam_policy.step(policy.params_mut(), &grad_policy)?;
            }
            if let (Some(r), Some(adam), Some(g)) = (
                router.as_deref_mut(),
                adam_router.as_mut(),
                grad_router.as_ref(),
            ) {
                adam.step(r.params_mut(), g)?;
            }
        }
        if value > best + config.tolerance {
            best = value;
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.patience {
                break;
            }
        }
    }
    Ok(TrainStats {
        epochs_run,
        objective_trace: trace,
    })
}

/// Train the policy alone on the importance-weighted objective.
pub fn train_ao(
    log: &BanditLog,
    propensities: &[f64],
    config: &TrainConfig,
) -> Result<TrainedModels, TrainError> {
    let arch = config
        .policy_arch
        .to_architecture(log.dim, log.num_actions());
    let mut policy = SoftmaxModel::init(arch, config.seed.derive("policy-init"));
    let stats = match config.batch {
        BatchMode::Full => ascend(&mut policy, None, true, config, |p, _| {
            let value = ipw_value(p, log, propensities)?;
            let grad = ipw_grad(p, log, propensities)?;
            Ok((value.mean, grad, None))
        })?,
        BatchMode::Minibatch(size) => ascend_minibatch(
            &mut policy,
            None,
            true,
            log,
            size,
            config,
            |p, _, batch, idx| {
                let g = ipw_grad(p, batch, &subset_f64(propensities, idx))?;
                Ok((g, None))
            },
            |p, _| Ok(ipw_value(p, log, propensities)?.mean),
        )?,
    };
    Ok(TrainedModels {
        policy,
        router: None,
        policy_stats: stats,
        router_stats: None,
    })
}

/// Stage one trains the policy as in [`train_ao`]; stage two trains the
/// router on the deferral objective with the policy frozen.
pub fn train_two_stage(
    log: &BanditLog,
    propensities: &[f64],
    config: &TrainConfig,
) -> Result<TrainedModels, TrainError> {
    let stage1 = train_ao(log, propensities, config)?;
    let policy = stage1.policy;
    let arch = config.router_arch.to_architecture(log.dim, 2);
    let mut router = SoftmaxModel::init(arch, config.seed.derive("router-init"));
    let mut placeholder = SoftmaxModel::zeros(Architecture::Linear { input: 1, output: 2 });
    let stats = match config.batch {
        BatchMode::Full => ascend(&mut placeholder, Some(&mut router), false, config, |_, r| {
            let r = r.expect("router present");
            let (value, _, grad_router) =
                joint_value_and_grads(&policy, r, log, propensities, &config.cost)?;
            Ok((value.mean, Vec::new(), Some(grad_router)))
        })?,
        BatchMode::Minibatch(size) => ascend_minibatch(
            &mut placeholder,
            Some(&mut router),
            false,
            log,
            size,
            config,
            |_, r, batch, idx| {
                let r = r.expect("router present");
                let (_, _, gr) = joint_value_and_grads(
                    &policy,
                    r,
                    batch,
                    &subset_f64(propensities, idx),
                    &config.cost,
                )?;
                Ok((Vec::new(), Some(gr)))
            },
            |_, r| {
                let r = r.expect("router present");
                Ok(two_stage_value_mean(&policy, r, log, propensities, &config.cost)?)
            },
        )?,
    };
    Ok(TrainedModels {
        policy,
        router: Some(router),
        policy_stats: stage1.policy_stats,
        router_stats: Some(stats),
    })
}

fn two_stage_value_mean(
    policy: &SoftmaxModel,
    router: &SoftmaxModel,
    log: &BanditLog,
    propensities: &[f64],
    cost: &CostFunction,
) -> Result<f64, TrainError> {
    Ok(crate::estimators::two_stage_value(router, policy, log, propensities, cost)?.mean)
}

/// Joint ascent of policy and router on the deferral objective; both
/// parameter sets update each step from one pass.
pub fn train_joint(
    log: &BanditLog,
    propensities: &[f64],
    config: &TrainConfig,
) -> Result<TrainedModels, TrainError> {
    let policy_arch = config
        .policy_arch
        .to_architecture(log.dim, log.num_actions());
    let router_arch = config.router_arch.to_architecture(log.dim, 2);
    let mut policy = SoftmaxModel::init(policy_arch, config.seed.derive("policy-init"));
    let mut router = SoftmaxModel::init(router_arch, config.seed.derive("router-init"));
    let stats = match config.batch {
        BatchMode::Full => ascend(&mut policy, Some(&mut router), true, config, |p, r| {
            let r = r.expect("router present");
            let (value, gp, gr) = joint_value_and_grads(p, r, log, propensities, &config.cost)?;
            Ok((value.mean, gp, Some(gr)))
        })?,
        BatchMode::Minibatch(size) => ascend_minibatch(
            &mut policy,
            Some(&mut router),
            true,
            log,
            size,
            config,
            |p, r, batch, idx| {
                let r = r.expect("router present");
                let (_, gp, gr) = joint_value_and_grads(
                    p,
                    r,
                    batch,
                    &subset_f64(propensities, idx),
                    &config.cost,
                )?;
                Ok((gp, Some(gr)))
            },
            |p, r| two_stage_value_mean(p, r.expect("router present"), log, propensities, &config.cost),
        )?,
    };
    Ok(TrainedModels {
        policy,
        router: Some(router),
        policy_stats: stats.clone(),
        router_stats: Some(stats),
    })
}

/// Joint ascent of the personalized objective: the router ranges over `K`
/// humans plus the algorithm (last output).
pub fn train_joint_personalized(
    log: &BanditLog,
    per_human_propensities: &[f64],
    assignment_probs: &[f64],
    config: &TrainConfig,
) -> Result<TrainedModels, TrainError> {
    let policy_arch = config
        .policy_arch
        .to_architecture(log.dim, log.num_actions());
    let router_arch = config
        .router_arch
        .to_architecture(log.dim, log.num_humans + 1);
    let mut policy = SoftmaxModel::init(policy_arch, config.seed.derive("policy-init"));
    let mut router = SoftmaxModel::init(router_arch, config.seed.derive("router-init"));
    let stats = match config.batch {
        BatchMode::Full => ascend(&mut policy, Some(&mut router), true, config, |p, r| {
            let r = r.expect("router present");
            let (value, gp, gr) = personalized_value_and_grads(
                p,
                r,
                log,
                per_human_propensities,
                assignment_probs,
                &config.cost,
            )?;
            Ok((value.mean, gp, Some(gr)))
        })?,
        BatchMode::Minibatch(size) => ascend_minibatch(
            &mut policy,
            Some(&mut router),
            true,
            log,
            size,
            config,
            |p, r, batch, idx| {
                let r = r.expect("router present");
                let (_, gp, gr) = personalized_value_and_grads(
                    p,
                    r,
                    batch,
                    &subset_f64(per_human_propensities, idx),
                    &subset_f64(assignment_probs, idx),
                    &config.cost,
                )?;
                Ok((gp, Some(gr)))
            },
            |p, r| {
                let r = r.expect("router present");
                Ok(personalized_value_and_grads(
                    p,
                    r,
                    log,
                    per_human_propensities,
                    assignment_probs,
                    &config.cost,
                )?
                .0
                .mean)
            },
        )?,
    };
    Ok(TrainedModels {
        policy,
        router: Some(router),
        policy_stats: stats.clone(),
        router_stats: Some(stats),
    })
}

/// Train an expert-consistency variant (`ao-ec`, `ts-ec`, `jc-ec`) with the
/// given deterministic-support mask.
pub fn train_ec_variant(
    log: &BanditLog,
    propensities: &[f64],
    mask: &DeterministicSupportMask,
    config: &TrainConfig,
) -> Result<TrainedModels, TrainError> {
    if !log.action_space.is_binary() {
        return Err(TrainError::NonBinaryActions {
            k: log.num_actions(),
        });
    }
    let r_s = config.ec.r_subopt;
    let train_ec_policy = |config: &TrainConfig| -> Result<(SoftmaxModel, TrainStats), TrainError> {
        let arch = config
            .policy_arch
            .to_architecture(log.dim, log.num_actions());
        let mut policy = SoftmaxModel::init(arch, config.seed.derive("policy-init"));
        let stats = match config.batch {
            BatchMode::Full => ascend(&mut policy, None, true, config, |p, _| {
                let value = ec_ipw_value(p, log, propensities, mask, r_s)?;
                let grad = ec_ipw_grad(p, log, propensities, mask, r_s)?;
                Ok((value.mean, grad, None))
            })?,
            BatchMode::Minibatch(size) => ascend_minibatch(
                &mut policy,
                None,
                true,
                log,
                size,
                config,
                |p, _, batch, idx| {
                    let g = ec_ipw_grad(
                        p,
                        batch,
                        &subset_f64(propensities, idx),
                        &mask.subset(idx),
                        r_s,
                    )?;
                    Ok((g, None))
                },
                |p, _| Ok(ec_ipw_value(p, log, propensities, mask, r_s)?.mean),
            )?,
        };
        Ok((policy, stats))
    };
    match config.method {
        Method::AoEc => {
            let (policy, stats) = train_ec_policy(config)?;
            Ok(TrainedModels {
                policy,
                router: None,
                policy_stats: stats,
                router_stats: None,
            })
        }
        Method::TsEc => {
            // Stage 1: policy on the imputed objective; stage 2: router on
            // the imputed deferral objective with the policy frozen.
            let (policy, s1) = train_ec_policy(config)?;
            let router_arch = config.router_arch.to_architecture(log.dim, 2);
            let mut router = SoftmaxModel::init(router_arch, config.seed.derive("router-init"));
            let mut placeholder =
                SoftmaxModel::zeros(Architecture::Linear { input: 1, output: 2 });
            let s2 = match config.batch {
                BatchMode::Full => {
                    ascend(&mut placeholder, Some(&mut router), false, config, |_, r| {
                        let r = r.expect("router present");
                        let (value, _, gr) = ec_joint_value_and_grads(
                            &policy,
                            r,
                            log,
                            propensities,
                            mask,
                            r_s,
                            &config.cost,
                        )?;
                        Ok((value.mean, Vec::new(), Some(gr)))
                    })?
                }
                BatchMode::Minibatch(size) => ascend_minibatch(
                    &mut placeholder,
                    Some(&mut router),
                    false,
                    log,
                    size,
                    config,
                    |_, r, batch, idx| {
                        let r = r.expect("router present");
                        let (_, _, gr) = ec_joint_value_and_grads(
                            &policy,
                            r,
                            batch,
                            &subset_f64(propensities, idx),
                            &mask.subset(idx),
                            r_s,
                            &config.cost,
                        )?;
                        Ok((Vec::new(), Some(gr)))
                    },
                    |_, r| {
                        let r = r.expect("router present");
                        Ok(ec_joint_value_and_grads(
                            &policy,
                            r,
                            log,
                            propensities,
                            mask,
                            r_s,
                            &config.cost,
                        )?
                        .0
                        .mean)
                    },
                )?,
            };
            Ok(TrainedModels {
                policy,
                router: Some(router),
                policy_stats: s1,
                router_stats: Some(s2),
            })
        }
        Method::JcEc => {
            let policy_arch = config
                .policy_arch
                .to_architecture(log.dim, log.num_actions());
            let router_arch = config.router_arch.to_architecture(log.dim, 2);
            let mut policy = SoftmaxModel::init(policy_arch, config.seed.derive("policy-init"));
            let mut router = SoftmaxModel::init(router_arch, config.seed.derive("router-init"));
            let stats = match config.batch {
                BatchMode::Full => {
                    ascend(&mut policy, Some(&mut router), true, config, |p, r| {
                        let r = r.expect("router present");
                        let (value, gp, gr) = ec_joint_value_and_grads(
                            p,
                            r,
                            log,
                            propensities,
                            mask,
                            r_s,
                            &config.cost,
                        )?;
                        Ok((value.mean, gp, Some(gr)))
                    })?
                }
                BatchMode::Minibatch(size) => ascend_minibatch(
                    &mut policy,
                    Some(&mut router),
                    true,
                    log,
                    size,
                    config,
                    |p, r, batch, idx| {
                        let r = r.expect("router present");
                        let (_, gp, gr) = ec_joint_value_and_grads(
                            p,
                            r,
                            batch,
                            &subset_f64(propensities, idx),
                            &mask.subset(idx),
                            r_s,
                            &config.cost,
                        )?;
                        Ok((gp, Some(gr)))
                    },
                    |p, r| {
                        let r = r.expect("router present");
                        Ok(
                            ec_joint_value_and_grads(p, r, log, propensities, mask, r_s, &config.cost)?
                                .0
                                .mean,
                        )
                    },
                )?,
            };
            Ok(TrainedModels {
                policy,
                router: Some(router),
                policy_stats: stats.clone(),
                router_stats: Some(stats),
            })
        }
        _ => Err(TrainError::MissingInput {
            method: config.method.as_str(),
            what: "an expert-consistency method tag",
        }),
    }
}

// ── Deployable system ────────────────────────────────────────────────────

/// Routing component of a deployed system.
#[derive(Debug, Clone)]
pub enum Router {
    /// Never defer (algorithm-only).
    Algorithm,
    /// Always defer (human-only baseline).
    Human,
    /// Defer when the deferral probability strictly exceeds one half.
    Binary(SoftmaxModel),
    /// Defer to the best human unless the algorithm output wins the argmax.
    PerHuman {
        model: SoftmaxModel,
        num_humans: usize,
    },
}

/// Whom a deferred instance goes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HumanChoice {
    /// Any available human (uniform assignment downstream).
    Any,
    Specific(usize),
}

/// A routing decision for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Algorithm(usize),
    Human(HumanChoice),
}

/// A trained bundle: policy, router, the propensity model it was trained
/// with, cost, and an optional out-of-distribution gate.
#[derive(Debug, Clone)]
pub struct DeferralSystem {
    pub policy: SoftmaxModel,
    pub router: Router,
    pub propensity: Option<(PropensityModel, f64)>,
    pub cost: CostFunction,
    pub ood: Option<OodDetector>,
    pub method_tag: String,
    pub seed: Seed,
    pub config_hash: String,
    pub num_humans: usize,
}

fn argmax_strict(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl DeferralSystem {
    pub fn new(policy: SoftmaxModel, router: Router, cost: CostFunction) -> DeferralSystem {
        let num_humans = match &router {
            Router::PerHuman { num_humans, .. } => *num_humans,
            _ => 1,
        };
        DeferralSystem {
            policy,
            router,
            propensity: None,
            cost,
            ood: None,
            method_tag: "custom".to_string(),
            seed: Seed(0),
            config_hash: String::new(),
            num_humans,
        }
    }

    pub fn with_ood(mut self, detector: OodDetector) -> DeferralSystem {
        self.ood = Some(detector);
        self
    }

    pub fn with_propensity(mut self, model: PropensityModel, floor: f64) -> DeferralSystem {
        self.propensity = Some((model, floor));
        self
    }

    pub fn with_tag(mut self, tag: &str, seed: Seed, config_hash: String) -> DeferralSystem {
        self.method_tag = tag.to_string();
        self.seed = seed;
        self.config_hash = config_hash;
        self
    }

    /// Deterministic test-time rule: the out-of-distribution gate first (when
    /// present), then the router (strict 0.5 threshold for the binary case,
    /// argmax comparison for the personalized case), then the policy argmax
    /// with smallest-index tie-break.
    pub fn decide(&self, x: &[f64]) -> Decision {
        if let Some(gate) = &self.ood {
            if gate.flag(x) {
                return Decision::Human(self.human_choice(x));
            }
        }
        match &self.router {
            Router::Algorithm => Decision::Algorithm(argmax_strict(&self.policy.probs(x))),
            Router::Human => Decision::Human(self.human_choice(x)),
            Router::Binary(m) => {
                if m.probs(x)[ROUTER_HUMAN] > 0.5 {
                    Decision::Human(HumanChoice::Any)
                } else {
                    Decision::Algorithm(argmax_strict(&self.policy.probs(x)))
                }
            }
            Router::PerHuman { model, num_humans } => {
                let probs = model.probs(x);
                let best_h = argmax_strict(&probs[..*num_humans]);
                if probs[*num_humans] > probs[best_h] {
                    Decision::Algorithm(argmax_strict(&self.policy.probs(x)))
                } else {
                    Decision::Human(HumanChoice::Specific(best_h))
                }
            }
        }
    }

    // Which human receives a gate-deferred instance.
    fn human_choice(&self, x: &[f64]) -> HumanChoice {
        match &self.router {
            Router::PerHuman { model, num_humans } => {
                let probs = model.probs(x);
                HumanChoice::Specific(argmax_strict(&probs[..*num_humans]))
            }
            _ => HumanChoice::Any,
        }
    }

    // ── Bundle persistence ───────────────────────────────────────────────

    pub fn save_bundle(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            method: self.method_tag.clone(),
            seed: self.seed.0,
            config_hash: self.config_hash.clone(),
            num_humans: self.num_humans,
            router: match &self.router {
                Router::Algorithm => "algorithm",
                Router::Human => "human",
                Router::Binary(_) => "binary",
                Router::PerHuman { .. } => "per-human",
            }
            .to_string(),
            ood_active: self.ood.is_some(),
            propensity_floor: self.propensity.as_ref().map(|(_, f)| *f),
            cost: self.cost.clone(),
        };
        let manifest_text =
            toml::to_string_pretty(&manifest).map_err(|e| TrainError::Parse(e.to_string()))?;
        std::fs::write(dir.join("manifest.toml"), manifest_text)?;
        std::fs::write(dir.join("policy.model"), self.policy.to_text())?;
        match &self.router {
            Router::Binary(m) | Router::PerHuman { model: m, .. } => {
                std::fs::write(dir.join("router.model"), m.to_text())?;
            }
            _ => {}
        }
        if let Some((model, _)) = &self.propensity {
            std::fs::write(dir.join("propensity.model"), model.to_text())?;
        }
        if let Some(detector) = &self.ood {
            std::fs::write(dir.join("ood.detector"), detector.to_text())?;
        }
        Ok(())
    }

    pub fn load_bundle(dir: &Path) -> Result<DeferralSystem, TrainError> {
        let manifest_text = std::fs::read_to_string(dir.join("manifest.toml"))?;
        let manifest: Manifest =
            toml::from_str(&manifest_text).map_err(|e| TrainError::Parse(e.to_string()))?;
        let policy = SoftmaxModel::from_text(&std::fs::read_to_string(dir.join("policy.model"))?)?;
        let router = match manifest.router.as_str() {
            "algorithm" => Router::Algorithm,
            "human" => Router::Human,
            "binary" => Router::Binary(SoftmaxModel::from_text(&std::fs::read_to_string(
                dir.join("router.model"),
            )?)?),
            "per-human" => Router::PerHuman {
                model: SoftmaxModel::from_text(&std::fs::read_to_string(
                    dir.join("router.model"),
                )?)?,
                num_humans: manifest.num_humans,
            },
            other => return Err(TrainError::Parse(format!("unknown router kind: {other}"))),
        };
        let propensity = match manifest.propensity_floor {
            Some(floor) => {
                let text = std::fs::read_to_string(dir.join("propensity.model"))?;
                Some((PropensityModel::from_text(&text)?, floor))
            }
            None => None,
        };
        let ood = if manifest.ood_active {
            let text = std::fs::read_to_string(dir.join("ood.detector"))?;
            Some(OodDetector::from_text(&text).map_err(|e| TrainError::Parse(e.to_string()))?)
        } else {
            None
        };
        Ok(DeferralSystem {
            policy,
            router,
            propensity,
            cost: manifest.cost,
            ood,
            method_tag: manifest.method,
            seed: Seed(manifest.seed),
            config_hash: manifest.config_hash,
            num_humans: manifest.num_humans,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    method: String,
    seed: u64,
    config_hash: String,
    num_humans: usize,
    router: String,
    ood_active: bool,
    propensity_floor: Option<f64>,
    cost: CostFunction,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ActionSpace, BanditRecord, FeatureVector};
    use crate::estimators::two_stage_value;
    use crate::rng::sample_normal;
    use rand::Rng;

    // Log where action 1 always yields reward 1 and action 0 yields 0,
    // logged uniformly at random.
    fn action_one_wins_log(n: usize, seed: u64) -> (BanditLog, Vec<f64>) {
        let mut rng = Seed(seed).rng();
        let records: Vec<BanditRecord> = (0..n)
            .map(|_| {
                let x = vec![sample_normal(&mut rng), sample_normal(&mut rng)];
                let a = rng.random_range(0..2usize);
                let r = if a == 1 { 1.0 } else { 0.0 };
                BanditRecord::new(FeatureVector::new(x).unwrap(), a, r).with_human(0)
            })
            .collect();
        let log = BanditLog::new(records, ActionSpace::new(2).unwrap(), 2, 1).unwrap();
        let props = vec![0.5; n];
        (log, props)
    }

    #[test]
    fn ao_learns_the_dominant_action() {
        let (log, props) = action_one_wins_log(400, 1);
        let config = TrainConfig::new(Method::Ao, Seed(2));
        let out = train_ao(&log, &props, &config).unwrap();
        let mut low = 0usize;
        for rec in &log.records {
            if out.policy.probs(rec.features.as_slice())[1] < 0.9 {
                low += 1;
            }
        }
        assert!(
            low <= log.len() / 20,
            "{low} of {} instances below 0.9",
            log.len()
        );
    }

    #[test]
    fn ao_zero_rewards_leave_parameters_at_init() {
        let mut rng = Seed(3).rng();
        let records: Vec<BanditRecord> = (0..50)
            .map(|_| {
                BanditRecord::new(
                    FeatureVector::new(vec![sample_normal(&mut rng), sample_normal(&mut rng)])
                        .unwrap(),
                    rng.random_range(0..2usize),
                    0.0,
                )
                .with_human(0)
            })
            .collect();
        let log = BanditLog::new(records, ActionSpace::new(2).unwrap(), 2, 1).unwrap();
        let config = TrainConfig::new(Method::Ao, Seed(4));
        let out = train_ao(&log, &vec![0.5; 50], &config).unwrap();
        let init = SoftmaxModel::init(
            config.policy_arch.to_architecture(2, 2),
            config.seed.derive("policy-init"),
        );
        assert_eq!(out.policy.params(), init.params());
    }

    #[test]
    fn ao_objective_is_mostly_nondecreasing() {
        let (log, props) = action_one_wins_log(300, 5);
        let config = TrainConfig::new(Method::Ao, Seed(6));
        let out = train_ao(&log, &props, &config).unwrap();
        let trace = &out.policy_stats.objective_trace;
        let pairs = trace.windows(2).count();
        let decreasing = trace
            .windows(2)
            .filter(|w| w[1] < w[0] - 1e-6)
            .count();
        assert!(
            (decreasing as f64) < 0.05 * pairs as f64,
            "{decreasing} of {pairs} pairs decreased"
        );
    }

    // World where humans are right and the policy class can be too, but the
    // logged propensities make the human branch clearly better per record.
    fn xor_world(n: usize, seed: u64) -> (BanditLog, Vec<f64>) {
        let mut rng = Seed(seed).rng();
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let x = vec![sample_normal(&mut rng), sample_normal(&mut rng)];
            let y = usize::from(x[0] * x[1] > 0.0);
            records.push(
                BanditRecord::new(FeatureVector::new(x).unwrap(), y, 1.0).with_human(0),
            );
        }
        let log = BanditLog::new(records, ActionSpace::new(2).unwrap(), 2, 1).unwrap();
        let props = vec![0.99; n];
        (log, props)
    }

    #[test]
    fn two_stage_defers_to_a_perfect_free_human() {
        let (log, props) = xor_world(600, 7);
        let config = TrainConfig::new(Method::Ts, Seed(8));
        let out = train_two_stage(&log, &props, &config).unwrap();
        let system = DeferralSystem::new(
            out.policy.clone(),
            Router::Binary(out.router.clone().unwrap()),
            CostFunction::zero(),
        );
        let mut rng = Seed(9).rng();
        let deferred = (0..1000)
            .filter(|_| {
                let x = [sample_normal(&mut rng), sample_normal(&mut rng)];
                matches!(system.decide(&x), Decision::Human(_))
            })
            .count();
        assert!(deferred >= 900, "deferred {deferred} of 1000");
    }

    #[test]
    fn two_stage_routes_to_algorithm_when_cost_exceeds_human_value() {
        let (log, props) = xor_world(600, 10);
        let mut config = TrainConfig::new(Method::Ts, Seed(11));
        config.cost = CostFunction::Constant(1.0);
        let out = train_two_stage(&log, &props, &config).unwrap();
        let system = DeferralSystem::new(
            out.policy.clone(),
            Router::Binary(out.router.clone().unwrap()),
            config.cost.clone(),
        );
        let mut rng = Seed(12).rng();
        let deferred = (0..1000)
            .filter(|_| {
                let x = [sample_normal(&mut rng), sample_normal(&mut rng)];
                matches!(system.decide(&x), Decision::Human(_))
            })
            .count();
        assert!(deferred <= 100, "deferred {deferred} of 1000");
    }

    #[test]
    fn stage_two_beats_the_constant_algorithm_router() {
        let (log, props) = xor_world(400, 13);
        let mut config = TrainConfig::new(Method::Ts, Seed(14));
        config.router_arch = ArchSpec::linear();
        let out = train_two_stage(&log, &props, &config).unwrap();
        let trained = two_stage_value(
            out.router.as_ref().unwrap(),
            &out.policy,
            &log,
            &props,
            &config.cost,
        )
        .unwrap();
        // Constant router d = 0 reproduces the policy-only value.
        let mut algo_router = SoftmaxModel::zeros(Architecture::Linear { input: 2, output: 2 });
        algo_router.params_mut()[5] = 500.0;
        let constant =
            two_stage_value(&algo_router, &out.policy, &log, &props, &config.cost).unwrap();
        assert!(
            trained.mean >= constant.mean - 1e-6,
            "{} vs {}",
            trained.mean,
            constant.mean
        );
    }

    #[test]
    fn joint_value_dominates_both_representable_constants() {
        let (log, props) = xor_world(400, 15);
        let mut config = TrainConfig::new(Method::Jc, Seed(16));
        config.router_arch = ArchSpec::linear();
        // Matching a saturated constant router to within 1e-6 takes logits
        // near 14; give the optimizer the budget to get there.
        config.adam.learning_rate = 0.1;
        config.max_epochs = 3000;
        config.patience = 50;
        let out = train_joint(&log, &props, &config).unwrap();
        let router = out.router.as_ref().unwrap();
        let trained = two_stage_value(router, &out.policy, &log, &props, &config.cost).unwrap();

        // d = 0 with the separately trained AO policy.
        let ao = train_ao(&log, &props, &config).unwrap();
        let mut algo_router = SoftmaxModel::zeros(Architecture::Linear { input: 2, output: 2 });
        algo_router.params_mut()[5] = 500.0;
        let at_d0 = two_stage_value(&algo_router, &ao.policy, &log, &props, &config.cost).unwrap();
        // d = 1 (any policy; the term vanishes).
        let mut human_router = SoftmaxModel::zeros(Architecture::Linear { input: 2, output: 2 });
        human_router.params_mut()[4] = 500.0;
        let at_d1 =
            two_stage_value(&human_router, &out.policy, &log, &props, &config.cost).unwrap();

        let floor = at_d0.mean.max(at_d1.mean) - 1e-6;
        assert!(trained.mean >= floor, "{} < {}", trained.mean, floor);
    }

    #[test]
    fn ec_with_empty_mask_is_bit_compatible_with_plain() {
        let (log, props) = action_one_wins_log(120, 17);
        let mask = DeterministicSupportMask::empty(log.len());

        let mut cfg_jc = TrainConfig::new(Method::Jc, Seed(18));
        cfg_jc.max_epochs = 40;
        let jc = train_joint(&log, &props, &cfg_jc).unwrap();

        let mut cfg_ec = cfg_jc.clone();
        cfg_ec.method = Method::JcEc;
        let ec = train_ec_variant(&log, &props, &mask, &cfg_ec).unwrap();

        for (a, b) in jc.policy.params().iter().zip(ec.policy.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in jc
            .router
            .as_ref()
            .unwrap()
            .params()
            .iter()
            .zip(ec.router.as_ref().unwrap().params())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Same for the policy-only pair.
        let mut cfg_ao = cfg_jc.clone();
        cfg_ao.method = Method::Ao;
        let ao = train_ao(&log, &props, &cfg_ao).unwrap();
        let mut cfg_aoec = cfg_ao.clone();
        cfg_aoec.method = Method::AoEc;
        let aoec = train_ec_variant(&log, &props, &mask, &cfg_aoec).unwrap();
        for (a, b) in ao.policy.params().iter().zip(aoec.policy.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ec_requires_binary_actions() {
        let mut rng = Seed(19).rng();
        let records: Vec<BanditRecord> = (0..20)
            .map(|_| {
                BanditRecord::new(
                    FeatureVector::new(vec![sample_normal(&mut rng)]).unwrap(),
                    rng.random_range(0..3usize),
                    1.0,
                )
            })
            .collect();
        let log = BanditLog::new(records, ActionSpace::new(3).unwrap(), 1, 1).unwrap();
        let mask = DeterministicSupportMask::empty(20);
        let mut config = TrainConfig::new(Method::AoEc, Seed(20));
        config.max_epochs = 5;
        assert!(matches!(
            train_ec_variant(&log, &vec![0.5; 20], &mask, &config),
            Err(TrainError::NonBinaryActions { k: 3 })
        ));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (log, props) = action_one_wins_log(150, 21);
        let mut config = TrainConfig::new(Method::Jc, Seed(22));
        config.max_epochs = 60;
        let a = train_joint(&log, &props, &config).unwrap();
        let b = train_joint(&log, &props, &config).unwrap();
        assert_eq!(a.policy.params(), b.policy.params());
        assert_eq!(
            a.router.as_ref().unwrap().params(),
            b.router.as_ref().unwrap().params()
        );
        let mut config2 = config.clone();
        config2.seed = Seed(23);
        let c = train_joint(&log, &props, &config2).unwrap();
        assert_ne!(a.policy.params(), c.policy.params());
    }

    #[test]
    fn minibatch_mode_still_learns() {
        let (log, props) = action_one_wins_log(300, 24);
        let mut config = TrainConfig::new(Method::Ao, Seed(25));
        config.batch = BatchMode::Minibatch(32);
        config.max_epochs = 200;
        let out = train_ao(&log, &props, &config).unwrap();
        let mean_p1: f64 = log
            .records
            .iter()
            .map(|r| out.policy.probs(r.features.as_slice())[1])
            .sum::<f64>()
            / log.len() as f64;
        assert!(mean_p1 > 0.8, "mean p(a=1) {mean_p1}");
    }

    #[test]
    fn personalized_router_prefers_the_better_human() {
        // Human 0 is perfect on a boundary a linear policy cannot represent;
        // human 1 acts at random. Per-human propensities reflect that the
        // perfect human's actions are predictable (0.9) while the random
        // human's are not (0.5), keeping the algorithm branch honest.
        let mut rng = Seed(26).rng();
        let n = 400;
        let mut records = Vec::with_capacity(n);
        let mut per_human = Vec::with_capacity(n);
        for _ in 0..n {
            let x = vec![sample_normal(&mut rng), sample_normal(&mut rng)];
            let y = usize::from(x[0] * x[1] > 0.0);
            let h = rng.random_range(0..2usize);
            let a = if h == 0 { y } else { rng.random_range(0..2usize) };
            let r = f64::from(u8::from(a == y));
            per_human.push(if h == 0 { 0.9 } else { 0.5 });
            records.push(BanditRecord::new(FeatureVector::new(x).unwrap(), a, r).with_human(h));
        }
        let log = BanditLog::new(records, ActionSpace::new(2).unwrap(), 2, 2).unwrap();
        let mut config = TrainConfig::new(Method::Jcp, Seed(27));
        config.policy_arch = ArchSpec::linear();
        let assignment = vec![0.5; n];
        let out = train_joint_personalized(&log, &per_human, &assignment, &config).unwrap();
        let system = DeferralSystem::new(
            out.policy.clone(),
            Router::PerHuman {
                model: out.router.clone().unwrap(),
                num_humans: 2,
            },
            CostFunction::zero(),
        );
        let mut to_perfect = 0usize;
        let mut to_any_human = 0usize;
        let mut probe_rng = Seed(28).rng();
        for _ in 0..1000 {
            let x = [sample_normal(&mut probe_rng), sample_normal(&mut probe_rng)];
            if let Decision::Human(HumanChoice::Specific(h)) = system.decide(&x) {
                to_any_human += 1;
                if h == 0 {
                    to_perfect += 1;
                }
            }
        }
        assert!(to_any_human > 300, "only {to_any_human} routed to humans");
        assert!(
            to_perfect * 10 >= to_any_human * 9,
            "{to_perfect} of {to_any_human} went to the perfect human"
        );
    }

    #[test]
    fn personalized_k1_value_matches_joint_at_same_parameters() {
        let (log, props) = action_one_wins_log(60, 29);
        let policy = SoftmaxModel::init(
            ArchSpec::default().to_architecture(2, 2),
            Seed(30).derive("p"),
        );
        let router = SoftmaxModel::init(
            ArchSpec::default().to_architecture(2, 2),
            Seed(30).derive("r"),
        );
        let cost = CostFunction::Constant(0.2);
        let assignment = vec![1.0; log.len()];
        let (pv, _, _) = crate::estimators::personalized_value_and_grads(
            &policy, &router, &log, &props, &assignment, &cost,
        )
        .unwrap();
        let (jv, _, _) =
            crate::estimators::joint_value_and_grads(&policy, &router, &log, &props, &cost)
                .unwrap();
        assert!((pv.total - jv.total).abs() < 1e-9, "{} vs {}", pv.total, jv.total);
    }

    #[test]
    fn decide_threshold_semantics() {
        let ln = |p: f64| (p / (1.0 - p)).ln();
        let policy = SoftmaxModel::from_params(
            Architecture::Linear { input: 1, output: 2 },
            vec![0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        // Router emitting exactly 0.5: algorithm (strict inequality).
        let router = SoftmaxModel::zeros(Architecture::Linear { input: 1, output: 2 });
        let system = DeferralSystem::new(
            policy.clone(),
            Router::Binary(router),
            CostFunction::zero(),
        );
        assert_eq!(system.decide(&[1.0]), Decision::Algorithm(1));
        // Router at 0.51: human.
        let router = SoftmaxModel::from_params(
            Architecture::Linear { input: 1, output: 2 },
            vec![ln(0.51), 0.0, 0.0, 0.0],
        )
        .unwrap();
        let system = DeferralSystem::new(policy, Router::Binary(router), CostFunction::zero());
        assert_eq!(system.decide(&[1.0]), Decision::Human(HumanChoice::Any));
    }

    #[test]
    fn decide_personalized_argmax_rule() {
        // Distribution (h1, h2, algo) = (0.2, 0.5, 0.3) -> Human(h2).
        let logits = [0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()];
        let router = SoftmaxModel::from_params(
            Architecture::Linear { input: 1, output: 3 },
            vec![0.0, 0.0, 0.0, logits[0], logits[1], logits[2]],
        )
        .unwrap();
        let policy = SoftmaxModel::zeros(Architecture::Linear { input: 1, output: 2 });
        let system = DeferralSystem::new(
            policy,
            Router::PerHuman {
                model: router,
                num_humans: 2,
            },
            CostFunction::zero(),
        );
        assert_eq!(
            system.decide(&[0.0]),
            Decision::Human(HumanChoice::Specific(1))
        );
    }

    #[test]
    fn decide_is_pure_and_tie_breaks_low_index() {
        let policy = SoftmaxModel::zeros(Architecture::Linear { input: 2, output: 3 });
        let system = DeferralSystem::new(policy, Router::Algorithm, CostFunction::zero());
        let x = [0.4, -0.2];
        // Uniform output ties; smallest index wins, repeatedly.
        assert_eq!(system.decide(&x), Decision::Algorithm(0));
        assert_eq!(system.decide(&x), Decision::Algorithm(0));
    }

    #[test]
    fn gate_precedence_and_inertness() {
        use crate::ood::{fit_ood, DetectorKind};
        let mut rng = Seed(31).rng();
        let train: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![sample_normal(&mut rng), sample_normal(&mut rng)])
            .collect();
        let detector = fit_ood(&train, DetectorKind::Mahalanobis, 0.05).unwrap();
        // Router that always wants the algorithm.
        let mut algo_router = SoftmaxModel::zeros(Architecture::Linear { input: 2, output: 2 });
        algo_router.params_mut()[5] = 500.0;
        let policy = SoftmaxModel::zeros(Architecture::Linear { input: 2, output: 2 });
        let gated = DeferralSystem::new(
            policy.clone(),
            Router::Binary(algo_router.clone()),
            CostFunction::zero(),
        )
        .with_ood(detector.clone());
        // Far-out instance: gate overrides the router.
        assert_eq!(gated.decide(&[50.0, 50.0]), Decision::Human(HumanChoice::Any));

        // A detector whose threshold nothing exceeds leaves decisions
        // identical to the ungated system.
        let inert = detector.with_contamination(1e-9).unwrap();
        // with_contamination requires p in (0,1); 1e-9 flags ~nothing.
        let gated_inert = DeferralSystem::new(
            policy.clone(),
            Router::Binary(algo_router.clone()),
            CostFunction::zero(),
        )
        .with_ood(inert);
        let ungated = DeferralSystem::new(
            policy,
            Router::Binary(algo_router),
            CostFunction::zero(),
        );
        // Probes stay well inside the training support so the near-maximal
        // threshold flags none of them.
        let mut probe_rng = Seed(32).rng();
        for _ in 0..500 {
            let x = [
                0.2 * sample_normal(&mut probe_rng),
                0.2 * sample_normal(&mut probe_rng),
            ];
            assert_eq!(gated_inert.decide(&x), ungated.decide(&x));
        }
    }

    #[test]
    fn bundle_roundtrip_preserves_decisions() {
        let (log, props) = xor_world(200, 33);
        let mut config = TrainConfig::new(Method::Jc, Seed(34));
        config.max_epochs = 50;
        config.cost = CostFunction::Constant(0.1);
        let out = train_joint(&log, &props, &config).unwrap();
        let fitted = crate::propensity::fit_propensity(
            &log,
            crate::propensity::EstimatorKind::KnnFrequency { k: 5 },
            0,
            crate::propensity::DEFAULT_FLOOR,
            &crate::propensity::FitOptions::default(),
            Seed(35),
        )
        .unwrap();
        let system = DeferralSystem::new(
            out.policy,
            Router::Binary(out.router.unwrap()),
            config.cost.clone(),
        )
        .with_propensity(fitted.model, fitted.floor)
        .with_tag("jc", config.seed, config_fingerprint(&config));

        let dir = std::env::temp_dir().join(format!("deferral-bundle-{}", std::process::id()));
        system.save_bundle(&dir).unwrap();
        let loaded = DeferralSystem::load_bundle(&dir).unwrap();
        std::fs::remove_dir_all(&dir).ok();

        assert_eq!(loaded.method_tag, "jc");
        assert_eq!(loaded.seed, config.seed);
        let mut rng = Seed(36).rng();
        for _ in 0..200 {
            let x = [sample_normal(&mut rng), sample_normal(&mut rng)];
            assert_eq!(system.decide(&x), loaded.decide(&x));
        }
        let p = system.propensity.as_ref().unwrap();
        let q = loaded.propensity.as_ref().unwrap();
        assert_eq!(p.1, q.1);
        assert_eq!(p.0.predict_raw(&[0.1, 0.2]), q.0.predict_raw(&[0.1, 0.2]));
    }

    #[test]
    fn method_tags_roundtrip() {
        for m in [
            Method::Ao,
            Method::Ts,
            Method::Jc,
            Method::Jcp,
            Method::AoEc,
            Method::TsEc,
            Method::JcEc,
        ] {
            assert_eq!(Method::parse(m.as_str()), Some(m));
        }
        assert_eq!(Method::parse("bogus"), None);
    }
}
