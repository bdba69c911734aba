//! End-to-end behaviors of the training and evaluation pipeline on
//! constructed worlds.

mod common;

use common::DiscreteWorld;
use deferral_core::dataset::{CostFunction, CounterfactualTable, FeatureVector};
use deferral_core::estimators::ipw_value;
use deferral_core::harness::{
    evaluate_team, ExperimentConfig, OodSettings, TrainSettings, WorldConfig,
};
use deferral_core::hbm::{multilabel_pool_from_counterfactuals, NoiseHbm, WorkerPool};
use deferral_core::models::{Activation, Architecture, SoftmaxModel};
use deferral_core::propensity::{fit_propensity, EstimatorKind, FitOptions};
use deferral_core::rng::{sample_normal, Seed};
use deferral_core::stats::mean_stderr;
use deferral_core::training::{
    train_joint, train_two_stage, ArchSpec, DeferralSystem, Method, Router, TrainConfig,
};

/// Importance weighting stays calibrated at scale: single-log estimates sit
/// within their own two-standard-error bands at the expected rate, and the
/// mean over 200 replications lands within ±0.01 of the enumerated truth.
#[test]
fn ipw_estimates_are_calibrated_over_replications() {
    let world = DiscreteWorld::six_state_full_support();
    let policy = SoftmaxModel::init(
        Architecture::Mlp {
            input: 2,
            hidden: (4, 4),
            output: 3,
            activation: Activation::Tanh,
        },
        Seed(2024),
    );
    let truth = world.true_value(&policy);
    let n = 5000;
    let replications = 200;
    let mut estimates = Vec::with_capacity(replications);
    let mut outside_band = 0usize;
    for rep in 0..replications {
        let (log, _) = world.sample_log(n, Seed(3000).derive_index("rep", rep as u64));
        let props = world.logged_propensities(&log);
        let est = ipw_value(&policy, &log, &props).unwrap();
        // Per-log standard error of the weighted terms.
        let terms: Vec<f64> = log
            .records
            .iter()
            .zip(&props)
            .map(|(r, &p)| policy.probs(r.features.as_slice())[r.action] / p * r.reward)
            .collect();
        let (_, se) = mean_stderr(&terms);
        if (est.mean - truth).abs() > 2.0 * se {
            outside_band += 1;
        }
        estimates.push(est.mean);
    }
    // A 2-se band misses ~5% of the time; allow double that.
    assert!(
        outside_band <= replications / 10,
        "{outside_band} of {replications} estimates outside their own 2-se band"
    );
    let mean = estimates.iter().sum::<f64>() / replications as f64;
    assert!(
        (mean - truth).abs() < 0.01,
        "replication mean {mean} vs truth {truth}"
    );
}

// A world built for limited policy classes: binary action, responders inside
// a circle (reward 1 under action 1), non-responders reward 0 everywhere, and
// an accurate but costly human. A hyperplane policy cannot capture the circle.
fn circle_world(
    n: usize,
    seed: Seed,
) -> (
    Vec<FeatureVector>,
    CounterfactualTable,
    deferral_core::BanditLog,
) {
    let mut rng = seed.derive("features").rng();
    let mut instances = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let x = vec![sample_normal(&mut rng), sample_normal(&mut rng)];
        let responder = x[0] * x[0] + x[1] * x[1] < 1.2;
        rows.push(vec![0.0, f64::from(u8::from(responder))]);
        instances.push(FeatureVector::new(x).unwrap());
    }
    let cf = CounterfactualTable::new(rows, 2).unwrap();
    let pool = WorkerPool::new(
        vec![Box::new(NoiseHbm::from_counterfactuals(0.9, &cf))],
        vec![0.2],
    )
    .unwrap();
    let log = deferral_core::hbm::generate_log(&pool, &instances, &cf, seed.derive("log")).unwrap();
    (instances, cf, log)
}

/// With a policy class too weak for the decision boundary and a costly
/// accurate human, joint training does at least as well as the two-stage
/// procedure (within one standard error) across ten seeds.
#[test]
fn joint_training_tracks_or_beats_two_stage_on_circle_world() {
    let mut ts_scores = Vec::new();
    let mut jc_scores = Vec::new();
    for rep in 0..10u64 {
        let seed = Seed(515).derive_index("rep", rep);
        let (_, _, log) = circle_world(500, seed.derive("train"));
        let (test_x, test_cf, _) = circle_world(2000, seed.derive("test"));
        let fitted = fit_propensity(
            &log,
            EstimatorKind::KnnFrequency { k: 25 },
            2,
            0.01,
            &FitOptions::default(),
            seed.derive("props"),
        )
        .unwrap();
        let props = fitted.logged_floored(&log);
        let mut config = TrainConfig::new(Method::Ts, seed.derive("config"));
        config.policy_arch = ArchSpec::linear();
        config.router_arch = ArchSpec::linear();
        config.cost = CostFunction::Constant(0.2);
        // Joint coordination between two linear models needs more epochs
        // than either model alone.
        config.max_epochs = 1500;
        config.patience = 50;
        let pool = {
            let hbm = NoiseHbm::from_counterfactuals(0.9, &test_cf);
            WorkerPool::new(vec![Box::new(hbm)], vec![0.2]).unwrap()
        };

        let ts = train_two_stage(&log, &props, &config).unwrap();
        let ts_system = DeferralSystem::new(
            ts.policy,
            Router::Binary(ts.router.unwrap()),
            config.cost.clone(),
        );
        let ts_out = evaluate_team(
            &ts_system,
            &test_x,
            &test_cf,
            &pool,
            &config.cost,
            seed.derive("eval-ts"),
        )
        .unwrap();
        ts_scores.push(ts_out.total_reward);

        let mut jc_config = config.clone();
        jc_config.method = Method::Jc;
        let jc = train_joint(&log, &props, &jc_config).unwrap();
        let jc_system = DeferralSystem::new(
            jc.policy,
            Router::Binary(jc.router.unwrap()),
            config.cost.clone(),
        );
        let jc_out = evaluate_team(
            &jc_system,
            &test_x,
            &test_cf,
            &pool,
            &config.cost,
            seed.derive("eval-jc"),
        )
        .unwrap();
        jc_scores.push(jc_out.total_reward);
    }
    let (ts_mean, ts_se) = mean_stderr(&ts_scores);
    let (jc_mean, _) = mean_stderr(&jc_scores);
    assert!(
        jc_mean >= ts_mean - ts_se,
        "jc {jc_mean:.1} below ts {ts_mean:.1} - {ts_se:.1}"
    );
}

/// Where the algorithm dominates everywhere and humans are expensive, joint
/// collaboration routes almost nothing to the human and matches the
/// algorithm-only baseline.
#[test]
fn joint_matches_algorithm_when_algorithm_dominates() {
    let config = ExperimentConfig {
        name: "algo-dominates".into(),
        repetitions: 5,
        seed: 616,
        methods: vec!["ao".into(), "jc".into()],
        world: WorldConfig::MultilabelBlobs {
            n_train: 400,
            n_test: 1000,
            num_classes: 3,
            separation: 6.0,
            extra_label_prob: 0.0,
            rhos: vec![0.6],
            worker_costs: vec![0.5],
        },
        train: TrainSettings::default(),
        cost: CostFunction::Constant(0.5),
        ood: OodSettings::default(),
    };
    let result = deferral_core::run_experiment(&config).unwrap();
    assert!(result.failures.is_empty(), "{:?}", result.failures);
    let jc_fraction: f64 = result
        .rows
        .iter()
        .filter(|r| r.method == "jc")
        .map(|r| r.human_fraction)
        .sum::<f64>()
        / 5.0;
    assert!(jc_fraction <= 0.1, "jc deferred {jc_fraction:.3}");
    let ao = result.summary("ao").unwrap();
    let jc = result.summary("jc").unwrap();
    let pooled = (ao.stderr.powi(2) + jc.stderr.powi(2)).sqrt();
    assert!(
        (jc.mean - ao.mean).abs() <= 2.0 * pooled.max(1.0),
        "jc {:.1} vs ao {:.1} beyond 2 pooled stderr {pooled:.1}",
        jc.mean,
        ao.mean
    );
}

/// Raising the bias level of deterministic experts never helps the imputed
/// joint method: its mean test reward is non-increasing in the bias fraction
/// (within one pooled standard error per step).
#[test]
fn expert_bias_sweep_degrades_imputed_method_monotonically() {
    let mut means = Vec::new();
    let mut stderrs = Vec::new();
    for (i, alpha) in [0.0, 0.25, 0.5].into_iter().enumerate() {
        let config = ExperimentConfig {
            name: format!("bias-{alpha}"),
            repetitions: 5,
            seed: 717 + i as u64,
            methods: vec!["jc-ec".into()],
            world: WorldConfig::Deterministic {
                s: 0.3,
                alpha,
                n_train: 500,
                n_test: 5000,
                strict_ec: true,
            },
            train: TrainSettings {
                r_subopt: -0.5,
                r_opt: 0.5,
                oracle_mask: true,
                ..TrainSettings::default()
            },
            cost: CostFunction::zero(),
            ood: OodSettings::default(),
        };
        let result = deferral_core::run_experiment(&config).unwrap();
        assert!(result.failures.is_empty(), "{:?}", result.failures);
        let s = result.summary("jc-ec").unwrap();
        means.push(s.mean);
        stderrs.push(s.stderr);
    }
    for step in 0..2 {
        let pooled = (stderrs[step].powi(2) + stderrs[step + 1].powi(2)).sqrt();
        assert!(
            means[step + 1] <= means[step] + pooled,
            "bias step {step}: {:.1} -> {:.1} rose beyond pooled stderr {pooled:.1}",
            means[step],
            means[step + 1]
        );
    }
}

/// The estimated deterministic-support mask recovers the generator's true
/// fraction on a large sample.
#[test]
fn estimated_support_mask_tracks_generator_fraction() {
    use deferral_core::datagen::{gen_deterministic_world, DetWorldConfig};
    let world = gen_deterministic_world(
        DetWorldConfig {
            s: 0.3,
            alpha: 0.0,
            n: 5000,
            strict_ec: true,
        },
        Seed(909),
    )
    .unwrap();
    // Detection wants a tight neighborhood: the unanimity check at tau=0.99
    // misses boundary records when the k-radius is wide.
    let fitted = fit_propensity(
        &world.log,
        EstimatorKind::KnnFrequency { k: 10 },
        2,
        0.01,
        &FitOptions::default(),
        Seed(910),
    )
    .unwrap();
    let mask = deferral_core::propensity::detect_deterministic_support(
        &world.log,
        &fitted.train_probs_raw,
        0.99,
    )
    .unwrap();
    let frac = mask.fraction();
    assert!((frac - 0.3).abs() <= 0.05, "estimated fraction {frac}");
    // Estimated membership agrees with the oracle away from the quantile
    // boundary; the blur there costs some percent.
    let agree = (0..world.log.len())
        .filter(|&i| mask.in_s(i) == world.oracle_mask.in_s(i))
        .count();
    assert!(
        agree as f64 / world.log.len() as f64 > 0.85,
        "agreement {agree} of {}",
        world.log.len()
    );
}

/// Experiment results written to disk are byte-stable across identical runs.
#[test]
fn experiment_csvs_roundtrip_on_disk() {
    let config = ExperimentConfig {
        name: "csv".into(),
        repetitions: 2,
        seed: 818,
        methods: vec!["human".into(), "ao".into()],
        world: WorldConfig::MultilabelBlobs {
            n_train: 60,
            n_test: 60,
            num_classes: 3,
            separation: 6.0,
            extra_label_prob: 0.0,
            rhos: vec![0.8],
            worker_costs: vec![0.1],
        },
        train: TrainSettings {
            max_epochs: 20,
            ..TrainSettings::default()
        },
        cost: CostFunction::Constant(0.1),
        ood: OodSettings::default(),
    };
    let result = deferral_core::run_experiment(&config).unwrap();
    let dir = std::env::temp_dir().join(format!("deferral-csv-{}", std::process::id()));
    result.write_csvs(&dir).unwrap();
    let results = std::fs::read_to_string(dir.join("results.csv")).unwrap();
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    let significance = std::fs::read_to_string(dir.join("significance.csv")).unwrap();
    std::fs::remove_dir_all(&dir).ok();
    assert!(results.starts_with("method,repetition,total_reward,human_fraction,seed\n"));
    assert_eq!(results.lines().count(), 1 + 4);
    assert!(summary.starts_with("method,mean,stderr\n"));
    assert!(significance.starts_with("method_a,method_b,t,dof,p,significant\n"));
    assert_eq!(results, result.results_csv());

    let again = deferral_core::run_experiment(&config).unwrap();
    assert_eq!(result.results_csv(), again.results_csv());

    // A noise pool helper builds the same pool the world used.
    let cf = CounterfactualTable::new(vec![vec![1.0, 0.0]], 2).unwrap();
    assert!(multilabel_pool_from_counterfactuals(&[0.8], &[0.1], &cf).is_ok());
}
