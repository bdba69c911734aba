//! Shared test support: a tiny discrete world whose policy values, estimator
//! expectations, and biases are brute-forceable by enumeration. The oracles
//! here are independent of the library's estimator implementations.
//!
//! Each integration-test binary compiles its own copy, so items used by one
//! binary may be dead code in another.
#![allow(dead_code)]

use deferral_core::dataset::{ActionSpace, BanditLog, BanditRecord, FeatureVector};
use deferral_core::estimators::PolicyProbs;
use deferral_core::hbm::sample_from;
use deferral_core::rng::Seed;

/// A finite world: a handful of feature points with explicit state
/// probabilities, exact logging distributions, and deterministic rewards.
pub struct DiscreteWorld {
    pub states: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    pub logging: Vec<Vec<f64>>,
    pub rewards: Vec<Vec<f64>>,
}

impl DiscreteWorld {
    pub fn num_actions(&self) -> usize {
        self.rewards[0].len()
    }

    /// Six states, three actions, full-support logging.
    pub fn six_state_full_support() -> DiscreteWorld {
        DiscreteWorld {
            states: vec![
                vec![0.0, 1.0],
                vec![1.0, 0.5],
                vec![-1.0, 0.25],
                vec![0.5, -1.0],
                vec![-0.5, -0.25],
                vec![1.5, 1.0],
            ],
            probs: vec![1.0 / 6.0; 6],
            logging: vec![
                vec![0.5, 0.3, 0.2],
                vec![0.2, 0.6, 0.2],
                vec![0.3, 0.3, 0.4],
                vec![0.6, 0.2, 0.2],
                vec![0.25, 0.5, 0.25],
                vec![0.4, 0.4, 0.2],
            ],
            rewards: vec![
                vec![1.0, 0.0, -0.5],
                vec![0.25, 0.75, 0.0],
                vec![-1.0, 0.5, 1.0],
                vec![0.0, 0.6, 0.3],
                vec![0.8, -0.2, 0.1],
                vec![0.4, 0.4, -0.4],
            ],
        }
    }

    /// Same states but binary actions and deterministic logging on half the
    /// states (zero support for the other action there).
    pub fn six_state_deterministic() -> DiscreteWorld {
        DiscreteWorld {
            states: Self::six_state_full_support().states,
            probs: vec![1.0 / 6.0; 6],
            logging: vec![
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 0.0],
                vec![0.7, 0.3],
                vec![0.4, 0.6],
                vec![0.5, 0.5],
            ],
            rewards: vec![
                vec![0.2, 0.9],
                vec![-0.4, 0.6],
                vec![0.5, -0.7],
                vec![0.1, 0.8],
                vec![0.3, 0.2],
                vec![-0.1, 0.4],
            ],
        }
    }

    /// True value of a policy: full enumeration over states and actions.
    pub fn true_value(&self, policy: &dyn PolicyProbs) -> f64 {
        self.states
            .iter()
            .zip(&self.probs)
            .zip(&self.rewards)
            .map(|((x, &p), rewards)| {
                let pi = policy.action_probs(x);
                p * pi.iter().zip(rewards).map(|(a, r)| a * r).sum::<f64>()
            })
            .sum()
    }

    /// Closed-form expectation of the importance-weighted estimate under the
    /// exact logging policy: only actions with logging support contribute.
    pub fn expected_ipw(&self, policy: &dyn PolicyProbs) -> f64 {
        self.states
            .iter()
            .zip(&self.probs)
            .zip(self.logging.iter().zip(&self.rewards))
            .map(|((x, &p), (p0, rewards))| {
                let pi = policy.action_probs(x);
                let inner: f64 = (0..rewards.len())
                    .filter(|&a| p0[a] > 0.0)
                    .map(|a| pi[a] * rewards[a])
                    .sum();
                p * inner
            })
            .sum()
    }

    /// Draw one log: states by their probabilities, actions by the logging
    /// distribution, rewards from the table, exact logged propensities
    /// attached. Also returns each record's state index.
    pub fn sample_log(&self, n: usize, seed: Seed) -> (BanditLog, Vec<usize>) {
        let mut rng = seed.derive("discrete-log").rng();
        let mut records = Vec::with_capacity(n);
        let mut state_ids = Vec::with_capacity(n);
        for _ in 0..n {
            let s = sample_from(&self.probs, &mut rng);
            let a = sample_from(&self.logging[s], &mut rng);
            let rec = BanditRecord::new(
                FeatureVector::new(self.states[s].clone()).unwrap(),
                a,
                self.rewards[s][a],
            )
            .with_human(0)
            .with_propensity(self.logging[s][a]);
            records.push(rec);
            state_ids.push(s);
        }
        let dim = self.states[0].len();
        let log = BanditLog::new(
            records,
            ActionSpace::new(self.num_actions()).unwrap(),
            dim,
            1,
        )
        .unwrap();
        (log, state_ids)
    }

    /// Exact logged propensities of a sampled log.
    pub fn logged_propensities(&self, log: &BanditLog) -> Vec<f64> {
        log.records
            .iter()
            .map(|r| r.logged_propensity.expect("exact propensity attached"))
            .collect()
    }
}
