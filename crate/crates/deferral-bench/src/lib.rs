//! Shared fixtures for the criterion benchmarks.

use deferral_core::dataset::{ActionSpace, BanditLog, BanditRecord, FeatureVector};
use deferral_core::models::{Activation, Architecture, SoftmaxModel};
use deferral_core::rng::{sample_normal, Seed};

/// A binary-action log with gaussian features and uniform logging.
pub fn synthetic_log(n: usize, seed: u64) -> (BanditLog, Vec<f64>) {
    use rand::Rng;
    let mut rng = Seed(seed).rng();
    let records: Vec<BanditRecord> = (0..n)
        .map(|_| {
            let x = vec![sample_normal(&mut rng), sample_normal(&mut rng)];
            let a = rng.random_range(0..2usize);
            let r = if (x[0] > 0.0) == (a == 1) { 1.0 } else { 0.0 };
            BanditRecord::new(FeatureVector::new(x).unwrap(), a, r).with_human(0)
        })
        .collect();
    let log = BanditLog::new(records, ActionSpace::new(2).unwrap(), 2, 1).unwrap();
    let props = vec![0.5; n];
    (log, props)
}

/// The default two-hidden-layer policy shape.
pub fn standard_policy(seed: u64) -> SoftmaxModel {
    SoftmaxModel::init(
        Architecture::Mlp {
            input: 2,
            hidden: (16, 16),
            output: 2,
            activation: Activation::Tanh,
        },
        Seed(seed),
    )
}
