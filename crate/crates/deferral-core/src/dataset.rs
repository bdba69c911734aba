//! Core domain types: feature vectors, logged bandit records, counterfactual
//! tables, action spaces, and decision costs.
//!
//! A [`BanditLog`] is the training substrate: one record per historical
//! decision, with features, the action actually taken, the observed reward,
//! and optionally the deciding human's id and the logged propensity. A
//! [`CounterfactualTable`] holds the full potential rewards `r(x, a)` for
//! every action; it exists only for synthetic and semi-synthetic data and is
//! used strictly for evaluation.

use thiserror::Error;

use crate::rng::Seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("feature vector contains a non-finite entry at position {0}")]
    NonFiniteFeature(usize),
    #[error("action space must have at least 2 actions, got {0}")]
    TooFewActions(usize),
    #[error("record {index}: {reason}")]
    BadRecord { index: usize, reason: String },
    #[error("counterfactual table has {rows} rows, expected {expected}")]
    RowMismatch { rows: usize, expected: usize },
    #[error("counterfactual table contains a non-finite entry at ({row}, {col})")]
    NonFiniteReward { row: usize, col: usize },
    #[error("cost must be finite and non-negative, got {0}")]
    BadCost(f64),
    #[error("split ratio must lie strictly inside (0, 1), got {0}")]
    BadRatio(f64),
    #[error("cannot split an empty log")]
    EmptyLog,
}

/// A dense feature vector of fixed dimension with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DataError> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteFeature(pos));
        }
        Ok(FeatureVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for FeatureVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A discrete action space with actions indexed `0..k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionSpace {
    k: usize,
}

impl ActionSpace {
    pub fn new(k: usize) -> Result<Self, DataError> {
        if k < 2 {
            return Err(DataError::TooFewActions(k));
        }
        Ok(ActionSpace { k })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn is_binary(&self) -> bool {
        self.k == 2
    }
}

/// One logged decision: features, the chosen action, the realized reward,
/// and optionally the deciding human and the logged propensity.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditRecord {
    pub features: FeatureVector,
    pub action: usize,
    pub reward: f64,
    pub human: Option<usize>,
    pub logged_propensity: Option<f64>,
}

impl BanditRecord {
    pub fn new(features: FeatureVector, action: usize, reward: f64) -> Self {
        BanditRecord {
            features,
            action,
            reward,
            human: None,
            logged_propensity: None,
        }
    }

    pub fn with_human(mut self, h: usize) -> Self {
        self.human = Some(h);
        self
    }

    pub fn with_propensity(mut self, p: f64) -> Self {
        self.logged_propensity = Some(p);
        self
    }
}

/// A named invariant violation found by [`validate_log`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Index of the offending record, or `None` for log-level problems.
    pub record: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.record {
            Some(i) => write!(f, "record {}: {}", i, self.message),
            None => write!(f, "log: {}", self.message),
        }
    }
}

/// Logged bandit feedback: the observational data a system is trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditLog {
    pub records: Vec<BanditRecord>,
    pub action_space: ActionSpace,
    pub dim: usize,
    pub num_humans: usize,
}

impl BanditLog {
    /// Build a log, returning the first invariant violation as an error.
    pub fn new(
        records: Vec<BanditRecord>,
        action_space: ActionSpace,
        dim: usize,
        num_humans: usize,
    ) -> Result<Self, DataError> {
        let log = BanditLog {
            records,
            action_space,
            dim,
            num_humans: num_humans.max(1),
        };
        match validate_log(&log).into_iter().next() {
            None => Ok(log),
            Some(v) => Err(DataError::BadRecord {
                index: v.record.unwrap_or(0),
                reason: v.message,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_actions(&self) -> usize {
        self.action_space.size()
    }

    /// Feature matrix view, one row per record.
    pub fn features(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.features.as_slice()).collect()
    }

    /// The sub-log containing exactly the given record indices, in order.
    pub fn subset(&self, indices: &[usize]) -> BanditLog {
        BanditLog {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            action_space: self.action_space,
            dim: self.dim,
            num_humans: self.num_humans,
        }
    }
}

/// Check every log invariant and report all violations.
///
/// An empty report means the log is well formed. Violations name the record
/// index and the failed invariant rather than aborting at the first problem.
pub fn validate_log(log: &BanditLog) -> Vec<Violation> {
    let mut out = Vec::new();
    let k = log.action_space.size();
    for (i, rec) in log.records.iter().enumerate() {
        if rec.features.dim() != log.dim {
            out.push(Violation {
                record: Some(i),
                message: format!(
                    "feature dimension {} does not match log dimension {}",
                    rec.features.dim(),
                    log.dim
                ),
            });
        }
        if rec.action >= k {
            out.push(Violation {
                record: Some(i),
                message: format!("action out of range: {} >= {}", rec.action, k),
            });
        }
        if !rec.reward.is_finite() {
            out.push(Violation {
                record: Some(i),
                message: "non-finite reward".to_string(),
            });
        }
        if let Some(h) = rec.human {
            if h >= log.num_humans {
                out.push(Violation {
                    record: Some(i),
                    message: format!("human id out of range: {} >= {}", h, log.num_humans),
                });
            }
        }
        if let Some(p) = rec.logged_propensity {
            if !(p > 0.0 && p <= 1.0) {
                out.push(Violation {
                    record: Some(i),
                    message: format!("logged propensity outside (0, 1]: {p}"),
                });
            }
        }
    }
    out
}

/// Full potential rewards `r(x_i, a)`, row-aligned with a paired dataset.
///
/// Available only for synthetic or semi-synthetic data; evaluation reads the
/// one entry per instance matching the chosen action.
#[derive(Debug, Clone)]
pub struct CounterfactualTable {
    rewards: Vec<f64>,
    num_actions: usize,
}

impl CounterfactualTable {
    pub fn new(rows: Vec<Vec<f64>>, num_actions: usize) -> Result<Self, DataError> {
        let mut rewards = Vec::with_capacity(rows.len() * num_actions);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != num_actions {
                return Err(DataError::RowMismatch {
                    rows: row.len(),
                    expected: num_actions,
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(DataError::NonFiniteReward { row: i, col: j });
                }
                rewards.push(v);
            }
        }
        Ok(CounterfactualTable {
            rewards,
            num_actions,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.rewards.len() / self.num_actions
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn reward(&self, instance: usize, action: usize) -> f64 {
        debug_assert!(action < self.num_actions);
        self.rewards[instance * self.num_actions + action]
    }

    pub fn row(&self, instance: usize) -> &[f64] {
        &self.rewards[instance * self.num_actions..(instance + 1) * self.num_actions]
    }

    /// Actions attaining the row maximum, smallest index first.
    pub fn optimal_actions(&self, instance: usize) -> Vec<usize> {
        let row = self.row(instance);
        let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter()
            .enumerate()
            .filter(|(_, &v)| v == best)
            .map(|(a, _)| a)
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> CounterfactualTable {
        let mut rewards = Vec::with_capacity(indices.len() * self.num_actions);
        for &i in indices {
            rewards.extend_from_slice(self.row(i));
        }
        CounterfactualTable {
            rewards,
            num_actions: self.num_actions,
        }
    }
}

/// Per-decision human cost `C(x)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum CostFunction {
    /// One constant cost for every instance and human.
    Constant(f64),
    /// One constant per human decision-maker.
    PerHuman(Vec<f64>),
    /// One cost per instance (row-aligned with the dataset in use).
    PerInstance(Vec<f64>),
}

impl CostFunction {
    pub fn validate(&self) -> Result<(), DataError> {
        let check = |c: f64| {
            if c.is_finite() && c >= 0.0 {
                Ok(())
            } else {
                Err(DataError::BadCost(c))
            }
        };
        match self {
            CostFunction::Constant(c) => check(*c),
            CostFunction::PerHuman(v) | CostFunction::PerInstance(v) => {
                v.iter().try_for_each(|&c| check(c))
            }
        }
    }

    /// Cost of asking human `h` to decide instance `i`.
    pub fn cost(&self, instance: usize, human: usize) -> f64 {
        match self {
            CostFunction::Constant(c) => *c,
            CostFunction::PerHuman(v) => v[human.min(v.len() - 1)],
            CostFunction::PerInstance(v) => v[instance],
        }
    }

    pub fn zero() -> Self {
        CostFunction::Constant(0.0)
    }
}

/// Shuffle `0..n` under the seed and cut off `round(ratio * n)` test indices.
///
/// Returns `(train, test)` index sets forming a disjoint partition. Pairs of
/// structures (log + counterfactual table) are split consistently by reusing
/// the same index sets.
pub fn split_indices(n: usize, ratio: f64, seed: Seed) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::BadRatio(ratio));
    }
    if n == 0 {
        return Err(DataError::EmptyLog);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed.derive("split").rng();
    // Fisher-Yates; records are treated as distinct by index even when their
    // contents repeat.
    use rand::Rng;
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_test = (ratio * n as f64).round() as usize;
    let n_test = n_test.clamp(0, n);
    let test: Vec<usize> = order[..n_test].to_vec();
    let train: Vec<usize> = order[n_test..].to_vec();
    Ok((train, test))
}

/// Split a log (and optionally its counterfactual table) into train and test.
pub fn split_log(
    log: &BanditLog,
    counterfactuals: Option<&CounterfactualTable>,
    ratio: f64,
    seed: Seed,
) -> Result<SplitData, DataError> {
    let (train_idx, test_idx) = split_indices(log.len(), ratio, seed)?;
    Ok(SplitData {
        train: log.subset(&train_idx),
        test: log.subset(&test_idx),
        train_counterfactuals: counterfactuals.map(|t| t.subset(&train_idx)),
        test_counterfactuals: counterfactuals.map(|t| t.subset(&test_idx)),
        train_indices: train_idx,
        test_indices: test_idx,
    })
}

/// Result of [`split_log`]: disjoint train/test partitions plus the index
/// sets that produced them.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: BanditLog,
    pub test: BanditLog,
    pub train_counterfactuals: Option<CounterfactualTable>,
    pub test_counterfactuals: Option<CounterfactualTable>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}
