//! Human behavior models: simulated or replayed decision-makers.
//!
//! The same model objects answer queries at data-generation time and at test
//! time. Three families are built in:
//!
//! * [`NoiseHbm`] — uniform decision accuracy `rho`: an optimal action with
//!   probability `rho` (split evenly when several actions are optimal), every
//!   non-optimal action equally likely otherwise.
//! * [`BlackBoxHbm`] — a classifier fit on a held-aside labeled subset whose
//!   per-class scores are sharpened by a softmax temperature before sampling.
//! * [`ReplayHbm`] — recorded annotations; a query samples one recorded
//!   annotator of the instance and returns that annotator's action.
//!
//! Synthetic worlds contribute their own closed-form decision-makers by
//! implementing [`DecisionMaker`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{
    ActionSpace, BanditLog, BanditRecord, CounterfactualTable, DataError, FeatureVector,
};
use crate::propensity::{fit_softmax_classifier, EstimatorKind, FitOptions, PropensityError};
use crate::rng::Seed;

#[derive(Debug, Error)]
pub enum HbmError {
    #[error("worker pool is empty")]
    EmptyPool,
    #[error("instance {0} has no recorded annotations")]
    NoAnnotations(usize),
    #[error("cannot fit a black-box model on an empty subset")]
    EmptySubset,
    #[error("label universe is empty")]
    EmptyLabelUniverse,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fit(#[from] PropensityError),
    #[error("malformed annotation line {line}: {reason}")]
    ParseAnnotation { line: usize, reason: String },
}

/// A queryable decision-maker. `instance` indexes the dataset the model is
/// being queried against; closed-form models may ignore it.
pub trait DecisionMaker {
    fn action_probs(&self, instance: usize, x: &[f64]) -> Result<Vec<f64>, HbmError>;

    /// Sample one action; reproducible under the caller's stream.
    fn sample(&self, instance: usize, x: &[f64], rng: &mut ChaCha8Rng) -> Result<usize, HbmError> {
        let probs = self.action_probs(instance, x)?;
        Ok(sample_from(&probs, rng))
    }
}

/// Draw an index from a probability vector.
pub fn sample_from(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

// ── Uniform decision-noise model ────────────────────────────────────────

/// Decision-maker with uniform accuracy `rho` over its instance universe.
#[derive(Debug, Clone)]
pub struct NoiseHbm {
    rho: f64,
    optimal: Vec<Vec<usize>>,
    num_actions: usize,
}

impl NoiseHbm {
    /// Ground-truth optimal actions are the per-row maximizers of the
    /// counterfactual table.
    pub fn from_counterfactuals(rho: f64, table: &CounterfactualTable) -> NoiseHbm {
        NoiseHbm {
            rho,
            optimal: (0..table.num_rows()).map(|i| table.optimal_actions(i)).collect(),
            num_actions: table.num_actions(),
        }
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
}

impl DecisionMaker for NoiseHbm {
    fn action_probs(&self, instance: usize, _x: &[f64]) -> Result<Vec<f64>, HbmError> {
        let k = self.num_actions;
        let optimal = &self.optimal[instance];
        let mut probs = vec![0.0; k];
        if optimal.len() == k {
            // Every action ties for optimal; accuracy is vacuous.
            probs.iter_mut().for_each(|p| *p = 1.0 / k as f64);
            return Ok(probs);
        }
        let per_optimal = self.rho / optimal.len() as f64;
        let per_other = (1.0 - self.rho) / (k - optimal.len()) as f64;
        probs.iter_mut().for_each(|p| *p = per_other);
        for &a in optimal {
            probs[a] = per_optimal;
        }
        Ok(probs)
    }
}

// ── Black-box model with softmax temperature ────────────────────────────

/// Per-class scorer behind a black-box human: either k-nearest-neighbor
/// label frequencies (scores need not sum to one, matching multi-label
/// ground truth) or a fitted softmax classifier.
#[derive(Debug, Clone)]
pub enum BlackBoxScorer {
    KnnLabelFrequency {
        features: Vec<Vec<f64>>,
        label_sets: Vec<Vec<usize>>,
        k: usize,
        num_actions: usize,
    },
    Softmax(crate::models::SoftmaxModel),
}

impl BlackBoxScorer {
    fn scores(&self, x: &[f64]) -> Vec<f64> {
        match self {
            BlackBoxScorer::KnnLabelFrequency {
                features,
                label_sets,
                k,
                num_actions,
            } => {
                let mut dists: Vec<(f64, usize)> = features
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let d2: f64 = r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                        (d2, i)
                    })
                    .collect();
                dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let take = (*k).min(dists.len());
                let mut scores = vec![0.0; *num_actions];
                for &(_, i) in dists.iter().take(take) {
                    for &label in &label_sets[i] {
                        scores[label] += 1.0;
                    }
                }
                scores.iter_mut().for_each(|s| *s /= take.max(1) as f64);
                scores
            }
            BlackBoxScorer::Softmax(m) => m.probs(x),
        }
    }
}

/// Simulated expert sampling from temperature-sharpened classifier scores:
/// `P(a) ∝ exp(T * s_a)`, so larger `T` concentrates on high-score actions.
#[derive(Debug, Clone)]
pub struct BlackBoxHbm {
    scorer: BlackBoxScorer,
    temperature: f64,
}

impl BlackBoxHbm {
    pub fn new(scorer: BlackBoxScorer, temperature: f64) -> BlackBoxHbm {
        BlackBoxHbm {
            scorer,
            temperature,
        }
    }
}

impl DecisionMaker for BlackBoxHbm {
    fn action_probs(&self, _instance: usize, x: &[f64]) -> Result<Vec<f64>, HbmError> {
        let scores = self.scorer.scores(x);
        let max = scores
            .iter()
            .map(|s| self.temperature * s)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores
            .iter()
            .map(|s| (self.temperature * s - max).exp())
            .collect();
        let sum: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / sum).collect())
    }
}

/// Fit a black-box human on ground-truth-labeled data (the caller passes the
/// held-aside subset, conventionally 30% of the corpus).
pub fn fit_blackbox_hbm(
    features: &[Vec<f64>],
    label_sets: &[Vec<usize>],
    num_actions: usize,
    kind: EstimatorKind,
    temperature: f64,
    seed: Seed,
) -> Result<BlackBoxHbm, HbmError> {
    if features.is_empty() {
        return Err(HbmError::EmptySubset);
    }
    let scorer = match kind {
        EstimatorKind::KnnFrequency { k } => BlackBoxScorer::KnnLabelFrequency {
            features: features.to_vec(),
            label_sets: label_sets.to_vec(),
            k,
            num_actions,
        },
        _ => {
            // Flatten multi-label rows to one (x, label) pair per positive
            // label and fit a multinomial classifier.
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (x, labels) in features.iter().zip(label_sets) {
                for &l in labels {
                    xs.push(x.clone());
                    ys.push(l);
                }
            }
            if xs.is_empty() {
                return Err(HbmError::EmptySubset);
            }
            let model = fit_softmax_classifier(
                &xs,
                &ys,
                num_actions,
                kind,
                &FitOptions::default(),
                seed.derive("blackbox"),
            )?;
            BlackBoxScorer::Softmax(model)
        }
    };
    Ok(BlackBoxHbm::new(scorer, temperature))
}

// ── Replay of recorded annotations ───────────────────────────────────────

/// Replays real annotation data: each query samples one recorded annotator
/// of the instance uniformly and returns that annotator's action.
#[derive(Debug, Clone)]
pub struct ReplayHbm {
    annotations: Vec<Vec<(usize, usize)>>,
    num_actions: usize,
}

impl ReplayHbm {
    pub fn new(annotations: Vec<Vec<(usize, usize)>>, num_actions: usize) -> ReplayHbm {
        ReplayHbm {
            annotations,
            num_actions,
        }
    }

    /// Parse delimited text `instance_id, annotator_id, action`.
    pub fn from_annotation_text(
        text: &str,
        num_instances: usize,
        num_actions: usize,
    ) -> Result<ReplayHbm, HbmError> {
        let mut annotations = vec![Vec::new(); num_instances];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(HbmError::ParseAnnotation {
                    line: lineno + 1,
                    reason: format!("expected 3 fields, got {}", fields.len()),
                });
            }
            let parse = |s: &str| -> Result<usize, HbmError> {
                s.parse().map_err(|_| HbmError::ParseAnnotation {
                    line: lineno + 1,
                    reason: format!("bad integer: {s}"),
                })
            };
            let (inst, annot, action) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
            if inst >= num_instances || action >= num_actions {
                return Err(HbmError::ParseAnnotation {
                    line: lineno + 1,
                    reason: "index out of range".to_string(),
                });
            }
            annotations[inst].push((annot, action));
        }
        Ok(ReplayHbm::new(annotations, num_actions))
    }

    pub fn annotations(&self, instance: usize) -> &[(usize, usize)] {
        &self.annotations[instance]
    }
}

impl DecisionMaker for ReplayHbm {
    fn action_probs(&self, instance: usize, _x: &[f64]) -> Result<Vec<f64>, HbmError> {
        let entries = &self.annotations[instance];
        if entries.is_empty() {
            return Err(HbmError::NoAnnotations(instance));
        }
        let mut probs = vec![0.0; self.num_actions];
        let w = 1.0 / entries.len() as f64;
        for &(_, action) in entries {
            probs[action] += w;
        }
        Ok(probs)
    }
}

// ── Worker pools and log generation ──────────────────────────────────────

/// A team of decision-makers with per-worker query costs. Historical
/// assignment is uniform-random, mirroring domains where instances go to the
/// first available person.
pub struct WorkerPool {
    workers: Vec<Box<dyn DecisionMaker>>,
    costs: Vec<f64>,
}

impl WorkerPool {
    pub fn new(workers: Vec<Box<dyn DecisionMaker>>, costs: Vec<f64>) -> Result<WorkerPool, HbmError> {
        if workers.is_empty() {
            return Err(HbmError::EmptyPool);
        }
        assert_eq!(workers.len(), costs.len(), "one cost per worker");
        Ok(WorkerPool { workers, costs })
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn worker(&self, h: usize) -> &dyn DecisionMaker {
        self.workers[h].as_ref()
    }
}

/// Pool of uniform-noise workers with the given accuracies and costs, all
/// sharing one counterfactual table as their ground truth.
pub fn multilabel_pool_from_counterfactuals(
    rhos: &[f64],
    costs: &[f64],
    table: &CounterfactualTable,
) -> Result<WorkerPool, HbmError> {
    WorkerPool::new(
        rhos.iter()
            .map(|&rho| {
                Box::new(NoiseHbm::from_counterfactuals(rho, table)) as Box<dyn DecisionMaker>
            })
            .collect(),
        costs.to_vec(),
    )
}

/// Generate an observational log: per instance, assign a worker uniformly at
/// random, query it, and record the counterfactual reward of the chosen
/// action along with the worker id.
pub fn generate_log(
    pool: &WorkerPool,
    instances: &[FeatureVector],
    counterfactuals: &CounterfactualTable,
    seed: Seed,
) -> Result<BanditLog, HbmError> {
    if pool.is_empty() {
        return Err(HbmError::EmptyPool);
    }
    let mut rng = seed.derive("generate-log").rng();
    let k = counterfactuals.num_actions();
    let mut records = Vec::with_capacity(instances.len());
    for (i, x) in instances.iter().enumerate() {
        let h = rng.random_range(0..pool.len());
        let action = pool.worker(h).sample(i, x.as_slice(), &mut rng)?;
        let reward = counterfactuals.reward(i, action);
        records.push(BanditRecord::new(x.clone(), action, reward).with_human(h));
    }
    let dim = instances.first().map_or(0, FeatureVector::dim);
    Ok(BanditLog::new(
        records,
        ActionSpace::new(k)?,
        dim,
        pool.len(),
    )?)
}
