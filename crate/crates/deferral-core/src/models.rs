//! Differentiable softmax models and the Adam optimizer.
//!
//! One model type serves both the algorithmic policy and the router: a map
//! from features to a probability simplex, either linear or a two-hidden-layer
//! perceptron. Gradients are closed form (manual backprop); there is no
//! autodiff framework behind this. The central primitive is
//! [`SoftmaxModel::grad_linear_in_probs`], the parameter gradient of
//! `sum_j c_j * p_j(x)` for arbitrary coefficients `c` — every training
//! objective in this crate reduces per record to that form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Seed;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("output index {index} out of range for {size} outputs")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("parameter/gradient length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("malformed model text: {0}")]
    Parse(String),
}

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    // Derivative expressed through pre-activation z and activation a.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Model shape: either a bare linear softmax or input -> two hidden layers
/// -> softmax output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    Linear {
        input: usize,
        output: usize,
    },
    Mlp {
        input: usize,
        hidden: (usize, usize),
        output: usize,
        activation: Activation,
    },
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        match *self {
            Architecture::Linear { input, .. } | Architecture::Mlp { input, .. } => input,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            Architecture::Linear { output, .. } | Architecture::Mlp { output, .. } => output,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Architecture::Linear { input, output } => output * input + output,
            Architecture::Mlp {
                input,
                hidden: (h1, h2),
                output,
                ..
            } => h1 * input + h1 + h2 * h1 + h2 + output * h2 + output,
        }
    }
}

/// A parameterized map from features to a point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    arch: Architecture,
    params: Vec<f64>,
}

impl SoftmaxModel {
    /// Fresh model with seeded initialization: weights uniform in
    /// ±1/sqrt(fan_in), biases zero.
    pub fn init(arch: Architecture, seed: Seed) -> SoftmaxModel {
        use rand::Rng;
        let mut rng = seed.derive("model-init").rng();
        let mut params = vec![0.0; arch.param_count()];
        let mut fill = |params: &mut [f64], offset: usize, rows: usize, cols: usize| {
            let scale = 1.0 / (cols as f64).sqrt();
            for w in params[offset..offset + rows * cols].iter_mut() {
                *w = rng.random_range(-scale..scale);
            }
        };
        match arch {
            Architecture::Linear { input, output } => {
                fill(&mut params, 0, output, input);
            }
            Architecture::Mlp {
                input,
                hidden: (h1, h2),
                output,
                ..
            } => {
                let mut off = 0;
                fill(&mut params, off, h1, input);
                off += h1 * input + h1;
                fill(&mut params, off, h2, h1);
                off += h2 * h1 + h2;
                fill(&mut params, off, output, h2);
            }
        }
        SoftmaxModel { arch, params }
    }

    /// Model with all parameters zero (uniform output everywhere).
    pub fn zeros(arch: Architecture) -> SoftmaxModel {
        SoftmaxModel {
            arch,
            params: vec![0.0; arch.param_count()],
        }
    }

    /// Wrap an explicit parameter vector.
    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<SoftmaxModel, ModelError> {
        if params.len() != arch.param_count() {
            return Err(ModelError::LengthMismatch {
                a: params.len(),
                b: arch.param_count(),
            });
        }
        Ok(SoftmaxModel { arch, params })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Probability vector for `x`; checks the input dimension.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.arch.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.arch.input_dim(),
                got: x.len(),
            });
        }
        Ok(self.probs(x))
    }

    /// Probability vector for pre-validated input.
    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.arch.input_dim());
        let trace = self.run_forward(x);
        softmax(&trace.logits)
    }

    /// Gradient of `log p_index(x)` with respect to all parameters.
    pub fn logprob_grad(&self, x: &[f64], index: usize) -> Result<Vec<f64>, ModelError> {
        let m = self.output_dim();
        if index >= m {
            return Err(ModelError::IndexOutOfRange { index, size: m });
        }
        if x.len() != self.arch.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.arch.input_dim(),
                got: x.len(),
            });
        }
        let trace = self.run_forward(x);
        let p = softmax(&trace.logits);
        // d log p_index / d logit_t = 1(t = index) - p_t
        let mut dlogits = p.iter().map(|pt| -pt).collect::<Vec<_>>();
        dlogits[index] += 1.0;
        let mut out = vec![0.0; self.params.len()];
        self.backprop(x, &trace, &dlogits, 1.0, &mut out);
        Ok(out)
    }

    /// Gradient of `sum_j coeffs_j * p_j(x)` with respect to all parameters.
    pub fn grad_linear_in_probs(&self, x: &[f64], coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.params.len()];
        self.accumulate_grad_linear(x, coeffs, 1.0, &mut out);
        out
    }

    /// Add `scale * grad(log p_index(x))` into `out`. Used by the
    /// maximum-likelihood classifier fits.
    pub fn accumulate_logprob_grad(&self, x: &[f64], index: usize, scale: f64, out: &mut [f64]) {
        debug_assert!(index < self.output_dim());
        let trace = self.run_forward(x);
        let p = softmax(&trace.logits);
        let mut dlogits: Vec<f64> = p.iter().map(|pt| -pt).collect();
        dlogits[index] += 1.0;
        self.backprop(x, &trace, &dlogits, scale, out);
    }

    /// Add `scale * grad(sum_j coeffs_j p_j(x))` into `out`.
    ///
    /// This is the accumulation form used by the estimators: one call per
    /// record, summing into a shared gradient buffer.
    pub fn accumulate_grad_linear(&self, x: &[f64], coeffs: &[f64], scale: f64, out: &mut [f64]) {
        debug_assert_eq!(coeffs.len(), self.output_dim());
        debug_assert_eq!(out.len(), self.params.len());
        let trace = self.run_forward(x);
        let p = softmax(&trace.logits);
        // d/d logit_t of sum_j c_j p_j = p_t (c_t - sum_j c_j p_j)
        let s: f64 = coeffs.iter().zip(&p).map(|(c, pj)| c * pj).sum();
        let dlogits: Vec<f64> = p.iter().zip(coeffs).map(|(pt, ct)| pt * (ct - s)).collect();
        self.backprop(x, &trace, &dlogits, scale, out);
    }

    // Forward pass keeping pre-activations and activations for backprop.
    fn run_forward(&self, x: &[f64]) -> ForwardTrace {
        match self.arch {
            Architecture::Linear { input, output } => {
                let (w, b) = (&self.params[..output * input], &self.params[output * input..]);
                let mut logits = vec![0.0; output];
                for t in 0..output {
                    let row = &w[t * input..(t + 1) * input];
                    logits[t] = b[t] + dot(row, x);
                }
                ForwardTrace {
                    logits,
                    layers: Vec::new(),
                }
            }
            Architecture::Mlp {
                input,
                hidden: (h1, h2),
                output,
                activation,
            } => {
                let l1 = LayerSlice::new(0, h1, input);
                let l2 = LayerSlice::new(l1.end, h2, h1);
                let l3 = LayerSlice::new(l2.end, output, h2);
                let affine = |layer: &LayerSlice, inp: &[f64]| -> (Vec<f64>, Vec<f64>) {
                    let mut z = vec![0.0; layer.rows];
                    let mut a = vec![0.0; layer.rows];
                    for r in 0..layer.rows {
                        let zr = layer.bias(&self.params, r)
                            + dot(layer.weight_row(&self.params, r), inp);
                        z[r] = zr;
                        a[r] = activation.apply(zr);
                    }
                    (z, a)
                };
                let (z1, a1) = affine(&l1, x);
                let (z2, a2) = affine(&l2, &a1);
                let mut logits = vec![0.0; output];
                for t in 0..output {
                    logits[t] = l3.bias(&self.params, t) + dot(l3.weight_row(&self.params, t), &a2);
                }
                ForwardTrace {
                    logits,
                    layers: vec![(z1, a1), (z2, a2)],
                }
            }
        }
    }

    // Accumulate scale * (d logits^T dlogits) / d params into out.
    fn backprop(&self, x: &[f64], trace: &ForwardTrace, dlogits: &[f64], scale: f64, out: &mut [f64]) {
        match self.arch {
            Architecture::Linear { input, output } => {
                for t in 0..output {
                    let g = scale * dlogits[t];
                    let row = &mut out[t * input..(t + 1) * input];
                    for (o, xi) in row.iter_mut().zip(x) {
                        *o += g * xi;
                    }
                    out[output * input + t] += g;
                }
            }
            Architecture::Mlp {
                input,
                hidden: (h1, h2),
                output,
                activation,
            } => {
                let l1 = LayerSlice::new(0, h1, input);
                let l2 = LayerSlice::new(l1.end, h2, h1);
                let l3 = LayerSlice::new(l2.end, output, h2);
                let (z1, a1) = &trace.layers[0];
                let (z2, a2) = &trace.layers[1];

                // Output layer. The chain below keeps upstream sensitivities
                // (da*, dz*) unscaled and applies `scale` only when writing
                // into the accumulator.
                let mut da2 = vec![0.0; h2];
                for t in 0..output {
                    let g = scale * dlogits[t];
                    let wrow = l3.weight_row(&self.params, t);
                    for j in 0..h2 {
                        da2[j] += dlogits[t] * wrow[j];
                    }
                    let orow = &mut out[l3.start + t * h2..l3.start + (t + 1) * h2];
                    for j in 0..h2 {
                        orow[j] += g * a2[j];
                    }
                    out[l3.start + output * h2 + t] += g;
                }

                // Hidden layer 2.
                let mut da1 = vec![0.0; h1];
                for j in 0..h2 {
                    let dz = da2[j] * activation.derivative(z2[j], a2[j]);
                    let g = scale * dz;
                    let wrow = l2.weight_row(&self.params, j);
                    let orow = &mut out[l2.start + j * h1..l2.start + (j + 1) * h1];
                    for i in 0..h1 {
                        orow[i] += g * a1[i];
                        da1[i] += dz * wrow[i];
                    }
                    out[l2.start + h2 * h1 + j] += g;
                }

                // Hidden layer 1.
                for j in 0..h1 {
                    let dz = da1[j] * activation.derivative(z1[j], a1[j]);
                    let g = scale * dz;
                    let orow = &mut out[j * input..(j + 1) * input];
                    for (o, xi) in orow.iter_mut().zip(x) {
                        *o += g * xi;
                    }
                    out[h1 * input + j] += g;
                }
            }
        }
    }

    // ── Text serialization ───────────────────────────────────────────────

    /// Self-describing text form: architecture descriptor plus the flat
    /// parameter list at full round-trip precision.
    pub fn to_text(&self) -> String {
        let mut s = String::from("softmax-model v1\n");
        match self.arch {
            Architecture::Linear { input, output } => {
                s.push_str("arch linear\n");
                s.push_str(&format!("input {input}\noutput {output}\n"));
            }
            Architecture::Mlp {
                input,
                hidden: (h1, h2),
                output,
                activation,
            } => {
                s.push_str("arch mlp\n");
                s.push_str(&format!("input {input}\nhidden {h1} {h2}\n"));
                s.push_str(&format!(
                    "activation {}\n",
                    match activation {
                        Activation::Tanh => "tanh",
                        Activation::Relu => "relu",
                    }
                ));
                s.push_str(&format!("output {output}\n"));
            }
        }
        s.push_str(&format!("params {}\n", self.params.len()));
        for p in &self.params {
            s.push_str(&format!("{p:?}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<SoftmaxModel, ModelError> {
        let parse = |s: &str| -> Result<usize, ModelError> {
            s.parse()
                .map_err(|_| ModelError::Parse(format!("bad integer: {s}")))
        };
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != "softmax-model v1" {
            return Err(ModelError::Parse(format!("unknown header: {header}")));
        }
        let mut arch_kind = None;
        let mut input = None;
        let mut hidden = None;
        let mut activation = None;
        let mut output = None;
        let mut n_params = None;
        for line in lines.by_ref() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("arch") => arch_kind = parts.next().map(str::to_string),
                Some("input") => input = Some(parse(parts.next().unwrap_or(""))?),
                Some("hidden") => {
                    hidden = Some((
                        parse(parts.next().unwrap_or(""))?,
                        parse(parts.next().unwrap_or(""))?,
                    ))
                }
                Some("activation") => {
                    activation = Some(match parts.next() {
                        Some("tanh") => Activation::Tanh,
                        Some("relu") => Activation::Relu,
                        other => {
                            return Err(ModelError::Parse(format!("bad activation: {other:?}")))
                        }
                    })
                }
                Some("output") => output = Some(parse(parts.next().unwrap_or(""))?),
                Some("params") => {
                    n_params = Some(parse(parts.next().unwrap_or(""))?);
                    break;
                }
                other => return Err(ModelError::Parse(format!("unexpected field: {other:?}"))),
            }
        }
        let missing = |f: &str| ModelError::Parse(format!("missing field: {f}"));
        let input = input.ok_or_else(|| missing("input"))?;
        let output = output.ok_or_else(|| missing("output"))?;
        let arch = match arch_kind.as_deref() {
            Some("linear") => Architecture::Linear { input, output },
            Some("mlp") => Architecture::Mlp {
                input,
                hidden: hidden.ok_or_else(|| missing("hidden"))?,
                output,
                activation: activation.ok_or_else(|| missing("activation"))?,
            },
            other => return Err(ModelError::Parse(format!("bad arch: {other:?}"))),
        };
        let n = n_params.ok_or_else(|| missing("params"))?;
        let mut params = Vec::with_capacity(n);
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            params.push(
                line.parse::<f64>()
                    .map_err(|_| ModelError::Parse(format!("bad float: {line}")))?,
            );
        }
        if params.len() != n {
            return Err(ModelError::Parse(format!(
                "expected {n} parameters, found {}",
                params.len()
            )));
        }
        SoftmaxModel::from_params(arch, params)
    }
}

struct ForwardTrace {
    logits: Vec<f64>,
    // (pre-activation, activation) per hidden layer.
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

// Offsets of one affine layer inside the flat parameter vector.
#[derive(Clone, Copy)]
struct LayerSlice {
    start: usize,
    end: usize,
    rows: usize,
    cols: usize,
}

impl LayerSlice {
    fn new(start: usize, rows: usize, cols: usize) -> LayerSlice {
        LayerSlice {
            start,
            end: start + rows * cols + rows,
            rows,
            cols,
        }
    }

    fn weight_row<'a>(&self, params: &'a [f64], row: usize) -> &'a [f64] {
        &params[self.start + row * self.cols..self.start + (row + 1) * self.cols]
    }

    fn bias(&self, params: &[f64], row: usize) -> f64 {
        params[self.start + self.rows * self.cols + row]
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ── Adam ─────────────────────────────────────────────────────────────────

/// Adam hyperparameters; the learning rate is the only one the experiments
/// vary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: step count plus first/second moment vectors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub hp: AdamParams,
}

impl AdamState {
    pub fn new(param_count: usize, hp: AdamParams) -> AdamState {
        AdamState {
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            hp,
        }
    }

    /// One bias-corrected Adam update in the gradient-ascent convention:
    /// parameters move to increase the objective.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), ModelError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(ModelError::LengthMismatch {
                a: params.len(),
                b: grads.len(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.hp.beta1;
        let b2 = self.hp.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] += self.hp.learning_rate * m_hat / (v_hat.sqrt() + self.hp.epsilon);
        }
        Ok(())
    }
}
