//! Model families, per-instance losses and their analytic gradients.
//!
//! Parameter layouts (row-major):
//! - ridge: `θ ∈ R^m`
//! - logistic: weights `C × m`, then biases `C`
//! - mlp: `W1` (`h × m`), `b1` (`h`), `W2` (`C × h`), `b2` (`C`); tanh hidden units

use serde::{Deserialize, Serialize};

use super::data::{ClientShard, Instance};
use super::ObjectiveError;
use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ModelKind {
    RidgeQuadratic,
    MultinomialLogistic,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub features: usize,
    /// Ignored for ridge.
    pub classes: usize,
    pub l2: f64,
}

/// Proximal augmentation `(λ/2)‖θ − anchor‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxConfig {
    pub lambda: f64,
    pub anchor: ParamVector,
}

impl ProxConfig {
    pub fn new(lambda: f64, anchor: ParamVector) -> Result<Self, ObjectiveError> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(ObjectiveError::Spec(format!(
                "prox lambda must be >= 0, got {lambda}"
            )));
        }
        Ok(Self { lambda, anchor })
    }
}

impl ModelSpec {
    pub fn ridge(features: usize, l2: f64) -> Result<Self, ObjectiveError> {
        Self {
            kind: ModelKind::RidgeQuadratic,
            features,
            classes: 0,
            l2,
        }
        .validated()
    }

    pub fn logistic(features: usize, classes: usize, l2: f64) -> Result<Self, ObjectiveError> {
        Self {
            kind: ModelKind::MultinomialLogistic,
            features,
            classes,
            l2,
        }
        .validated()
    }

    pub fn mlp(
        features: usize,
        hidden: usize,
        classes: usize,
        l2: f64,
    ) -> Result<Self, ObjectiveError> {
        Self {
            kind: ModelKind::Mlp { hidden },
            features,
            classes,
            l2,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self, ObjectiveError> {
        if self.features == 0 {
            return Err(ObjectiveError::Spec("features must be >= 1".into()));
        }
        if !(self.l2 >= 0.0) || !self.l2.is_finite() {
            return Err(ObjectiveError::Spec(format!(
                "l2 must be finite and >= 0, got {}",
                self.l2
            )));
        }
        match self.kind {
            ModelKind::RidgeQuadratic | ModelKind::MultinomialLogistic if self.l2 <= 0.0 => {
                return Err(ObjectiveError::Spec(
                    "convex models need l2 > 0 for strong convexity".into(),
                ))
            }
            ModelKind::Mlp { hidden: 0 } => {
                return Err(ObjectiveError::Spec("mlp needs hidden >= 1".into()))
            }
            _ => {}
        }
        if self.is_classifier() && self.classes < 2 {
            return Err(ObjectiveError::Spec(
                "classifiers need at least 2 classes".into(),
            ));
        }
        Ok(self)
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self.kind, ModelKind::RidgeQuadratic)
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        let (m, c) = (self.features, self.classes);
        match self.kind {
            ModelKind::RidgeQuadratic => m,
            ModelKind::MultinomialLogistic => c * (m + 1),
            ModelKind::Mlp { hidden: h } => h * (m + 1) + c * (h + 1),
        }
    }

    fn check(&self, params: &ParamVector) -> Result<(), ObjectiveError> {
        if params.len() != self.dim() {
            return Err(ObjectiveError::Dimension {
                expected: self.dim(),
                got: params.len(),
            });
        }
        Ok(())
    }

    fn check_instance(&self, inst: &Instance) -> Result<(), ObjectiveError> {
        if inst.features.len() != self.features {
            return Err(ObjectiveError::Dimension {
                expected: self.features,
                got: inst.features.len(),
            });
        }
        Ok(())
    }

    /// Class scores (logits) for classifiers, the scalar prediction for ridge.
    pub fn outputs(&self, params: &ParamVector, z: &[f64]) -> Vec<f64> {
        let p = params.as_slice();
        let m = self.features;
        match self.kind {
            ModelKind::RidgeQuadratic => vec![dot(p, z)],
            ModelKind::MultinomialLogistic => {
                let c = self.classes;
                let (w, b) = p.split_at(c * m);
                (0..c)
                    .map(|j| dot(&w[j * m..(j + 1) * m], z) + b[j])
                    .collect()
            }
            ModelKind::Mlp { hidden } => {
                let layout = MlpLayout::new(m, hidden, self.classes);
                let hid = layout.hidden(p, z);
                layout.logits(p, &hid)
            }
        }
    }

    pub fn predict(&self, params: &ParamVector, z: &[f64]) -> usize {
        let out = self.outputs(params, z);
        argmax(&out)
    }

    fn instance_loss(&self, params: &ParamVector, inst: &Instance) -> f64 {
        let out = self.outputs(params, &inst.features);
        match self.kind {
            ModelKind::RidgeQuadratic => 0.5 * (out[0] - inst.label).powi(2),
            _ => log_sum_exp(&out) - out[inst.class()],
        }
    }

    /// Adds this instance's loss gradient to `grad`.
    fn accumulate_gradient(&self, params: &ParamVector, inst: &Instance, grad: &mut [f64]) {
        let p = params.as_slice();
        let z = &inst.features;
        let m = self.features;
        match self.kind {
            ModelKind::RidgeQuadratic => {
                let r = dot(p, z) - inst.label;
                for (g, zi) in grad.iter_mut().zip(z) {
                    *g += r * zi;
                }
            }
            ModelKind::MultinomialLogistic => {
                let c = self.classes;
                let probs = softmax(&self.outputs(params, z));
                let (gw, gb) = grad.split_at_mut(c * m);
                for j in 0..c {
                    let e = probs[j] - if j == inst.class() { 1.0 } else { 0.0 };
                    for (g, zi) in gw[j * m..(j + 1) * m].iter_mut().zip(z) {
                        *g += e * zi;
                    }
                    gb[j] += e;
                }
            }
            ModelKind::Mlp { hidden } => {
                let l = MlpLayout::new(m, hidden, self.classes);
                let hid = l.hidden(p, z);
                let mut err = softmax(&l.logits(p, &hid));
                err[inst.class()] -= 1.0;
                let mut dpre = vec![0.0; hidden];
                for (j, e) in err.iter().enumerate() {
                    let row = l.w2 + j * hidden;
                    for i in 0..hidden {
                        grad[row + i] += e * hid[i];
                        dpre[i] += e * p[row + i];
                    }
                    grad[l.b2 + j] += e;
                }
                for i in 0..hidden {
                    let d = dpre[i] * (1.0 - hid[i] * hid[i]);
                    for (g, zi) in grad[l.w1 + i * m..l.w1 + (i + 1) * m].iter_mut().zip(z) {
                        *g += d * zi;
                    }
                    grad[l.b1 + i] += d;
                }
            }
        }
    }

    fn penalty(
        &self,
        params: &ParamVector,
        prox: Option<&ProxConfig>,
    ) -> Result<f64, ObjectiveError> {
        let mut extra = 0.5 * self.l2 * params.norm_sq();
        if let Some(prox) = prox {
            self.check(&prox.anchor)?;
            extra += 0.5 * prox.lambda * params.dist_sq(&prox.anchor);
        }
        Ok(extra)
    }
}

struct MlpLayout {
    m: usize,
    h: usize,
    c: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl MlpLayout {
    fn new(m: usize, h: usize, c: usize) -> Self {
        let w1 = 0;
        let b1 = h * m;
        let w2 = b1 + h;
        let b2 = w2 + c * h;
        Self {
            m,
            h,
            c,
            w1,
            b1,
            w2,
            b2,
        }
    }

    fn hidden(&self, p: &[f64], z: &[f64]) -> Vec<f64> {
        (0..self.h)
            .map(|i| {
                (dot(&p[self.w1 + i * self.m..self.w1 + (i + 1) * self.m], z) + p[self.b1 + i])
                    .tanh()
            })
            .collect()
    }

    fn logits(&self, p: &[f64], hid: &[f64]) -> Vec<f64> {
        (0..self.c)
            .map(|j| {
                dot(&p[self.w2 + j * self.h..self.w2 + (j + 1) * self.h], hid) + p[self.b2 + j]
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Mean loss over `batch` plus the l2 and optional proximal terms.
pub fn batch_loss(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[&Instance],
    prox: Option<&ProxConfig>,
) -> Result<f64, ObjectiveError> {
    spec.check(params)?;
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut total = 0.0;
    for inst in batch {
        spec.check_instance(inst)?;
        total += spec.instance_loss(params, inst);
    }
    Ok(total / batch.len() as f64 + spec.penalty(params, prox)?)
}

/// `f_k(θ)`: mean loss over the shard plus regularization.
pub fn local_loss(
    spec: &ModelSpec,
    params: &ParamVector,
    shard: &ClientShard,
    prox: Option<&ProxConfig>,
) -> Result<f64, ObjectiveError> {
    let batch: Vec<&Instance> = shard.instances.iter().collect();
    batch_loss(spec, params, &batch, prox)
}

/// Analytic gradient of [`batch_loss`].
pub fn local_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[&Instance],
    prox: Option<&ProxConfig>,
) -> Result<ParamVector, ObjectiveError> {
    spec.check(params)?;
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut grad = vec![0.0; spec.dim()];
    for inst in batch {
        spec.check_instance(inst)?;
        spec.accumulate_gradient(params, inst, &mut grad);
    }
    let inv = 1.0 / batch.len() as f64;
    let mut grad = ParamVector::new(grad);
    grad.scale(inv);
    grad.axpy(spec.l2, params);
    if let Some(prox) = prox {
        spec.check(&prox.anchor)?;
        if prox.lambda != 0.0 {
            grad.axpy(prox.lambda, params);
            grad.axpy(-prox.lambda, &prox.anchor);
        }
    }
    Ok(grad)
}

/// `θ − η·g`
pub fn sgd_step(
    params: &ParamVector,
    gradient: &ParamVector,
    eta: f64,
) -> Result<ParamVector, ObjectiveError> {
    if params.len() != gradient.len() {
        return Err(ObjectiveError::Dimension {
            expected: params.len(),
            got: gradient.len(),
        });
    }
    if !(eta > 0.0) {
        return Err(ObjectiveError::Spec(format!(
            "learning rate must be > 0, got {eta}"
        )));
    }
    let mut out = params.clone();
    out.axpy(-eta, gradient);
    Ok(out)
}

/// `F(θ) = (1/K) Σ_k f_k(θ)`
pub fn global_objective(
    spec: &ModelSpec,
    params: &ParamVector,
    shards: &[ClientShard],
) -> Result<f64, ObjectiveError> {
    if shards.is_empty() {
        return Err(ObjectiveError::Sizing(
            "global objective needs at least one shard".into(),
        ));
    }
    let mut total = 0.0;
    for shard in shards {
        total += local_loss(spec, params, shard, None)?;
    }
    Ok(total / shards.len() as f64)
}

/// Gradient of the global objective, averaging full-batch client gradients.
pub fn global_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    shards: &[ClientShard],
) -> Result<ParamVector, ObjectiveError> {
    let grads = shards
        .iter()
        .map(|s| {
            let batch: Vec<&Instance> = s.instances.iter().collect();
            local_gradient(spec, params, &batch, None)
        })
        .collect::<Result<Vec<_>, _>>()?;
    ParamVector::mean(grads.iter())
        .ok_or_else(|| ObjectiveError::Sizing("global gradient needs at least one shard".into()))
}

/// Fraction of instances whose arg-max prediction matches the label.
pub fn accuracy(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &[Instance],
) -> Result<f64, ObjectiveError> {
    spec.check(params)?;
    if !spec.is_classifier() {
        return Err(ObjectiveError::Spec(
            "accuracy is only defined for classifiers".into(),
        ));
    }
    if data.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let hits = data
        .iter()
        .filter(|i| spec.predict(params, &i.features) == i.class())
        .count();
    Ok(hits as f64 / data.len() as f64)
}
