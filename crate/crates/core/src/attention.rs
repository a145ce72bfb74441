//! Convex linear-attention predictor `mu_hat^T W x_query`, its empirical loss
//! and gradient over a pretraining set, and the full-batch GD trainer.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::{Example, Label, Prompt, TaskFeatures};

/// Tasks per partial sum. Fixed so reductions never depend on thread count.
const CHUNK: usize = 256;

/// Exponential loss refuses margins below `-EXP_LIMIT`.
const EXP_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Logistic,
    Exponential,
}

impl LossKind {
    /// `l(z)`; `None` when the exponential loss would overflow.
    pub fn value(self, z: f64) -> Option<f64> {
        match self {
            LossKind::Logistic if z >= 0.0 => Some((-z).exp().ln_1p()),
            LossKind::Logistic => Some(-z + z.exp().ln_1p()),
            LossKind::Exponential if -z > EXP_LIMIT => None,
            LossKind::Exponential => Some((-z).exp()),
        }
    }

    /// `l'(z)`; `None` when the exponential loss would overflow.
    pub fn derivative(self, z: f64) -> Option<f64> {
        match self {
            LossKind::Logistic if z >= 0.0 => {
                let e = (-z).exp();
                Some(-e / (1.0 + e))
            }
            LossKind::Logistic => Some(-1.0 / (1.0 + z.exp())),
            LossKind::Exponential if -z > EXP_LIMIT => None,
            LossKind::Exponential => Some(-(-z).exp()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    #[default]
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub loss_kind: LossKind,
    pub step_size: f64,
    pub steps: usize,
    pub init: Init,
    /// Store `W_t` every this many steps; 0 keeps only the final iterate.
    pub snapshot_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { loss_kind: LossKind::Logistic, step_size: 0.01, steps: 300, init: Init::Zero, snapshot_every: 0 }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!("step_size must be positive, got {}", self.step_size)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// The `d x d` attention matrix `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    w: DMatrix<f64>,
}

impl AttentionWeights {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if !w.is_square() {
            return Err(Error::DimensionMismatch { expected: w.nrows(), actual: w.ncols() });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("attention weights must be finite".into()));
        }
        Ok(Self { w })
    }

    pub fn zeros(d: usize) -> Self {
        Self { w: DMatrix::zeros(d, d) }
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.w
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.w.norm()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.w * c)
    }
}

/// `(d + 1) x (n + 1)` token matrix: columns `(x_i; y_i)` then `(x_query; 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    e: DMatrix<f64>,
}

impl EmbeddingMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.e
    }

    /// Reads the labelled context back out of the first `n` columns.
    pub fn context(&self) -> Result<Vec<Example>> {
        let d = self.e.nrows() - 1;
        (0..self.e.ncols() - 1)
            .map(|i| {
                let col = self.e.column(i);
                Ok(Example { x: col.rows(0, d).into_owned(), y: Label::try_from_f64(col[d])? })
            })
            .collect()
    }

    pub fn query(&self) -> DVector<f64> {
        let d = self.e.nrows() - 1;
        self.e.column(self.e.ncols() - 1).rows(0, d).into_owned()
    }
}

/// Tokenizes a prompt; the query label is never read.
pub fn embed(prompt: &Prompt) -> EmbeddingMatrix {
    let d = prompt.dim();
    let n = prompt.context().len();
    let mut e = DMatrix::zeros(d + 1, n + 1);
    for (i, ex) in prompt.context().iter().enumerate() {
        e.view_mut((0, i), (d, 1)).copy_from(&ex.x);
        e[(d, i)] = ex.y.as_f64();
    }
    e.view_mut((0, n), (d, 1)).copy_from(prompt.query_x());
    EmbeddingMatrix { e }
}

pub fn summary_vector(prompt: &Prompt) -> DVector<f64> {
    prompt.summary_vector()
}

/// `mu_hat^T W x_query`.
pub fn predict(w: &AttentionWeights, prompt: &Prompt) -> Result<f64> {
    if prompt.dim() != w.dim() {
        return Err(Error::DimensionMismatch { expected: w.dim(), actual: prompt.dim() });
    }
    Ok(prompt.summary_vector().dot(&(w.matrix() * prompt.query_x())))
}

pub fn classify(w: &AttentionWeights, prompt: &Prompt) -> Result<Label> {
    predict(w, prompt).map(Label::from_sign)
}

fn check_dims(w: &AttentionWeights, feats: &TaskFeatures) -> Result<()> {
    if feats.dim() != w.dim() {
        return Err(Error::DimensionMismatch { expected: w.dim(), actual: feats.dim() });
    }
    Ok(())
}

fn chunks(b: usize) -> Vec<(usize, usize)> {
    (0..b).step_by(CHUNK).map(|s| (s, CHUNK.min(b - s))).collect()
}

/// `y_tau * mu_hat_tau^T W x_tau` for every task.
pub fn margins(w: &AttentionWeights, feats: &TaskFeatures) -> Result<Vec<f64>> {
    check_dims(w, feats)?;
    let d = feats.dim();
    let parts: Vec<Vec<f64>> = chunks(feats.len())
        .into_par_iter()
        .map(|(start, len)| {
            let left = feats.mu_hat().view((start, 0), (len, d)) * w.matrix();
            let x = feats.query().view((start, 0), (len, d));
            (0..len)
                .map(|i| feats.labels()[start + i] * left.row(i).dot(&x.row(i)))
                .collect()
        })
        .collect();
    Ok(parts.concat())
}

fn mean_loss(margins: &[f64], kind: LossKind) -> Result<f64> {
    let mut total = 0.0;
    for (task, &m) in margins.iter().enumerate() {
        total += kind.value(m).ok_or(Error::Overflow { task, margin: m })?;
    }
    Ok(total / margins.len() as f64)
}

/// `(1/B) sum_tau c_tau * mu_hat_tau x_tau^T`, summed chunk by chunk in task order.
fn weighted_outer_sum(feats: &TaskFeatures, coef: &[f64]) -> DMatrix<f64> {
    let d = feats.dim();
    let partials: Vec<DMatrix<f64>> = chunks(feats.len())
        .into_par_iter()
        .map(|(start, len)| {
            let mut scaled = feats.query().view((start, 0), (len, d)).into_owned();
            for i in 0..len {
                scaled.row_mut(i).scale_mut(coef[start + i]);
            }
            feats.mu_hat().view((start, 0), (len, d)).tr_mul(&scaled)
        })
        .collect();
    let mut total = DMatrix::zeros(d, d);
    for p in &partials {
        total += p;
    }
    total
}

pub fn empirical_loss(w: &AttentionWeights, feats: &TaskFeatures, kind: LossKind) -> Result<f64> {
    mean_loss(&margins(w, feats)?, kind)
}

fn loss_and_gradient(w: &AttentionWeights, feats: &TaskFeatures, kind: LossKind) -> Result<(f64, DMatrix<f64>)> {
    let m = margins(w, feats)?;
    let loss = mean_loss(&m, kind)?;
    let b = feats.len() as f64;
    let coef = m
        .iter()
        .zip(feats.labels())
        .enumerate()
        .map(|(task, (&z, &y))| {
            kind.derivative(z).map(|g| g * y / b).ok_or(Error::Overflow { task, margin: z })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, weighted_outer_sum(feats, &coef)))
}

/// `(1/B) sum_tau l'(margin_tau) y_tau mu_hat_tau x_tau^T`.
pub fn loss_gradient(w: &AttentionWeights, feats: &TaskFeatures, kind: LossKind) -> Result<DMatrix<f64>> {
    loss_and_gradient(w, feats, kind).map(|(_, g)| g)
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub final_w: AttentionWeights,
    /// Loss before each update.
    pub losses: Vec<f64>,
    /// `(t, W_t)` where `W_t` is the iterate after `t` updates.
    pub snapshots: Vec<(usize, AttentionWeights)>,
}

/// Stepwise full-batch gradient descent from `W = 0`.
pub struct GdTrainer<'a> {
    feats: &'a TaskFeatures,
    settings: TrainSettings,
    w: DMatrix<f64>,
    steps_done: usize,
}

impl<'a> GdTrainer<'a> {
    pub fn new(feats: &'a TaskFeatures, settings: &TrainSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self { feats, settings: settings.clone(), w: DMatrix::zeros(feats.dim(), feats.dim()), steps_done: 0 })
    }

    /// Applies one update and returns the loss at the iterate before it.
    pub fn step(&mut self) -> Result<f64> {
        let current = AttentionWeights { w: std::mem::take(&mut self.w) };
        let result = loss_and_gradient(&current, self.feats, self.settings.loss_kind);
        self.w = current.w;
        let (loss, grad) = result?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step: self.steps_done });
        }
        self.w -= grad * self.settings.step_size;
        self.steps_done += 1;
        Ok(loss)
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn weights(&self) -> AttentionWeights {
        AttentionWeights { w: self.w.clone() }
    }
}

pub fn train_gd(feats: &TaskFeatures, settings: &TrainSettings) -> Result<TrainTrace> {
    let mut trainer = GdTrainer::new(feats, settings)?;
    let mut losses = Vec::with_capacity(settings.steps);
    let mut snapshots = Vec::new();
    for _ in 0..settings.steps {
        losses.push(trainer.step()?);
        let t = trainer.steps_done();
        if settings.snapshot_every > 0 && t % settings.snapshot_every == 0 {
            snapshots.push((t, trainer.weights()));
        }
    }
    Ok(TrainTrace { final_w: trainer.weights(), losses, snapshots })
}
