//! Seeded generation of shared-subspace Gaussian mixture tasks.
//!
//! Each task draws a mean `mu = P mu'` with `mu'` uniform on the radius-`R`
//! sphere of `R^k`, then labelled examples `x = y mu + z` with
//! `y ~ Unif{-1, +1}` and `z ~ N(0, I_d)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::TrainSettings;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// All scalar problem parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub d: usize,
    pub k: usize,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "R_test")]
    pub r_test: f64,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub delta: f64,
    pub seed: u64,
    #[serde(default)]
    pub train: TrainSettings,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d == 0 || self.k == 0 || self.k > self.d {
            return bad(format!("need 1 <= k <= d, got d={} k={}", self.d, self.k));
        }
        if !(self.r > 0.0 && self.r.is_finite()) || !(self.r_test > 0.0 && self.r_test.is_finite()) {
            return bad(format!("signal strengths must be positive, got R={} R_test={}", self.r, self.r_test));
        }
        if self.b == 0 || self.n == 0 || self.m == 0 {
            return bad(format!("counts must be >= 1, got B={} N={} M={}", self.b, self.n, self.m));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: MetaConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Column-orthonormal `d x k` matrix spanning the shared task-mean subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    p: DMatrix<f64>,
}

impl Subspace {
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        let (d, k) = p.shape();
        if k == 0 || k > d {
            return Err(Error::InvalidDimension(format!("subspace basis must be d x k with 1 <= k <= d, got {d}x{k}")));
        }
        let gram = p.tr_mul(&p);
        let dev = (gram - DMatrix::<f64>::identity(k, k)).amax();
        if dev > 1e-10 {
            return Err(Error::InvalidDimension(format!("columns are not orthonormal (max deviation {dev:e})")));
        }
        Ok(Self { p })
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn ambient_dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn dim(&self) -> usize {
        self.p.ncols()
    }

    /// `P P^T`.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.p * self.p.transpose()
    }

    /// `P^T v`, the coordinates of `v` in the subspace basis.
    pub fn coords(&self, v: &DVector<f64>) -> DVector<f64> {
        self.p.tr_mul(v)
    }

    /// `||(I - P P^T) v||`.
    pub fn residual_norm(&self, v: &DVector<f64>) -> f64 {
        (v - &self.p * self.coords(v)).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "-1")]
    Neg,
    #[serde(rename = "+1")]
    Pos,
}

impl Label {
    /// Sign with the convention `sign(0) = +1`.
    pub fn from_sign(value: f64) -> Self {
        if value >= 0.0 {
            Label::Pos
        } else {
            Label::Neg
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Label::Pos => 1.0,
            Label::Neg => -1.0,
        }
    }

    pub fn try_from_f64(value: f64) -> Result<Self> {
        if value == 1.0 {
            Ok(Label::Pos)
        } else if value == -1.0 {
            Ok(Label::Neg)
        } else {
            Err(Error::Format(format!("label must be +1 or -1, got {value}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        if rng.random::<bool>() {
            Label::Pos
        } else {
            Label::Neg
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: DVector<f64>,
    pub y: Label,
}

/// One task: labelled context, a query point and its withheld label.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    context: Vec<Example>,
    query_x: DVector<f64>,
    query_y: Label,
    mu: DVector<f64>,
}

impl Prompt {
    pub fn new(context: Vec<Example>, query_x: DVector<f64>, query_y: Label, mu: DVector<f64>) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::InvalidConfig("prompt context must be nonempty".into()));
        }
        let d = query_x.len();
        for v in context.iter().map(|e| &e.x).chain([&mu]) {
            if v.len() != d {
                return Err(Error::DimensionMismatch { expected: d, actual: v.len() });
            }
        }
        if context.iter().any(|e| e.x.iter().any(|v| !v.is_finite())) || query_x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("prompt features must be finite".into()));
        }
        Ok(Self { context, query_x, query_y, mu })
    }

    pub fn context(&self) -> &[Example] {
        &self.context
    }

    pub fn query_x(&self) -> &DVector<f64> {
        &self.query_x
    }

    /// Ground-truth query label. Models never see it; use it to score.
    pub fn query_label(&self) -> Label {
        self.query_y
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn dim(&self) -> usize {
        self.query_x.len()
    }

    /// `(1/n) sum_i y_i x_i` over the context.
    pub fn summary_vector(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim());
        for ex in &self.context {
            acc.axpy(ex.y.as_f64(), &ex.x, 1.0);
        }
        acc / self.context.len() as f64
    }

    /// Same prompt with every feature vector (context and query) mapped by `f`.
    pub fn map_features(&self, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> Result<Self> {
        let context = self.context.iter().map(|e| Example { x: f(&e.x), y: e.y }).collect();
        Prompt::new(context, f(&self.query_x), self.query_y, f(&self.mu))
    }
}

/// Pretraining set: `B` prompts plus the subspace and config they came from.
#[derive(Debug, Clone)]
pub struct MetaTrainSet {
    prompts: Vec<Prompt>,
    subspace: Subspace,
    config: MetaConfig,
}

impl MetaTrainSet {
    pub fn new(prompts: Vec<Prompt>, subspace: Subspace, config: MetaConfig) -> Result<Self> {
        config.validate()?;
        check_subspace_matches(&config, &subspace)?;
        if prompts.len() != config.b {
            return Err(Error::InvalidConfig(format!("expected {} prompts, got {}", config.b, prompts.len())));
        }
        for (tau, p) in prompts.iter().enumerate() {
            if p.dim() != config.d {
                return Err(Error::DimensionMismatch { expected: config.d, actual: p.dim() });
            }
            let scale = p.mu().norm().max(1.0);
            if subspace.residual_norm(p.mu()) > 1e-8 * scale {
                return Err(Error::InvalidConfig(format!("task {tau}: mean is not in the subspace")));
            }
        }
        Ok(Self { prompts, subspace, config })
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn subspace(&self) -> &Subspace {
        &self.subspace
    }

    pub fn config(&self) -> &MetaConfig {
        &self.config
    }

    pub fn features(&self) -> TaskFeatures {
        TaskFeatures::from_prompts(&self.prompts).expect("train set prompts share one dimension")
    }
}

/// Per-task sufficient statistics for training and max-margin analysis:
/// `mu_hat`, query `x`, query `y` and the true mean, one row per task.
///
/// This is `2d + 1` numbers per task for the model plus `d` for diagnostics;
/// raw context examples are dropped after `mu_hat` is formed.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskFeatures {
    mu_hat: DMatrix<f64>,
    query: DMatrix<f64>,
    labels: Vec<f64>,
    means: DMatrix<f64>,
}

impl TaskFeatures {
    pub fn from_parts(mu_hat: DMatrix<f64>, query: DMatrix<f64>, labels: Vec<f64>, means: DMatrix<f64>) -> Result<Self> {
        let (b, d) = mu_hat.shape();
        if b == 0 || d == 0 {
            return Err(Error::InvalidDimension("need at least one task and one feature".into()));
        }
        for shape in [query.shape(), means.shape()] {
            if shape != (b, d) {
                return Err(Error::DimensionMismatch { expected: b * d, actual: shape.0 * shape.1 });
            }
        }
        if labels.len() != b {
            return Err(Error::DimensionMismatch { expected: b, actual: labels.len() });
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidConfig("labels must be +1 or -1".into()));
        }
        Ok(Self { mu_hat, query, labels, means })
    }

    pub fn from_prompts(prompts: &[Prompt]) -> Result<Self> {
        let rows: Vec<_> = prompts
            .iter()
            .map(|p| (p.summary_vector(), p.query_x().clone(), p.query_label().as_f64(), p.mu().clone()))
            .collect();
        Self::from_rows(rows)
    }

    fn from_rows(rows: Vec<(DVector<f64>, DVector<f64>, f64, DVector<f64>)>) -> Result<Self> {
        let b = rows.len();
        let d = rows.first().map_or(0, |r| r.0.len());
        let mut mu_hat = DMatrix::zeros(b, d);
        let mut query = DMatrix::zeros(b, d);
        let mut means = DMatrix::zeros(b, d);
        let mut labels = Vec::with_capacity(b);
        for (tau, (mh, x, y, mu)) in rows.into_iter().enumerate() {
            if mh.len() != d {
                return Err(Error::DimensionMismatch { expected: d, actual: mh.len() });
            }
            mu_hat.set_row(tau, &mh.transpose());
            query.set_row(tau, &x.transpose());
            means.set_row(tau, &mu.transpose());
            labels.push(y);
        }
        Self::from_parts(mu_hat, query, labels, means)
    }

    /// Generates the training tasks of `config` without keeping raw prompts.
    /// Produces exactly the features of `generate_training_set(..).features()`.
    pub fn generate(config: &MetaConfig, subspace: &Subspace) -> Result<Self> {
        config.validate()?;
        check_subspace_matches(config, subspace)?;
        let rows = (0..config.b)
            .into_par_iter()
            .map(|tau| {
                let p = generate_task(config, subspace, tau)?;
                Ok((p.summary_vector(), p.query_x, p.query_y.as_f64(), p.mu))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mu_hat.ncols()
    }

    /// Rows are tasks.
    pub fn mu_hat(&self) -> &DMatrix<f64> {
        &self.mu_hat
    }

    /// Rows are query points.
    pub fn query(&self) -> &DMatrix<f64> {
        &self.query
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Rows are the true task means.
    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    /// Rows `y_tau x_tau`.
    pub fn signed_query(&self) -> DMatrix<f64> {
        let mut out = self.query.clone();
        for (tau, &y) in self.labels.iter().enumerate() {
            out.row_mut(tau).scale_mut(y);
        }
        out
    }

    /// Keeps only the listed tasks, in the given order.
    pub fn subset(&self, tasks: &[usize]) -> Result<Self> {
        let pick = |m: &DMatrix<f64>| m.select_rows(tasks.iter());
        Self::from_parts(
            pick(&self.mu_hat),
            pick(&self.query),
            tasks.iter().map(|&t| self.labels[t]).collect(),
            pick(&self.means),
        )
    }
}

pub(crate) fn check_subspace_matches(config: &MetaConfig, subspace: &Subspace) -> Result<()> {
    if subspace.ambient_dim() != config.d || subspace.dim() != config.k {
        return Err(Error::InvalidConfig(format!(
            "subspace is {}x{} but config has d={} k={}",
            subspace.ambient_dim(),
            subspace.dim(),
            config.d,
            config.k
        )));
    }
    Ok(())
}

/// Orthonormalizes a `d x k` standard Gaussian matrix by QR, flipping column
/// signs so the triangular factor has a nonnegative diagonal.
pub fn sample_subspace(d: usize, k: usize, stream: &mut Stream) -> Result<Subspace> {
    if d == 0 || k == 0 || k > d {
        return Err(Error::InvalidDimension(format!("need 1 <= k <= d, got d={d} k={k}")));
    }
    let g = DMatrix::<f64>::from_iterator(d, k, (0..d * k).map(|_| stream.sample(StandardNormal)));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..k {
        let rjj = r[(j, j)];
        if rjj.abs() < 1e-12 {
            return Err(Error::DegenerateSample(format!("gaussian matrix is rank deficient at column {j}")));
        }
        if rjj < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Subspace::new(q)
}

/// `P mu'` with `mu'` uniform on the sphere of radius `strength` in `R^k`.
pub fn sample_task_mean(subspace: &Subspace, strength: f64, stream: &mut Stream) -> Result<DVector<f64>> {
    if !(strength > 0.0 && strength.is_finite()) {
        return Err(Error::InvalidConfig(format!("signal strength must be positive, got {strength}")));
    }
    let k = subspace.dim();
    for _ in 0..=8 {
        let g = DVector::<f64>::from_iterator(k, (0..k).map(|_| stream.sample(StandardNormal)));
        let norm = g.norm();
        if norm >= 1e-30 {
            return Ok(subspace.p() * (g * (strength / norm)));
        }
    }
    Err(Error::DegenerateSample("normal draw collapsed to zero nine times".into()))
}

/// Draws `n_context + 1` labelled pairs around `mu`; the last is the query.
pub fn sample_prompt(mu: &DVector<f64>, n_context: usize, stream: &mut Stream) -> Result<Prompt> {
    if n_context == 0 {
        return Err(Error::InvalidConfig("n_context must be >= 1".into()));
    }
    let d = mu.len();
    let mut draw = || {
        let y = Label::sample(stream);
        let z = DVector::<f64>::from_iterator(d, (0..d).map(|_| stream.sample(StandardNormal)));
        Example { x: mu * y.as_f64() + z, y }
    };
    let context: Vec<Example> = (0..n_context).map(|_| draw()).collect();
    let query = draw();
    Prompt::new(context, query.x, query.y, mu.clone())
}

/// Training task `tau`, drawn from its own stream `(seed, "train", tau)`.
pub fn generate_task(config: &MetaConfig, subspace: &Subspace, tau: usize) -> Result<Prompt> {
    let mut stream = rng::stream(config.seed, rng::TRAIN, tau as u64);
    let mu = sample_task_mean(subspace, config.r, &mut stream)?;
    sample_prompt(&mu, config.n, &mut stream)
}

pub fn generate_training_set(config: &MetaConfig, subspace: &Subspace) -> Result<MetaTrainSet> {
    config.validate()?;
    check_subspace_matches(config, subspace)?;
    let prompts = (0..config.b)
        .into_par_iter()
        .map(|tau| generate_task(config, subspace, tau))
        .collect::<Result<Vec<_>>>()?;
    MetaTrainSet::new(prompts, subspace.clone(), config.clone())
}

/// Test prompt `index` with `m_context` examples at strength `R_test`, from
/// stream `(seed, "test/m=<m>", index)`, independent of the training streams.
pub fn generate_test_prompt(config: &MetaConfig, subspace: &Subspace, m_context: usize, index: usize) -> Result<Prompt> {
    if m_context == 0 {
        return Err(Error::InvalidConfig("m_context must be >= 1".into()));
    }
    let mut stream = rng::stream(config.seed, &rng::test_tag(m_context), index as u64);
    let mu = sample_task_mean(subspace, config.r_test, &mut stream)?;
    sample_prompt(&mu, m_context, &mut stream)
}

pub fn generate_test_prompts(config: &MetaConfig, subspace: &Subspace, n_tasks: usize, m_context: usize) -> Result<Vec<Prompt>> {
    config.validate()?;
    check_subspace_matches(config, subspace)?;
    if n_tasks == 0 || m_context == 0 {
        return Err(Error::InvalidConfig(format!("need n_tasks >= 1 and m_context >= 1, got {n_tasks} and {m_context}")));
    }
    (0..n_tasks)
        .into_par_iter()
        .map(|i| generate_test_prompt(config, subspace, m_context, i))
        .collect()
}

/// Subspace of `config`, from stream `(seed, "subspace", 0)`.
pub fn config_subspace(config: &MetaConfig) -> Result<Subspace> {
    sample_subspace(config.d, config.k, &mut rng::stream(config.seed, rng::SUBSPACE, 0))
}
