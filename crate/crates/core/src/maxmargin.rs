//! Minimum-Frobenius-norm `W` with every training margin at least 1.
//!
//! The constraint for task `tau` is `<F_tau, W> >= 1` with the rank-1 feature
//! `F_tau = y_tau mu_hat_tau x_tau^T`. The primal lives in `d^2` variables but
//! the dual `max sum(lambda) - lambda^T K lambda / 2, lambda >= 0` lives in
//! `B`, with `K_{tau q} = <mu_hat_tau, mu_hat_q> <y_tau x_tau, y_q x_q>`.
//! The solution is recovered as `W = sum_tau lambda_tau F_tau`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::attention::{margins, AttentionWeights};
use crate::error::{Error, Result};
use crate::taskgen::{Subspace, TaskFeatures};

/// Largest task count for which the dense Gram matrix is formed.
pub const MAX_GRAM_TASKS: usize = 5000;

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    k: DMatrix<f64>,
}

impl GramMatrix {
    pub fn new(k: DMatrix<f64>) -> Result<Self> {
        if !k.is_square() || k.nrows() == 0 {
            return Err(Error::InvalidDimension(format!("Gram matrix must be square and nonempty, got {:?}", k.shape())));
        }
        let scale = k.amax().max(f64::MIN_POSITIVE);
        if (&k - k.transpose()).amax() > 1e-10 * scale {
            return Err(Error::InvalidParams("Gram matrix is not symmetric".into()));
        }
        Ok(Self { k })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn len(&self) -> usize {
        self.k.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    /// `(smallest, largest)` eigenvalue.
    pub fn eigen_range(&self) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.k.clone()).eigenvalues;
        (eig.min(), eig.max())
    }

    /// Smallest eigenvalue at least `-rel_tol * largest`.
    pub fn is_psd(&self, rel_tol: f64) -> bool {
        let (lo, hi) = self.eigen_range();
        lo >= -rel_tol * hi.abs()
    }
}

pub fn gram_matrix(feats: &TaskFeatures) -> Result<GramMatrix> {
    let b = feats.len();
    if b > MAX_GRAM_TASKS {
        return Err(Error::TooLarge(format!(
            "{b} tasks exceed the dense Gram limit of {MAX_GRAM_TASKS}; subsample tasks for max-margin analysis"
        )));
    }
    let mu = feats.mu_hat();
    let sx = feats.signed_query();
    let mut k = mu * mu.transpose();
    k.component_mul_assign(&(&sx * sx.transpose()));
    // mirror the upper triangle so K is exactly symmetric
    for j in 0..b {
        for i in (j + 1)..b {
            k[(i, j)] = k[(j, i)];
        }
    }
    for tau in 0..b {
        let v = k[(tau, tau)];
        if !(v > 1e-20) {
            return Err(Error::DegenerateTask { task: tau, value: v });
        }
    }
    GramMatrix::new(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub lambda_cap: f64,
}

impl Default for DualSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 1_000_000, lambda_cap: 1e12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub lambda: Vec<f64>,
    /// Completed sweeps.
    pub iterations: usize,
    /// `max_tau (1 - (K lambda)_tau)`.
    pub max_violation: f64,
    /// `max_tau lambda_tau |(K lambda)_tau - 1|`.
    pub complementarity: f64,
    pub converged: bool,
    pub dual_objective: f64,
}

impl DualSolution {
    pub fn lambda_sum(&self) -> f64 {
        self.lambda.iter().sum()
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda.iter().copied().fold(0.0, f64::max)
    }
}

fn certificates(lambda: &[f64], g: &[f64]) -> (f64, f64) {
    let viol = g.iter().map(|gi| 1.0 - gi).fold(f64::NEG_INFINITY, f64::max);
    let comp = lambda.iter().zip(g).map(|(l, gi)| l * (gi - 1.0).abs()).fold(0.0, f64::max);
    (viol, comp)
}

fn passes(viol: f64, comp: f64, lambda_max: f64, tol: f64) -> bool {
    viol <= tol && comp <= tol * lambda_max.max(1.0)
}

/// Cyclic nonnegative coordinate ascent on the dual, sweeping tasks in
/// ascending order from `lambda = 0`.
///
/// Reports `Infeasible` once `max lambda` exceeds `lambda_cap`, or once the
/// weak-duality lower bound `(sum lambda)^2 / lambda^T K lambda` on
/// `||W_MM||_F^2` does; at the optimum `sum lambda = ||W_MM||_F^2`, so both
/// tests cap the same quantity.
pub fn solve_dual(gram: &GramMatrix, settings: &DualSettings) -> Result<DualSolution> {
    let DualSettings { tol, max_iter, lambda_cap } = *settings;
    if !(tol > 0.0) || !(lambda_cap > 0.0) {
        return Err(Error::InvalidParams(format!("need tol > 0 and lambda_cap > 0, got {tol} and {lambda_cap}")));
    }
    let k = gram.matrix();
    let b = gram.len();
    let mut lambda = vec![0.0; b];
    let mut g = vec![0.0; b];
    let mut objective = 0.0_f64;
    let mut viol = 1.0;

    for sweep in 1..=max_iter {
        for tau in 0..b {
            let ktt = k[(tau, tau)];
            let updated = (lambda[tau] + (1.0 - g[tau]) / ktt).max(0.0);
            let delta = updated - lambda[tau];
            if delta != 0.0 {
                lambda[tau] = updated;
                for (gi, kq) in g.iter_mut().zip(k.column(tau).iter()) {
                    *gi += delta * kq;
                }
            }
        }

        let sum: f64 = lambda.iter().sum();
        let quad: f64 = lambda.iter().zip(&g).map(|(l, gi)| l * gi).sum();
        let next = sum - 0.5 * quad;
        debug_assert!(
            next >= objective - 1e-9 * objective.abs().max(1.0),
            "dual objective decreased at sweep {sweep}: {objective} -> {next}"
        );
        objective = next;

        let lambda_max = lambda.iter().copied().fold(0.0, f64::max);
        if lambda_max > lambda_cap {
            return Err(Error::Infeasible(format!("multiplier exceeded cap {lambda_cap:e} at sweep {sweep}")));
        }
        if sum > 0.0 && (quad <= 0.0 || sum * sum / quad > lambda_cap) {
            return Err(Error::Infeasible(format!(
                "any separating W needs squared norm above {lambda_cap:e} (sweep {sweep})"
            )));
        }

        let (v, comp) = certificates(&lambda, &g);
        viol = v;
        if passes(v, comp, lambda_max, tol) {
            // confirm against a fresh K lambda, free of accumulated rounding
            let exact = k * nalgebra::DVector::from_column_slice(&lambda);
            g.copy_from_slice(exact.as_slice());
            let (v, comp) = certificates(&lambda, &g);
            viol = v;
            if passes(v, comp, lambda_max, tol) {
                let quad: f64 = lambda.iter().zip(&g).map(|(l, gi)| l * gi).sum();
                return Ok(DualSolution {
                    lambda,
                    iterations: sweep,
                    max_violation: v,
                    complementarity: comp,
                    converged: true,
                    dual_objective: sum - 0.5 * quad,
                });
            }
        }
    }
    Err(Error::NotConverged { iterations: max_iter, max_violation: viol })
}

/// `W = sum_tau lambda_tau y_tau mu_hat_tau x_tau^T`, accumulated in task order.
pub fn assemble_w(solution: &DualSolution, feats: &TaskFeatures) -> Result<AttentionWeights> {
    if !solution.converged {
        return Err(Error::NotConverged { iterations: solution.iterations, max_violation: solution.max_violation });
    }
    if solution.lambda.len() != feats.len() {
        return Err(Error::DimensionMismatch { expected: feats.len(), actual: solution.lambda.len() });
    }
    let d = feats.dim();
    let mut w = DMatrix::zeros(d, d);
    for (tau, &l) in solution.lambda.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        let mu = feats.mu_hat().row(tau).transpose();
        let x = feats.query().row(tau).transpose();
        w.ger(l * feats.labels()[tau], &mu, &x, 1.0);
    }
    AttentionWeights::new(w)
}

/// Gram, dual solve and assembly in one call.
pub fn solve_max_margin(feats: &TaskFeatures, settings: &DualSettings) -> Result<(DualSolution, AttentionWeights)> {
    let gram = gram_matrix(feats)?;
    let solution = solve_dual(&gram, settings)?;
    let w = assemble_w(&solution, feats)?;
    Ok((solution, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub min_margin: f64,
    pub violating_tasks: Vec<usize>,
    pub frob_norm: f64,
    /// `tr(P^T W P)`.
    pub trace_pwp: f64,
    /// `||P^T W P||_F`.
    pub frob_pwp: f64,
    pub lambda_sum: Option<f64>,
    /// `k / R^2`, the trace of `P P^T / R^2`.
    pub projection_trace_reference: f64,
    /// `sqrt(k) / R^2`, the Frobenius norm of `P P^T / R^2`.
    pub projection_frob_reference: f64,
    /// `tr(P^T W P) / (R^2 sum(lambda) / 2)`; at least 1 on a good run.
    pub trace_over_lambda_bound: Option<f64>,
}

pub fn margin_report(
    w: &AttentionWeights,
    feats: &TaskFeatures,
    subspace: &Subspace,
    strength: f64,
    solution: Option<&DualSolution>,
    tol: f64,
) -> Result<MarginReport> {
    if subspace.ambient_dim() != w.dim() {
        return Err(Error::DimensionMismatch { expected: w.dim(), actual: subspace.ambient_dim() });
    }
    let m = margins(w, feats)?;
    let min_margin = m.iter().copied().fold(f64::INFINITY, f64::min);
    let violating_tasks = m.iter().enumerate().filter(|(_, &v)| v < 1.0 - tol).map(|(t, _)| t).collect();
    let p = subspace.p();
    let pwp = p.tr_mul(&(w.matrix() * p));
    let k = subspace.dim() as f64;
    let r2 = strength * strength;
    let lambda_sum = solution.map(DualSolution::lambda_sum);
    Ok(MarginReport {
        min_margin,
        violating_tasks,
        frob_norm: w.frobenius_norm(),
        trace_pwp: pwp.trace(),
        frob_pwp: pwp.norm(),
        lambda_sum,
        projection_trace_reference: k / r2,
        projection_frob_reference: k.sqrt() / r2,
        trace_over_lambda_bound: lambda_sum.map(|s| pwp.trace() / (0.5 * r2 * s)),
    })
}

fn frobenius_cosine(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch { expected: a.len(), actual: b.len() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `<A, B>_F / (||A||_F ||B||_F)`.
pub fn directional_alignment(a: &AttentionWeights, b: &AttentionWeights) -> Result<f64> {
    frobenius_cosine(a.matrix(), b.matrix())
}

/// Frobenius cosine between `W` and `P P^T`.
pub fn subspace_alignment(w: &AttentionWeights, subspace: &Subspace) -> Result<f64> {
    frobenius_cosine(w.matrix(), &subspace.projector())
}

/// A feasible point of the max-margin problem, rescaled to margin exactly 1.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub u: AttentionWeights,
    /// Minimum margin of the construction before rescaling.
    pub raw_min_margin: f64,
}

impl Certificate {
    fn from_raw(raw: DMatrix<f64>, feats: &TaskFeatures) -> Result<Self> {
        let raw = AttentionWeights::new(raw)?;
        let raw_min_margin = margins(&raw, feats)?.into_iter().fold(f64::INFINITY, f64::min);
        if !(raw_min_margin > 0.0) {
            return Err(Error::Infeasible(format!("construction does not separate (min margin {raw_min_margin:e})")));
        }
        Ok(Self { u: raw.scaled(1.0 / raw_min_margin)?, raw_min_margin })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.u.frobenius_norm()
    }
}

/// `P P^T / min_tau margin_tau(P P^T)`.
pub fn projection_certificate(feats: &TaskFeatures, subspace: &Subspace) -> Result<Certificate> {
    Certificate::from_raw(subspace.projector(), feats)
}

/// `theta * sum_q y_q mu_hat_q x_q^T`, rescaled by its minimum margin.
pub fn task_sum_certificate(feats: &TaskFeatures, theta: f64) -> Result<Certificate> {
    let raw = feats.mu_hat().tr_mul(&feats.signed_query()) * theta;
    Certificate::from_raw(raw, feats)
}

/// `3 / (R^2 d)`.
pub fn default_theta(strength: f64, d: usize) -> f64 {
    3.0 / (strength * strength * d as f64)
}
