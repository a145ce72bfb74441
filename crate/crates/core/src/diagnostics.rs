//! Monte-Carlo checks of the concentration quantities that control
//! generalization, the closed-form risk bound, and parameter admissibility.
//!
//! Absolute constants are never known; every check takes them as inputs and
//! reports slack instead of a bare verdict where a constant appears.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::rng;
use crate::taskgen::{sample_task_mean, MetaConfig, MetaTrainSet, Subspace, TaskFeatures};

/// Cross-task checks look at no more than this many pairs.
pub const MAX_PAIRS: usize = 100_000;
const SAMPLE_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRecord {
    pub name: String,
    /// Largest `|deviation|` seen.
    pub observed_max: f64,
    pub bound_value: f64,
    pub pass_fraction: f64,
    pub n_checked: usize,
}

impl ConcentrationRecord {
    fn from_deviations(name: &str, bound_value: f64, devs: &[f64]) -> Self {
        let passed = devs.iter().filter(|&&v| v <= bound_value).count();
        Self {
            name: name.to_string(),
            observed_max: devs.iter().copied().fold(0.0, f64::max),
            bound_value,
            pass_fraction: passed as f64 / devs.len() as f64,
            n_checked: devs.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub c0: f64,
    pub delta: f64,
    pub records: Vec<ConcentrationRecord>,
}

impl ConcentrationReport {
    pub fn get(&self, name: &str) -> Option<&ConcentrationRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn min_pass_fraction(&self) -> f64 {
        self.records.iter().map(|r| r.pass_fraction).fold(1.0, f64::min)
    }
}

/// All `(tau, q)` with `tau < q` when there are at most `MAX_PAIRS` of them,
/// otherwise `MAX_PAIRS` distinct pairs drawn uniformly from the diagnostics stream.
fn task_pairs(b: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = b * b.saturating_sub(1) / 2;
    if total <= MAX_PAIRS {
        return (0..b).flat_map(|tau| ((tau + 1)..b).map(move |q| (tau, q))).collect();
    }
    // sample row-major indices into the strict upper triangle, then decode in order
    let mut stream = rng::stream(seed, rng::DIAGNOSTICS, 0);
    let mut picked = index::sample(&mut stream, total, MAX_PAIRS).into_vec();
    picked.sort_unstable();
    let mut out = Vec::with_capacity(picked.len());
    let (mut tau, mut base, mut row) = (0, 0, b - 1);
    for r in picked {
        while r >= base + row {
            base += row;
            tau += 1;
            row -= 1;
        }
        out.push((tau, tau + 1 + r - base));
    }
    out
}

fn row_dot(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    a.row(i).dot(&b.row(j))
}

/// Per-task and pairwise training-set quantities against their
/// high-probability bounds, with `L = log(B / delta)`:
///
/// | name | deviation | bound |
/// |---|---|---|
/// | `mu_hat_norm` | `\|‖mu_hat‖² - R²\|` | `c0 R L/√N + max(2d, c0 L)/N` |
/// | `query_norm` | `\|‖x‖² - d\|` | `R² + c0 (L/√d + R) L` |
/// | `mu_hat_cross` | `\|<mu_hat_q, mu_hat_tau>\|` | `c0 (R²/√k + R/√N + √d/N) L` |
/// | `query_cross` | `\|<x_tau, x_q>\|` | `c0 (R²/√k + R + √d) L` |
/// | `mu_hat_query` | `\|<mu_hat, y x> - R²\|` | `c0 ((1 + 1/√N) R + √d/√N) L` |
/// | `projected_mu_hat_query` | `\|<P^T mu_hat, P^T y x> - R²\|` | `c0 ((1 + 1/√N) R + √k/√N) L` |
/// | `mean_cross` | `\|<mu_tau, mu_q>\|` | `c0 R² L/√k` |
///
/// `config` supplies `R`, `N`, `d`, `k` and the seed of the pair sampler.
pub fn check_concentration(
    feats: &TaskFeatures,
    subspace: &Subspace,
    config: &MetaConfig,
    c0: f64,
    delta: f64,
) -> Result<ConcentrationReport> {
    if !(c0 > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParams(format!("need c0 > 0 and delta in (0, 1), got {c0} and {delta}")));
    }
    if feats.dim() != subspace.ambient_dim() {
        return Err(Error::DimensionMismatch { expected: feats.dim(), actual: subspace.ambient_dim() });
    }
    let b = feats.len();
    let (d, k) = (feats.dim() as f64, subspace.dim() as f64);
    let (r, n) = (config.r, config.n as f64);
    let r2 = r * r;
    let l = (b as f64 / delta).ln();

    let mu = feats.mu_hat();
    let x = feats.query();
    let sx = feats.signed_query();
    let pmu = mu * subspace.p();
    let psx = &sx * subspace.p();
    let means = feats.means();

    let per_task = |f: &(dyn Fn(usize) -> f64 + Sync)| (0..b).into_par_iter().map(f).collect::<Vec<_>>();
    let mut records = vec![
        ConcentrationRecord::from_deviations(
            "mu_hat_norm",
            c0 * r * l / n.sqrt() + f64::max(2.0 * d, c0 * l) / n,
            &per_task(&|t| (mu.row(t).norm_squared() - r2).abs()),
        ),
        ConcentrationRecord::from_deviations(
            "query_norm",
            r2 + c0 * (l / d.sqrt() + r) * l,
            &per_task(&|t| (x.row(t).norm_squared() - d).abs()),
        ),
        ConcentrationRecord::from_deviations(
            "mu_hat_query",
            c0 * ((1.0 + 1.0 / n.sqrt()) * r + d.sqrt() / n.sqrt()) * l,
            &per_task(&|t| (row_dot(mu, t, &sx, t) - r2).abs()),
        ),
        ConcentrationRecord::from_deviations(
            "projected_mu_hat_query",
            c0 * ((1.0 + 1.0 / n.sqrt()) * r + k.sqrt() / n.sqrt()) * l,
            &per_task(&|t| (row_dot(&pmu, t, &psx, t) - r2).abs()),
        ),
    ];

    let pairs = task_pairs(b, config.seed);
    if !pairs.is_empty() {
        let per_pair = |a: &DMatrix<f64>| pairs.par_iter().map(|&(t, q)| row_dot(a, t, a, q).abs()).collect::<Vec<_>>();
        records.push(ConcentrationRecord::from_deviations(
            "mu_hat_cross",
            c0 * (r2 / k.sqrt() + r / n.sqrt() + d.sqrt() / n) * l,
            &per_pair(mu),
        ));
        records.push(ConcentrationRecord::from_deviations(
            "query_cross",
            c0 * (r2 / k.sqrt() + r + d.sqrt()) * l,
            &per_pair(x),
        ));
        records.push(ConcentrationRecord::from_deviations("mean_cross", c0 * r2 * l / k.sqrt(), &per_pair(means)));
    }
    Ok(ConcentrationReport { c0, delta, records })
}

pub fn check_training_concentration(train: &MetaTrainSet, c0: f64, delta: f64) -> Result<ConcentrationReport> {
    check_concentration(&train.features(), train.subspace(), train.config(), c0, delta)
}

pub const TAIL_MULTIPLIERS: [f64; 3] = [1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRecord {
    pub name: String,
    /// Norm factor the thresholds are multiples of.
    pub scale: f64,
    pub thresholds: Vec<f64>,
    /// Fraction of samples with `|deviation| > threshold`.
    pub exceedance: Vec<f64>,
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub n_samples: usize,
    pub strength: f64,
    pub records: Vec<TailRecord>,
}

impl TailReport {
    pub fn all_monotone(&self) -> bool {
        self.records.iter().all(|r| r.monotone)
    }
}

/// Exceedance frequencies of three quadratic forms in fresh draws
/// `mu = P mu'` (`mu'` uniform on the radius-`strength` sphere) and
/// independent `z, z' ~ N(0, I_d)`:
///
/// * `mu_w_mu`: `mu^T W mu - (strength²/k) tr(P^T W P)`, scale `strength² ‖P^T W P‖_F / k`
/// * `mu_w_z`: `mu^T W z'`, scale `strength ‖W‖_F / √k`
/// * `z_w_z`: `z^T W z'`, scale `‖W‖_F`
///
/// Samples come in fixed blocks from the `tails` streams of `seed`.
pub fn check_quadratic_form_tails(
    subspace: &Subspace,
    w: &AttentionWeights,
    strength: f64,
    n_samples: usize,
    seed: u64,
) -> Result<TailReport> {
    if n_samples < 1000 {
        return Err(Error::InvalidParams(format!("need at least 1000 samples, got {n_samples}")));
    }
    if w.dim() != subspace.ambient_dim() {
        return Err(Error::DimensionMismatch { expected: subspace.ambient_dim(), actual: w.dim() });
    }
    let d = w.dim();
    let k = subspace.dim() as f64;
    let wm = w.matrix();
    let pwp = subspace.p().tr_mul(&(wm * subspace.p()));
    let center = strength * strength / k * pwp.trace();
    let scales = [strength * strength * pwp.norm() / k, strength * w.frobenius_norm() / k.sqrt(), w.frobenius_norm()];

    let n_chunks = n_samples.div_ceil(SAMPLE_CHUNK);
    let samples: Vec<[f64; 3]> = (0..n_chunks)
        .into_par_iter()
        .map(|c| -> Result<Vec<[f64; 3]>> {
            let mut stream = rng::stream(seed, rng::TAILS, c as u64);
            let len = SAMPLE_CHUNK.min(n_samples - c * SAMPLE_CHUNK);
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                let mu = sample_task_mean(subspace, strength, &mut stream)?;
                let z = DVector::<f64>::from_iterator(d, (0..d).map(|_| stream.sample(StandardNormal)));
                let z2 = DVector::<f64>::from_iterator(d, (0..d).map(|_| stream.sample(StandardNormal)));
                let wz2 = wm * &z2;
                out.push([mu.dot(&(wm * &mu)) - center, mu.dot(&wz2), z.dot(&wz2)]);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .concat();

    let names = ["mu_w_mu", "mu_w_z", "z_w_z"];
    let records = (0..3)
        .map(|j| {
            let thresholds: Vec<f64> = TAIL_MULTIPLIERS.iter().map(|t| t * scales[j]).collect();
            let exceedance: Vec<f64> = thresholds
                .iter()
                .map(|&t| samples.iter().filter(|s| s[j].abs() > t).count() as f64 / n_samples as f64)
                .collect();
            let monotone = exceedance.windows(2).all(|p| p[1] <= p[0]);
            TailRecord { name: names[j].to_string(), scale: scales[j], thresholds, exceedance, monotone }
        })
        .collect();
    Ok(TailReport { n_samples, strength, records })
}

/// Inputs of the closed-form risk bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub c: f64,
    pub b: f64,
    pub r: f64,
    pub r_test: f64,
    pub d: f64,
    pub k: f64,
    pub m: f64,
    pub delta: f64,
}

impl BoundParams {
    pub fn from_config(config: &MetaConfig, c: f64) -> Self {
        Self {
            c,
            b: config.b as f64,
            r: config.r,
            r_test: config.r_test,
            d: config.d as f64,
            k: config.k as f64,
            m: config.m as f64,
            delta: config.delta,
        }
    }
}

/// `6 exp(-(c / log²(B/δ)) (1 ∧ √(B R²/(d k))) (√k ∧ R̃ ∧ √(M R̃⁴/k)))`, capped at 1.
/// Underflow is floored at the smallest positive normal so the result stays in `(0, 1]`.
pub fn theorem2_bound(p: &BoundParams) -> Result<f64> {
    let vals = [p.c, p.b, p.r, p.r_test, p.d, p.k, p.m, p.delta];
    if vals.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParams(format!("bound parameters must be positive and finite: {p:?}")));
    }
    if !(p.b / p.delta > 1.0) {
        return Err(Error::InvalidParams(format!("need B/delta > 1, got {}", p.b / p.delta)));
    }
    let log = (p.b / p.delta).ln();
    let task_factor = f64::min(1.0, (p.b * p.r * p.r / (p.d * p.k)).sqrt());
    let test_factor = p.k.sqrt().min(p.r_test).min((p.m * p.r_test.powi(4) / p.k).sqrt());
    let value = 6.0 * (-(p.c / (log * log)) * task_factor * test_factor).exp();
    Ok(value.clamp(f64::MIN_POSITIVE, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub big_c: f64,
    pub log_b_over_delta: f64,
    /// `R² - C log(B/δ)`.
    pub a1_lower_slack: f64,
    /// `d / (C log²(B/δ)) - R²`.
    pub a1_upper_slack: f64,
    pub a1: bool,
    /// `d - C log⁴(B/δ)`.
    pub a2_slack: f64,
    pub a2: bool,
    /// `N - max(C d / R², 1)`.
    pub a3_slack: f64,
    pub a3: bool,
    /// `d / R²`, the context size the last condition compares `N` to.
    pub d_over_r2: f64,
}

/// `lhs <= rhs` up to rounding in the last few bits.
fn holds(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + 1e-12 * lhs.abs().max(rhs.abs())
}

pub fn assumption_a_check(config: &MetaConfig, big_c: f64) -> Result<AssumptionReport> {
    if !(big_c > 0.0) {
        return Err(Error::InvalidParams(format!("C must be positive, got {big_c}")));
    }
    let l = (config.b as f64 / config.delta).ln();
    let (d, r2, n) = (config.d as f64, config.r * config.r, config.n as f64);
    let (lo, hi) = (big_c * l, d / (big_c * l * l));
    let a2_need = big_c * l.powi(4);
    let a3_need = f64::max(big_c * d / r2, 1.0);
    Ok(AssumptionReport {
        big_c,
        log_b_over_delta: l,
        a1_lower_slack: r2 - lo,
        a1_upper_slack: hi - r2,
        a1: holds(lo, r2) && holds(r2, hi),
        a2_slack: d - a2_need,
        a2: holds(a2_need, d),
        a3_slack: n - a3_need,
        a3: holds(a3_need, n),
        d_over_r2: d / r2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    /// `R / √d`.
    pub snr_train: f64,
    /// `R̃ / √d`.
    pub snr_test: f64,
    /// `B R² / (d k)`.
    pub c_b: f64,
    /// `k / SNR²`.
    pub sufficient_tasks: f64,
    /// `1 / SNR²`.
    pub sufficient_context: f64,
}

pub fn snr_report(config: &MetaConfig) -> SnrReport {
    let d = config.d as f64;
    let snr_train = config.r / d.sqrt();
    SnrReport {
        snr_train,
        snr_test: config.r_test / d.sqrt(),
        c_b: config.b as f64 * config.r * config.r / (d * config.k as f64),
        sufficient_tasks: config.k as f64 / (snr_train * snr_train),
        sufficient_context: 1.0 / (snr_train * snr_train),
    }
}
