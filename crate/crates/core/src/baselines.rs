//! Reference classifiers: per-prompt mean estimation, the same with the true
//! subspace projection applied first, and a bias-free linear SVM fitted on
//! the context alone.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::{Label, Prompt, Subspace};

pub const DEFAULT_SVM_C: f64 = 1e4;
pub const SVM_TOL: f64 = 1e-8;
pub const SVM_MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Mle,
    ProjectedMle,
    Svm,
}

/// `sign(mu_hat^T x_query)`.
pub fn mle_predict(prompt: &Prompt) -> Label {
    Label::from_sign(prompt.summary_vector().dot(prompt.query_x()))
}

/// `sign(<P^T mu_hat, P^T x_query>)`.
pub fn projected_mle_predict(prompt: &Prompt, subspace: &Subspace) -> Result<Label> {
    if subspace.ambient_dim() != prompt.dim() {
        return Err(Error::DimensionMismatch { expected: prompt.dim(), actual: subspace.ambient_dim() });
    }
    let mu = subspace.coords(&prompt.summary_vector());
    let x = subspace.coords(prompt.query_x());
    Ok(Label::from_sign(mu.dot(&x)))
}

#[derive(Debug, Clone)]
pub struct SvmFit {
    pub w: DVector<f64>,
    /// Dual multipliers, one per context example, each in `[0, C]`.
    pub alpha: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    /// Largest projected-gradient magnitude at the last iterate.
    pub max_violation: f64,
}

/// Soft-margin SVM without bias by coordinate ascent on
/// `max sum(a) - |sum a_i y_i x_i|^2 / 2` over `0 <= a_i <= C`.
///
/// Examples are swept in order, starting from `a = 0`. Stops once every
/// projected gradient is within `tol`, or after `max_sweeps`.
pub fn svm_fit(prompt: &Prompt, reg_c: f64, tol: f64, max_sweeps: usize) -> Result<SvmFit> {
    if !(reg_c > 0.0 && reg_c.is_finite()) {
        return Err(Error::InvalidParams(format!("SVM regularization must be positive, got {reg_c}")));
    }
    let ctx = prompt.context();
    let signed: Vec<DVector<f64>> = ctx.iter().map(|e| &e.x * e.y.as_f64()).collect();
    let sq: Vec<f64> = signed.iter().map(|v| v.norm_squared()).collect();
    let mut alpha = vec![0.0; ctx.len()];
    let mut w = DVector::zeros(prompt.dim());
    let mut violation = f64::INFINITY;

    for sweep in 1..=max_sweeps {
        violation = 0.0;
        for (i, v) in signed.iter().enumerate() {
            let grad = 1.0 - w.dot(v);
            let projected = if alpha[i] <= 0.0 {
                grad.max(0.0)
            } else if alpha[i] >= reg_c {
                grad.min(0.0)
            } else {
                grad
            };
            violation = f64::max(violation, projected.abs());
            if projected == 0.0 {
                continue;
            }
            // a zero example only adds a linear term, so it goes straight to the box edge
            let updated = if sq[i] > 0.0 { (alpha[i] + grad / sq[i]).clamp(0.0, reg_c) } else { reg_c };
            let delta = updated - alpha[i];
            if delta != 0.0 {
                alpha[i] = updated;
                w.axpy(delta, v, 1.0);
            }
        }
        if violation <= tol {
            return Ok(SvmFit { w, alpha, sweeps: sweep, converged: true, max_violation: violation });
        }
    }
    Ok(SvmFit { w, alpha, sweeps: max_sweeps, converged: false, max_violation: violation })
}

/// `sign(w^T x_query)` for the context SVM, plus whether its solve converged.
/// A non-converged solve still predicts from its last iterate.
pub fn svm_predict(prompt: &Prompt, reg_c: f64) -> Result<(Label, bool)> {
    let fit = svm_fit(prompt, reg_c, SVM_TOL, SVM_MAX_SWEEPS)?;
    Ok((Label::from_sign(fit.w.dot(prompt.query_x())), fit.converged))
}

pub fn baseline_predict(kind: BaselineKind, prompt: &Prompt, subspace: Option<&Subspace>, reg_c: f64) -> Result<Label> {
    match kind {
        BaselineKind::Mle => Ok(mle_predict(prompt)),
        BaselineKind::ProjectedMle => projected_mle_predict(prompt, subspace.ok_or(Error::MissingSubspace)?),
        BaselineKind::Svm => svm_predict(prompt, reg_c).map(|(label, _)| label),
    }
}

/// Fraction of prompts whose prediction equals the query label.
pub fn evaluate_baseline(kind: BaselineKind, prompts: &[Prompt], subspace: Option<&Subspace>, reg_c: f64) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::InvalidConfig("no prompts to evaluate".into()));
    }
    if kind == BaselineKind::ProjectedMle && subspace.is_none() {
        return Err(Error::MissingSubspace);
    }
    let hits = prompts
        .par_iter()
        .map(|p| baseline_predict(kind, p, subspace, reg_c).map(|label| usize::from(label == p.query_label())))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / prompts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::taskgen::{sample_prompt, sample_subspace, sample_task_mean, Example};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn prompt_from(context: &[(Vec<f64>, Label)], query: Vec<f64>, y: Label) -> Prompt {
        let d = query.len();
        let ctx = context.iter().map(|(x, y)| Example { x: DVector::from_vec(x.clone()), y: *y }).collect();
        Prompt::new(ctx, DVector::from_vec(query), y, DVector::zeros(d)).unwrap()
    }

    fn noiseless(mu: &DVector<f64>, n: usize, query_y: Label, s: &mut rng::Stream) -> Prompt {
        let ctx = (0..n)
            .map(|_| {
                let y = Label::sample(s);
                Example { x: mu * y.as_f64(), y }
            })
            .collect();
        Prompt::new(ctx, mu * query_y.as_f64(), query_y, mu.clone()).unwrap()
    }

    #[test]
    fn mle_examples() {
        let base = prompt_from(&[(vec![1.0, 2.0], Label::Pos), (vec![0.0, 1.0], Label::Neg)], vec![0.0, 0.0], Label::Pos);
        let mu = base.summary_vector();
        let at = |q: DVector<f64>| prompt_from(&[(vec![1.0, 2.0], Label::Pos), (vec![0.0, 1.0], Label::Neg)], q.as_slice().to_vec(), Label::Pos);
        assert_eq!(mle_predict(&at(mu.clone())), Label::Pos);
        assert_eq!(mle_predict(&at(-mu)), Label::Neg);
        assert_eq!(mle_predict(&base), Label::Pos);
    }

    #[test]
    fn noiseless_prompts_are_always_right() {
        let mut s = rng::stream(1, "base", 0);
        let mu = DVector::from_vec(vec![0.4, -1.0, 2.0]);
        let prompts: Vec<Prompt> = (0..50).map(|_| { let y = Label::sample(&mut s); noiseless(&mu, 5, y, &mut s) }).collect();
        for p in &prompts {
            assert_eq!(mle_predict(p), p.query_label());
        }
        assert_eq!(evaluate_baseline(BaselineKind::Mle, &prompts, None, DEFAULT_SVM_C).unwrap(), 1.0);
    }

    #[test]
    fn full_rank_projection_equals_mle() {
        let mut s = rng::stream(2, "base", 0);
        let sub = sample_subspace(4, 4, &mut s).unwrap();
        let prompts: Vec<Prompt> = (0..200)
            .map(|_| {
                let mu = sample_task_mean(&sub, 1.0, &mut s).unwrap();
                sample_prompt(&mu, 3, &mut s).unwrap()
            })
            .collect();
        for p in &prompts {
            let margin = p.summary_vector().dot(p.query_x());
            if margin.abs() > 1e-9 {
                assert_eq!(projected_mle_predict(p, &sub).unwrap(), mle_predict(p));
            }
        }
        let a = evaluate_baseline(BaselineKind::Mle, &prompts, None, 1.0).unwrap();
        let b = evaluate_baseline(BaselineKind::ProjectedMle, &prompts, Some(&sub), 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projection_removes_off_subspace_noise() {
        let mut s = rng::stream(3, "base", 0);
        let d = 6;
        let sub = sample_subspace(d, 2, &mut s).unwrap();
        let complement = DMatrix::identity(d, d) - sub.projector();
        let mut hits = 0;
        for _ in 0..100 {
            let mu = sample_task_mean(&sub, 0.5, &mut s).unwrap();
            let noisy = |y: Label, s: &mut rng::Stream| {
                let z = DVector::from_fn(d, |_, _| 3.0 * s.sample::<f64, _>(rand_distr::StandardNormal));
                Example { x: &mu * y.as_f64() + &complement * z, y }
            };
            let ctx: Vec<Example> = (0..4).map(|_| { let y = Label::sample(&mut s); noisy(y, &mut s) }).collect();
            let qy = Label::sample(&mut s);
            let q = noisy(qy, &mut s);
            let p = Prompt::new(ctx, q.x, qy, mu.clone()).unwrap();
            let clean = noiseless(&mu, 4, qy, &mut s);
            assert_eq!(projected_mle_predict(&p, &sub).unwrap(), mle_predict(&clean));
            hits += usize::from(projected_mle_predict(&p, &sub).unwrap() == qy);
        }
        assert_eq!(hits, 100);
    }

    #[test]
    fn projected_mle_requires_matching_subspace() {
        let p = prompt_from(&[(vec![1.0, 0.0], Label::Pos)], vec![1.0, 0.0], Label::Pos);
        let sub = Subspace::new(DMatrix::identity(3, 1)).unwrap();
        assert!(matches!(projected_mle_predict(&p, &sub), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(evaluate_baseline(BaselineKind::ProjectedMle, &[p], None, 1.0), Err(Error::MissingSubspace)));
    }

    #[test]
    fn single_example_svm_agrees_with_mle() {
        let mut s = rng::stream(4, "base", 0);
        for _ in 0..50 {
            let p = sample_prompt(&DVector::from_vec(vec![0.5, 0.5, -0.5]), 1, &mut s).unwrap();
            let (label, converged) = svm_predict(&p, DEFAULT_SVM_C).unwrap();
            assert!(converged);
            assert_eq!(label, mle_predict(&p));
        }
    }

    #[test]
    fn large_c_reaches_hard_margin() {
        let mut s = rng::stream(5, "base", 0);
        let p = sample_prompt(&DVector::from_vec(vec![2.0, 0.0, 1.0]), 4, &mut s).unwrap();
        let fit = svm_fit(&p, 1e6, SVM_TOL, SVM_MAX_SWEEPS).unwrap();
        assert!(fit.converged);
        for e in p.context() {
            assert!(e.y.as_f64() * fit.w.dot(&e.x) >= 1.0 - 1e-3);
        }
        assert!(fit.alpha.iter().all(|&a| (0.0..=1e6).contains(&a)));
    }

    #[test]
    fn svm_rejects_bad_regularization() {
        let p = prompt_from(&[(vec![1.0], Label::Pos)], vec![1.0], Label::Pos);
        assert!(svm_predict(&p, 0.0).is_err());
    }

    #[test]
    fn unconverged_svm_still_predicts() {
        let p = prompt_from(&[(vec![1.0, 0.0], Label::Pos), (vec![1.0, 1e-3], Label::Neg)], vec![1.0, 0.0], Label::Pos);
        let fit = svm_fit(&p, 1e6, 1e-12, 3).unwrap();
        assert!(!fit.converged && fit.sweeps == 3);
        assert!(svm_predict(&p, 1e6).is_ok());
    }

    #[test]
    fn coin_flip_labels() {
        let mut s = rng::stream(6, "base", 0);
        let prompts: Vec<Prompt> = (0..1200).map(|_| sample_prompt(&DVector::zeros(4), 8, &mut s).unwrap()).collect();
        let acc = evaluate_baseline(BaselineKind::Mle, &prompts, None, 1.0).unwrap();
        assert!((0.44..=0.56).contains(&acc), "{acc}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn decisions_ignore_common_scale(seed in any::<u64>(), c in 0.1f64..10.0) {
            let mut s = rng::stream(seed, "scale", 0);
            let sub = sample_subspace(5, 2, &mut s).unwrap();
            let mu = sample_task_mean(&sub, 1.5, &mut s).unwrap();
            let p = sample_prompt(&mu, 3, &mut s).unwrap();
            let scaled = p.map_features(|x| x * c).unwrap();
            let margin = p.summary_vector().dot(p.query_x());
            prop_assume!(margin.abs() > 1e-8);
            prop_assert_eq!(mle_predict(&p), mle_predict(&scaled));
            prop_assert_eq!(projected_mle_predict(&p, &sub).unwrap(), projected_mle_predict(&scaled, &sub).unwrap());
            // three points in five dimensions are separable, so the box stays inactive at this C
            let fit = svm_fit(&p, 1e9, SVM_TOL, SVM_MAX_SWEEPS).unwrap();
            prop_assume!(fit.w.dot(p.query_x()).abs() > 1e-6 * fit.w.norm() * p.query_x().norm());
            prop_assert_eq!(svm_predict(&p, 1e9).unwrap().0, svm_predict(&scaled, 1e9).unwrap().0);
        }

        #[test]
        fn mle_is_rotation_equivariant(seed in any::<u64>()) {
            let mut s = rng::stream(seed, "rot", 0);
            let q = sample_subspace(4, 4, &mut s).unwrap().p().clone();
            let p = sample_prompt(&DVector::from_vec(vec![1.0, 0.0, -1.0, 0.5]), 5, &mut s).unwrap();
            prop_assume!(p.summary_vector().dot(p.query_x()).abs() > 1e-9);
            let rotated = p.map_features(|x| &q * x).unwrap();
            prop_assert_eq!(mle_predict(&p), mle_predict(&rotated));
        }

        #[test]
        fn svm_multipliers_stay_in_box(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut s = rng::stream(seed, "box", 0);
            let p = sample_prompt(&DVector::from_vec(vec![0.3, 0.1]), 12, &mut s).unwrap();
            let fit = svm_fit(&p, c, SVM_TOL, 2000).unwrap();
            prop_assert!(fit.alpha.iter().all(|&a| (0.0..=c).contains(&a)));
        }

        #[test]
        fn svm_dual_objective_never_drops(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut s = rng::stream(seed, "obj", 0);
            let p = sample_prompt(&DVector::from_vec(vec![0.2, -0.1, 0.0]), 10, &mut s).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for sweeps in 1..30 {
                let fit = svm_fit(&p, c, 0.0, sweeps).unwrap();
                let obj = fit.alpha.iter().sum::<f64>() - 0.5 * fit.w.norm_squared();
                prop_assert!(obj >= prev - 1e-9 * obj.abs().max(1.0));
                prev = obj;
            }
        }
    }
}
