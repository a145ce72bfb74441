//! Experiment drivers: accuracy curves with confidence intervals, the two
//! figure reproductions, the implicit-bias run and the diagnostics suite,
//! plus their on-disk artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::{classify, train_gd, AttentionWeights, GdTrainer, TrainSettings};
use crate::baselines::{mle_predict, projected_mle_predict, svm_predict, DEFAULT_SVM_C};
use crate::diagnostics::{
    assumption_a_check, check_concentration, check_quadratic_form_tails, snr_report, theorem2_bound, AssumptionReport,
    BoundParams, ConcentrationReport, SnrReport, TailReport,
};
use crate::error::{Error, Result};
use crate::io;
use crate::maxmargin::{
    directional_alignment, margin_report, solve_max_margin, subspace_alignment, DualSettings, DualSolution,
    MarginReport, MAX_GRAM_TASKS,
};
use crate::rng;
use crate::taskgen::{check_subspace_matches, config_subspace, generate_test_prompt, Label, MetaConfig, Prompt, Subspace, TaskFeatures};

pub const DEFAULT_M_GRID: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];
pub const DEFAULT_N_TEST: usize = 1200;
/// Task count used for max-margin analysis of larger training sets.
pub const MAXMARGIN_SUBSAMPLE: usize = 2000;
const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Transformer,
    TransformerMaxmargin,
    Mle,
    ProjectedMle,
    Svm,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Transformer, Method::TransformerMaxmargin, Method::Mle, Method::ProjectedMle, Method::Svm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Transformer => "transformer",
            Method::TransformerMaxmargin => "transformer_maxmargin",
            Method::Mle => "mle",
            Method::ProjectedMle => "projected_mle",
            Method::Svm => "svm",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: Method,
    pub m: usize,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_tasks: usize,
}

impl CurvePoint {
    /// Mean of the 0/1 outcomes with a normal-approximation 95% interval
    /// built from the standard error of the mean, clamped to `[0, 1]`.
    pub fn from_hits(method: Method, m: usize, hits: &[bool]) -> Result<Self> {
        let n = hits.len();
        if n < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 test tasks, got {n}")));
        }
        let nf = n as f64;
        let mean = hits.iter().filter(|&&h| h).count() as f64 / nf;
        let ss: f64 = hits.iter().map(|&h| (f64::from(u8::from(h)) - mean).powi(2)).sum();
        let se = (ss / (nf - 1.0)).sqrt() / nf.sqrt();
        Ok(Self {
            method,
            m,
            accuracy: mean,
            ci_low: (mean - Z_95 * se).clamp(0.0, 1.0),
            ci_high: (mean + Z_95 * se).clamp(0.0, 1.0),
            n_tasks: n,
        })
    }

    pub fn ci_width(&self) -> f64 {
        self.ci_high - self.ci_low
    }
}

/// Experiment file: every `MetaConfig` key plus `m_grid`, `k_list`,
/// `n_test`, `methods` and `checkpoints`, all optional.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub meta: MetaConfig,
    pub m_grid: Vec<usize>,
    pub k_list: Vec<usize>,
    pub n_test: usize,
    pub methods: Option<Vec<Method>>,
    pub checkpoints: Vec<usize>,
}

const EXPERIMENT_KEYS: [&str; 5] = ["m_grid", "k_list", "n_test", "methods", "checkpoints"];

impl ExperimentConfig {
    pub fn new(meta: MetaConfig) -> Self {
        Self {
            meta,
            m_grid: DEFAULT_M_GRID.to_vec(),
            k_list: Vec::new(),
            n_test: DEFAULT_N_TEST,
            methods: None,
            checkpoints: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let Value::Object(mut map) = serde_json::from_str(text)? else {
            return Err(Error::InvalidConfig("config must be a JSON object".into()));
        };
        let mut take = |key: &str| map.remove(key);
        let extra: Vec<Option<Value>> = EXPERIMENT_KEYS.iter().map(|k| take(k)).collect();
        let meta: MetaConfig = serde_json::from_value(Value::Object(map))?;
        meta.validate()?;
        let mut cfg = Self::new(meta);
        let [m_grid, k_list, n_test, methods, checkpoints]: [Option<Value>; 5] =
            extra.try_into().expect("one slot per experiment key");
        if let Some(v) = m_grid {
            cfg.m_grid = serde_json::from_value(v)?;
        }
        if let Some(v) = k_list {
            cfg.k_list = serde_json::from_value(v)?;
        }
        if let Some(v) = n_test {
            cfg.n_test = serde_json::from_value(v)?;
        }
        if let Some(v) = methods {
            cfg.methods = Some(serde_json::from_value(v)?);
        }
        if let Some(v) = checkpoints {
            cfg.checkpoints = serde_json::from_value(v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_value(&self) -> Value {
        let mut v = serde_json::to_value(&self.meta).expect("config serializes");
        let map = v.as_object_mut().expect("config is an object");
        map.insert("m_grid".into(), self.m_grid.clone().into());
        map.insert("k_list".into(), self.k_list.clone().into());
        map.insert("n_test".into(), self.n_test.into());
        if let Some(methods) = &self.methods {
            map.insert("methods".into(), serde_json::to_value(methods).expect("methods serialize"));
        }
        map.insert("checkpoints".into(), self.checkpoints.clone().into());
        v
    }

    fn methods_or(&self, default: &[Method]) -> Vec<Method> {
        self.methods.clone().unwrap_or_else(|| default.to_vec())
    }
}

impl Serialize for ExperimentConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_value().serialize(s)
    }
}

fn check_grid(m_grid: &[usize], n_test: usize) -> Result<()> {
    if m_grid.is_empty() || m_grid.contains(&0) {
        return Err(Error::InvalidGrid(format!("m_grid must be nonempty with every m >= 1, got {m_grid:?}")));
    }
    if n_test < 2 {
        return Err(Error::InvalidGrid(format!("n_test must be >= 2, got {n_test}")));
    }
    Ok(())
}

pub type Classifier<'a> = dyn Fn(&Prompt) -> Result<Label> + Sync + 'a;

/// Scores every classifier on the same `n_test` fresh prompts per `m`.
/// Points come out grouped by classifier, then in grid order.
pub fn evaluate_curves(
    classifiers: &[(Method, &Classifier)],
    config: &MetaConfig,
    subspace: &Subspace,
    m_grid: &[usize],
    n_test: usize,
) -> Result<Vec<CurvePoint>> {
    check_grid(m_grid, n_test)?;
    config.validate()?;
    check_subspace_matches(config, subspace)?;
    let mut by_m = Vec::with_capacity(m_grid.len());
    for &m in m_grid {
        let hits: Vec<Vec<bool>> = (0..n_test)
            .into_par_iter()
            .map(|i| {
                let prompt = generate_test_prompt(config, subspace, m, i)?;
                classifiers
                    .iter()
                    .map(|(_, f)| f(&prompt).map(|label| label == prompt.query_label()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        by_m.push(hits);
    }
    let mut points = Vec::with_capacity(classifiers.len() * m_grid.len());
    for (c, (method, _)) in classifiers.iter().enumerate() {
        for (hits, &m) in by_m.iter().zip(m_grid) {
            let column: Vec<bool> = hits.iter().map(|row| row[c]).collect();
            points.push(CurvePoint::from_hits(*method, m, &column)?);
        }
    }
    Ok(points)
}

pub fn accuracy_curve(
    method: Method,
    classifier: &Classifier,
    config: &MetaConfig,
    subspace: &Subspace,
    m_grid: &[usize],
    n_test: usize,
) -> Result<Vec<CurvePoint>> {
    evaluate_curves(&[(method, classifier)], config, subspace, m_grid, n_test)
}

/// `method,m,accuracy,ci_low,ci_high,n_tasks` with 17 significant digits.
pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("method,m,accuracy,ci_low,ci_high,n_tasks\n");
    for p in points {
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{}",
            p.method.name(),
            p.m,
            p.accuracy,
            p.ci_low,
            p.ci_high,
            p.n_tasks
        )
        .expect("writing to a String");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub svm_c: f64,
    pub dual: DualSettings,
    pub maxmargin_tasks: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { svm_c: DEFAULT_SVM_C, dual: DualSettings::default(), maxmargin_tasks: MAXMARGIN_SUBSAMPLE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    /// All methods at a given `m` saw the same test prompts.
    pub paired_test_pools: bool,
    pub n_test: usize,
    pub m_grid: Vec<usize>,
    pub svm_c: f64,
    pub svm_unconverged: usize,
    pub final_train_loss: Option<f64>,
    /// Tasks the max-margin problem was solved on.
    pub maxmargin_tasks: Option<usize>,
    /// True when those tasks are a subsample, making `W_MM` an approximation.
    pub maxmargin_subsampled: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub curves: Vec<CurvePoint>,
    pub margin_report: Option<MarginReport>,
    /// Frobenius cosine between `W_MM` and `P P^T`.
    pub alignment: Option<f64>,
    pub metadata: RunMetadata,
    /// Kept out of the JSON so reruns are byte-identical; see `timing.json`.
    #[serde(skip)]
    pub wall_time_seconds: f64,
    pub artifact_paths: Vec<String>,
}

/// One pipeline run together with the matrices it produced.
#[derive(Debug, Clone)]
pub struct FigureRun {
    pub result: ExperimentResult,
    pub w_trained: AttentionWeights,
    pub w_mm: Option<AttentionWeights>,
    pub dual: Option<DualSolution>,
}

/// Up to `limit` training tasks, a uniform subsample in ascending order when there are more.
fn maxmargin_tasks(feats: &TaskFeatures, seed: u64, limit: usize) -> Result<(TaskFeatures, bool)> {
    let b = feats.len();
    if b <= limit {
        return Ok((feats.clone(), false));
    }
    let mut stream = rng::stream(seed, rng::MAXMARGIN_SUBSAMPLE, 0);
    let mut picked = index::sample(&mut stream, b, limit).into_vec();
    picked.sort_unstable();
    Ok((feats.subset(&picked)?, true))
}

fn run_pipeline(exp: &ExperimentConfig, meta: &MetaConfig, methods: &[Method], opts: &RunOptions, with_maxmargin: bool) -> Result<FigureRun> {
    let started = Instant::now();
    meta.validate()?;
    check_grid(&exp.m_grid, exp.n_test)?;
    let subspace = config_subspace(meta)?;
    let feats = TaskFeatures::generate(meta, &subspace)?;
    let trace = train_gd(&feats, &meta.train)?;
    let w_trained = trace.final_w;

    let mut mm = None;
    let mut mm_meta = (None, false);
    if with_maxmargin || methods.contains(&Method::TransformerMaxmargin) {
        let limit = opts.maxmargin_tasks.min(MAX_GRAM_TASKS);
        let (sub, subsampled) = maxmargin_tasks(&feats, meta.seed, limit)?;
        let (dual, w_mm) = solve_max_margin(&sub, &opts.dual)?;
        let report = margin_report(&w_mm, &sub, &subspace, meta.r, Some(&dual), opts.dual.tol)?;
        let alignment = subspace_alignment(&w_mm, &subspace)?;
        mm_meta = (Some(sub.len()), subsampled);
        mm = Some((dual, w_mm, report, alignment));
    }

    let svm_unconverged = AtomicUsize::new(0);
    let transformer = |p: &Prompt| classify(&w_trained, p);
    let maxmargin = |p: &Prompt| match &mm {
        Some((_, w, _, _)) => classify(w, p),
        None => Err(Error::InvalidConfig("max-margin weights unavailable".into())),
    };
    let mle = |p: &Prompt| Ok(mle_predict(p));
    let projected = |p: &Prompt| projected_mle_predict(p, &subspace);
    let svm = |p: &Prompt| {
        let (label, converged) = svm_predict(p, opts.svm_c)?;
        if !converged {
            svm_unconverged.fetch_add(1, Ordering::Relaxed);
        }
        Ok(label)
    };
    let classifiers: Vec<(Method, &Classifier)> = methods
        .iter()
        .map(|&m| {
            let f: &Classifier = match m {
                Method::Transformer => &transformer,
                Method::TransformerMaxmargin => &maxmargin,
                Method::Mle => &mle,
                Method::ProjectedMle => &projected,
                Method::Svm => &svm,
            };
            (m, f)
        })
        .collect();
    let curves = evaluate_curves(&classifiers, meta, &subspace, &exp.m_grid, exp.n_test)?;

    let (dual, w_mm, report, alignment) = match mm {
        Some((d, w, r, a)) => (Some(d), Some(w), Some(r), Some(a)),
        None => (None, None, None, None),
    };
    let mut config = exp.clone();
    config.meta = meta.clone();
    let result = ExperimentResult {
        config,
        k: None,
        curves,
        margin_report: report,
        alignment,
        metadata: RunMetadata {
            paired_test_pools: true,
            n_test: exp.n_test,
            m_grid: exp.m_grid.clone(),
            svm_c: opts.svm_c,
            svm_unconverged: svm_unconverged.into_inner(),
            final_train_loss: trace.losses.last().copied(),
            maxmargin_tasks: mm_meta.0,
            maxmargin_subsampled: mm_meta.1,
        },
        wall_time_seconds: started.elapsed().as_secs_f64(),
        artifact_paths: Vec::new(),
    };
    Ok(FigureRun { result, w_trained, w_mm, dual })
}

/// Trains on `exp.meta` and scores `exp.methods` (default: the figure-1 set).
pub fn evaluate_methods(exp: &ExperimentConfig, opts: &RunOptions) -> Result<FigureRun> {
    run_pipeline(exp, &exp.meta, &exp.methods_or(&FIG1_METHODS), opts, false)
}

pub const FIG1_METHODS: [Method; 4] = [Method::Transformer, Method::Mle, Method::ProjectedMle, Method::Svm];
pub const FIG2_METHODS: [Method; 3] = [Method::Transformer, Method::Mle, Method::ProjectedMle];

/// Trains on `exp.meta`, solves the max-margin problem (on a subsample when
/// `B` is large) and scores all methods on shared test pools.
pub fn reproduce_fig1(exp: &ExperimentConfig, opts: &RunOptions) -> Result<FigureRun> {
    run_pipeline(exp, &exp.meta, &exp.methods_or(&FIG1_METHODS), opts, true)
}

/// One pipeline per `k` in `exp.k_list`, all from the same master seed.
pub fn reproduce_fig2(exp: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<FigureRun>> {
    if exp.k_list.is_empty() {
        return Err(Error::InvalidGrid("k_list must be nonempty".into()));
    }
    if let Some(&k) = exp.k_list.iter().find(|&&k| k == 0 || k > exp.meta.d) {
        return Err(Error::InvalidGrid(format!("every k must satisfy 1 <= k <= d = {}, got {k}", exp.meta.d)));
    }
    let methods = exp.methods_or(&FIG2_METHODS);
    exp.k_list
        .iter()
        .map(|&k| {
            let meta = MetaConfig { k, ..exp.meta.clone() };
            let mut run = run_pipeline(exp, &meta, &methods, opts, false)?;
            run.result.k = Some(k);
            Ok(run)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasPoint {
    pub step: usize,
    pub alignment: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasResult {
    pub config: MetaConfig,
    pub points: Vec<BiasPoint>,
    pub dual: DualSolution,
    pub margin_report: MarginReport,
    /// Last alignment is within `1e-3` of the best of the final three checkpoints.
    pub eventually_nondecreasing: bool,
    #[serde(skip)]
    pub w_trained: AttentionWeights,
    #[serde(skip)]
    pub w_mm: AttentionWeights,
}

impl BiasResult {
    pub fn final_alignment(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.alignment)
    }
}

/// Powers of ten below `steps`, then `steps` itself.
pub fn default_checkpoints(steps: usize) -> Vec<usize> {
    let mut out: Vec<usize> = std::iter::successors(Some(100usize), |c| c.checked_mul(10)).take_while(|&c| c < steps).collect();
    if steps > 0 {
        out.push(steps);
    }
    out
}

/// Runs `steps` of gradient descent on the training tasks of `config` and
/// reports the Frobenius cosine between the iterate and the max-margin
/// solution at each checkpoint.
pub fn implicit_bias_experiment(config: &MetaConfig, steps: usize, checkpoints: &[usize], dual_settings: &DualSettings) -> Result<BiasResult> {
    if steps == 0 {
        return Err(Error::ZeroMatrix);
    }
    let mut checkpoints = if checkpoints.is_empty() { default_checkpoints(steps) } else { checkpoints.to_vec() };
    checkpoints.sort_unstable();
    checkpoints.dedup();
    if checkpoints[0] == 0 || *checkpoints.last().expect("nonempty") > steps {
        return Err(Error::InvalidGrid(format!("checkpoints must lie in 1..={steps}, got {checkpoints:?}")));
    }
    config.validate()?;
    let subspace = config_subspace(config)?;
    let feats = TaskFeatures::generate(config, &subspace)?;
    let (dual, w_mm) = solve_max_margin(&feats, dual_settings).map_err(|e| match e {
        Error::Infeasible(msg) => {
            Error::Infeasible(format!("{msg}; training tasks are not separable, try a larger N or R"))
        }
        other => other,
    })?;
    let report = margin_report(&w_mm, &feats, &subspace, config.r, Some(&dual), dual_settings.tol)?;

    let settings = TrainSettings { steps, snapshot_every: 0, ..config.train.clone() };
    let mut trainer = GdTrainer::new(&feats, &settings)?;
    let mut points = Vec::with_capacity(checkpoints.len());
    for &target in &checkpoints {
        while trainer.steps_done() < target {
            trainer.step()?;
        }
        points.push(BiasPoint { step: target, alignment: directional_alignment(&trainer.weights(), &w_mm)? });
    }
    let tail = &points[points.len().saturating_sub(3)..];
    let best = tail.iter().map(|p| p.alignment).fold(f64::NEG_INFINITY, f64::max);
    let eventually_nondecreasing = points.last().expect("nonempty").alignment >= best - 1e-3;
    Ok(BiasResult {
        config: config.clone(),
        points,
        dual,
        margin_report: report,
        eventually_nondecreasing,
        w_trained: trainer.weights(),
        w_mm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagOptions {
    pub c0: f64,
    pub big_c: f64,
    pub bound_c: f64,
    pub n_samples: usize,
}

impl Default for DiagOptions {
    fn default() -> Self {
        Self { c0: 1.0, big_c: 1.0, bound_c: 1.0, n_samples: 100_000 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagReport {
    pub config: MetaConfig,
    pub snr: SnrReport,
    pub assumption: AssumptionReport,
    pub bound_params: BoundParams,
    pub theorem2_bound: f64,
    pub concentration: ConcentrationReport,
    /// Tails of quadratic forms in the trained `W`, at the test strength.
    pub tails: TailReport,
}

pub fn diagnostics_suite(config: &MetaConfig, opts: &DiagOptions) -> Result<DiagReport> {
    config.validate()?;
    let subspace = config_subspace(config)?;
    let feats = TaskFeatures::generate(config, &subspace)?;
    let concentration = check_concentration(&feats, &subspace, config, opts.c0, config.delta)?;
    let w = train_gd(&feats, &config.train)?.final_w;
    let tails = check_quadratic_form_tails(&subspace, &w, config.r_test, opts.n_samples, config.seed)?;
    let bound_params = BoundParams::from_config(config, opts.bound_c);
    Ok(DiagReport {
        config: config.clone(),
        snr: snr_report(config),
        assumption: assumption_a_check(config, opts.big_c)?,
        theorem2_bound: theorem2_bound(&bound_params)?,
        bound_params,
        concentration,
        tails,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_timing(dir: &Path, seconds: f64) -> Result<()> {
    write_json(&dir.join("timing.json"), &serde_json::json!({ "wall_time_seconds": seconds }))
}

/// `curves.csv`, `result.json`, `w_trained.bin`, `w_mm.bin` and `timing.json`.
pub fn write_fig1(dir: &Path, run: &mut FigureRun) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut names = vec!["curves.csv".to_string(), "result.json".into(), "w_trained.bin".into()];
    if run.w_mm.is_some() {
        names.push("w_mm.bin".into());
    }
    run.result.artifact_paths = names.clone();
    write_bytes(&dir.join("curves.csv"), curves_csv(&run.result.curves).as_bytes())?;
    write_json(&dir.join("result.json"), &run.result)?;
    io::write_matrix_file(&dir.join("w_trained.bin"), run.w_trained.matrix())?;
    if let Some(w) = &run.w_mm {
        io::write_matrix_file(&dir.join("w_mm.bin"), w.matrix())?;
    }
    write_timing(dir, run.result.wall_time_seconds)?;
    Ok(names.iter().map(|n| dir.join(n)).collect())
}

/// `curves_k<k>.csv` and `w_trained_k<k>.bin` per run, one `result.json`, `timing.json`.
pub fn write_fig2(dir: &Path, runs: &mut [FigureRun]) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut names = Vec::new();
    for run in runs.iter() {
        let k = run.result.k.expect("fig2 runs carry k");
        names.push(format!("curves_k{k}.csv"));
        names.push(format!("w_trained_k{k}.bin"));
    }
    names.push("result.json".into());
    for run in runs.iter_mut() {
        let k = run.result.k.expect("fig2 runs carry k");
        run.result.artifact_paths = names.clone();
        write_bytes(&dir.join(format!("curves_k{k}.csv")), curves_csv(&run.result.curves).as_bytes())?;
        io::write_matrix_file(&dir.join(format!("w_trained_k{k}.bin")), run.w_trained.matrix())?;
    }
    let results: Vec<&ExperimentResult> = runs.iter().map(|r| &r.result).collect();
    write_json(&dir.join("result.json"), &serde_json::json!({ "runs": results }))?;
    write_timing(dir, runs.iter().map(|r| r.result.wall_time_seconds).sum())?;
    Ok(names.iter().map(|n| dir.join(n)).collect())
}

/// `bias.csv` (step, alignment), `result.json`, `w_trained.bin`, `w_mm.bin`.
pub fn write_bias(dir: &Path, result: &BiasResult) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut csv = String::from("step,alignment\n");
    for p in &result.points {
        writeln!(csv, "{},{:.16e}", p.step, p.alignment).expect("writing to a String");
    }
    write_bytes(&dir.join("bias.csv"), csv.as_bytes())?;
    write_json(&dir.join("result.json"), result)?;
    io::write_matrix_file(&dir.join("w_trained.bin"), result.w_trained.matrix())?;
    io::write_matrix_file(&dir.join("w_mm.bin"), result.w_mm.matrix())?;
    Ok(["bias.csv", "result.json", "w_trained.bin", "w_mm.bin"].iter().map(|n| dir.join(n)).collect())
}
