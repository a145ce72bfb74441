//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::train_gd;
use crate::baselines::DEFAULT_SVM_C;
use crate::error::{Error, Result};
use crate::harness::{
    diagnostics_suite, evaluate_methods, implicit_bias_experiment, reproduce_fig1, reproduce_fig2, write_bias,
    write_fig1, write_fig2, write_json, CurvePoint, DiagOptions, ExperimentConfig, Method, RunOptions,
    MAXMARGIN_SUBSAMPLE,
};
use crate::io;
use crate::maxmargin::{margin_report, solve_max_margin, DualSettings};
use crate::taskgen::{config_subspace, generate_training_set, TaskFeatures};

#[derive(Debug, Parser)]
#[command(name = "subspace-icl", version, about = "In-context learning lab for linear attention on shared-subspace Gaussian mixtures")]
struct Cli {
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// SVM regularization.
    #[arg(long, global = true, default_value_t = DEFAULT_SVM_C)]
    svm_c: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Copy)]
struct DualArgs {
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e12)]
    lambda_cap: f64,
}

impl DualArgs {
    fn settings(self) -> DualSettings {
        DualSettings { tol: self.tol, max_iter: self.max_iter, lambda_cap: self.lambda_cap }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the training set to dataset.bin.
    Gen,
    /// Train by gradient descent; writes w_trained.bin and trace.json.
    Train,
    /// Solve for the max-margin W; writes w_mm.bin, dual.json, margin_report.json.
    Maxmargin(DualArgs),
    /// Accuracy curves for the chosen methods.
    Eval {
        /// Comma-separated: transformer, transformer_maxmargin, mle, projected_mle, svm.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[command(flatten)]
        dual: DualArgs,
    },
    /// Accuracy curves of all methods plus the max-margin solution.
    Fig1(DualArgs),
    /// Accuracy curves for each k in the config's k_list.
    Fig2,
    /// Alignment between gradient descent iterates and the max-margin solution.
    Bias {
        /// Training steps (default: the config's train.steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Comma-separated steps at which to measure alignment.
        #[arg(long, value_delimiter = ',')]
        checkpoints: Vec<usize>,
        #[command(flatten)]
        dual: DualArgs,
    },
    /// Concentration, tail, bound and assumption checks.
    Diag {
        #[arg(long, default_value_t = 1.0)]
        c0: f64,
        #[arg(long, default_value_t = 1.0)]
        big_c: f64,
        #[arg(long, default_value_t = 1.0)]
        bound_c: f64,
        #[arg(long, default_value_t = 100_000)]
        n_samples: usize,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on bad input, 2 on numerical failure.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("cannot start {n} threads: {e}")))?;
            pool.install(|| dispatch(&cli))
        }
        None => dispatch(&cli),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().ok_or_else(|| Error::InvalidConfig("--config <path> is required".into()))?;
    if !path.is_file() {
        return Err(Error::InvalidConfig(format!("config file not found: {}", path.display())));
    }
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        cfg.meta.seed = seed;
    }
    Ok(cfg)
}

fn run_options(cli: &Cli, dual: Option<DualArgs>) -> Result<RunOptions> {
    if !(cli.svm_c > 0.0 && cli.svm_c.is_finite()) {
        return Err(Error::InvalidParams(format!("--svm-c must be positive, got {}", cli.svm_c)));
    }
    Ok(RunOptions {
        svm_c: cli.svm_c,
        dual: dual.map_or_else(DualSettings::default, DualArgs::settings),
        maxmargin_tasks: MAXMARGIN_SUBSAMPLE,
    })
}

fn print_curves(curves: &[CurvePoint]) {
    println!("{:<22} {:>5} {:>9} {:>9} {:>9}", "method", "m", "accuracy", "ci_low", "ci_high");
    for p in curves {
        println!("{:<22} {:>5} {:>9.4} {:>9.4} {:>9.4}", p.method.name(), p.m, p.accuracy, p.ci_low, p.ci_high);
    }
}

fn announce(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    Ok(&cli.out)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let meta = &cfg.meta;
    match &cli.command {
        Command::Gen => {
            let train = generate_training_set(meta, &config_subspace(meta)?)?;
            let path = out_dir(cli)?.join("dataset.bin");
            io::write_dataset_file(&path, &train)?;
            announce(&[path]);
        }
        Command::Train => {
            let feats = TaskFeatures::generate(meta, &config_subspace(meta)?)?;
            let trace = train_gd(&feats, &meta.train)?;
            let dir = out_dir(cli)?;
            let mut snapshots = Vec::new();
            for (step, w) in &trace.snapshots {
                let name = format!("w_step{step}.bin");
                io::write_matrix_file(&dir.join(&name), w.matrix())?;
                snapshots.push(serde_json::json!({ "step": step, "path": name }));
            }
            io::write_matrix_file(&dir.join("w_trained.bin"), trace.final_w.matrix())?;
            let summary = serde_json::json!({
                "losses": trace.losses,
                "snapshots": snapshots,
                "final_frobenius_norm": trace.final_w.frobenius_norm(),
            });
            write_json(&dir.join("trace.json"), &summary)?;
            let mut csv = String::from("step,loss\n");
            for (step, loss) in trace.losses.iter().enumerate() {
                csv.push_str(&format!("{step},{loss:.16e}\n"));
            }
            std::fs::write(dir.join("losses.csv"), csv).map_err(|e| Error::io(dir.join("losses.csv"), e))?;
            if let Some(loss) = trace.losses.last() {
                println!("steps {}  last loss {loss:.6e}  |W|_F {:.6e}", trace.losses.len(), trace.final_w.frobenius_norm());
            }
            announce(&[dir.join("w_trained.bin"), dir.join("trace.json"), dir.join("losses.csv")]);
        }
        Command::Maxmargin(dual) => {
            let subspace = config_subspace(meta)?;
            let feats = TaskFeatures::generate(meta, &subspace)?;
            let settings = dual.settings();
            let (solution, w) = solve_max_margin(&feats, &settings)?;
            let report = margin_report(&w, &feats, &subspace, meta.r, Some(&solution), settings.tol)?;
            let dir = out_dir(cli)?;
            io::write_matrix_file(&dir.join("w_mm.bin"), w.matrix())?;
            write_json(&dir.join("dual.json"), &solution)?;
            write_json(&dir.join("margin_report.json"), &report)?;
            println!(
                "sweeps {}  min margin {:.6}  |W|_F {:.6e}  tr(P'WP) {:.6e}  sum lambda {:.6e}",
                solution.iterations,
                report.min_margin,
                report.frob_norm,
                report.trace_pwp,
                solution.lambda_sum()
            );
            announce(&[dir.join("w_mm.bin"), dir.join("dual.json"), dir.join("margin_report.json")]);
        }
        Command::Eval { methods, dual } => {
            let mut cfg = cfg.clone();
            if !methods.is_empty() {
                cfg.methods = Some(methods.iter().map(|m| m.parse::<Method>()).collect::<Result<_>>()?);
            }
            let mut run = evaluate_methods(&cfg, &run_options(cli, Some(*dual))?)?;
            print_curves(&run.result.curves);
            announce(&write_fig1(out_dir(cli)?, &mut run)?);
        }
        Command::Fig1(dual) => {
            let mut run = reproduce_fig1(&cfg, &run_options(cli, Some(*dual))?)?;
            print_curves(&run.result.curves);
            if let Some(a) = run.result.alignment {
                println!("cos(W_MM, PP') = {a:.4}");
            }
            announce(&write_fig1(out_dir(cli)?, &mut run)?);
        }
        Command::Fig2 => {
            let mut runs = reproduce_fig2(&cfg, &run_options(cli, None)?)?;
            for run in &runs {
                println!("k = {}", run.result.k.unwrap_or_default());
                print_curves(&run.result.curves);
            }
            announce(&write_fig2(out_dir(cli)?, &mut runs)?);
        }
        Command::Bias { steps, checkpoints, dual } => {
            let steps = steps.unwrap_or(meta.train.steps);
            let checkpoints = if checkpoints.is_empty() { cfg.checkpoints.clone() } else { checkpoints.clone() };
            let result = implicit_bias_experiment(meta, steps, &checkpoints, &dual.settings())?;
            println!("{:>10} {:>12}", "step", "alignment");
            for p in &result.points {
                println!("{:>10} {:>12.6}", p.step, p.alignment);
            }
            announce(&write_bias(out_dir(cli)?, &result)?);
        }
        Command::Diag { c0, big_c, bound_c, n_samples } => {
            let opts = DiagOptions { c0: *c0, big_c: *big_c, bound_c: *bound_c, n_samples: *n_samples };
            let report = diagnostics_suite(meta, &opts)?;
            println!("SNR train {:.4}  test {:.4}  c_B {:.4}", report.snr.snr_train, report.snr.snr_test, report.snr.c_b);
            println!(
                "A1 {} (slack {:.3e} / {:.3e})  A2 {} (slack {:.3e})  A3 {} (slack {:.3e})",
                report.assumption.a1,
                report.assumption.a1_lower_slack,
                report.assumption.a1_upper_slack,
                report.assumption.a2,
                report.assumption.a2_slack,
                report.assumption.a3,
                report.assumption.a3_slack
            );
            println!("risk bound {:.6e}", report.theorem2_bound);
            println!("{:<24} {:>12} {:>12} {:>8} {:>8}", "quantity", "observed", "bound", "pass", "n");
            for r in &report.concentration.records {
                println!(
                    "{:<24} {:>12.4e} {:>12.4e} {:>8.4} {:>8}",
                    r.name, r.observed_max, r.bound_value, r.pass_fraction, r.n_checked
                );
            }
            for t in &report.tails.records {
                let ex: Vec<String> = t.exceedance.iter().map(|e| format!("{e:.5}")).collect();
                println!("{:<24} scale {:.4e}  exceedance at 1/2/4x: {}", t.name, t.scale, ex.join(" "));
            }
            let path = out_dir(cli)?.join("diagnostics.json");
            write_json(&path, &report)?;
            announce(&[path]);
        }
    }
    Ok(())
}
