//! `concept-align`: generate toy datasets, fit and evaluate alignment
//! estimators, run grids and sweeps, and Monte Carlo check the recovery
//! guarantees.
//!
//! Exit status is 0 on full success, 2 when some grid cells (or a theory
//! event) failed, and 1 on config, usage or I/O errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use concept_align::bench::{
    evaluate, fit_prepared, percentile, prepare, resolve_lambda, run_experiment, sweep, verify_theory, with_jobs,
    write_csv, BenchError, ExperimentConfig, FittedModel, ResultRow, RunOptions, SweepAxis, TheoryConfig,
    TheoryReport,
};
use concept_align::glasso::SolverOptions;
use concept_align::synthgen::{generate, ToyDataset};

#[derive(Parser)]
#[command(name = "concept-align", version, about = "Concept alignment benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Seed list: comma-separated integers and half-open ranges, e.g. `0..10,42`.
#[derive(Clone, Debug)]
struct Seeds(Vec<u64>);

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let mut out = vec![];
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.parse().map_err(|_| format!("bad range start in {part:?}"))?;
            let b: u64 = b.parse().map_err(|_| format!("bad range end in {part:?}"))?;
            if b <= a {
                return Err(format!("empty seed range {part:?}"));
            }
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| format!("bad seed {part:?}"))?);
        }
    }
    if out.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(Seeds(out))
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seeds, e.g. `0..10` or `1,4,9`.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<Seeds>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write one dataset per seed to `<out>/seed_<s>/`.
    Generate(Common),
    /// Fit every estimator and λ on generated datasets; writes
    /// `<out>/seed_<s>/est<k>_lam<l>.json`.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate saved models on the test splits; writes `<out>/evaluation.csv`.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `fit`.
        #[arg(long)]
        models: PathBuf,
    },
    /// Full grid in one go: results.csv, best.csv and a resumable manifest.
    Run {
        #[command(flatten)]
        common: Common,
        /// Recompute cells already recorded in the manifest.
        #[arg(long)]
        no_resume: bool,
    },
    /// Vary one of lambda, dim, rho or n; writes `<out>/sweep_<axis>.csv`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        no_resume: bool,
    },
    /// Monte Carlo check of the error bound and recovery probabilities.
    VerifyTheory {
        /// Theory config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        /// Overrides the config's trial count.
        #[arg(long)]
        trials: Option<usize>,
    },
}

/// Successful run; `failed` counts cells that errored.
struct Done {
    failed: usize,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&common.config).with_context(|| format!("reading {}", common.config.display()))?;
    let mut cfg = ExperimentConfig::from_toml(&text).with_context(|| format!("parsing {}", common.config.display()))?;
    if let Some(Seeds(s)) = &common.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(dir: &Option<PathBuf>) -> Result<&Path> {
    dir.as_deref().ok_or_else(|| anyhow!("no output directory: pass --out or set output_dir"))
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

fn model_file(root: &Path, seed: u64, est: usize, lam: usize) -> PathBuf {
    seed_dir(root, seed).join(format!("est{est}_lam{lam}.json"))
}

fn cmd_generate(common: &Common) -> Result<Done> {
    let cfg = load_config(common)?;
    let root = out_dir(&cfg.output_dir)?.to_path_buf();
    let mut failed = 0;
    for &seed in &cfg.seeds {
        let dir = seed_dir(&root, seed);
        match generate(&cfg.toy_for_seed(seed)).and_then(|ds| ds.save(&dir)) {
            Ok(()) => println!("seed {seed}: {}", dir.display()),
            Err(e) => {
                log::error!("seed {seed}: {e}");
                failed += 1;
            }
        }
    }
    Ok(Done { failed })
}

fn cmd_fit(common: &Common, data: &Path) -> Result<Done> {
    let cfg = load_config(common)?;
    let root = out_dir(&cfg.output_dir)?.to_path_buf();
    let solver = SolverOptions::default();
    let failed = with_jobs(common.jobs, || -> Result<usize> {
        let mut failed = 0;
        for &seed in &cfg.seeds {
            let ds = match ToyDataset::load(&seed_dir(data, seed)) {
                Ok(ds) => ds,
                Err(e) => {
                    log::error!("seed {seed}: {e}");
                    failed += cfg.estimators.len() * cfg.lambda_grid.len();
                    continue;
                }
            };
            fs::create_dir_all(seed_dir(&root, seed))?;
            for (k, est) in cfg.estimators.iter().enumerate() {
                let prep = match prepare(&ds, est) {
                    Ok(p) => p,
                    Err(e) => {
                        log::error!("seed {seed}, {}: {e}", est.label());
                        failed += cfg.lambda_grid.len();
                        continue;
                    }
                };
                for (l, &value) in cfg.lambda_grid.iter().enumerate() {
                    let fitted = resolve_lambda(&cfg, &ds, k, value).and_then(|lambda| fit_prepared(&prep, &ds, lambda, &solver));
                    match fitted {
                        Ok(f) => {
                            let path = model_file(&root, seed, k, l);
                            fs::write(&path, serde_json::to_string(&f)?)?;
                            println!(
                                "seed {seed} {} lambda={:.4e}: permutation {:?}",
                                est.label(),
                                f.lambda,
                                f.model.permutation.as_slice()
                            );
                        }
                        Err(e) => {
                            log::error!("seed {seed}, {}, lambda #{l}: {e}", est.label());
                            failed += 1;
                        }
                    }
                }
            }
        }
        Ok(failed)
    })??;
    Ok(Done { failed })
}

fn evaluate_one(cfg: &ExperimentConfig, ds: &ToyDataset, path: &Path, seed: u64) -> Result<(f64, concept_align::metrics::MetricReport), BenchError> {
    let fitted: FittedModel = serde_json::from_str(&fs::read_to_string(path)?)?;
    let report = evaluate(ds, &fitted, cfg.impurity(), seed)?;
    Ok((fitted.lambda, report))
}

fn cmd_evaluate(common: &Common, data: &Path, models: &Path) -> Result<Done> {
    let cfg = load_config(common)?;
    let root = out_dir(&cfg.output_dir)?.to_path_buf();
    let rows = with_jobs(common.jobs, || {
        let mut rows = vec![];
        for &seed in &cfg.seeds {
            let ds = ToyDataset::load(&seed_dir(data, seed)).map_err(BenchError::from);
            for (k, est) in cfg.estimators.iter().enumerate() {
                for l in 0..cfg.lambda_grid.len() {
                    let result = ds
                        .as_ref()
                        .map_err(|e| BenchError::Config(format!("dataset for seed {seed}: {e}")))
                        .and_then(|ds| evaluate_one(&cfg, ds, &model_file(models, seed, k, l), seed));
                    rows.push(match result {
                        Ok((lambda, report)) => ResultRow::from_report(est.label(), k, seed, Some(l), lambda, &report),
                        Err(e) => ResultRow::failure(est.label(), k, seed, Some(l), &e),
                    });
                }
            }
        }
        rows
    })?;
    fs::create_dir_all(&root)?;
    let path = root.join("evaluation.csv");
    write_csv(&path, &rows, &[])?;
    print!("{}", mpe_table(&rows));
    println!("wrote {}", path.display());
    Ok(Done {
        failed: rows.iter().filter(|r| !r.is_ok()).count(),
    })
}

/// Median and quartiles of MPE per estimator label.
fn mpe_table(rows: &[ResultRow]) -> String {
    let mut labels: Vec<&str> = vec![];
    for r in rows {
        if !labels.contains(&r.estimator.as_str()) {
            labels.push(&r.estimator);
        }
    }
    let mut out = String::new();
    for label in labels {
        let mpes: Vec<f64> = rows.iter().filter(|r| r.estimator == label).filter_map(|r| r.mpe).collect();
        let _ = writeln!(
            out,
            "{label:<28} mpe p25={:.4} p50={:.4} p75={:.4} ({} rows)",
            percentile(&mpes, 25.0),
            percentile(&mpes, 50.0),
            percentile(&mpes, 75.0),
            mpes.len()
        );
    }
    out
}

fn cmd_run(common: &Common, no_resume: bool) -> Result<Done> {
    let cfg = load_config(common)?;
    let opts = RunOptions {
        jobs: common.jobs,
        resume: !no_resume,
        ..RunOptions::default()
    };
    let out = run_experiment(&cfg, &opts)?;
    println!("best lambda per seed:");
    print!("{}", mpe_table(&out.best));
    if let Some(dir) = &cfg.output_dir {
        println!("wrote {}", dir.join("results.csv").display());
    }
    Ok(Done { failed: out.failures })
}

fn cmd_sweep(common: &Common, axis: &str, values: &[f64], no_resume: bool) -> Result<Done> {
    let cfg = load_config(common)?;
    let Some(axis) = SweepAxis::parse(axis) else {
        bail!(BenchError::Config(format!("unknown sweep axis {axis:?}; expected lambda, dim, rho or n")));
    };
    let opts = RunOptions {
        jobs: common.jobs,
        resume: !no_resume,
        ..RunOptions::default()
    };
    let out = sweep(&cfg, axis, values, &opts)?;
    for v in values {
        let at: Vec<ResultRow> = out.rows.iter().filter(|r| r.axis_value == Some(*v)).cloned().collect();
        println!("{}={v}", axis.name());
        print!("{}", mpe_table(&at));
    }
    Ok(Done { failed: out.failures })
}

fn print_theory(r: &TheoryReport) {
    println!(
        "{} accepted trials ({} designs, {} rejected for incoherence), lambda={:.4e}, bound c*lambda*sqrt(p)={:.4e}",
        r.completed_trials, r.attempts, r.rejected, r.lambda, r.error_bound
    );
    for (name, e) in [
        ("error bound", &r.bound_event),
        ("argmax", &r.argmax_event),
        ("full recovery", &r.recovery_event),
    ] {
        println!(
            "{:<14} {} freq={:.4} se={:.4} threshold={:.4} ({}/{})",
            name,
            if e.pass { "PASS" } else { "FAIL" },
            e.frequency,
            e.se,
            e.threshold,
            e.hits,
            e.total
        );
    }
    println!("largest error / bound: {:.4}", r.max_error_ratio);
}

fn cmd_verify_theory(config: &Path, out: &Option<PathBuf>, jobs: Option<usize>, trials: Option<usize>) -> Result<Done> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg = TheoryConfig::from_toml(&text).with_context(|| format!("parsing {}", config.display()))?;
    if let Some(t) = trials {
        cfg.trials = t;
    }
    if out.is_some() {
        cfg.output_dir = out.clone();
    }
    let report = verify_theory(&cfg, jobs)?;
    print_theory(&report);
    Ok(Done {
        failed: usize::from(!report.passed()),
    })
}

fn dispatch(cli: &Cli) -> Result<Done> {
    match &cli.command {
        Command::Generate(c) => cmd_generate(c),
        Command::Fit { common, data } => cmd_fit(common, data),
        Command::Evaluate { common, data, models } => cmd_evaluate(common, data, models),
        Command::Run { common, no_resume } => cmd_run(common, *no_resume),
        Command::Sweep {
            common,
            axis,
            values,
            no_resume,
        } => cmd_sweep(common, axis, values, *no_resume),
        Command::VerifyTheory {
            config,
            out,
            jobs,
            trials,
        } => cmd_verify_theory(config, out, *jobs, *trials),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Usage errors count as config errors; 2 is reserved for partial runs.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(Done { failed: 0 }) => ExitCode::SUCCESS,
        Ok(Done { failed }) => {
            eprintln!("{failed} cell(s) failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
