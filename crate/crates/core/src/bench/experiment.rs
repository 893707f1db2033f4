//! Grid runs over seeds × estimators × λ, with a resumable JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::pipeline::{baseline_permutation, evaluate, fit_prepared, prepare};
use super::{BenchError, ExperimentConfig, LambdaMode};
use crate::data::format_f64;
use crate::glasso::{lambda0, SolverOptions};
use crate::metrics::{self, MetricReport};
use crate::par_map;
use crate::synthgen::{generate, ToyDataset};

/// Column order of every results CSV.
pub const CSV_COLUMNS: [&str; 12] = [
    "axis_value",
    "estimator",
    "seed",
    "lambda",
    "mpe",
    "r2",
    "concept_acc",
    "label_acc",
    "ois",
    "nis",
    "time_ms",
    "status",
];

const MANIFEST_FORMAT: u32 = 1;

/// One grid cell. Metric fields are empty when the cell failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub axis_value: Option<f64>,
    pub estimator: String,
    /// Position in `estimators`, then `baselines` after them.
    pub estimator_index: usize,
    pub seed: u64,
    pub lambda_index: Option<usize>,
    /// Effective λ after [`LambdaMode`] resolution.
    pub lambda: Option<f64>,
    pub mpe: Option<f64>,
    pub r2: Option<f64>,
    pub concept_acc: Option<f64>,
    pub label_acc: Option<f64>,
    pub ois: Option<f64>,
    pub nis: Option<f64>,
    pub time_ms: f64,
    pub status: String,
}

impl ResultRow {
    fn new(estimator: String, estimator_index: usize, seed: u64, lambda_index: Option<usize>) -> Self {
        Self {
            axis_value: None,
            estimator,
            estimator_index,
            seed,
            lambda_index,
            lambda: None,
            mpe: None,
            r2: None,
            concept_acc: None,
            label_acc: None,
            ois: None,
            nis: None,
            time_ms: 0.0,
            status: "ok".into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn key(&self) -> (u64, usize, Option<usize>) {
        (self.seed, self.estimator_index, self.lambda_index)
    }

    /// Row for a fitted model evaluated outside [`run_experiment`].
    pub fn from_report(
        estimator: String,
        estimator_index: usize,
        seed: u64,
        lambda_index: Option<usize>,
        lambda: f64,
        report: &MetricReport,
    ) -> Self {
        let mut row = Self::new(estimator, estimator_index, seed, lambda_index);
        row.lambda = Some(lambda);
        row.fill(report);
        row.time_ms = report.wall_time_ms.values().sum();
        row
    }

    fn fill(&mut self, report: &MetricReport) {
        self.mpe = Some(report.mpe);
        self.r2 = Some(report.r2_diag).filter(|v| v.is_finite());
        self.concept_acc = report.concept_acc;
        self.label_acc = report.label_acc;
        self.ois = report.ois;
        self.nis = report.nis;
    }

    /// Row for a cell that errored.
    pub fn failure(estimator: String, estimator_index: usize, seed: u64, lambda_index: Option<usize>, err: &BenchError) -> Self {
        Self::new(estimator, estimator_index, seed, lambda_index).failed(err)
    }

    fn failed(mut self, err: &BenchError) -> Self {
        self.status = format!("error: {err}");
        self
    }

    fn record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
        vec![
            opt(self.axis_value),
            self.estimator.clone(),
            self.seed.to_string(),
            opt(self.lambda),
            opt(self.mpe),
            opt(self.r2),
            opt(self.concept_acc),
            opt(self.label_acc),
            opt(self.ois),
            opt(self.nis),
            format!("{:.3}", self.time_ms),
            self.status.clone(),
        ]
    }
}

/// Percentile summary of one `(axis_value, estimator)` group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub axis_value: Option<f64>,
    pub estimator: String,
    /// `p25`, `p50` or `p75`.
    pub stat: String,
    pub mpe: f64,
    pub r2: f64,
    pub time_ms: f64,
}

impl SummaryRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.axis_value.map(format_f64).unwrap_or_default(),
            self.estimator.clone(),
            self.stat.clone(),
            String::new(),
            format_f64(self.mpe),
            format_f64(self.r2),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            format!("{:.3}", self.time_ms),
            "summary".into(),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
    /// Reuse completed cells from an existing manifest.
    pub resume: bool,
    pub solver: SolverOptions,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: None,
            resume: true,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    /// Best-λ row per `(seed, estimator)` by MPE then R², plus baseline rows.
    pub best: Vec<ResultRow>,
    pub failures: usize,
}

/// Runs `f` on a pool with `jobs` workers.
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, BenchError> {
    #[cfg(feature = "parallel")]
    if let Some(j) = jobs {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| BenchError::Config(format!("thread pool: {e}")))?;
        return Ok(pool.install(f));
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
    Ok(f())
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    config: serde_json::Value,
    rows: Vec<ResultRow>,
}

fn config_fingerprint(config: &ExperimentConfig) -> Result<serde_json::Value, BenchError> {
    let mut c = config.clone();
    c.output_dir = None;
    Ok(serde_json::to_value(c)?)
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), BenchError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(tmp, path)?;
    Ok(())
}

struct ManifestWriter {
    path: Option<PathBuf>,
    manifest: Manifest,
}

impl ManifestWriter {
    fn open(config: &ExperimentConfig, resume: bool) -> Result<Self, BenchError> {
        let fingerprint = config_fingerprint(config)?;
        let path = config.output_dir.as_ref().map(|d| d.join("manifest.json"));
        let mut rows = vec![];
        if let Some(p) = &path {
            fs::create_dir_all(p.parent().expect("joined path"))?;
            if resume && p.exists() {
                let old: Manifest = serde_json::from_str(&fs::read_to_string(p)?)?;
                if old.format != MANIFEST_FORMAT || old.config != fingerprint {
                    return Err(BenchError::ManifestMismatch(p.clone()));
                }
                rows = old.rows;
            }
        }
        Ok(Self {
            path,
            manifest: Manifest {
                format: MANIFEST_FORMAT,
                config: fingerprint,
                rows,
            },
        })
    }

    fn append(&mut self, rows: &[ResultRow]) -> Result<(), BenchError> {
        self.manifest.rows.extend_from_slice(rows);
        if let Some(p) = &self.path {
            write_atomic(p, serde_json::to_string(&self.manifest)?.as_bytes())?;
        }
        Ok(())
    }
}

/// Writes rows and optional summary rows with the fixed [`CSV_COLUMNS`] header.
pub fn write_csv(path: &Path, rows: &[ResultRow], summary: &[SummaryRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    for s in summary {
        w.write_record(s.record())?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Effective λ for grid value `value` of estimator `est_index` on `ds`.
pub fn resolve_lambda(config: &ExperimentConfig, ds: &ToyDataset, est_index: usize, value: f64) -> Result<f64, BenchError> {
    match config.lambda_mode {
        LambdaMode::Absolute => Ok(value),
        LambdaMode::Lambda0Multiple { delta } => {
            let n = ds.m_train.nrows();
            let p = config.estimators[est_index].group_size(n);
            Ok(value * lambda0(config.toy.sigma, n, p, ds.m_train.ncols(), delta)?)
        }
    }
}

enum Unit {
    Estimator { seed: u64, index: usize, lambdas: Vec<usize> },
    Baseline { seed: u64, index: usize },
}

fn run_estimator_unit(
    config: &ExperimentConfig,
    ds: &ToyDataset,
    index: usize,
    lambdas: &[usize],
    solver: &SolverOptions,
) -> Vec<ResultRow> {
    let est = &config.estimators[index];
    let seed = ds.config.seed;
    let blank = |l: usize| ResultRow::new(est.label(), index, seed, Some(l));
    let t = Instant::now();
    let prep = match prepare(ds, est) {
        Ok(p) => p,
        Err(e) => return lambdas.iter().map(|&l| blank(l).failed(&e)).collect(),
    };
    let features_ms = t.elapsed().as_secs_f64() * 1e3;
    lambdas
        .iter()
        .map(|&l| {
            let t = Instant::now();
            let mut row = blank(l);
            let result = resolve_lambda(config, ds, index, config.lambda_grid[l]).and_then(|lambda| {
                row.lambda = Some(lambda);
                let fitted = fit_prepared(&prep, ds, lambda, solver)?;
                evaluate(ds, &fitted, config.impurity(), seed)
            });
            row.time_ms = features_ms + t.elapsed().as_secs_f64() * 1e3;
            match result {
                Ok(report) => {
                    row.fill(&report);
                    row
                }
                Err(e) => row.failed(&e),
            }
        })
        .collect()
}

fn run_baseline_unit(config: &ExperimentConfig, ds: &ToyDataset, index: usize) -> ResultRow {
    let b = config.baselines[index];
    let mut row = ResultRow::new(b.label().into(), config.estimators.len() + index, ds.config.seed, None);
    let t = Instant::now();
    let result = baseline_permutation(ds, b).and_then(|p| Ok(metrics::mpe(&p, &ds.true_permutation)?));
    row.time_ms = t.elapsed().as_secs_f64() * 1e3;
    match result {
        Ok(m) => {
            row.mpe = Some(m);
            row
        }
        Err(e) => row.failed(&e),
    }
}

fn better(a: &ResultRow, b: &ResultRow) -> bool {
    let (ma, mb) = (a.mpe.unwrap_or(f64::INFINITY), b.mpe.unwrap_or(f64::INFINITY));
    let (ra, rb) = (a.r2.unwrap_or(f64::NEG_INFINITY), b.r2.unwrap_or(f64::NEG_INFINITY));
    ma < mb || (ma == mb && ra > rb)
}

fn best_rows(rows: &[ResultRow]) -> Vec<ResultRow> {
    let mut best: Vec<ResultRow> = vec![];
    let mut slot: BTreeMap<(u64, usize), usize> = BTreeMap::new();
    for r in rows {
        if r.lambda_index.is_some() && !r.is_ok() {
            continue;
        }
        match slot.get(&(r.seed, r.estimator_index)) {
            Some(&i) => {
                if better(r, &best[i]) {
                    best[i] = r.clone();
                }
            }
            None => {
                slot.insert((r.seed, r.estimator_index), best.len());
                best.push(r.clone());
            }
        }
    }
    best
}

/// Every `(seed, estimator, λ)` cell plus baselines. Cell errors land in the
/// row's status; config errors abort before any work.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput, BenchError> {
    config.validate()?;
    let writer = ManifestWriter::open(config, opts.resume)?;
    let done: BTreeMap<_, _> = writer.manifest.rows.iter().map(|r| (r.key(), r.clone())).collect();

    let mut units = vec![];
    for &seed in &config.seeds {
        for index in 0..config.estimators.len() {
            let lambdas: Vec<usize> = (0..config.lambda_grid.len())
                .filter(|&l| !done.contains_key(&(seed, index, Some(l))))
                .collect();
            if !lambdas.is_empty() {
                units.push(Unit::Estimator { seed, index, lambdas });
            }
        }
        for index in 0..config.baselines.len() {
            if !done.contains_key(&(seed, config.estimators.len() + index, None)) {
                units.push(Unit::Baseline { seed, index });
            }
        }
    }
    let mut pending_seeds: Vec<u64> = units
        .iter()
        .map(|u| match u {
            Unit::Estimator { seed, .. } | Unit::Baseline { seed, .. } => *seed,
        })
        .collect();
    pending_seeds.dedup();

    let writer = Mutex::new(writer);
    let fresh: Vec<ResultRow> = with_jobs(opts.jobs, || -> Result<Vec<ResultRow>, BenchError> {
        let generated = par_map(&pending_seeds, |&s| generate(&config.toy_for_seed(s)).map_err(BenchError::from));
        let datasets: BTreeMap<u64, Result<ToyDataset, BenchError>> = pending_seeds.iter().copied().zip(generated).collect();
        let rows = par_map(&units, |unit| -> Result<Vec<ResultRow>, BenchError> {
            let rows = match unit {
                Unit::Estimator { seed, index, lambdas } => match &datasets[seed] {
                    Ok(ds) => run_estimator_unit(config, ds, *index, lambdas, &opts.solver),
                    Err(e) => {
                        let label = config.estimators[*index].label();
                        lambdas.iter().map(|&l| ResultRow::new(label.clone(), *index, *seed, Some(l)).failed(e)).collect()
                    }
                },
                Unit::Baseline { seed, index } => match &datasets[seed] {
                    Ok(ds) => vec![run_baseline_unit(config, ds, *index)],
                    Err(e) => {
                        let b = config.baselines[*index];
                        vec![ResultRow::new(b.label().into(), config.estimators.len() + index, *seed, None).failed(e)]
                    }
                },
            };
            writer.lock().expect("writer poisoned").append(&rows)?;
            Ok(rows)
        });
        Ok(rows.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().flatten().collect())
    })??;

    let seed_pos: BTreeMap<u64, usize> = config.seeds.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let mut rows: Vec<ResultRow> = done.into_values().chain(fresh).filter(|r| seed_pos.contains_key(&r.seed)).collect();
    rows.sort_by_key(|r| (seed_pos[&r.seed], r.estimator_index, r.lambda_index));
    let best = best_rows(&rows);
    if let Some(dir) = &config.output_dir {
        write_csv(&dir.join("results.csv"), &rows, &[])?;
        write_csv(&dir.join("best.csv"), &best, &[])?;
    }
    let failures = rows.iter().filter(|r| !r.is_ok()).count();
    Ok(RunOutput { rows, best, failures })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    Dim,
    Rho,
    N,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Dim => "dim",
            SweepAxis::Rho => "rho",
            SweepAxis::N => "n",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lambda" => Some(SweepAxis::Lambda),
            "dim" | "d" => Some(SweepAxis::Dim),
            "rho" => Some(SweepAxis::Rho),
            "n" => Some(SweepAxis::N),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub failures: usize,
}

/// Linear-interpolation percentile, `q ∈ [0, 100]`; NaN for no values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// `(axis_value, estimator)`.
type SummaryKey = (Option<f64>, String);

fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<(SummaryKey, Vec<&ResultRow>)> = vec![];
    for r in rows.iter().filter(|r| r.is_ok()) {
        let key = (r.axis_value, r.estimator.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut out = vec![];
    for ((axis_value, estimator), members) in groups {
        let pick = |f: fn(&ResultRow) -> Option<f64>| members.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
        let (mpe, r2, time) = (pick(|r| r.mpe), pick(|r| r.r2), pick(|r| Some(r.time_ms)));
        for q in [25.0, 50.0, 75.0] {
            out.push(SummaryRow {
                axis_value,
                estimator: estimator.clone(),
                stat: format!("p{q}"),
                mpe: percentile(&mpe, q),
                r2: percentile(&r2, q),
                time_ms: percentile(&time, q),
            });
        }
    }
    out
}

/// Varies one axis. The λ axis reports every cell; the other axes report the
/// best-λ row per `(seed, estimator)` at each value. Writes
/// `sweep_<axis>.csv` into the output directory, one subdirectory per value.
pub fn sweep(config: &ExperimentConfig, axis: SweepAxis, values: &[f64], opts: &RunOptions) -> Result<SweepOutput, BenchError> {
    if values.is_empty() {
        return Err(BenchError::Config("sweep needs at least one axis value".into()));
    }
    let sub = |cfg: &mut ExperimentConfig, name: String| {
        if let Some(d) = &config.output_dir {
            cfg.output_dir = Some(d.join(name));
        }
    };
    let mut rows = vec![];
    let mut failures = 0;
    if axis == SweepAxis::Lambda {
        let mut cfg = config.clone();
        cfg.lambda_grid = values.to_vec();
        sub(&mut cfg, "lambda".into());
        let out = run_experiment(&cfg, opts)?;
        failures += out.failures;
        for mut r in out.rows.into_iter().filter(|r| r.lambda_index.is_some()) {
            r.axis_value = Some(values[r.lambda_index.expect("filtered")]);
            rows.push(r);
        }
    } else {
        let mut configs = vec![];
        for &v in values {
            let mut cfg = config.clone();
            match axis {
                SweepAxis::Dim => {
                    if !(v >= 1.0 && v.fract() == 0.0) {
                        return Err(BenchError::Config(format!("dim values must be positive integers, got {v}")));
                    }
                    cfg.toy.d = v as usize;
                }
                SweepAxis::N => {
                    if !(v >= 1.0 && v.fract() == 0.0) {
                        return Err(BenchError::Config(format!("n values must be positive integers, got {v}")));
                    }
                    cfg.toy.n = v as usize;
                }
                SweepAxis::Rho => cfg.toy.rho = v,
                SweepAxis::Lambda => unreachable!(),
            }
            sub(&mut cfg, format!("{}_{}", axis.name(), format_f64(v)));
            cfg.validate()?;
            configs.push((v, cfg));
        }
        for (v, cfg) in configs {
            let out = run_experiment(&cfg, opts)?;
            failures += out.failures;
            rows.extend(out.best.into_iter().map(|mut r| {
                r.axis_value = Some(v);
                r
            }));
        }
    }
    let summary = summarize(&rows);
    if let Some(d) = &config.output_dir {
        fs::create_dir_all(d)?;
        write_csv(&d.join(format!("sweep_{}.csv", axis.name())), &rows, &summary)?;
    }
    Ok(SweepOutput { rows, summary, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{Baseline, EstimatorSpec};
    use crate::synthgen::{ToyConfig, ToyMode};

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            toy: ToyConfig::new(120, 4, ToyMode::Misspecified),
            estimators: vec![EstimatorSpec::Linear, EstimatorSpec::Spline { knots: 4, degree: 3 }],
            lambda_grid: vec![0.001, 0.05],
            lambda_mode: LambdaMode::Absolute,
            seeds: vec![0, 1],
            baselines: vec![Baseline::Spearman],
            impurity: None,
            output_dir: None,
        }
    }

    #[test]
    fn percentiles_interpolate() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 50.0), 2.5);
        assert_eq!(percentile(&v, 25.0), 1.75);
        assert_eq!(percentile(&[7.0], 75.0), 7.0);
        assert!(percentile(&[], 50.0).is_nan());
    }

    #[test]
    fn grid_shape_and_best_rows() {
        let out = run_experiment(&small_config(), &RunOptions::default()).unwrap();
        assert_eq!(out.rows.len(), 2 * (2 * 2 + 1));
        assert_eq!(out.best.len(), 2 * 3);
        assert_eq!(out.failures, 0);
        for b in out.best.iter().filter(|b| b.lambda_index.is_some()) {
            let mpes: Vec<f64> = out
                .rows
                .iter()
                .filter(|r| r.seed == b.seed && r.estimator_index == b.estimator_index)
                .map(|r| r.mpe.unwrap())
                .collect();
            assert_eq!(b.mpe.unwrap(), mpes.iter().copied().fold(f64::INFINITY, f64::min));
        }
    }

    #[test]
    fn resume_skips_completed_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.output_dir = Some(dir.path().to_path_buf());
        let first = run_experiment(&cfg, &RunOptions::default()).unwrap();
        let csv1 = fs::read(dir.path().join("results.csv")).unwrap();
        let second = run_experiment(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(first, second);
        assert_eq!(csv1, fs::read(dir.path().join("results.csv")).unwrap());

        // Extending the seed list is a different config.
        cfg.seeds.push(2);
        assert!(matches!(
            run_experiment(&cfg, &RunOptions::default()),
            Err(BenchError::ManifestMismatch(_))
        ));
    }

    #[test]
    fn results_independent_of_workers() {
        let strip = |rows: Vec<ResultRow>| {
            rows.into_iter()
                .map(|mut r| {
                    r.time_ms = 0.0;
                    r
                })
                .collect::<Vec<_>>()
        };
        let one = run_experiment(&small_config(), &RunOptions { jobs: Some(1), ..Default::default() }).unwrap();
        let four = run_experiment(&small_config(), &RunOptions { jobs: Some(4), ..Default::default() }).unwrap();
        assert_eq!(strip(one.rows), strip(four.rows));
    }

    #[test]
    fn failing_cells_are_recorded() {
        let mut cfg = small_config();
        cfg.estimators = vec![EstimatorSpec::Logistic {
            features: crate::features::FeatureSpec::Identity,
        }];
        cfg.baselines.clear();
        let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(out.failures, out.rows.len());
        assert!(out.rows[0].status.starts_with("error:"));
        assert!(out.rows[0].mpe.is_none());
    }

    #[test]
    fn sweep_writes_summary() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.output_dir = Some(dir.path().to_path_buf());
        let out = sweep(&cfg, SweepAxis::Rho, &[0.0, 0.5], &RunOptions::default()).unwrap();
        assert_eq!(out.rows.len(), 2 * 2 * 3);
        assert_eq!(out.summary.len(), 2 * 3 * 3);
        let text = fs::read_to_string(dir.path().join("sweep_rho.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert!(text.contains(",p50,"));

        let single = sweep(&small_config(), SweepAxis::Lambda, &[0.01], &RunOptions::default()).unwrap();
        assert!(single.rows.iter().all(|r| r.axis_value == Some(0.01)));
        assert!(sweep(&small_config(), SweepAxis::Dim, &[2.5], &RunOptions::default()).is_err());
    }
}
