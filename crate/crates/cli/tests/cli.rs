use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_concept-align"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn concept-align")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = r#"
lambda_grid = [0.01, 0.1]
seeds = [0, 1]
baselines = ["spearman"]

[toy]
n = 200
d = 4
mode = "misspecified"

[[estimators]]
kind = "spline"
knots = 4
degree = 3
"#;

/// Metric columns only; time_ms is the second to last column.
fn metric_columns(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(f.len() - 2);
            f.join(",")
        })
        .collect()
}

#[test]
fn run_writes_results_and_resumes() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "small.toml", SMALL);
    let out = t.path().join("out");
    let args = ["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "2"];
    let first = run(&args);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(results.starts_with("axis_value,estimator,seed,lambda,mpe,r2,concept_acc,label_acc,ois,nis,time_ms,status\n"));
    // 2 seeds x (2 lambdas + 1 baseline)
    assert_eq!(results.lines().count(), 1 + 6);
    assert!(out.join("best.csv").exists() && out.join("manifest.json").exists());
    // Second run reuses every cell, so even timings are unchanged.
    assert_eq!(code(&run(&args)), 0);
    assert_eq!(fs::read_to_string(out.join("results.csv")).unwrap(), results);
}

#[test]
fn generate_fit_evaluate_matches_run() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "small.toml", SMALL);
    let c = cfg.to_str().unwrap();
    let p = |s: &str| t.path().join(s).to_str().unwrap().to_string();
    assert_eq!(code(&run(&["generate", "--config", c, "--out", &p("data")])), 0);
    assert!(t.path().join("data/seed_1/manifest.json").exists());
    assert_eq!(code(&run(&["fit", "--config", c, "--data", &p("data"), "--out", &p("models")])), 0);
    assert!(t.path().join("models/seed_0/est0_lam1.json").exists());
    let ev = run(&["evaluate", "--config", c, "--data", &p("data"), "--models", &p("models"), "--out", &p("eval")]);
    assert_eq!(code(&ev), 0, "{}", String::from_utf8_lossy(&ev.stderr));

    // The staged pipeline reproduces the grid run's estimator rows.
    assert_eq!(code(&run(&["run", "--config", c, "--out", &p("grid")])), 0);
    let staged = metric_columns(&fs::read_to_string(t.path().join("eval/evaluation.csv")).unwrap());
    let grid: Vec<String> = metric_columns(&fs::read_to_string(t.path().join("grid/results.csv")).unwrap())
        .into_iter()
        .filter(|l| !l.contains("spearman"))
        .collect();
    assert_eq!(staged, grid);
}

#[test]
fn seeds_flag_overrides_config() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "small.toml", SMALL);
    let out = t.path().join("out");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "5..7,9"]);
    assert_eq!(code(&o), 0);
    let seeds: Vec<String> = csv::Reader::from_path(out.join("results.csv"))
        .unwrap()
        .records()
        .map(|r| r.unwrap()[2].to_string())
        .collect();
    assert_eq!(seeds, ["5", "5", "5", "6", "6", "6", "9", "9", "9"]);
}

#[test]
fn config_errors_exit_one() {
    let t = tempfile::tempdir().unwrap();
    let no_grid = write(t.path(), "a.toml", &SMALL.replace("lambda_grid = [0.01, 0.1]", "lambda_grid = []"));
    let o = run(&["run", "--config", no_grid.to_str().unwrap(), "--out", t.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda_grid"));
    assert!(!t.path().join("results.csv").exists());

    assert_eq!(code(&run(&["run", "--config", "/nonexistent.toml"])), 1);
    assert_eq!(code(&run(&["run"])), 1);
    let good = write(t.path(), "b.toml", SMALL);
    assert_eq!(code(&run(&["run", "--config", good.to_str().unwrap(), "--seeds", "3..3"])), 1);
    let o = run(&["sweep", "--config", good.to_str().unwrap(), "--axis", "width", "--values", "1", "--out", "x"]);
    assert_eq!(code(&o), 1);
    let theory = write(t.path(), "t.toml", "n = 500\nd = 3\ntrials = 20\n");
    assert_eq!(code(&run(&["verify-theory", "--config", theory.to_str().unwrap()])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn failing_cells_exit_two() {
    let t = tempfile::tempdir().unwrap();
    // 41 spline columns per group against 32 training rows cannot be whitened.
    let cfg = write(
        t.path(),
        "c.toml",
        "lambda_grid = [0.01]\nseeds = [0]\n[toy]\nn = 40\nd = 2\nmode = \"misspecified\"\n\
         [[estimators]]\nkind = \"linear\"\n[[estimators]]\nkind = \"spline\"\nknots = 40\ndegree = 3\n",
    );
    let out = t.path().join("out");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(results.lines().nth(1).unwrap().ends_with(",ok"));
    assert!(results.lines().nth(2).unwrap().contains("error: "));

    // Evaluating models that were never fitted is also a partial failure.
    let small = write(t.path(), "small.toml", SMALL);
    let p = |s: &str| t.path().join(s).to_str().unwrap().to_string();
    assert_eq!(code(&run(&["generate", "--config", small.to_str().unwrap(), "--out", &p("data")])), 0);
    let o = run(&["evaluate", "--config", small.to_str().unwrap(), "--data", &p("data"), "--models", &p("none"), "--out", &p("ev")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sweep_writes_axis_csv() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "small.toml", &SMALL.replace("seeds = [0, 1]", "seeds = [0, 1, 2]"));
    let out = t.path().join("out");
    let o = run(&["sweep", "--config", cfg.to_str().unwrap(), "--axis", "rho", "--values", "0,0.5", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep_rho.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("0.5,") && l.ends_with(",summary")));
    assert!(out.join("rho_0.5").is_dir() && out.join("rho_0.0").is_dir());
}

#[test]
fn verify_theory_small_run() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "t.toml", "n = 2000\nd = 2\ndelta = 0.5\n");
    let out = t.path().join("out");
    let o = run(&["verify-theory", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.matches("PASS").count(), 3, "{stdout}");
    assert!(out.join("theory.json").exists());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        if path.file_name().unwrap() == "theory.toml" {
            concept_align::bench::TheoryConfig::from_toml(&text).unwrap();
        } else {
            concept_align::bench::ExperimentConfig::from_toml(&text).unwrap_or_else(|e| panic!("{path:?}: {e}"));
        }
        n += 1;
    }
    assert!(n >= 4);
}
