//! Command-line interface.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 input parse
//! error, 4 model fitting failure, 5 numerical failure.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::em_test::EmTestConfig;
use crate::error::{Error, ErrorKind, Result};
use crate::family::Family;
use crate::io::{read_dataset_file, ColumnSpec};
use crate::mixture::FitConfig;
use crate::predict::{cross_validate, PredictConfig, PredictReport};
use crate::procedure::{
    run_test, sequential_test, tune_c, SequentialResult, TestConfig, TestReport, TuneResult, DEFAULT_MC_DRAWS,
    DEFAULT_M_MAX,
};
use crate::simgen::{find_scenario, list_builtin_scenarios, monte_carlo_rejection, RejectionTable, ScenarioSpec};

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Io => 1,
        ErrorKind::Usage => 2,
        ErrorKind::Parse => 3,
        ErrorKind::Fit => 4,
        ErrorKind::Numerical => 5,
    }
}

#[derive(Debug, Parser)]
#[command(name = "glmix", version, about = "EM test for the number of subgroups in mixtures of GLMs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test m0 subgroups against 2*m0.
    Test(TestArgs),
    /// Select the number of subgroups by sequential testing.
    Sequential(SequentialArgs),
    /// Rejection rates over simulated replicates of a scenario.
    Simulate(SimulateArgs),
    /// Choose the penalty constant C on simulated null data.
    Tune(TuneArgs),
    /// Cross-validated prediction with a fitted mixture.
    Predict(PredictArgs),
    /// List built-in scenarios.
    Scenarios,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FamilyArg {
    Normal,
    Logit,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub response: String,
    /// Comma-separated subgroup-effect columns.
    #[arg(long, value_delimiter = ',', required = true)]
    pub x: Vec<String>,
    /// Comma-separated shared-effect columns.
    #[arg(long, value_delimiter = ',')]
    pub z: Vec<String>,
    #[arg(long, value_enum)]
    pub family: FamilyArg,
    /// Known error standard deviation (normal family).
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
}

impl DataArgs {
    fn family(&self) -> Result<Family> {
        match self.family {
            FamilyArg::Normal => Family::normal(self.sigma),
            FamilyArg::Logit => Ok(Family::Logit),
        }
    }

    fn load(&self) -> Result<crate::family::Dataset> {
        let columns = ColumnSpec {
            response: self.response.clone(),
            x: self.x.clone(),
            z: self.z.clone(),
        };
        read_dataset_file(&self.input, &columns, self.family()?)
    }
}

#[derive(Debug, Args)]
pub struct MethodArgs {
    /// EM iterations (default 3, or the scenario's).
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// Penalty constant.
    #[arg(long = "C")]
    pub c: Option<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.3, 0.5])]
    pub beta_grid: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_MC_DRAWS)]
    pub mc_draws: usize,
    /// EM restarts for the null fit.
    #[arg(long, default_value_t = 20)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl MethodArgs {
    fn config(&self, default_c: f64, default_k: usize) -> TestConfig {
        TestConfig {
            fit: FitConfig {
                restarts: self.restarts,
                ..FitConfig::default()
            },
            em: EmTestConfig {
                k: self.k.unwrap_or(default_k),
                c: self.c.unwrap_or(default_c),
                beta_grid: self.beta_grid.clone(),
                lambda: self.lambda,
                ..EmTestConfig::default()
            },
            mc_draws: self.mc_draws,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1)]
    pub m0: usize,
    #[command(flatten)]
    pub method: MethodArgs,
}

#[derive(Debug, Args)]
pub struct SequentialArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.05)]
    pub level: f64,
    #[arg(long, default_value_t = DEFAULT_M_MAX)]
    pub m_max: usize,
    #[command(flatten)]
    pub method: MethodArgs,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Built-in scenario id (see `glmix scenarios`).
    pub scenario: Option<String>,
    /// JSON scenario file, instead of a built-in id.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Sample size (default: the scenario's).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.05, 0.1])]
    pub levels: Vec<f64>,
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<ScenarioSpec> {
        let spec = match (&self.scenario, &self.spec) {
            (Some(id), None) => find_scenario(id)?,
            (None, Some(path)) => serde_json::from_reader(std::fs::File::open(path)?)?,
            _ => return Err(Error::invalid("give either a scenario id or --spec, not both")),
        };
        let spec = match self.n {
            Some(n) => spec.with_n(n),
            None => spec,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Components under the null (default: the scenario's).
    #[arg(long)]
    pub m0: Option<usize>,
    #[command(flatten)]
    pub method: MethodArgs,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// `a,b,c`, `lo..hi` (the scenario's grid restricted to [lo, hi]) or
    /// `lo..hi:step`.
    #[arg(long)]
    pub c_grid: Option<String>,
    #[command(flatten)]
    pub method: MethodArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of subgroups.
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 20)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_number(text: &str) -> Result<f64> {
    text.trim()
        .parse()
        .map_err(|_| Error::invalid(format!("'{text}' is not a number")))
}

/// Parses a `--c-grid` value against a scenario's published grid.
pub fn parse_c_grid(text: &str, published: &[f64]) -> Result<Vec<f64>> {
    if let Some((lo, rest)) = text.split_once("..") {
        let lo = parse_number(lo)?;
        return match rest.split_once(':') {
            Some((hi, step)) => {
                let (hi, step) = (parse_number(hi)?, parse_number(step)?);
                if !(step > 0.0) || hi < lo {
                    return Err(Error::invalid("C grid range needs lo <= hi and a positive step"));
                }
                let count = ((hi - lo) / step + 1e-9).floor() as usize;
                Ok((0..=count).map(|i| lo + step * i as f64).collect())
            }
            None => {
                let hi = parse_number(rest)?;
                let grid: Vec<f64> = published.iter().copied().filter(|c| (lo..=hi).contains(c)).collect();
                if grid.is_empty() {
                    return Err(Error::invalid(format!("no published C value lies in [{lo}, {hi}]")));
                }
                Ok(grid)
            }
        };
    }
    text.split(',').map(parse_number).collect()
}

fn test_table(r: &TestReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>4} {:>12} {:>10}", "m0", "EM stat", "p-value");
    let _ = writeln!(s, "{:>4} {:>12.4} {:>10.4}", r.m0, r.statistic, r.pvalue);
    let weights: Vec<String> = r.weights.a.iter().map(|a| format!("{a:.4}")).collect();
    let _ = writeln!(s, "chi-bar weights: {}", weights.join(" "));
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

fn sequential_table(r: &SequentialResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>4} {:>12} {:>10}", "m", "EM stat", "p-value");
    for rep in &r.reports {
        let _ = writeln!(s, "{:>4} {:>12.4} {:>10.4}", rep.m0, rep.statistic, rep.pvalue);
    }
    let _ = writeln!(s, "selected m = {} at level {}{}", r.selected_m, r.level, if r.capped { " (cap reached)" } else { "" });
    if let Some(h) = &r.halted {
        let _ = writeln!(s, "halted: {h}");
    }
    s
}

fn rejection_table(t: &RejectionTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} (m0 = {}, n = {}, reps = {}, failures = {})", t.scenario, t.m0, t.n, t.reps, t.failures);
    let _ = writeln!(s, "{:>8} {:>10} {:>8}", "level", "rejection", "MC se");
    for row in &t.rows {
        let _ = writeln!(s, "{:>8} {:>10.3} {:>8.3}", row.level, row.proportion, row.mc_se);
    }
    s
}

fn tune_table(t: &TuneResult) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:>6}", "C");
    if let Some(first) = t.rows.first() {
        for r in &first.rejection {
            let _ = write!(s, " {:>8}", format!("a={}", r.level));
        }
    }
    let _ = writeln!(s);
    for row in &t.rows {
        let mark = if row.c == t.chosen_c { "*" } else { " " };
        let _ = write!(s, "{:>5}{mark}", row.c);
        for r in &row.rejection {
            let _ = write!(s, " {:>8.3}", r.proportion);
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s, "chosen C = {} ({} failed replicates)", t.chosen_c, t.failures);
    s
}

fn predict_table(r: &PredictReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>6} {:>9} {:>9} {:>9} {:>9} {:>9}", "fold", "accuracy", "precision", "recall", "F1", "AUC");
    let row = |s: &mut String, label: &str, m: &crate::predict::Metrics| {
        let auc = m.auc.map_or("NA".to_string(), |a| format!("{a:.3}"));
        let _ = writeln!(s, "{label:>6} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {auc:>9}", m.accuracy, m.precision, m.recall, m.f1);
    };
    for f in &r.folds {
        match (&f.metrics, &f.error) {
            (Some(m), _) => row(&mut s, &f.fold.to_string(), m),
            (None, Some(e)) => {
                let _ = writeln!(s, "{:>6} failed: {e}", f.fold);
            }
            _ => {}
        }
    }
    if let Some(m) = &r.aggregate {
        row(&mut s, "mean", m);
    }
    let _ = writeln!(s, "subgroup  alpha  assigned  theta");
    for (h, g) in r.subgroups.iter().enumerate() {
        let theta: Vec<String> = g.theta.iter().map(|t| format!("{t:.3}")).collect();
        let _ = writeln!(s, "{:>8} {:>6.3} {:>9}  {}", h + 1, g.alpha, g.assigned, theta.join(" "));
    }
    s
}

fn scenario_table(all: &[ScenarioSpec]) -> String {
    let mut s = String::new();
    for spec in all {
        let _ = writeln!(
            s,
            "{:<20} m={} tested m0={} n={} C={} K={}  {}",
            spec.id,
            spec.m(),
            spec.tested_m0,
            spec.n,
            spec.default_c,
            spec.default_k,
            spec.description
        );
    }
    s
}

fn emit<T: Serialize>(report: &T, table: String, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    match out {
        Some(path) => {
            std::fs::write(path, json + "\n")?;
            print!("{table}");
        }
        None => {
            println!("{json}");
            eprint!("{table}");
        }
    }
    std::io::stdout().flush()?;
    Ok(())
}

/// Runs a parsed command.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::invalid("--threads must be positive"));
        }
        // A pool can only be installed once per process; later calls keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let out = cli.out.as_deref();
    match cli.command {
        Command::Test(a) => {
            let data = a.data.load()?;
            let report = run_test(&data, a.m0, &a.method.config(3.0, 3))?;
            emit(&report, test_table(&report), out)
        }
        Command::Sequential(a) => {
            let data = a.data.load()?;
            let res = sequential_test(&data, a.level, a.m_max, &a.method.config(3.0, 3))?;
            emit(&res, sequential_table(&res), out)
        }
        Command::Simulate(a) => {
            let spec = a.scenario.resolve()?;
            let m0 = a.m0.unwrap_or(spec.tested_m0);
            let cfg = a.method.config(spec.default_c, spec.default_k);
            let table = monte_carlo_rejection(&spec, m0, &cfg, a.scenario.reps, &a.scenario.levels)?;
            emit(&table, rejection_table(&table), out)
        }
        Command::Tune(a) => {
            let spec = a.scenario.resolve()?;
            let grid = match &a.c_grid {
                Some(text) => parse_c_grid(text, &spec.c_grid)?,
                None => spec.c_grid.clone(),
            };
            let cfg = a.method.config(spec.default_c, spec.default_k);
            let res = tune_c(&spec, &grid, &a.scenario.levels, a.scenario.reps, spec.n, &cfg)?;
            emit(&res, tune_table(&res), out)
        }
        Command::Predict(a) => {
            let data = a.data.load()?;
            let cfg = PredictConfig {
                m: a.m,
                folds: a.folds,
                fit: FitConfig {
                    restarts: a.restarts,
                    ..FitConfig::default()
                },
                seed: a.seed,
            };
            let report = cross_validate(&data, &cfg)?;
            emit(&report, predict_table(&report), out)
        }
        Command::Scenarios => {
            let all = list_builtin_scenarios();
            emit(&all, scenario_table(&all), out)
        }
    }
}
