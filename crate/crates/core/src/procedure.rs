//! End-to-end test of `m0` components, sequential selection of the number
//! of subgroups, and the Monte Carlo protocol for choosing `C`.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em_test::{canonicalize, em_statistic, EmTestConfig};
use crate::error::{Error, Result};
use crate::family::Dataset;
use crate::mixture::{fit_null, FitConfig, NullFit};
use crate::null_dist::{chibar_pvalue, estimate_chibar_weights, score_vectors, tilde_b22, ChiBarWeights};
use crate::seed::derive_seed;
use crate::simgen::{check_levels, rejection_rows, replicate_dataset, RejectionRow, ScenarioSpec};

pub const DEFAULT_MC_DRAWS: usize = 10_000;
pub const DEFAULT_M_MAX: usize = 5;
pub const MIN_TUNING_REPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub fit: FitConfig,
    pub em: EmTestConfig,
    pub mc_draws: usize,
    /// Master seed; the null fit, the EM test and the Monte Carlo weights
    /// each receive a seed derived from it.
    pub seed: u64,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            fit: FitConfig::default(),
            em: EmTestConfig::default(),
            mc_draws: DEFAULT_MC_DRAWS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub null_fit: u64,
    pub em: u64,
    pub chibar: u64,
}

impl Seeds {
    pub fn derive(master: u64, m0: usize) -> Seeds {
        let m = m0 as u64;
        Seeds {
            master,
            null_fit: derive_seed(master, "null-fit", m),
            em: derive_seed(master, "em-test", m),
            chibar: derive_seed(master, "chibar", m),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NullFitSummary {
    pub alphas: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub restart: usize,
    pub failed_restarts: usize,
}

impl From<&NullFit> for NullFitSummary {
    fn from(f: &NullFit) -> Self {
        NullFitSummary {
            alphas: f.psi.alphas().to_vec(),
            thetas: f.psi.thetas().to_vec(),
            gamma: f.gamma.clone(),
            loglik: f.loglik,
            converged: f.converged,
            iterations: f.iterations,
            restart: f.restart,
            failed_restarts: f.failed_restarts,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSummary {
    pub beta0: Vec<f64>,
    pub trace: Vec<f64>,
    pub final_betas: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestReport {
    pub m0: usize,
    pub statistic: f64,
    pub pvalue: f64,
    pub weights: ChiBarWeights,
    pub null_fit: NullFitSummary,
    pub grid: Vec<GridSummary>,
    pub config: TestConfig,
    pub seeds: Seeds,
    pub warnings: Vec<String>,
    pub wall_time_secs: f64,
}

/// Chi-bar-square weights calibrated at a null fit.
pub fn null_calibration(
    data: &Dataset,
    nullfit: &NullFit,
    mc_draws: usize,
    seed: u64,
) -> Result<(ChiBarWeights, Vec<String>)> {
    let nullfit = canonicalize(nullfit);
    let scores = score_vectors(&nullfit, data)?;
    let projected = tilde_b22(&scores)?;
    let mut warnings = Vec::new();
    if projected.truncated > 0 {
        warnings.push(format!(
            "first-order score covariance is singular ({} eigenvalue(s) truncated); the null fit may be degenerate",
            projected.truncated
        ));
    }
    if projected.ridged {
        warnings.push("projected second-order covariance was ridge-regularized".into());
    }
    let weights = estimate_chibar_weights(&projected.matrix, mc_draws, seed)?;
    Ok((weights, warnings))
}

fn validate(data: &Dataset, m0: usize, config: &TestConfig) -> Result<()> {
    if m0 == 0 {
        return Err(Error::invalid("m0 must be at least 1"));
    }
    if config.mc_draws == 0 {
        return Err(Error::invalid("mc_draws must be at least 1"));
    }
    config.em.validate()?;
    data.family().validate()
}

/// Tests `m0` subgroups against `2 m0`.
pub fn run_test(data: &Dataset, m0: usize, config: &TestConfig) -> Result<TestReport> {
    let start = Instant::now();
    validate(data, m0, config)?;
    let seeds = Seeds::derive(config.seed, m0);
    let fit_cfg = FitConfig {
        seed: seeds.null_fit,
        ..config.fit.clone()
    };
    let nullfit = canonicalize(&fit_null(data, m0, &fit_cfg)?);
    let mut warnings = Vec::new();
    if nullfit.failed_restarts > 0 {
        warnings.push(format!("{} null-fit restart(s) failed", nullfit.failed_restarts));
    }
    if !nullfit.converged {
        warnings.push("null fit reached the iteration cap before converging".into());
    }
    let em_cfg = EmTestConfig {
        seed: seeds.em,
        ..config.em.clone()
    };
    let em = em_statistic(data, &nullfit, &em_cfg)?;
    warnings.extend(em.warnings.iter().cloned());
    let (weights, calib_warnings) = null_calibration(data, &nullfit, config.mc_draws, seeds.chibar)?;
    warnings.extend(calib_warnings);
    let pvalue = chibar_pvalue(em.statistic, &weights);
    Ok(TestReport {
        m0,
        statistic: em.statistic,
        pvalue,
        weights,
        null_fit: NullFitSummary::from(&nullfit),
        grid: em
            .per_grid
            .iter()
            .map(|g| GridSummary {
                beta0: g.beta0.clone(),
                trace: g.trace.clone(),
                final_betas: g.state.betas.clone(),
            })
            .collect(),
        config: config.clone(),
        seeds,
        warnings,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequentialResult {
    pub selected_m: usize,
    pub reports: Vec<TestReport>,
    pub level: f64,
    /// Every order up to `m_max` was rejected.
    pub capped: bool,
    /// Error that stopped the sequence at `selected_m`, if any.
    pub halted: Option<String>,
}

/// Tests `m = 1, 2, ...` and stops at the first order that is not rejected.
pub fn sequential_test(data: &Dataset, level: f64, m_max: usize, config: &TestConfig) -> Result<SequentialResult> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("level must lie in (0, 1)"));
    }
    if m_max == 0 {
        return Err(Error::invalid("m_max must be at least 1"));
    }
    let mut reports = Vec::new();
    for m in 1..=m_max {
        match run_test(data, m, config) {
            Ok(report) => {
                let rejected = report.pvalue <= level;
                reports.push(report);
                if !rejected {
                    return Ok(SequentialResult {
                        selected_m: m,
                        reports,
                        level,
                        capped: false,
                        halted: None,
                    });
                }
            }
            Err(e) if m == 1 => return Err(e),
            Err(e) => {
                log::warn!("sequential test halted at m = {m}: {e}");
                return Ok(SequentialResult {
                    selected_m: m,
                    reports,
                    level,
                    capped: false,
                    halted: Some(e.to_string()),
                });
            }
        }
    }
    Ok(SequentialResult {
        selected_m: m_max,
        reports,
        level,
        capped: true,
        halted: None,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneRow {
    pub c: f64,
    pub rejection: Vec<RejectionRow>,
    /// `sum_levels |rejection - level|`.
    pub deviation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneResult {
    pub scenario: String,
    pub m0: usize,
    pub n: usize,
    pub reps: usize,
    pub failures: usize,
    pub rows: Vec<TuneRow>,
    pub chosen_c: f64,
}

/// Simulates `reps` null datasets from `spec` and picks the `C` whose
/// rejection proportions are closest to the nominal levels.
pub fn tune_c(
    spec: &ScenarioSpec,
    c_grid: &[f64],
    levels: &[f64],
    reps: usize,
    n: usize,
    config: &TestConfig,
) -> Result<TuneResult> {
    let mut grid = c_grid.to_vec();
    if grid.is_empty() || grid.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
        return Err(Error::invalid("C grid must be nonempty and positive"));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    check_levels(levels)?;
    if reps < MIN_TUNING_REPS {
        return Err(Error::invalid(format!("tuning needs at least {MIN_TUNING_REPS} replicates")));
    }
    let spec = spec.with_n(n);
    spec.validate()?;
    let m0 = spec.tested_m0;
    validate(&replicate_dataset(&spec, config.seed, 0)?, m0, config)?;

    let outcomes: Vec<Result<Vec<f64>>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let data = replicate_dataset(&spec, config.seed, r)?;
            let seeds = Seeds::derive(derive_seed(config.seed, "replicate-test", r), m0);
            let fit_cfg = FitConfig {
                seed: seeds.null_fit,
                ..config.fit.clone()
            };
            let nullfit = canonicalize(&fit_null(&data, m0, &fit_cfg)?);
            let (weights, _) = null_calibration(&data, &nullfit, config.mc_draws, seeds.chibar)?;
            grid.iter()
                .map(|&c| {
                    let em_cfg = EmTestConfig {
                        c,
                        seed: seeds.em,
                        ..config.em.clone()
                    };
                    let em = em_statistic(&data, &nullfit, &em_cfg)?;
                    Ok(chibar_pvalue(em.statistic, &weights))
                })
                .collect()
        })
        .collect();
    let ok: Vec<Vec<f64>> = outcomes.iter().filter_map(|o| o.as_ref().ok().cloned()).collect();
    let failures = reps - ok.len();
    if ok.is_empty() {
        return Err(Error::Numerical("every tuning replicate failed".into()));
    }
    let rows: Vec<TuneRow> = grid
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let pvalues: Vec<f64> = ok.iter().map(|ps| ps[j]).collect();
            let rejection = rejection_rows(&pvalues, levels);
            let deviation = rejection.iter().map(|r| (r.proportion - r.level).abs()).sum();
            TuneRow { c, rejection, deviation }
        })
        .collect();
    // Rows are sorted by C, so the first minimum is the smaller C on ties.
    let chosen_c = rows
        .iter()
        .fold(None::<&TuneRow>, |best, r| match best {
            Some(b) if b.deviation <= r.deviation => Some(b),
            _ => Some(r),
        })
        .map(|r| r.c)
        .expect("grid is nonempty");
    Ok(TuneResult {
        scenario: spec.id.clone(),
        m0,
        n,
        reps,
        failures,
        rows,
        chosen_c,
    })
}
