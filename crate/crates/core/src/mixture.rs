//! Mixing distributions, mixture likelihoods, and the null-model EM fit.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{or_previous, Dataset, WeightedGlm};
use crate::seed::derived_rng;

/// Weights below this are floored during EM.
pub const ALPHA_FLOOR: f64 = 1e-6;
const MAX_FLOOR_HITS: usize = 50;

/// A discrete distribution over component coefficient vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingDistribution {
    alphas: Vec<f64>,
    thetas: Vec<Vec<f64>>,
}

impl MixingDistribution {
    pub fn new(alphas: Vec<f64>, thetas: Vec<Vec<f64>>) -> Result<Self> {
        if alphas.is_empty() || alphas.len() != thetas.len() {
            return Err(Error::invalid(format!(
                "mixing distribution needs matching nonempty weights and coefficients ({} vs {})",
                alphas.len(),
                thetas.len()
            )));
        }
        let p = thetas[0].len();
        if p == 0 || thetas.iter().any(|t| t.len() != p) {
            return Err(Error::invalid("component coefficient vectors must share a positive length"));
        }
        if alphas.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::invalid("mixing weights must be nonnegative"));
        }
        let total: f64 = alphas.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("mixing weights sum to {total}, not 1")));
        }
        if thetas.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("component coefficients must be finite"));
        }
        Ok(MixingDistribution { alphas, thetas })
    }

    pub(crate) fn from_parts(alphas: Vec<f64>, thetas: &[DVector<f64>]) -> Self {
        MixingDistribution {
            alphas,
            thetas: thetas.iter().map(|t| t.iter().copied().collect()).collect(),
        }
    }

    pub fn m(&self) -> usize {
        self.alphas.len()
    }
    pub fn p(&self) -> usize {
        self.thetas[0].len()
    }
    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
    pub fn thetas(&self) -> &[Vec<f64>] {
        &self.thetas
    }
    pub fn theta(&self, h: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.thetas[h])
    }
    pub(crate) fn theta_vectors(&self) -> Vec<DVector<f64>> {
        (0..self.m()).map(|h| self.theta(h)).collect()
    }
    /// `theta_h . 1`.
    pub fn theta_sum(&self, h: usize) -> f64 {
        self.thetas[h].iter().sum()
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        MixingDistribution {
            alphas: order.iter().map(|&h| self.alphas[h]).collect(),
            thetas: order.iter().map(|&h| self.thetas[h].clone()).collect(),
        }
    }
}

/// `log f(y_i | x_i . theta_h + z_i . gamma)` for every observation and component.
pub(crate) fn component_log_densities(
    thetas: &[DVector<f64>],
    gamma: &DVector<f64>,
    data: &Dataset,
) -> DMatrix<f64> {
    let family = data.family();
    let base = data.z_offsets(gamma);
    let mut out = DMatrix::zeros(data.n(), thetas.len());
    for (h, theta) in thetas.iter().enumerate() {
        let eta = data.x() * theta + &base;
        for i in 0..data.n() {
            out[(i, h)] = family.log_density_unchecked(data.y()[i], eta[i]);
        }
    }
    out
}

/// Per-observation `log sum_h exp(log_weights_h + logf_ih)`.
pub(crate) fn log_mixture_densities(log_weights: &[f64], logf: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = logf.nrows();
    let mut out = DVector::zeros(n);
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for (h, lw) in log_weights.iter().enumerate() {
            max = max.max(lw + logf[(i, h)]);
        }
        if !max.is_finite() {
            return Err(Error::DegenerateLikelihood { index: i });
        }
        let s: f64 = log_weights
            .iter()
            .enumerate()
            .map(|(h, lw)| (lw + logf[(i, h)] - max).exp())
            .sum();
        out[i] = max + s.ln();
    }
    Ok(out)
}

fn check_dims(psi: &MixingDistribution, gamma: &DVector<f64>, data: &Dataset) -> Result<()> {
    if psi.p() != data.p() || gamma.len() != data.q() {
        return Err(Error::invalid(format!(
            "dimension mismatch: psi has p={}, gamma has q={}, data has p={}, q={}",
            psi.p(),
            gamma.len(),
            data.p(),
            data.q()
        )));
    }
    Ok(())
}

fn log_weights(alphas: &[f64]) -> Vec<f64> {
    alphas.iter().map(|a| a.ln()).collect()
}

/// `sum_i log sum_h alpha_h f(y_i | x_i . theta_h + z_i . gamma)`.
pub fn mixture_loglik(psi: &MixingDistribution, gamma: &DVector<f64>, data: &Dataset) -> Result<f64> {
    check_dims(psi, gamma, data)?;
    let logf = component_log_densities(&psi.theta_vectors(), gamma, data);
    Ok(log_mixture_densities(&log_weights(psi.alphas()), &logf)?.sum())
}

/// Posterior component membership probabilities, one row per observation.
pub fn responsibilities(psi: &MixingDistribution, gamma: &DVector<f64>, data: &Dataset) -> Result<DMatrix<f64>> {
    check_dims(psi, gamma, data)?;
    let logf = component_log_densities(&psi.theta_vectors(), gamma, data);
    let lw = log_weights(psi.alphas());
    let lse = log_mixture_densities(&lw, &logf)?;
    Ok(DMatrix::from_fn(data.n(), psi.m(), |i, h| (lw[h] + logf[(i, h)] - lse[i]).exp()))
}

/// Component order with `theta . 1` ascending; ties broken by the
/// lexicographic order of the coefficient rows, then by larger weight.
pub fn canonical_permutation(psi: &MixingDistribution) -> Vec<usize> {
    let mut order: Vec<usize> = (0..psi.m()).collect();
    order.sort_by(|&a, &b| {
        psi.theta_sum(a)
            .total_cmp(&psi.theta_sum(b))
            .then_with(|| {
                psi.thetas[a]
                    .iter()
                    .zip(&psi.thetas[b])
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
            .then_with(|| psi.alphas[b].total_cmp(&psi.alphas[a]))
    });
    order
}

pub fn canonical_order(psi: &MixingDistribution) -> MixingDistribution {
    psi.permuted(&canonical_permutation(psi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative log-likelihood change that counts as converged.
    pub tol: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 20,
            max_iter: 1000,
            tol: 1e-8,
            seed: 0,
        }
    }
}

/// The null-hypothesis maximum-likelihood fit with `m0` components.
#[derive(Debug, Clone)]
pub struct NullFit {
    pub psi: MixingDistribution,
    pub gamma: Vec<f64>,
    pub loglik: f64,
    pub responsibilities: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Log-likelihood after every E-step of the winning run.
    pub loglik_trace: Vec<f64>,
    /// Index of the restart that produced this fit.
    pub restart: usize,
    /// Number of restarts that failed or collapsed a component.
    pub failed_restarts: usize,
}

impl NullFit {
    pub fn m0(&self) -> usize {
        self.psi.m()
    }

    pub fn gamma_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.gamma)
    }

    /// Log-likelihood after one more EM iteration from this fit.
    pub fn em_step_loglik(&self, data: &Dataset) -> Result<f64> {
        let state = EmState {
            alphas: self.psi.alphas().to_vec(),
            thetas: self.psi.theta_vectors(),
            gamma: self.gamma_vector(),
        };
        let (_, resp) = state.e_step(data)?;
        let mut hits = 0;
        let next = state.m_step(&resp, data, &mut hits)?;
        Ok(next.e_step(data)?.0)
    }

    /// Relabels components; used to check invariance to the input labelling.
    pub fn permuted(&self, order: &[usize]) -> NullFit {
        let mut out = self.clone();
        out.psi = self.psi.permuted(order);
        out.responsibilities = self.responsibilities.select_columns(order);
        out
    }
}

#[derive(Debug, Clone)]
struct EmState {
    alphas: Vec<f64>,
    thetas: Vec<DVector<f64>>,
    gamma: DVector<f64>,
}

impl EmState {
    fn e_step(&self, data: &Dataset) -> Result<(f64, DMatrix<f64>)> {
        let logf = component_log_densities(&self.thetas, &self.gamma, data);
        let lw = log_weights(&self.alphas);
        let lse = log_mixture_densities(&lw, &logf)?;
        let resp = DMatrix::from_fn(data.n(), self.alphas.len(), |i, h| (lw[h] + logf[(i, h)] - lse[i]).exp());
        Ok((lse.sum(), resp))
    }

    fn m_step(&self, resp: &DMatrix<f64>, data: &Dataset, floor_hits: &mut usize) -> Result<EmState> {
        let n = data.n() as f64;
        let m = self.alphas.len();
        let mut alphas: Vec<f64> = (0..m).map(|h| resp.column(h).sum() / n).collect();
        let mut floored = false;
        for a in alphas.iter_mut() {
            if *a < ALPHA_FLOOR {
                *a = ALPHA_FLOOR;
                floored = true;
            }
        }
        if floored {
            *floor_hits += 1;
            let total: f64 = alphas.iter().sum();
            alphas.iter_mut().for_each(|a| *a /= total);
        }
        let family = data.family();
        let offsets = data.z_offsets(&self.gamma);
        let thetas = (0..m)
            .map(|h| {
                let w = resp.column(h).into_owned();
                let glm = WeightedGlm::new(family, data.y(), data.x(), &w, &offsets)?;
                or_previous(glm.fit_from(None, Some(&self.thetas[h]), None), &self.thetas[h])
            })
            .collect::<Result<Vec<_>>>()?;
        let gamma = if data.q() == 0 {
            self.gamma.clone()
        } else {
            let x_offsets: Vec<DVector<f64>> = thetas.iter().map(|t| data.x() * t).collect();
            let cols: Vec<DVector<f64>> = (0..m).map(|h| resp.column(h).into_owned()).collect();
            or_previous(fit_shared_gamma(data, &x_offsets, &cols, &self.gamma), &self.gamma)?
        };
        Ok(EmState { alphas, thetas, gamma })
    }
}

/// Fits `gamma` on the data replicated once per component, with component
/// weights and `x . theta_h` offsets.
pub(crate) fn fit_shared_gamma(
    data: &Dataset,
    x_offsets: &[DVector<f64>],
    weights: &[DVector<f64>],
    start: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (n, q, copies) = (data.n(), data.q(), x_offsets.len());
    let mut design = DMatrix::zeros(n * copies, q);
    let mut y = DVector::zeros(n * copies);
    let mut w = DVector::zeros(n * copies);
    let mut off = DVector::zeros(n * copies);
    for c in 0..copies {
        design.view_mut((c * n, 0), (n, q)).copy_from(data.z());
        y.rows_mut(c * n, n).copy_from(data.y());
        w.rows_mut(c * n, n).copy_from(&weights[c]);
        off.rows_mut(c * n, n).copy_from(&x_offsets[c]);
    }
    WeightedGlm::new(data.family(), &y, &design, &w, &off)?.fit_from(None, Some(start), None)
}

/// Single-GLM fit of `[x z]`; returns `(theta, gamma)`.
pub fn fit_single_glm(data: &Dataset) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = data.n();
    let coef = WeightedGlm::new(
        data.family(),
        data.y(),
        &data.joint_design(),
        &DVector::from_element(n, 1.0),
        &DVector::zeros(n),
    )?
    .fit(None)?;
    Ok((coef.rows(0, data.p()).into_owned(), coef.rows(data.p(), data.q()).into_owned()))
}

enum RunOutcome {
    Fit(NullFit),
    Degenerate(NullFit),
    Failed(Error),
}

fn run_em(data: &Dataset, mut state: EmState, cfg: &FitConfig, restart: usize) -> RunOutcome {
    let mut floor_hits = 0usize;
    let mut run = || -> Result<(EmState, f64, DMatrix<f64>, Vec<f64>, bool, usize, bool)> {
        let (mut ll, mut resp) = state.e_step(data)?;
        let mut trace = vec![ll];
        let mut converged = false;
        let mut iterations = 0;
        let mut abandoned = false;
        for it in 1..=cfg.max_iter {
            let next = state.m_step(&resp, data, &mut floor_hits)?;
            let (ll_new, resp_new) = next.e_step(data)?;
            state = next;
            resp = resp_new;
            trace.push(ll_new);
            iterations = it;
            let change = (ll_new - ll).abs();
            ll = ll_new;
            if floor_hits >= MAX_FLOOR_HITS {
                abandoned = true;
                break;
            }
            if change <= cfg.tol * ll.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        Ok((state.clone(), ll, resp, trace, converged, iterations, abandoned))
    };
    match run() {
        Err(e) => RunOutcome::Failed(e),
        Ok((state, loglik, resp, trace, converged, iterations, abandoned)) => {
            let degenerate = abandoned || state.alphas.iter().any(|&a| a <= ALPHA_FLOOR * (1.0 + 1e-9));
            let fit = NullFit {
                psi: MixingDistribution::from_parts(state.alphas, &state.thetas),
                gamma: state.gamma.iter().copied().collect(),
                loglik,
                responsibilities: resp,
                converged,
                iterations,
                loglik_trace: trace,
                restart,
                failed_restarts: 0,
            };
            if degenerate {
                RunOutcome::Degenerate(fit)
            } else {
                RunOutcome::Fit(fit)
            }
        }
    }
}

fn initial_state(
    data: &Dataset,
    m0: usize,
    restart: usize,
    single: &(DVector<f64>, DVector<f64>),
    cfg: &FitConfig,
) -> Result<EmState> {
    let (theta, gamma) = single;
    if restart == 0 {
        let center = (m0 as f64 + 1.0) / 2.0;
        let thetas = (1..=m0)
            .map(|h| theta.add_scalar(0.5 * (h as f64 - center)))
            .collect();
        return Ok(EmState {
            alphas: vec![1.0 / m0 as f64; m0],
            thetas,
            gamma: gamma.clone(),
        });
    }
    let mut rng = derived_rng(cfg.seed, "null-restart", restart as u64);
    let mut resp = DMatrix::from_fn(data.n(), m0, |_, _| -> f64 { Exp1.sample(&mut rng) });
    for mut row in resp.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    let seed = EmState {
        alphas: vec![1.0 / m0 as f64; m0],
        thetas: vec![theta.clone(); m0],
        gamma: gamma.clone(),
    };
    let mut hits = 0;
    seed.m_step(&resp, data, &mut hits)
}

/// Maximum-likelihood fit of the `m0`-component null model by EM with
/// restarts. The result is canonically ordered.
pub fn fit_null(data: &Dataset, m0: usize, cfg: &FitConfig) -> Result<NullFit> {
    if m0 == 0 {
        return Err(Error::invalid("m0 must be at least 1"));
    }
    let (n, p, q) = (data.n(), data.p(), data.q());
    if n <= m0 * p + q {
        return Err(Error::invalid(format!(
            "need more than m0*p + q = {} observations, got {n}",
            m0 * p + q
        )));
    }
    let single = fit_single_glm(data)?;
    if m0 == 1 {
        let psi = MixingDistribution::from_parts(vec![1.0], std::slice::from_ref(&single.0));
        let loglik = mixture_loglik(&psi, &single.1, data)?;
        return Ok(NullFit {
            psi,
            gamma: single.1.iter().copied().collect(),
            loglik,
            responsibilities: DMatrix::from_element(n, 1, 1.0),
            converged: true,
            iterations: 1,
            loglik_trace: vec![loglik],
            restart: 0,
            failed_restarts: 0,
        });
    }
    let restarts = cfg.restarts.max(1);
    let outcomes: Vec<RunOutcome> = (0..restarts)
        .into_par_iter()
        .map(|r| match initial_state(data, m0, r, &single, cfg) {
            Ok(state) => run_em(data, state, cfg, r),
            Err(e) => RunOutcome::Failed(e),
        })
        .collect();

    let mut best: Option<NullFit> = None;
    let mut best_degenerate: Option<NullFit> = None;
    let mut first_error = None;
    let mut failed = 0;
    for outcome in outcomes {
        match outcome {
            RunOutcome::Fit(fit) => {
                if best.as_ref().is_none_or(|b| fit.loglik > b.loglik) {
                    best = Some(fit);
                }
            }
            RunOutcome::Degenerate(fit) => {
                failed += 1;
                if best_degenerate.as_ref().is_none_or(|b| fit.loglik > b.loglik) {
                    best_degenerate = Some(fit);
                }
            }
            RunOutcome::Failed(e) => {
                failed += 1;
                first_error.get_or_insert(e);
            }
        }
    }
    match (best, best_degenerate, first_error) {
        (Some(mut fit), _, _) => {
            fit.failed_restarts = failed;
            let order = canonical_permutation(&fit.psi);
            Ok(fit.permuted(&order))
        }
        (None, Some(deg), _) => Err(Error::DegenerateComponent {
            restarts,
            best: Some(Box::new(deg)),
        }),
        (None, None, Some(e)) => Err(e),
        (None, None, None) => Err(Error::DegenerateComponent { restarts, best: None }),
    }
}
