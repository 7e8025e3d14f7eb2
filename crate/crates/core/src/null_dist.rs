//! Limiting null distribution of the EM test statistic.
//!
//! Scores are evaluated at the null fit; the part of the second-order
//! scores orthogonal to the first-order ones has covariance `B~22`, and
//! the chi-bar-square mixing weights are the support-size frequencies of
//! the nonnegative quadratic program driven by `w ~ N(0, B~22)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::family::Dataset;
use crate::mixture::{component_log_densities, log_mixture_densities, NullFit};
use crate::nnqp::NnqpSolver;

const PINV_THRESHOLD: f64 = 1e-10;
const RIDGE_TRIGGER: f64 = 1e-10;
const RIDGE_SCALE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ScoreVectors {
    /// Rows `(Delta_i1..Delta_i,m0-1, Y_i(theta_1), .., Y_i(theta_m0))`.
    pub b1: DMatrix<f64>,
    /// Rows `(Z_i(theta_1), .., Z_i(theta_m0))`.
    pub b2: DMatrix<f64>,
}

/// Score ingredients at the (canonically ordered) null fit.
pub fn score_vectors(nullfit: &NullFit, data: &Dataset) -> Result<ScoreVectors> {
    let psi = &nullfit.psi;
    let (m0, p, n) = (psi.m(), data.p(), data.n());
    let gamma = nullfit.gamma_vector();
    let thetas = psi.theta_vectors();
    let logf = component_log_densities(&thetas, &gamma, data);
    let lw: Vec<f64> = psi.alphas().iter().map(|a| a.ln()).collect();
    let lse = log_mixture_densities(&lw, &logf)?;
    let offsets = data.z_offsets(&gamma);
    let family = data.family();
    let x = data.x();

    let mut b1 = DMatrix::zeros(n, m0 - 1 + m0 * p);
    let mut b2 = DMatrix::zeros(n, m0 * p);
    for i in 0..n {
        let ratio: Vec<f64> = (0..m0).map(|h| (logf[(i, h)] - lse[i]).exp()).collect();
        for h in 0..m0 - 1 {
            b1[(i, h)] = ratio[h] - ratio[m0 - 1];
        }
        for (h, theta) in thetas.iter().enumerate() {
            let eta = x.row(i).dot(&theta.transpose()) + offsets[i];
            let (s, a) = family.eta_derivative_ratios_unchecked(data.y()[i], eta);
            for k in 0..p {
                let xk = x[(i, k)];
                b1[(i, m0 - 1 + h * p + k)] = ratio[h] * s * xk;
                b2[(i, h * p + k)] = ratio[h] * a * xk * xk;
            }
        }
    }
    if b1.iter().chain(b2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite score vector".into()));
    }
    Ok(ScoreVectors { b1, b2 })
}

fn centered_cross(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let ca = a - DMatrix::from_fn(n, a.ncols(), |_, j| a.column(j).mean());
    let cb = b - DMatrix::from_fn(n, b.ncols(), |_, j| b.column(j).mean());
    ca.tr_mul(&cb) / (n as f64 - 1.0)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Pseudo-inverse of a symmetric PSD matrix; also returns how many
/// eigenvalues were truncated.
fn symmetric_pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let cut = PINV_THRESHOLD * max;
    let mut truncated = 0;
    let inv = eig.eigenvalues.map(|v| {
        if v > cut {
            1.0 / v
        } else {
            truncated += 1;
            0.0
        }
    });
    let u = &eig.eigenvectors;
    (u * DMatrix::from_diagonal(&inv) * u.transpose(), truncated)
}

#[derive(Debug, Clone)]
pub struct TildeB22 {
    pub matrix: DMatrix<f64>,
    /// Eigenvalues of `B11` dropped by the pseudo-inverse.
    pub truncated: usize,
    pub ridged: bool,
}

/// `B22 - B21 B11^+ B12` from centered sample covariances.
pub fn tilde_b22(scores: &ScoreVectors) -> Result<TildeB22> {
    let (b1, b2) = (&scores.b1, &scores.b2);
    if b1.nrows() <= b1.ncols() {
        return Err(Error::invalid(format!(
            "need more than {} observations for the score covariance, got {}",
            b1.ncols(),
            b1.nrows()
        )));
    }
    let b11 = centered_cross(b1, b1);
    let b12 = centered_cross(b1, b2);
    let b22 = centered_cross(b2, b2);
    let (inv, truncated) = symmetric_pinv(&b11);
    if truncated > 0 {
        log::warn!("B11 pseudo-inverse truncated {truncated} eigenvalue(s)");
    }
    // Ridge size and trigger are relative to the unprojected covariance.
    let d = b22.nrows();
    let scale = (b22.trace() / d as f64).max(f64::MIN_POSITIVE);
    let mut matrix = symmetrize(&(b22 - b12.transpose() * inv * &b12));
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("B~22 is not finite".into()));
    }
    let min_eig = SymmetricEigen::new(matrix.clone()).eigenvalues.min();
    let ridged = min_eig < RIDGE_TRIGGER * scale;
    if ridged {
        for k in 0..d {
            matrix[(k, k)] += RIDGE_SCALE * scale;
        }
    }
    Ok(TildeB22 {
        matrix,
        truncated,
        ridged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiBarWeights {
    /// `a[s]` for `s = 0..=d`.
    pub a: Vec<f64>,
    pub mc_draws: usize,
    pub seed: u64,
}

/// Monte Carlo estimate of the chi-bar-square weights for covariance `b22`.
pub fn estimate_chibar_weights(b22: &DMatrix<f64>, draws: usize, seed: u64) -> Result<ChiBarWeights> {
    let d = b22.nrows();
    if d == 0 || b22.ncols() != d {
        return Err(Error::invalid("B~22 must be a nonempty square matrix"));
    }
    if draws == 0 {
        return Err(Error::invalid("need at least one Monte Carlo draw"));
    }
    if b22.iter().any(|v| !v.is_finite()) || (b22 - b22.transpose()).amax() > 1e-10 * b22.amax().max(1.0) {
        return Err(Error::invalid("B~22 must be finite and symmetric"));
    }
    if (0..d).any(|k| b22[(k, k)] <= 0.0) {
        return Err(Error::invalid("B~22 has a nonpositive diagonal entry"));
    }
    // Support sizes are unchanged by positive diagonal rescaling, so work
    // with the correlation matrix.
    let dinv = DVector::from_fn(d, |k, _| 1.0 / b22[(k, k)].sqrt());
    let corr = DMatrix::from_fn(d, d, |a, b| b22[(a, b)] * dinv[a] * dinv[b]);
    let eig = SymmetricEigen::new(corr.clone());
    let u = &eig.eigenvectors;
    let root = u * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt())) * u.transpose();
    let solver = NnqpSolver::new(corr)?;

    let sizes: Vec<usize> = (0..draws)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            solver.solve(&(&root * z)).map(|s| s.support.len())
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0usize; d + 1];
    for s in sizes {
        counts[s] += 1;
    }
    Ok(ChiBarWeights {
        a: counts.iter().map(|&c| c as f64 / draws as f64).collect(),
        mc_draws: draws,
        seed,
    })
}

/// Upper tail of the chi-bar-square mixture at `t`.
pub fn chibar_pvalue(t: f64, weights: &ChiBarWeights) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let p: f64 = weights
        .a
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &a)| a > 0.0)
        .map(|(s, &a)| a * ChiSquared::new(s as f64).expect("positive degrees of freedom").sf(t))
        .sum();
    p.clamp(0.0, 1.0)
}
