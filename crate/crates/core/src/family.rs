//! Response families, the data container, and weighted (optionally
//! constrained or penalized) maximum-likelihood fitting of a single GLM.
//!
//! Two families are supported: a normal response with known standard
//! deviation and a Bernoulli response with the logit link. Everything the
//! mixture code needs from a family reduces to three scalar functions of
//! the linear predictor `eta`: the log-density, the score `d log f / d eta`
//! and the curvature `-d^2 log f / d eta^2`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `0.5 * ln(2 pi)`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Observations whose weight falls below this are dropped from a fit.
pub const MIN_WEIGHT: f64 = 1e-12;

const GRADIENT_TOL: f64 = 1e-8;
const MAX_NEWTON_ITER: usize = 100;
const SEPARATION_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Family {
    /// Normal response with known standard deviation.
    Normal { sigma: f64 },
    /// Bernoulli response with logit link.
    Logit,
}

impl Family {
    pub fn normal(sigma: f64) -> Result<Self> {
        let family = Family::Normal { sigma };
        family.validate()?;
        Ok(family)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Family::Normal { sigma } if !(sigma.is_finite() && sigma > 0.0) => Err(Error::invalid(
                format!("normal family needs a positive finite sigma, got {sigma}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Normal { .. } => "normal",
            Family::Logit => "logit",
        }
    }

    /// Checks that `y` is a legal response value for this family.
    pub fn check_response(&self, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::invalid(format!("non-finite response {y}")));
        }
        if matches!(self, Family::Logit) && y != 0.0 && y != 1.0 {
            return Err(Error::invalid(format!(
                "logit family requires a binary response, got {y}"
            )));
        }
        Ok(())
    }

    /// `log f(y | eta)`.
    pub fn log_density(&self, y: f64, eta: f64) -> Result<f64> {
        self.check_response(y)?;
        check_eta(eta)?;
        Ok(self.log_density_unchecked(y, eta))
    }

    #[inline]
    pub(crate) fn log_density_unchecked(&self, y: f64, eta: f64) -> f64 {
        match *self {
            Family::Normal { sigma } => {
                let r = (y - eta) / sigma;
                -LN_SQRT_2PI - sigma.ln() - 0.5 * r * r
            }
            Family::Logit => y * eta - softplus(eta),
        }
    }

    /// Returns `(f'/f, f''/f)` where primes are derivatives of the density
    /// with respect to the linear predictor.
    pub fn eta_derivative_ratios(&self, y: f64, eta: f64) -> Result<(f64, f64)> {
        self.check_response(y)?;
        check_eta(eta)?;
        Ok(self.eta_derivative_ratios_unchecked(y, eta))
    }

    #[inline]
    pub(crate) fn eta_derivative_ratios_unchecked(&self, y: f64, eta: f64) -> (f64, f64) {
        match *self {
            Family::Normal { sigma } => {
                let var = sigma * sigma;
                let s = (y - eta) / var;
                (s, s * s - 1.0 / var)
            }
            Family::Logit => {
                let pi = logistic(eta);
                let s = y - pi;
                (s, s * s - pi * (1.0 - pi))
            }
        }
    }

    /// Mean response at `eta`.
    #[inline]
    pub fn mean(&self, eta: f64) -> f64 {
        match self {
            Family::Normal { .. } => eta,
            Family::Logit => logistic(eta),
        }
    }

    #[inline]
    fn score(&self, y: f64, eta: f64) -> f64 {
        match *self {
            Family::Normal { sigma } => (y - eta) / (sigma * sigma),
            Family::Logit => y - logistic(eta),
        }
    }

    #[inline]
    fn curvature(&self, eta: f64) -> f64 {
        match *self {
            Family::Normal { sigma } => 1.0 / (sigma * sigma),
            Family::Logit => {
                let pi = logistic(eta);
                pi * (1.0 - pi)
            }
        }
    }

    /// Draws one response per linear predictor.
    pub fn simulate_response<R: Rng + ?Sized>(&self, eta: &[f64], rng: &mut R) -> Vec<f64> {
        eta.iter()
            .map(|&e| match *self {
                Family::Normal { sigma } => {
                    let z: f64 = StandardNormal.sample(rng);
                    e + sigma * z
                }
                Family::Logit => {
                    if rng.random::<f64>() < logistic(e) {
                        1.0
                    } else {
                        0.0
                    }
                }
            })
            .collect()
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("non-finite linear predictor {eta}")))
    }
}

#[inline]
pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Response, subgroup-effect covariates `x` (n x p), common-effect
/// covariates `z` (n x q, q may be zero) and the response family.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    family: Family,
}

impl Dataset {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>, family: Family) -> Result<Self> {
        family.validate()?;
        let n = y.len();
        if n == 0 {
            return Err(Error::invalid("dataset has no observations"));
        }
        if x.nrows() != n || z.nrows() != n {
            return Err(Error::invalid(format!(
                "row mismatch: y has {n}, x has {}, z has {}",
                x.nrows(),
                z.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::invalid("at least one subgroup-effect covariate is required"));
        }
        for (i, &yi) in y.iter().enumerate() {
            family
                .check_response(yi)
                .map_err(|e| Error::invalid(format!("observation {i}: {e}")))?;
        }
        for i in 0..n {
            let bad = x.row(i).iter().chain(z.row(i).iter()).any(|v| !v.is_finite());
            if bad {
                return Err(Error::invalid(format!("observation {i} has a non-finite covariate")));
            }
        }
        Ok(Dataset { y, x, z, family })
    }

    /// Builds a dataset from row-major covariate buffers.
    pub fn from_row_major(
        y: Vec<f64>,
        x: &[f64],
        p: usize,
        z: &[f64],
        q: usize,
        family: Family,
    ) -> Result<Self> {
        let n = y.len();
        if x.len() != n * p || z.len() != n * q {
            return Err(Error::invalid(format!(
                "buffer sizes do not match n={n}, p={p}, q={q}"
            )));
        }
        Dataset::new(
            DVector::from_vec(y),
            DMatrix::from_row_slice(n, p, x),
            DMatrix::from_row_slice(n, q, z),
            family,
        )
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn family(&self) -> Family {
        self.family
    }
    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    /// Rows `idx` of the dataset, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            x: self.x.select_rows(idx),
            z: self.z.select_rows(idx),
            family: self.family,
        }
    }

    /// `z * gamma`, or zeros when there are no common-effect covariates.
    pub(crate) fn z_offsets(&self, gamma: &DVector<f64>) -> DVector<f64> {
        if self.q() == 0 {
            DVector::zeros(self.n())
        } else {
            &self.z * gamma
        }
    }

    /// `[x z]`.
    pub(crate) fn joint_design(&self) -> DMatrix<f64> {
        let (n, p, q) = (self.n(), self.p(), self.q());
        let mut d = DMatrix::zeros(n, p + q);
        d.view_mut((0, 0), (n, p)).copy_from(&self.x);
        if q > 0 {
            d.view_mut((0, p), (n, q)).copy_from(&self.z);
        }
        d
    }
}

/// Equality constraint `direction . coef = value`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    direction: DVector<f64>,
    value: f64,
}

impl LinearConstraint {
    pub fn new(direction: DVector<f64>, value: f64) -> Result<Self> {
        if direction.iter().all(|&d| d == 0.0) || !direction.iter().all(|d| d.is_finite()) {
            return Err(Error::invalid("constraint direction must be finite and nonzero"));
        }
        if !value.is_finite() {
            return Err(Error::invalid("constraint value must be finite"));
        }
        Ok(LinearConstraint { direction, value })
    }

    pub fn direction(&self) -> &DVector<f64> {
        &self.direction
    }
    pub fn value(&self) -> f64 {
        self.value
    }

    /// The closest point of the constraint set to the origin, and an
    /// orthonormal basis of the direction's null space.
    fn affine_parametrization(&self) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.direction.len();
        let norm2 = self.direction.norm_squared();
        let base = &self.direction * (self.value / norm2);
        let unit = &self.direction / norm2.sqrt();
        let projector = DMatrix::identity(p, p) - &unit * unit.transpose();
        let eig = projector.symmetric_eigen();
        let cols: Vec<DVector<f64>> = eig
            .eigenvalues
            .iter()
            .enumerate()
            .filter(|(_, &ev)| ev > 0.5)
            .map(|(k, _)| eig.eigenvectors.column(k).into_owned())
            .collect();
        let basis = if cols.is_empty() {
            DMatrix::zeros(p, 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        (base, basis)
    }
}

/// A twice-differentiable penalty subtracted from the weighted
/// log-likelihood.
pub trait CoefficientPenalty: Sync {
    fn value(&self, coef: &DVector<f64>) -> f64;
    fn gradient(&self, coef: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, coef: &DVector<f64>) -> DMatrix<f64>;
}

/// Penalty expressed in the coordinates `u` of `coef = base + basis * u`.
struct Reparametrized<'a> {
    inner: &'a dyn CoefficientPenalty,
    base: &'a DVector<f64>,
    basis: &'a DMatrix<f64>,
}

impl Reparametrized<'_> {
    fn lift(&self, u: &DVector<f64>) -> DVector<f64> {
        self.base + self.basis * u
    }
}

impl CoefficientPenalty for Reparametrized<'_> {
    fn value(&self, u: &DVector<f64>) -> f64 {
        self.inner.value(&self.lift(u))
    }
    fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        self.basis.transpose() * self.inner.gradient(&self.lift(u))
    }
    fn hessian(&self, u: &DVector<f64>) -> DMatrix<f64> {
        self.basis.transpose() * self.inner.hessian(&self.lift(u)) * self.basis
    }
}

/// A weighted single-GLM likelihood problem:
/// maximize `sum_i w_i log f(y_i | design_i . coef + offset_i)`.
#[derive(Debug, Clone)]
pub struct WeightedGlm {
    family: Family,
    y: DVector<f64>,
    design: DMatrix<f64>,
    weights: DVector<f64>,
    offsets: DVector<f64>,
}

impl WeightedGlm {
    /// Validates the inputs and drops observations with negligible weight.
    pub fn new(
        family: Family,
        y: &DVector<f64>,
        design: &DMatrix<f64>,
        weights: &DVector<f64>,
        offsets: &DVector<f64>,
    ) -> Result<Self> {
        let n = y.len();
        if design.nrows() != n || weights.len() != n || offsets.len() != n {
            return Err(Error::invalid("weighted fit: length mismatch"));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("weighted fit: weights must be finite and nonnegative"));
        }
        let keep: Vec<usize> = (0..n).filter(|&i| weights[i] >= MIN_WEIGHT).collect();
        if keep.is_empty() {
            return Err(Error::invalid("weighted fit: weights have no positive mass"));
        }
        let select = |v: &DVector<f64>| DVector::from_iterator(keep.len(), keep.iter().map(|&i| v[i]));
        let (y, weights, offsets, design) = if keep.len() == n {
            (y.clone(), weights.clone(), offsets.clone(), design.clone())
        } else {
            (select(y), select(weights), select(offsets), design.select_rows(&keep))
        };
        Ok(WeightedGlm {
            family,
            y,
            design,
            weights,
            offsets,
        })
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    /// Weighted log-likelihood at `coef`.
    pub fn loglik(&self, coef: &DVector<f64>) -> f64 {
        let eta = &self.design * coef + &self.offsets;
        self.y
            .iter()
            .zip(eta.iter())
            .zip(self.weights.iter())
            .map(|((&y, &e), &w)| w * self.family.log_density_unchecked(y, e))
            .sum()
    }

    pub fn fit(&self, constraint: Option<&LinearConstraint>) -> Result<DVector<f64>> {
        self.fit_from(constraint, None, None)
    }

    /// Fits from an optional starting point, with an optional penalty.
    ///
    /// Unpenalized normal fits are solved in closed form and ignore `start`.
    /// Everything else runs damped Newton (IRLS) from `start`, or from zero.
    pub fn fit_from(
        &self,
        constraint: Option<&LinearConstraint>,
        start: Option<&DVector<f64>>,
        penalty: Option<&dyn CoefficientPenalty>,
    ) -> Result<DVector<f64>> {
        let p = self.dim();
        if let Some(c) = constraint {
            if c.direction.len() != p {
                return Err(Error::invalid("constraint dimension does not match design"));
            }
        }
        if let Some(s) = start {
            if s.len() != p {
                return Err(Error::invalid("start dimension does not match design"));
            }
        }
        if matches!(self.family, Family::Normal { .. }) && penalty.is_none() {
            return match constraint {
                None => self.solve_wls(),
                Some(c) => self.solve_wls_constrained(c),
            };
        }
        let Some(c) = constraint else {
            let start = start.cloned().unwrap_or_else(|| DVector::zeros(p));
            return self.newton(start, penalty);
        };
        let (base, basis) = c.affine_parametrization();
        if basis.ncols() == 0 {
            return Ok(base);
        }
        let reduced = WeightedGlm {
            family: self.family,
            y: self.y.clone(),
            design: &self.design * &basis,
            weights: self.weights.clone(),
            offsets: &self.offsets + &self.design * &base,
        };
        let u0 = match start {
            Some(s) => basis.transpose() * (s - &base),
            None => DVector::zeros(basis.ncols()),
        };
        let u = match penalty {
            Some(inner) => {
                let lifted = Reparametrized {
                    inner,
                    base: &base,
                    basis: &basis,
                };
                reduced.newton(u0, Some(&lifted))?
            }
            None => reduced.newton(u0, None)?,
        };
        Ok(base + basis * u)
    }

    fn gram(&self, curvature: impl Fn(usize) -> f64) -> DMatrix<f64> {
        let mut scaled = self.design.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= self.weights[i] * curvature(i);
        }
        self.design.tr_mul(&scaled)
    }

    fn solve_wls(&self) -> Result<DVector<f64>> {
        let gram = self.gram(|_| 1.0);
        let resid = &self.y - &self.offsets;
        let rhs = self.design.tr_mul(&resid.component_mul(&self.weights));
        solve_spd(gram, &rhs)
    }

    fn solve_wls_constrained(&self, c: &LinearConstraint) -> Result<DVector<f64>> {
        let p = self.dim();
        let gram = self.gram(|_| 1.0);
        check_rank(&gram)?;
        let resid = &self.y - &self.offsets;
        let rhs = self.design.tr_mul(&resid.component_mul(&self.weights));
        let mut kkt = DMatrix::zeros(p + 1, p + 1);
        kkt.view_mut((0, 0), (p, p)).copy_from(&gram);
        for k in 0..p {
            kkt[(k, p)] = c.direction[k];
            kkt[(p, k)] = c.direction[k];
        }
        let mut b = DVector::zeros(p + 1);
        b.rows_mut(0, p).copy_from(&rhs);
        b[p] = c.value;
        let sol = kkt
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::SingularFit("constrained normal equations are singular".into()))?;
        Ok(sol.rows(0, p).into_owned())
    }

    /// A logit fit that reproduces every response is a separation artifact.
    fn perfectly_separated(&self, eta: &DVector<f64>) -> bool {
        matches!(self.family, Family::Logit)
            && !self.y.is_empty()
            && (0..self.y.len()).all(|i| (self.y[i] - logistic(eta[i])).abs() < 1e-6)
    }

    fn objective(&self, coef: &DVector<f64>, penalty: Option<&dyn CoefficientPenalty>) -> f64 {
        self.loglik(coef) - penalty.map_or(0.0, |pen| pen.value(coef))
    }

    fn newton(
        &self,
        mut coef: DVector<f64>,
        penalty: Option<&dyn CoefficientPenalty>,
    ) -> Result<DVector<f64>> {
        let mut obj = self.objective(&coef, penalty);
        for _ in 0..MAX_NEWTON_ITER {
            let eta = &self.design * &coef + &self.offsets;
            let score = DVector::from_iterator(
                self.y.len(),
                (0..self.y.len()).map(|i| self.weights[i] * self.family.score(self.y[i], eta[i])),
            );
            let mut grad = self.design.tr_mul(&score);
            let mut info = self.gram(|i| self.family.curvature(eta[i]));
            if let Some(pen) = penalty {
                grad -= pen.gradient(&coef);
                info += pen.hessian(&coef);
            }
            if grad.norm() < GRADIENT_TOL {
                if penalty.is_none() && self.perfectly_separated(&eta) {
                    return Err(Error::Separation {
                        limit: SEPARATION_NORM,
                    });
                }
                return Ok(coef);
            }
            let step = solve_spd(info, &grad)?;
            let mut t = 1.0;
            let mut accepted = None;
            while t > 1e-10 {
                let cand = &coef + &step * t;
                let cand_obj = self.objective(&cand, penalty);
                if cand_obj.is_finite() && cand_obj >= obj - 1e-12 * obj.abs() {
                    accepted = Some((cand, cand_obj));
                    break;
                }
                t *= 0.5;
            }
            let Some((cand, cand_obj)) = accepted else {
                // No representable ascent remains along the Newton direction.
                return Ok(coef);
            };
            if cand.norm() > SEPARATION_NORM {
                return Err(Error::Separation {
                    limit: SEPARATION_NORM,
                });
            }
            coef = cand;
            obj = cand_obj;
        }
        Err(Error::Convergence(format!(
            "weighted GLM fit did not reach gradient norm {GRADIENT_TOL:e} in {MAX_NEWTON_ITER} iterations"
        )))
    }
}

/// Generalized-EM fallback: a block whose weighted fit diverges keeps its
/// previous value, which cannot lower the EM objective.
pub(crate) fn or_previous(fit: Result<DVector<f64>>, previous: &DVector<f64>) -> Result<DVector<f64>> {
    match fit {
        Err(Error::Separation { .. } | Error::Convergence(_)) => Ok(previous.clone()),
        other => other,
    }
}

/// Maximizes `sum_i weights_i log f(y_i | design_i . coef + offsets_i)`,
/// optionally subject to one linear equality constraint.
pub fn fit_weighted_glm(
    family: Family,
    y: &DVector<f64>,
    design: &DMatrix<f64>,
    weights: &DVector<f64>,
    offsets: &DVector<f64>,
    constraint: Option<&LinearConstraint>,
) -> Result<DVector<f64>> {
    WeightedGlm::new(family, y, design, weights, offsets)?.fit(constraint)
}

fn check_rank(gram: &DMatrix<f64>) -> Result<()> {
    let scale = gram.diagonal().amax();
    if !(scale > 0.0) {
        return Err(Error::SingularFit("design has no support under the weights".into()));
    }
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularFit("design is rank deficient".into()))?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, &d| m.min(d * d));
    if min_pivot < 1e-12 * scale {
        return Err(Error::SingularFit("design is numerically rank deficient".into()));
    }
    Ok(())
}

pub(crate) fn solve_spd(mat: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    check_rank(&mat)?;
    let chol = mat
        .cholesky()
        .ok_or_else(|| Error::SingularFit("information matrix is not positive definite".into()))?;
    Ok(chol.solve(rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct_density(family: Family, y: f64, eta: f64) -> f64 {
        match family {
            Family::Normal { sigma } => {
                (-(y - eta).powi(2) / (2.0 * sigma * sigma)).exp()
                    / (sigma * (2.0 * std::f64::consts::PI).sqrt())
            }
            Family::Logit => {
                let pi = 1.0 / (1.0 + (-eta).exp());
                if y == 1.0 {
                    pi
                } else {
                    1.0 - pi
                }
            }
        }
    }

    #[test]
    fn log_density_examples() {
        let n1 = Family::normal(1.0).unwrap();
        assert!((n1.log_density(0.7, 0.7).unwrap() + 0.918_938_5).abs() < 1e-7);
        assert!((Family::Logit.log_density(1.0, 0.0).unwrap() + 0.693_147_2).abs() < 1e-7);
        assert!((n1.log_density(3.0, 0.0).unwrap() - (-0.918_938_533_204_672_8 - 4.5)).abs() < 1e-12);
        assert!(Family::Logit.log_density(0.5, 0.0).is_err());
        assert!(Family::normal(0.0).is_err());
    }

    #[test]
    fn logit_log_density_is_overflow_safe() {
        let v = Family::Logit.log_density(0.0, 800.0).unwrap();
        assert!((v + 800.0).abs() < 1e-9);
        let v = Family::Logit.log_density(1.0, -800.0).unwrap();
        assert!((v + 800.0).abs() < 1e-9);
    }

    #[test]
    fn derivative_ratio_examples() {
        let n1 = Family::normal(1.0).unwrap();
        assert_eq!(n1.eta_derivative_ratios(1.3, 1.3).unwrap(), (0.0, -1.0));
        let (s, a) = Family::Logit.eta_derivative_ratios(1.0, 0.0).unwrap();
        assert!((s - 0.5).abs() < 1e-15 && a.abs() < 1e-15);
        let (s, a) = n1.eta_derivative_ratios(2.0, 0.0).unwrap();
        assert!((s - 2.0).abs() < 1e-15 && (a - 3.0).abs() < 1e-15);
    }

    fn family_strategy() -> impl Strategy<Value = Family> {
        prop_oneof![
            (0.3f64..3.0).prop_map(|sigma| Family::Normal { sigma }),
            Just(Family::Logit)
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn exp_log_density_matches_direct(family in family_strategy(), u in -4.0f64..4.0, eta in -5.0f64..5.0, b in any::<bool>()) {
            let y = match family { Family::Logit => if b { 1.0 } else { 0.0 }, _ => eta + u };
            let direct = direct_density(family, y, eta);
            let via_log = family.log_density(y, eta).unwrap().exp();
            prop_assert!((via_log - direct).abs() <= 1e-12 * direct.abs());
        }

        #[test]
        fn ratios_match_finite_differences(family in family_strategy(), u in -3.0f64..3.0, eta in -5.0f64..5.0, b in any::<bool>()) {
            let y = match family { Family::Logit => if b { 1.0 } else { 0.0 }, _ => eta + u };
            let h = 1e-4;
            let f = |e: f64| direct_density(family, y, e);
            let f0 = f(eta);
            let d1 = (f(eta + h) - f(eta - h)) / (2.0 * h) / f0;
            let d2 = (f(eta + h) - 2.0 * f0 + f(eta - h)) / (h * h) / f0;
            let (s, a) = family.eta_derivative_ratios(y, eta).unwrap();
            prop_assert!((s - d1).abs() < 1e-5 * s.abs().max(1.0), "s {} fd {}", s, d1);
            prop_assert!((a - d2).abs() < 1e-5 * a.abs().max(1.0), "a {} fd {}", a, d2);
        }
    }

    fn random_problem(seed: u64, n: usize, p: usize, family: Family) -> (DVector<f64>, DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let design = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let truth = DVector::from_fn(p, |k, _| 0.5 * k as f64 - 0.3);
        let offsets = DVector::from_fn(n, |_, _| rng.random::<f64>() * 0.2);
        let eta = &design * &truth + &offsets;
        let y = DVector::from_vec(family.simulate_response(eta.as_slice(), &mut rng));
        (y, design, offsets, DVector::from_fn(n, |_, _| rng.random::<f64>() + 0.05))
    }

    #[test]
    fn exact_fit_through_three_collinear_points() {
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, 3.0, 5.0]);
        let ones = DVector::from_element(3, 1.0);
        let coef = fit_weighted_glm(Family::normal(1.0).unwrap(), &y, &design, &ones, &DVector::zeros(3), None).unwrap();
        assert!((coef[0] - 1.0).abs() < 1e-12 && (coef[1] - 2.0).abs() < 1e-12);
        assert!((&design * &coef - &y).norm() < 1e-12);
    }

    #[test]
    fn normal_fit_matches_normal_equations() {
        let fam = Family::normal(1.0).unwrap();
        let (y, design, offsets, weights) = random_problem(11, 50, 2, fam);
        let coef = fit_weighted_glm(fam, &y, &design, &weights, &offsets, None).unwrap();
        // Oracle: (X' W X)^{-1} X' W (y - o) by explicit inverse.
        let w = DMatrix::from_diagonal(&weights);
        let xtwx = design.transpose() * &w * &design;
        let oracle = xtwx.try_inverse().unwrap() * design.transpose() * &w * (&y - &offsets);
        assert!((coef - oracle).amax() < 1e-10);
    }

    #[test]
    fn equal_weights_match_unweighted_fit() {
        for fam in [Family::normal(0.7).unwrap(), Family::Logit] {
            let (y, design, offsets, _) = random_problem(5, 200, 3, fam);
            let ones = DVector::from_element(200, 1.0);
            let threes = DVector::from_element(200, 3.0);
            let a = fit_weighted_glm(fam, &y, &design, &ones, &offsets, None).unwrap();
            let b = fit_weighted_glm(fam, &y, &design, &threes, &offsets, None).unwrap();
            assert!((a - b).amax() < 1e-10);
        }
    }

    #[test]
    fn doubling_weights_leaves_fit_unchanged() {
        for (seed, fam) in [(1, Family::normal(1.0).unwrap()), (2, Family::Logit)] {
            let (y, design, offsets, weights) = random_problem(seed, 300, 3, fam);
            let a = fit_weighted_glm(fam, &y, &design, &weights, &offsets, None).unwrap();
            let b = fit_weighted_glm(fam, &y, &design, &(&weights * 2.0), &offsets, None).unwrap();
            assert!((a - b).amax() < 1e-10);
        }
    }

    #[test]
    fn constrained_fit_respects_constraint_and_loses_objective() {
        for (seed, fam) in [(3, Family::normal(1.0).unwrap()), (4, Family::Logit)] {
            let (y, design, offsets, weights) = random_problem(seed, 300, 3, fam);
            let glm = WeightedGlm::new(fam, &y, &design, &weights, &offsets).unwrap();
            let free = glm.fit(None).unwrap();
            let c = LinearConstraint::new(DVector::from_vec(vec![1.0, 1.0, 1.0]), 2.0).unwrap();
            let con = glm.fit(Some(&c)).unwrap();
            assert!((con.sum() - 2.0).abs() <= 1e-10);
            assert!(glm.loglik(&con) <= glm.loglik(&free) + 1e-12);
            // The constrained optimum beats nearby feasible points.
            for delta in [[0.01, -0.01, 0.0], [0.0, 0.02, -0.02]] {
                let moved = &con + DVector::from_row_slice(&delta);
                assert!(glm.loglik(&moved) <= glm.loglik(&con) + 1e-12);
            }
        }
    }

    #[test]
    fn rank_deficient_design_is_singular() {
        let design = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 4.0, 8.0]);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        let w = DVector::from_element(4, 1.0);
        for fam in [Family::normal(1.0).unwrap(), Family::Logit] {
            let err = fit_weighted_glm(fam, &y, &design, &w, &DVector::zeros(4), None).unwrap_err();
            assert!(matches!(err, Error::SingularFit(_)), "{err}");
        }
    }

    #[test]
    fn separated_logit_data_is_reported() {
        let design = DMatrix::from_row_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let w = DVector::from_element(6, 1.0);
        let err = fit_weighted_glm(Family::Logit, &y, &design, &w, &DVector::zeros(6), None).unwrap_err();
        assert!(matches!(err, Error::Separation { .. } | Error::Convergence(_)), "{err}");
    }

    #[test]
    fn simulated_normal_moments() {
        let fam = Family::normal(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = fam.simulate_response(&vec![0.0; 100_000], &mut rng);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.01);
        let draws = fam.simulate_response(&vec![5.0; 100_000], &mut rng);
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn simulated_bernoulli_is_fair_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws = Family::Logit.simulate_response(&vec![0.0; 100_000], &mut rng);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.005);
    }
}
