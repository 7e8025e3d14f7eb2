//! Maximization of `2 v.w - v' Q v` over the nonnegative orthant.
//!
//! [`NnqpSolver`] validates and caches `Q` once so the Monte Carlo driver
//! can reuse it across many right-hand sides. The active-set iteration is
//! the Lawson-Hanson scheme written directly on the quadratic form: the
//! passive set grows by the coordinate with the largest positive dual
//! `w - Q v`, and interpolation steps drop coordinates that would turn
//! negative. [`brute_force_nnqp`] enumerates every support and serves as
//! an independent check.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Entries at or below this are reported as zero.
pub const SUPPORT_TOL: f64 = 1e-12;
const MIN_EIGENVALUE: f64 = 1e-10;
const BRUTE_FORCE_MAX_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct NnqpSolution {
    pub v: DVector<f64>,
    /// Indices with `v_k > SUPPORT_TOL`, ascending.
    pub support: Vec<usize>,
    /// `2 v.w - v' Q v`.
    pub objective: f64,
}

impl NnqpSolution {
    fn new(v: DVector<f64>, w: &DVector<f64>, q: &DMatrix<f64>) -> Self {
        let support = (0..v.len()).filter(|&k| v[k] > SUPPORT_TOL).collect();
        let objective = 2.0 * v.dot(w) - (q * &v).dot(&v);
        NnqpSolution { v, support, objective }
    }
}

#[derive(Debug, Clone)]
pub struct NnqpSolver {
    q: DMatrix<f64>,
    max_pivots: usize,
}

impl NnqpSolver {
    /// Fails unless `q` is square, symmetric and has minimum eigenvalue
    /// above `1e-10`.
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        let d = q.nrows();
        if d == 0 || q.ncols() != d {
            return Err(Error::invalid("NNQP matrix must be square and nonempty"));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("NNQP matrix has non-finite entries"));
        }
        let scale = q.amax().max(1.0);
        if (&q - q.transpose()).amax() > 1e-10 * scale {
            return Err(Error::invalid("NNQP matrix is not symmetric"));
        }
        let min_eig = q.clone().symmetric_eigen().eigenvalues.min();
        if min_eig <= MIN_EIGENVALUE {
            return Err(Error::invalid(format!(
                "NNQP matrix is not positive definite (minimum eigenvalue {min_eig:e})"
            )));
        }
        Ok(NnqpSolver {
            q,
            max_pivots: 3 * d * d,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    fn solve_on(&self, passive: &[usize], w: &DVector<f64>) -> Result<DVector<f64>> {
        let sub = self.q.select_rows(passive).select_columns(passive);
        let rhs = DVector::from_iterator(passive.len(), passive.iter().map(|&k| w[k]));
        let chol = sub
            .cholesky()
            .ok_or_else(|| Error::Numerical("NNQP principal submatrix lost definiteness".into()))?;
        Ok(chol.solve(&rhs))
    }

    pub fn solve(&self, w: &DVector<f64>) -> Result<NnqpSolution> {
        let d = self.dim();
        if w.len() != d {
            return Err(Error::invalid(format!("w has length {}, expected {d}", w.len())));
        }
        let tol = 1e-12 * w.amax().max(self.q.amax()).max(1.0);
        let mut v = DVector::zeros(d);
        let mut in_set = vec![false; d];
        let mut blocked = vec![false; d];
        let mut pivots = 0;
        loop {
            let dual = w - &self.q * &v;
            let entering = (0..d)
                .filter(|&k| !in_set[k] && !blocked[k] && dual[k] > tol)
                .max_by(|&a, &b| dual[a].total_cmp(&dual[b]));
            let Some(j) = entering else { break };
            pivots += 1;
            if pivots > self.max_pivots {
                return Err(Error::Convergence(format!(
                    "NNQP active set exceeded {} pivots",
                    self.max_pivots
                )));
            }
            in_set[j] = true;
            let mut first = true;
            loop {
                let passive: Vec<usize> = (0..d).filter(|&k| in_set[k]).collect();
                let s = self.solve_on(&passive, w)?;
                if s.iter().all(|&x| x > SUPPORT_TOL) {
                    v.fill(0.0);
                    for (pos, &k) in passive.iter().enumerate() {
                        v[k] = s[pos];
                    }
                    blocked.iter_mut().for_each(|b| *b = false);
                    break;
                }
                if first {
                    let pos = passive.iter().position(|&k| k == j).unwrap();
                    if s[pos] <= SUPPORT_TOL {
                        // The entering coordinate cannot move off zero; skip it.
                        in_set[j] = false;
                        blocked[j] = true;
                        break;
                    }
                }
                first = false;
                let mut step = 1.0f64;
                for (pos, &k) in passive.iter().enumerate() {
                    if s[pos] <= SUPPORT_TOL {
                        let denom = v[k] - s[pos];
                        if denom > 0.0 {
                            step = step.min(v[k] / denom);
                        }
                    }
                }
                for (pos, &k) in passive.iter().enumerate() {
                    v[k] += step * (s[pos] - v[k]);
                    if v[k] <= SUPPORT_TOL {
                        v[k] = 0.0;
                        in_set[k] = false;
                    }
                }
                if !in_set.iter().any(|&b| b) {
                    break;
                }
            }
        }
        Ok(NnqpSolution::new(v, w, &self.q))
    }
}

/// Unique maximizer of `2 v.w - v' Q v` subject to `v >= 0`.
pub fn solve_nnqp(w: &DVector<f64>, q: &DMatrix<f64>) -> Result<NnqpSolution> {
    NnqpSolver::new(q.clone())?.solve(w)
}

/// Enumerates all `2^d` supports and keeps the best KKT-feasible candidate.
pub fn brute_force_nnqp(w: &DVector<f64>, q: &DMatrix<f64>) -> Result<NnqpSolution> {
    let d = w.len();
    if d > BRUTE_FORCE_MAX_DIM {
        return Err(Error::TooLarge(format!(
            "brute-force NNQP limited to d <= {BRUTE_FORCE_MAX_DIM}, got {d}"
        )));
    }
    if q.nrows() != d || q.ncols() != d {
        return Err(Error::invalid("NNQP dimensions do not match"));
    }
    let kkt_tol = 1e-9 * w.amax().max(q.amax()).max(1.0);
    let mut best: Option<NnqpSolution> = None;
    let mut best_feasible: Option<NnqpSolution> = None;
    for mask in 0u32..(1u32 << d) {
        let set: Vec<usize> = (0..d).filter(|&k| mask & (1 << k) != 0).collect();
        let mut v = DVector::zeros(d);
        if !set.is_empty() {
            let sub = q.select_rows(&set).select_columns(&set);
            let rhs = DVector::from_iterator(set.len(), set.iter().map(|&k| w[k]));
            let Some(sol) = sub.lu().solve(&rhs) else { continue };
            if sol.iter().any(|&x| x < 0.0) {
                continue;
            }
            for (pos, &k) in set.iter().enumerate() {
                v[k] = sol[pos];
            }
        }
        let candidate = NnqpSolution::new(v, w, q);
        let dual = w - q * &candidate.v;
        let positive = set.iter().all(|&k| candidate.v[k] > SUPPORT_TOL);
        let slack = (0..d).filter(|k| !set.contains(k)).all(|k| dual[k] <= kkt_tol);
        let better = |cur: &Option<NnqpSolution>| cur.as_ref().is_none_or(|b| candidate.objective > b.objective);
        if better(&best_feasible) {
            best_feasible = Some(candidate.clone());
        }
        if positive && slack && better(&best) {
            best = Some(candidate);
        }
    }
    best.or(best_feasible)
        .ok_or_else(|| Error::Numerical("no feasible support found".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, d: usize) -> (DVector<f64>, DMatrix<f64>) {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let q = &a * a.transpose() + DMatrix::identity(d, d) * 0.05;
        let w = DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        (w, q)
    }

    #[test]
    fn scalar_cases() {
        let q = DMatrix::from_element(1, 1, 1.0);
        let s = solve_nnqp(&DVector::from_element(1, 2.0), &q).unwrap();
        assert_eq!(s.v[0], 2.0);
        assert_eq!(s.objective, 4.0);
        let s = solve_nnqp(&DVector::from_element(1, -3.0), &q).unwrap();
        assert_eq!(s.v[0], 0.0);
        assert_eq!(s.objective, 0.0);
        assert!(s.support.is_empty());
    }

    #[test]
    fn separable_identity() {
        let s = solve_nnqp(&DVector::from_vec(vec![1.0, -1.0]), &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(s.v, DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(s.support, vec![0]);
        assert!((s.objective - 1.0).abs() < 1e-15);
    }

    #[test]
    fn correlated_pair_matches_enumeration() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let w = DVector::from_vec(vec![1.0, 0.5]);
        let a = solve_nnqp(&w, &q).unwrap();
        let b = brute_force_nnqp(&w, &q).unwrap();
        assert_eq!(a.support, b.support);
        assert!((a.objective - b.objective).abs() < 1e-8);
        // Q_SS v_S = w_S on S = {0}: v = 1; dual on 1 is 0.5 - 0.9 < 0.
        assert_eq!(a.support, vec![0]);
        assert!((a.v[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn brute_force_trivial_cases() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5, 4.0]));
        let s = brute_force_nnqp(&DVector::zeros(3), &q).unwrap();
        assert_eq!(s.v, DVector::zeros(3));
        let w = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let s = brute_force_nnqp(&w, &q).unwrap();
        for k in 0..3 {
            assert!((s.v[k] - w[k].max(0.0) / q[(k, k)]).abs() < 1e-12);
        }
        assert!(matches!(
            brute_force_nnqp(&DVector::zeros(17), &DMatrix::identity(17, 17)),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn rejects_indefinite_matrix() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(solve_nnqp(&DVector::zeros(2), &q), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn solution_satisfies_kkt_and_objective_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..300 {
            let d = rng.random_range(1..=8);
            let (w, q) = random_instance(&mut rng, d);
            let s = solve_nnqp(&w, &q).unwrap();
            let dual = &w - &q * &s.v;
            for k in 0..d {
                assert!(s.v[k] >= 0.0);
                if s.support.contains(&k) {
                    assert!(dual[k].abs() < 1e-8);
                } else {
                    assert!(dual[k] <= 1e-8);
                }
            }
            let quad = (&q * &s.v).dot(&s.v);
            assert!((s.objective - quad).abs() < 1e-8);
        }
    }

    #[test]
    fn scaling_w_scales_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let d = rng.random_range(1..=6);
            let (w, q) = random_instance(&mut rng, d);
            let c = rng.random::<f64>() * 5.0 + 0.1;
            let a = solve_nnqp(&w, &q).unwrap();
            let b = solve_nnqp(&(&w * c), &q).unwrap();
            assert_eq!(a.support, b.support);
            assert!((&a.v * c - &b.v).amax() < 1e-9 * c.max(1.0));
        }
    }
}
