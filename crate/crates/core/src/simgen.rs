//! Built-in data-generating scenarios and Monte Carlo rejection studies.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Bernoulli, Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{logistic, Dataset, Family};
use crate::procedure::{run_test, TestConfig};
use crate::seed::{derive_seed, derived_rng};

/// Largest tolerated share of failed replicates in a rejection study.
pub const MAX_FAILURE_RATE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CovariateLaw {
    /// Every subgroup and shared covariate iid uniform on `(lo, hi)`.
    Uniform { lo: f64, hi: f64 },
    /// Subgroup design `(1, z, x)` with `z ~ Bernoulli(0.5)` and `x ~ N(-1, 1)`.
    InterceptBinaryNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Membership {
    /// Component drawn from the spec weights.
    Categorical,
    /// Component 0 when `coefficients . x > cutoff`, otherwise component 1.
    Threshold { coefficients: Vec<f64>, cutoff: f64 },
    /// Component 1 with probability `logistic(coefficients . x)`, otherwise 0.
    Logistic { coefficients: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    pub description: String,
    pub family: Family,
    /// Component weights; nominal shares when membership is not categorical.
    pub weights: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub covariates: CovariateLaw,
    pub membership: Membership,
    pub n: usize,
    /// Number of components under the null hypothesis this scenario probes.
    pub tested_m0: usize,
    pub default_c: f64,
    pub default_k: usize,
    /// Tuning constants scanned when calibrating `C` for this scenario.
    pub c_grid: Vec<f64>,
}

impl ScenarioSpec {
    pub fn m(&self) -> usize {
        self.weights.len()
    }

    pub fn p(&self) -> usize {
        self.thetas.first().map_or(0, Vec::len)
    }

    pub fn q(&self) -> usize {
        self.gamma.len()
    }

    pub fn with_n(&self, n: usize) -> ScenarioSpec {
        ScenarioSpec { n, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        let m = self.m();
        if m == 0 || self.thetas.len() != m {
            return Err(Error::invalid(format!("scenario {}: weights and thetas disagree", self.id)));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("scenario {}: weights must sum to 1", self.id)));
        }
        let p = self.p();
        if p == 0 || self.thetas.iter().any(|t| t.len() != p) {
            return Err(Error::invalid(format!("scenario {}: ragged coefficient rows", self.id)));
        }
        match &self.covariates {
            CovariateLaw::Uniform { lo, hi } if !(lo < hi) => {
                return Err(Error::invalid(format!("scenario {}: empty covariate range", self.id)))
            }
            CovariateLaw::InterceptBinaryNormal if p != 3 || self.q() != 0 => {
                return Err(Error::invalid(format!(
                    "scenario {}: intercept/binary/normal law needs p = 3 and q = 0",
                    self.id
                )))
            }
            _ => {}
        }
        match &self.membership {
            Membership::Categorical => {}
            Membership::Threshold { coefficients, .. } | Membership::Logistic { coefficients } => {
                if m != 2 || coefficients.len() != p {
                    return Err(Error::invalid(format!(
                        "scenario {}: covariate-driven membership needs two components and p coefficients",
                        self.id
                    )));
                }
            }
        }
        if self.n == 0 || self.tested_m0 == 0 || self.default_k == 0 || !(self.default_c > 0.0) {
            return Err(Error::invalid(format!("scenario {}: bad defaults", self.id)));
        }
        Ok(())
    }
}

/// Draws one dataset of `spec.n` observations.
pub fn generate_scenario<R: RngCore + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    let (n, p, q) = (spec.n, spec.p(), spec.q());
    let (x, z) = match spec.covariates {
        CovariateLaw::Uniform { lo, hi } => {
            let law = Uniform::new(lo, hi).map_err(|e| Error::invalid(e.to_string()))?;
            let x = DMatrix::from_fn(n, p, |_, _| law.sample(rng));
            let z = DMatrix::from_fn(n, q, |_, _| law.sample(rng));
            (x, z)
        }
        CovariateLaw::InterceptBinaryNormal => {
            let coin = Bernoulli::new(0.5).expect("valid probability");
            let normal = Normal::new(-1.0, 1.0).expect("valid scale");
            let mut x = DMatrix::zeros(n, 3);
            for i in 0..n {
                x[(i, 0)] = 1.0;
                x[(i, 1)] = f64::from(u8::from(coin.sample(rng)));
                x[(i, 2)] = normal.sample(rng);
            }
            (x, DMatrix::zeros(n, 0))
        }
    };
    let cumulative: Vec<f64> = spec
        .weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let mut eta = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let dot = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
        let h = match &spec.membership {
            Membership::Categorical => {
                let u: f64 = rng.random();
                cumulative.iter().position(|&c| u < c).unwrap_or(spec.m() - 1)
            }
            Membership::Threshold { coefficients, cutoff } => usize::from(dot(coefficients) <= *cutoff),
            Membership::Logistic { coefficients } => usize::from(rng.random::<f64>() < logistic(dot(coefficients))),
        };
        let shared: f64 = (0..q).map(|k| z[(i, k)] * spec.gamma[k]).sum();
        eta.push(dot(&spec.thetas[h]) + shared);
    }
    let y = spec.family.simulate_response(&eta, rng);
    Dataset::new(DVector::from_vec(y), x, z, spec.family)
}

/// Dataset for replicate `index` of a study seeded by `seed`.
pub fn replicate_dataset(spec: &ScenarioSpec, seed: u64, index: u64) -> Result<Dataset> {
    generate_scenario(spec, &mut derived_rng(seed, "replicate-data", index))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectionRow {
    pub level: f64,
    pub proportion: f64,
    /// Binomial Monte Carlo standard error of `proportion`.
    pub mc_se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectionTable {
    pub scenario: String,
    pub m0: usize,
    pub n: usize,
    pub reps: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub rows: Vec<RejectionRow>,
    /// p-value of each replicate; `None` marks a failed replicate.
    pub pvalues: Vec<Option<f64>>,
}

pub(crate) fn rejection_rows(pvalues: &[f64], levels: &[f64]) -> Vec<RejectionRow> {
    let ok = pvalues.len().max(1) as f64;
    levels
        .iter()
        .map(|&level| {
            let proportion = pvalues.iter().filter(|&&p| p <= level).count() as f64 / ok;
            RejectionRow {
                level,
                proportion,
                mc_se: (proportion * (1.0 - proportion) / ok).sqrt(),
            }
        })
        .collect()
}

pub(crate) fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() || levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
        return Err(Error::invalid("levels must lie in (0, 1)"));
    }
    Ok(())
}

/// Rejection proportions of the test of `m0` components over `reps`
/// replicate datasets of `spec`.
pub fn monte_carlo_rejection(
    spec: &ScenarioSpec,
    m0: usize,
    config: &TestConfig,
    reps: usize,
    levels: &[f64],
) -> Result<RejectionTable> {
    spec.validate()?;
    check_levels(levels)?;
    if reps == 0 {
        return Err(Error::invalid("reps must be at least 1"));
    }
    let outcomes: Vec<Result<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let data = replicate_dataset(spec, config.seed, r)?;
            let cfg = TestConfig {
                seed: derive_seed(config.seed, "replicate-test", r),
                ..config.clone()
            };
            run_test(&data, m0, &cfg).map(|report| report.pvalue)
        })
        .collect();
    let mut pvalues = Vec::with_capacity(reps);
    let mut ok = Vec::with_capacity(reps);
    let mut failure_messages = Vec::new();
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(p) => {
                ok.push(p);
                pvalues.push(Some(p));
            }
            Err(e) => {
                failure_messages.push(format!("replicate {r}: {e}"));
                pvalues.push(None);
            }
        }
    }
    let failures = failure_messages.len();
    if failures as f64 > MAX_FAILURE_RATE * reps as f64 {
        return Err(Error::Numerical(format!(
            "{failures} of {reps} replicates failed (limit {:.0}%); first: {}",
            MAX_FAILURE_RATE * 100.0,
            failure_messages[0]
        )));
    }
    Ok(RejectionTable {
        scenario: spec.id.clone(),
        m0,
        n: spec.n,
        reps,
        failures,
        failure_messages,
        rows: rejection_rows(&ok, levels),
        pvalues,
    })
}

const NORMAL_C_GRID_1: [f64; 10] = [0.2, 0.4, 0.6, 0.8, 1.0, 1.5, 2.0, 3.0, 8.0, 12.0];
const NORMAL_C_GRID_2: [f64; 7] = [0.2, 0.4, 0.6, 0.8, 1.0, 1.5, 2.0];
const NORMAL_C_GRID_3: [f64; 9] = [0.2, 0.4, 0.6, 0.8, 1.0, 1.5, 2.0, 3.0, 5.0];
const LOGIT_C_GRID_1: [f64; 6] = [0.4, 0.8, 1.4, 1.8, 2.2, 3.0];
const LOGIT_C_GRID_2: [f64; 6] = [0.1, 0.5, 0.9, 1.0, 1.5, 2.0];
const LOGIT_C_GRID_3: [f64; 6] = [0.2, 0.6, 1.0, 1.5, 1.9, 2.0];

struct Base {
    family: Family,
    covariates: CovariateLaw,
    gamma: Vec<f64>,
    tested_m0: usize,
    c: f64,
    c_grid: &'static [f64],
}

fn categorical(id: &str, description: &str, base: &Base, weights: &[f64], thetas: &[[f64; 2]], n: usize) -> ScenarioSpec {
    ScenarioSpec {
        id: id.into(),
        description: description.into(),
        family: base.family,
        weights: weights.to_vec(),
        thetas: thetas.iter().map(|t| t.to_vec()).collect(),
        gamma: base.gamma.clone(),
        covariates: base.covariates.clone(),
        membership: Membership::Categorical,
        n,
        tested_m0: base.tested_m0,
        default_c: base.c,
        default_k: 3,
        c_grid: base.c_grid.to_vec(),
    }
}

fn shen(id: &str, a: f64, b: f64, c: f64, share: f64) -> ScenarioSpec {
    ScenarioSpec {
        id: id.into(),
        description: format!(
            "normal sigma=0.5, design (1,z,x); membership logistic(1 + {c} x); shift (1, {a}, {b})"
        ),
        family: Family::Normal { sigma: 0.5 },
        weights: vec![1.0 - share, share],
        thetas: vec![vec![1.0, 0.0, 2.0], vec![2.0, a, 2.0 + b]],
        gamma: vec![],
        covariates: CovariateLaw::InterceptBinaryNormal,
        membership: Membership::Logistic {
            coefficients: vec![1.0, 0.0, c],
        },
        n: 100,
        tested_m0: 1,
        default_c: 3.0,
        default_k: 1,
        c_grid: NORMAL_C_GRID_1.to_vec(),
    }
}

fn tree(id: &str, description: &str, membership: Membership, weights: [f64; 2]) -> ScenarioSpec {
    ScenarioSpec {
        id: id.into(),
        description: description.into(),
        family: Family::Logit,
        weights: weights.to_vec(),
        thetas: vec![vec![-0.1, -0.2], vec![0.2, 0.1]],
        gamma: vec![],
        covariates: CovariateLaw::Uniform { lo: 5.0, hi: 10.0 },
        membership,
        n: 500,
        tested_m0: 2,
        default_c: 1.0,
        default_k: 3,
        c_grid: LOGIT_C_GRID_2.to_vec(),
    }
}

/// Every built-in scenario.
pub fn list_builtin_scenarios() -> Vec<ScenarioSpec> {
    let normal = |tested_m0, c, c_grid| Base {
        family: Family::Normal { sigma: 1.0 },
        covariates: CovariateLaw::Uniform { lo: 0.0, hi: 1.0 },
        gamma: vec![1.0],
        tested_m0,
        c,
        c_grid,
    };
    let logit = |tested_m0, c, c_grid| Base {
        family: Family::Logit,
        covariates: CovariateLaw::Uniform { lo: 5.0, hi: 10.0 },
        gamma: vec![],
        tested_m0,
        c,
        c_grid,
    };
    let (n1, n2, n3) = (normal(1, 3.0, &NORMAL_C_GRID_1[..]), normal(2, 0.8, &NORMAL_C_GRID_2[..]), normal(3, 2.0, &NORMAL_C_GRID_3[..]));
    let (l1, l2, l3) = (logit(1, 1.8, &LOGIT_C_GRID_1[..]), logit(2, 1.0, &LOGIT_C_GRID_2[..]), logit(3, 2.0, &LOGIT_C_GRID_3[..]));
    vec![
        categorical("normal-s1-null", "normal, one group", &n1, &[1.0], &[[3.0, 5.0]], 1500),
        categorical("normal-s1-weak", "normal, two groups, small shift", &n1, &[0.8, 0.2], &[[3.0, 5.0], [3.0, 3.0]], 500),
        categorical("normal-s1-strong", "normal, two groups, large shift", &n1, &[0.6, 0.4], &[[3.0, 5.0], [3.0, -5.0]], 500),
        categorical("normal-s2-null", "normal, two groups", &n2, &[0.4, 0.6], &[[1.0, 6.0], [2.0, -6.0]], 1500),
        categorical(
            "normal-s2-weak",
            "normal, three groups, one near another",
            &n2,
            &[0.4, 0.4, 0.2],
            &[[1.0, 6.0], [2.0, -6.0], [3.0, -5.5]],
            500,
        ),
        categorical(
            "normal-s2-strong",
            "normal, four well separated groups",
            &n2,
            &[0.25, 0.25, 0.25, 0.25],
            &[[1.0, 6.0], [2.0, -6.0], [3.0, 5.0], [6.0, -6.0]],
            500,
        ),
        categorical(
            "normal-s3-null",
            "normal, three groups",
            &n3,
            &[0.4, 0.3, 0.3],
            &[[1.0, 6.0], [2.0, -6.0], [-2.0, 3.0]],
            1500,
        ),
        categorical(
            "normal-s3-weak",
            "normal, four groups",
            &n3,
            &[0.2, 0.2, 0.3, 0.3],
            &[[1.0, 6.0], [1.0, -4.0], [2.0, -6.0], [-2.0, 3.0]],
            500,
        ),
        categorical(
            "normal-s3-strong",
            "normal, six groups",
            &n3,
            &[0.2, 0.2, 0.1, 0.2, 0.2, 0.1],
            &[[1.0, 6.0], [1.0, -4.0], [2.0, -6.0], [-2.0, 3.0], [-5.0, -4.0], [5.0, 5.0]],
            500,
        ),
        categorical("logit-s1-null", "logistic, one group", &l1, &[1.0], &[[0.4, 0.6]], 1500),
        categorical("logit-s1-weak", "logistic, two groups, small shift", &l1, &[0.5, 0.5], &[[-0.4, -0.2], [0.0, 0.0]], 500),
        categorical("logit-s1-strong", "logistic, two groups, large shift", &l1, &[0.9, 0.1], &[[-0.4, -0.2], [0.2, 0.4]], 500),
        categorical("logit-s2-null", "logistic, two groups", &l2, &[0.6, 0.4], &[[-0.1, -0.2], [0.2, 0.1]], 1500),
        categorical(
            "logit-s2-weak",
            "logistic, four groups, one dominant",
            &l2,
            &[0.1, 0.1, 0.1, 0.7],
            &[[-0.2, -0.4], [-0.2, 0.0], [-0.2, 0.2], [0.4, 0.2]],
            500,
        ),
        categorical(
            "logit-s2-strong",
            "logistic, four equal groups",
            &l2,
            &[0.25, 0.25, 0.25, 0.25],
            &[[-0.1, -0.2], [-0.1, 0.0], [1.0, 0.0], [0.2, 0.2]],
            500,
        ),
        categorical(
            "logit-s3-null",
            "logistic, three groups",
            &l3,
            &[0.4, 0.3, 0.3],
            &[[-0.1, -0.2], [0.0, 0.3], [0.3, 0.0]],
            1500,
        ),
        categorical(
            "logit-s3-weak",
            "logistic, six groups",
            &l3,
            &[0.2, 0.2, 0.2, 0.2, 0.1, 0.1],
            &[[-0.1, -0.2], [0.0, 0.3], [0.3, 0.0], [0.1, -0.2], [-0.2, 0.2], [-0.3, 0.0]],
            500,
        ),
        categorical(
            "logit-s3-strong",
            "logistic, six groups, wider spread",
            &l3,
            &[0.1, 0.2, 0.2, 0.2, 0.2, 0.1],
            &[[-0.1, -0.2], [0.1, -0.2], [-0.3, 0.1], [-0.1, 0.1], [0.0, 0.3], [0.2, 0.3]],
            500,
        ),
        ScenarioSpec {
            id: "shen-null".into(),
            description: "normal sigma=0.5, design (1,z,x), one group".into(),
            weights: vec![1.0],
            thetas: vec![vec![1.0, 0.0, 2.0]],
            membership: Membership::Categorical,
            ..shen("shen-null", 0.0, 0.0, 0.0, 0.0)
        },
        shen("shen-a0.5-b1-c1", 0.5, 1.0, 1.0, 0.5),
        shen("shen-a0.5-b0-c1", 0.5, 0.0, 1.0, 0.5),
        shen("shen-a0.5-b1-c0.5", 0.5, 1.0, 0.5, 0.616),
        shen("shen-a1-b1-c1", 1.0, 1.0, 1.0, 0.5),
        shen("shen-a1-b0-c1", 1.0, 0.0, 1.0, 0.5),
        shen("shen-a1-b1-c0.5", 1.0, 1.0, 0.5, 0.616),
        tree(
            "tree-s1",
            "logistic, two groups split at x2 > 7",
            Membership::Threshold {
                coefficients: vec![0.0, 1.0],
                cutoff: 7.0,
            },
            [0.6, 0.4],
        ),
        tree(
            "tree-s2",
            "logistic, two groups split at x1 + x2 > 14",
            Membership::Threshold {
                coefficients: vec![1.0, 1.0],
                cutoff: 14.0,
            },
            [0.02, 0.98],
        ),
        tree("tree-s3", "logistic, two random groups", Membership::Categorical, [0.6, 0.4]),
    ]
}

pub fn find_scenario(id: &str) -> Result<ScenarioSpec> {
    let all = list_builtin_scenarios();
    all.iter().find(|s| s.id == id).cloned().ok_or_else(|| {
        let ids: Vec<&str> = all.iter().map(|s| s.id.as_str()).collect();
        Error::invalid(format!("unknown scenario '{id}'; valid ids: {}", ids.join(", ")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    #[test]
    fn registry_is_valid_and_round_trips() {
        let all = list_builtin_scenarios();
        assert!(all.len() >= 14);
        for s in &all {
            s.validate().unwrap();
            let text = serde_json::to_string(s).unwrap();
            let back: ScenarioSpec = serde_json::from_str(&text).unwrap();
            assert_eq!(&back, s);
        }
        let mut ids: Vec<&str> = all.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), all.len());
        assert_eq!(find_scenario("normal-s2-null").unwrap().weights, vec![0.4, 0.6]);
        assert!(find_scenario("nope").is_err());
    }

    #[test]
    fn same_seed_same_data() {
        let spec = find_scenario("normal-s2-null").unwrap().with_n(200);
        let a = generate_scenario(&spec, &mut rng_from(9)).unwrap();
        let b = generate_scenario(&spec, &mut rng_from(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_replicate_proportion_is_zero_or_one() {
        let spec = find_scenario("normal-s1-null").unwrap().with_n(150);
        let cfg = TestConfig {
            mc_draws: 500,
            ..TestConfig::default()
        };
        let t = monte_carlo_rejection(&spec, 1, &cfg, 1, &[0.05]).unwrap();
        assert!(t.rows[0].proportion == 0.0 || t.rows[0].proportion == 1.0);
        assert!(monte_carlo_rejection(&spec, 1, &cfg, 0, &[0.05]).is_err());
    }

    #[test]
    fn threshold_membership_is_deterministic_in_covariates() {
        let spec = find_scenario("tree-s1").unwrap().with_n(2000);
        let data = generate_scenario(&spec, &mut rng_from(1)).unwrap();
        let share = (0..data.n()).filter(|&i| data.x()[(i, 1)] > 7.0).count() as f64 / 2000.0;
        assert!((share - 0.6).abs() < 0.04);
        assert!(data.y().iter().all(|&y| y == 0.0 || y == 1.0));
    }
}
