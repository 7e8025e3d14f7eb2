//! Cross-validated prediction of a binary response from a fitted mixture
//! of logistic regressions.
//!
//! Unlabeled test observations are routed to the component whose training
//! centroid (mean covariate vector of the observations it owns by largest
//! responsibility) is nearest in Euclidean distance on `x`, and scored with
//! that component's model.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{fit_weighted_glm, logistic, CoefficientPenalty, Dataset, Family, WeightedGlm};
use crate::mixture::{fit_null, responsibilities, FitConfig, MixingDistribution};
use crate::seed::{derive_seed, derived_rng};

pub const ROUTING_RULE: &str =
    "test observations go to the component with the nearest training centroid in x; \
     centroids average the training rows each component owns by largest responsibility";

/// Ridge used only when the training data are separable and the maximum
/// likelihood estimate does not exist.
const SEPARATION_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub m: usize,
    pub folds: usize,
    pub fit: FitConfig,
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            m: 1,
            folds: 5,
            fit: FitConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the scored observations hold a single class.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_test: usize,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgroupModel {
    pub alpha: f64,
    pub theta: Vec<f64>,
    pub assigned: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictReport {
    pub m: usize,
    pub folds: Vec<FoldResult>,
    /// Mean of each metric over successful folds.
    pub aggregate: Option<Metrics>,
    pub failed_folds: usize,
    /// Mixture fitted to all observations.
    pub subgroups: Vec<SubgroupModel>,
    pub gamma: Vec<f64>,
    pub routing_rule: String,
    pub config: PredictConfig,
}

struct Ridge(f64);

impl CoefficientPenalty for Ridge {
    fn value(&self, coef: &DVector<f64>) -> f64 {
        0.5 * self.0 * coef.norm_squared()
    }
    fn gradient(&self, coef: &DVector<f64>) -> DVector<f64> {
        coef * self.0
    }
    fn hessian(&self, coef: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(coef.len(), coef.len()) * self.0
    }
}

struct Model {
    psi: MixingDistribution,
    gamma: DVector<f64>,
    centroids: Vec<Option<DVector<f64>>>,
    owned: Vec<usize>,
}

fn fit_single(data: &Dataset) -> Result<(DVector<f64>, DVector<f64>)> {
    let design = data.joint_design();
    let w = DVector::from_element(data.n(), 1.0);
    let off = DVector::zeros(data.n());
    let coef = match fit_weighted_glm(data.family(), data.y(), &design, &w, &off, None) {
        Err(Error::Separation { .. } | Error::Convergence(_)) => {
            WeightedGlm::new(data.family(), data.y(), &design, &w, &off)?.fit_from(
                None,
                None,
                Some(&Ridge(SEPARATION_RIDGE * data.n() as f64)),
            )?
        }
        other => other?,
    };
    let p = data.p();
    Ok((coef.rows(0, p).into_owned(), coef.rows(p, data.q()).into_owned()))
}

fn fit_model(data: &Dataset, m: usize, fit: &FitConfig) -> Result<Model> {
    let (psi, gamma) = if m == 1 {
        let (theta, gamma) = fit_single(data)?;
        (MixingDistribution::new(vec![1.0], vec![theta.iter().copied().collect()])?, gamma)
    } else {
        let f = fit_null(data, m, fit)?;
        let gamma = f.gamma_vector();
        (f.psi, gamma)
    };
    let resp = responsibilities(&psi, &gamma, data)?;
    let p = data.p();
    let mut sums = vec![DVector::zeros(p); m];
    let mut owned = vec![0usize; m];
    for i in 0..data.n() {
        let h = resp.row(i).iter().enumerate().fold(0, |best, (h, &r)| if r > resp[(i, best)] { h } else { best });
        sums[h] += data.x().row(i).transpose();
        owned[h] += 1;
    }
    let centroids = sums
        .into_iter()
        .zip(&owned)
        .map(|(s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    Ok(Model {
        psi,
        gamma,
        centroids,
        owned,
    })
}

impl Model {
    fn route(&self, x: &DVector<f64>) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (h, c) in self.centroids.iter().enumerate() {
            if let Some(c) = c {
                let d = (x - c).norm_squared();
                if d < best.0 {
                    best = (d, h);
                }
            }
        }
        best.1
    }

    fn predict(&self, data: &Dataset, i: usize) -> f64 {
        let x = data.x().row(i).transpose();
        let h = self.route(&x);
        let eta = x.dot(&self.psi.theta(h)) + data.z().row(i).transpose().dot(&self.gamma);
        logistic(eta)
    }
}

/// Area under the ROC curve by the rank-sum statistic, with midranks for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..labels.len()).filter(|&k| labels[k]).map(|k| ranks[k]).sum();
    let (pos, neg) = (pos as f64, neg as f64);
    Some((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Threshold metrics at 0.5 plus AUC.
pub fn classification_metrics(probabilities: &[f64], labels: &[bool]) -> Metrics {
    let (mut tp, mut tn, mut fp, mut fnn) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &l) in probabilities.iter().zip(labels) {
        match (p >= 0.5, l) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fnn += 1.0,
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fnn);
    Metrics {
        accuracy: ratio(tp + tn, tp + tn + fp + fnn),
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
        auc: auc(probabilities, labels),
    }
}

/// Fold label of every observation: a seeded shuffle cut into `k` nearly
/// equal parts.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived_rng(seed, "cv-folds", 0));
    let mut fold = vec![0; n];
    for (rank, &i) in idx.iter().enumerate() {
        fold[i] = rank * k / n;
    }
    fold
}

fn mean_metrics(all: &[Metrics]) -> Option<Metrics> {
    if all.is_empty() {
        return None;
    }
    let k = all.len() as f64;
    let mean = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / k;
    let aucs: Vec<f64> = all.iter().filter_map(|m| m.auc).collect();
    Some(Metrics {
        accuracy: mean(|m| m.accuracy),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
    })
}

/// `k`-fold cross-validation of the `m`-component mixture classifier.
pub fn cross_validate(data: &Dataset, config: &PredictConfig) -> Result<PredictReport> {
    if data.family() != Family::Logit {
        return Err(Error::invalid("prediction needs a binary response (logit family)"));
    }
    if config.m == 0 {
        return Err(Error::invalid("m must be at least 1"));
    }
    if config.folds < 2 || config.folds > data.n() {
        return Err(Error::invalid("folds must lie between 2 and the number of observations"));
    }
    let assignment = fold_assignment(data.n(), config.folds, config.seed);
    let mut folds = Vec::with_capacity(config.folds);
    let mut ok = Vec::new();
    for fold in 0..config.folds {
        let train: Vec<usize> = (0..data.n()).filter(|&i| assignment[i] != fold).collect();
        let test: Vec<usize> = (0..data.n()).filter(|&i| assignment[i] == fold).collect();
        let fit = FitConfig {
            seed: derive_seed(config.seed, "cv-fit", fold as u64),
            ..config.fit.clone()
        };
        let outcome = fit_model(&data.subset(&train), config.m, &fit).map(|model| {
            let test_data = data.subset(&test);
            let probs: Vec<f64> = (0..test.len()).map(|i| model.predict(&test_data, i)).collect();
            let labels: Vec<bool> = test_data.y().iter().map(|&y| y == 1.0).collect();
            classification_metrics(&probs, &labels)
        });
        match outcome {
            Ok(metrics) => {
                ok.push(metrics);
                folds.push(FoldResult {
                    fold,
                    n_test: test.len(),
                    metrics: Some(metrics),
                    error: None,
                });
            }
            Err(e) => folds.push(FoldResult {
                fold,
                n_test: test.len(),
                metrics: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let full = fit_model(
        data,
        config.m,
        &FitConfig {
            seed: derive_seed(config.seed, "cv-fit", u64::MAX),
            ..config.fit.clone()
        },
    )?;
    Ok(PredictReport {
        m: config.m,
        failed_folds: config.folds - ok.len(),
        aggregate: mean_metrics(&ok),
        folds,
        subgroups: (0..config.m)
            .map(|h| SubgroupModel {
                alpha: full.psi.alphas()[h],
                theta: full.psi.thetas()[h].clone(),
                assigned: full.owned[h],
            })
            .collect(),
        gamma: full.gamma.iter().copied().collect(),
        routing_rule: ROUTING_RULE.into(),
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(auc(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(auc(&[0.2, 0.3], &[true, true]), None);
    }

    #[test]
    fn metric_definitions() {
        let m = classification_metrics(&[0.9, 0.8, 0.2, 0.6], &[true, false, false, true]);
        assert_eq!(m.accuracy, 0.75);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 0.8).abs() < 1e-15);
        let none = classification_metrics(&[0.1, 0.2], &[true, false]);
        assert_eq!((none.precision, none.f1), (0.0, 0.0));
    }

    #[test]
    fn folds_partition_the_data() {
        let f = fold_assignment(23, 5, 3);
        for k in 0..5 {
            let c = f.iter().filter(|&&v| v == k).count();
            assert!((4..=5).contains(&c));
        }
        assert_eq!(f, fold_assignment(23, 5, 3));
    }
}
