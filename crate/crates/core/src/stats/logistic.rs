//! Logistic regression by IRLS, with model-based and cluster-robust covariance.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::StatsError;

pub const SCORE_TOLERANCE: f64 = 1e-8;
pub const STEP_TOLERANCE: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 100;

/// A design matrix (row-major) with binary outcomes and cluster labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub terms: Vec<String>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub clusters: Vec<usize>,
}

impl Design {
    pub fn new(terms: Vec<String>) -> Self {
        Design {
            terms,
            x: Vec::new(),
            y: Vec::new(),
            clusters: Vec::new(),
        }
    }

    pub fn push(&mut self, row: &[f64], y: bool, cluster: usize) {
        assert_eq!(row.len(), self.terms.len(), "row width");
        self.x.extend_from_slice(row);
        self.y.push(if y { 1.0 } else { 0.0 });
        self.clusters.push(cluster);
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.terms.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.k()..(i + 1) * self.k()]
    }

    pub fn cluster_count(&self) -> usize {
        let mut c = self.clusters.clone();
        c.sort_unstable();
        c.dedup();
        c.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n(), self.k(), &self.x)
    }
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log-likelihood at `beta`.
pub fn log_likelihood(d: &Design, beta: &[f64]) -> f64 {
    (0..d.n())
        .map(|i| {
            let eta = dot(d.row(i), beta);
            d.y[i] * eta - log1p_exp(eta)
        })
        .sum()
}

/// Gradient of the log-likelihood at `beta`.
pub fn score(d: &Design, beta: &[f64]) -> Vec<f64> {
    let k = d.k();
    let mut g = vec![0.0; k];
    for i in 0..d.n() {
        let row = d.row(i);
        let r = d.y[i] - sigmoid(dot(row, beta));
        for j in 0..k {
            g[j] += row[j] * r;
        }
    }
    g
}

/// Fisher information X'WX at `beta`.
pub fn information(d: &Design, beta: &[f64]) -> DMatrix<f64> {
    let k = d.k();
    let mut a = DMatrix::zeros(k, k);
    for i in 0..d.n() {
        let row = d.row(i);
        let p = sigmoid(dot(row, beta));
        let w = p * (1.0 - p);
        for r in 0..k {
            let wr = w * row[r];
            for c in 0..=r {
                a[(r, c)] += wr * row[c];
            }
        }
    }
    a.fill_upper_triangle_with_lower_triangle();
    a
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub terms: Vec<String>,
    pub beta: Vec<f64>,
    #[serde(skip)]
    pub cov_model: DMatrix<f64>,
    #[serde(skip)]
    pub cov_robust: Option<DMatrix<f64>>,
    pub log_likelihood: f64,
    /// Log-likelihood of the intercept-only model.
    pub null_log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n: usize,
    pub clusters: usize,
}

impl FitResult {
    pub fn odds_ratios(&self) -> Vec<f64> {
        self.beta.iter().map(|b| b.exp()).collect()
    }

    pub fn model_se(&self) -> Vec<f64> {
        (0..self.beta.len()).map(|j| self.cov_model[(j, j)].sqrt()).collect()
    }

    pub fn robust_se(&self) -> Option<Vec<f64>> {
        self.cov_robust
            .as_ref()
            .map(|c| (0..self.beta.len()).map(|j| c[(j, j)].sqrt()).collect())
    }

    /// Robust SEs when available, else model-based.
    pub fn se(&self) -> Vec<f64> {
        self.robust_se().unwrap_or_else(|| self.model_se())
    }

    /// Two-sided Wald p-values from [`FitResult::se`].
    pub fn p_values(&self) -> Vec<f64> {
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        self.beta
            .iter()
            .zip(self.se())
            .map(|(b, s)| 2.0 * normal.cdf(-(b / s).abs()))
            .collect()
    }

    /// McFadden: 1 - l / l0.
    pub fn pseudo_r2(&self) -> f64 {
        1.0 - self.log_likelihood / self.null_log_likelihood
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn check_rank(d: &Design) -> Result<(), StatsError> {
    let svd = d.matrix().svd(false, false);
    let s = &svd.singular_values;
    let top = s.max();
    let tol = top * 1e-10 * d.n().max(d.k()) as f64;
    if top == 0.0 || s.iter().any(|&v| v <= tol) {
        return Err(StatsError::RankDeficient);
    }
    Ok(())
}

/// Maximum-likelihood fit by iteratively reweighted least squares.
///
/// Stops when `max |score| < 1e-8` or `max |step| < 1e-10`. If the score has
/// vanished but Newton steps stay large, the likelihood is still rising toward
/// a boundary and the fit is reported as separated.
pub fn fit_logistic(d: &Design) -> Result<FitResult, StatsError> {
    let (n, k) = (d.n(), d.k());
    if n == 0 || k == 0 {
        return Err(StatsError::Empty);
    }
    if n < k {
        return Err(StatsError::TooFew { needed: k, got: n });
    }
    if d.x.len() != n * k || d.clusters.len() != n {
        return Err(StatsError::Dimension("design arrays disagree on n".into()));
    }
    check_rank(d)?;
    let ones = d.y.iter().filter(|&&y| y == 1.0).count();
    if ones == 0 || ones == n {
        return Err(StatsError::PerfectSeparation);
    }

    let mut beta = vec![0.0; k];
    let mut iterations = 0;
    let mut converged = false;
    let mut ll_prev = log_likelihood(d, &beta);
    let mut monotone = true;
    while iterations < MAX_ITERATIONS {
        let g = score(d, &beta);
        let info = information(d, &beta);
        let step = match info.cholesky() {
            Some(ch) => ch.solve(&DVector::from_vec(g.clone())),
            None => return Err(StatsError::PerfectSeparation),
        };
        let step_size = max_abs(step.as_slice());
        if max_abs(&g) < SCORE_TOLERANCE {
            if step_size > 1e-4 * (1.0 + max_abs(&beta)) {
                return Err(StatsError::PerfectSeparation);
            }
            converged = true;
            break;
        }
        iterations += 1;
        for (b, s) in beta.iter_mut().zip(step.iter()) {
            *b += s;
        }
        let ll = log_likelihood(d, &beta);
        monotone &= ll >= ll_prev - 1e-9;
        ll_prev = ll;
        if step_size < STEP_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(if monotone {
            StatsError::PerfectSeparation
        } else {
            StatsError::NoConvergence(MAX_ITERATIONS)
        });
    }

    let info = information(d, &beta);
    let cov_model = info.clone().try_inverse().ok_or(StatsError::RankDeficient)?;
    let ybar = ones as f64 / n as f64;
    let null_ll = n as f64 * (ybar * ybar.ln() + (1.0 - ybar) * (1.0 - ybar).ln());
    let clusters = d.cluster_count();
    let cov_robust = if clusters >= 2 {
        Some(cluster_robust_cov(d, &beta)?)
    } else {
        None
    };
    Ok(FitResult {
        terms: d.terms.clone(),
        log_likelihood: log_likelihood(d, &beta),
        beta,
        cov_model,
        cov_robust,
        null_log_likelihood: null_ll,
        iterations,
        converged,
        n,
        clusters,
    })
}

/// Sandwich covariance A⁻¹BA⁻¹ · G/(G−1), with B summed over per-cluster
/// score outer products.
pub fn cluster_robust_cov(d: &Design, beta: &[f64]) -> Result<DMatrix<f64>, StatsError> {
    let k = d.k();
    let mut sums: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
    for i in 0..d.n() {
        let row = d.row(i);
        let r = d.y[i] - sigmoid(dot(row, beta));
        let s = sums.entry(d.clusters[i]).or_insert_with(|| DVector::zeros(k));
        for j in 0..k {
            s[j] += row[j] * r;
        }
    }
    let g = sums.len();
    if g < 2 {
        return Err(StatsError::TooFewClusters(g));
    }
    let mut b = DMatrix::zeros(k, k);
    for s in sums.values() {
        b += s * s.transpose();
    }
    let a_inv = information(d, beta)
        .try_inverse()
        .ok_or(StatsError::RankDeficient)?;
    let factor = g as f64 / (g as f64 - 1.0);
    let cov = &a_inv * b * &a_inv * factor;
    Ok((&cov + cov.transpose()) * 0.5)
}
