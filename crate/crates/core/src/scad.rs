//! SCAD-penalized least squares on a transformed linear model.
//!
//! The criterion is `rss / 2 + n * sum_k P_{lambda_k}(|beta_k|)` with
//! `lambda_k = lambda * sigma_k`. It is minimized by local linear approximation:
//! each outer step linearizes the penalty at the current iterate and solves the
//! resulting weighted lasso with cyclic coordinate descent (covariance updates),
//! finishing with an exact solve on the active set when its signs are stable.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SIGMA_FLOOR: f64 = 1e-8;
const RIDGE_SCALE: f64 = 1e-4;
const SINGULAR_RCOND: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScadConfig {
    pub a: f64,
    pub lambda_grid_size: usize,
    pub lambda_min_ratio: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ScadConfig {
    fn default() -> Self {
        Self {
            a: 3.7,
            lambda_grid_size: 100,
            lambda_min_ratio: 0.01,
            tol: 1e-6,
            max_iter: 1000,
        }
    }
}

impl ScadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 2.0) {
            return Err(Error::Config(format!("SCAD shape a must exceed 2, got {}", self.a)));
        }
        if !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio < 1.0) {
            return Err(Error::Config(format!(
                "lambda_min_ratio must lie in (0, 1), got {}",
                self.lambda_min_ratio
            )));
        }
        if self.lambda_grid_size == 0 || self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::Config(
                "lambda_grid_size, max_iter and tol must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn scad_penalty(u: f64, lambda: f64, a: f64) -> f64 {
    let u = u.abs();
    if u < lambda {
        lambda * u
    } else if u < a * lambda {
        ((a * a - 1.0) * lambda * lambda - (u - a * lambda).powi(2)) / (2.0 * (a - 1.0))
    } else {
        (a + 1.0) * lambda * lambda / 2.0
    }
}

pub fn scad_derivative(u: f64, lambda: f64, a: f64) -> f64 {
    let u = u.abs();
    if u < lambda {
        lambda
    } else if u < a * lambda {
        (a * lambda - u) / (a - 1.0)
    } else {
        0.0
    }
}

/// Per-coefficient penalty multipliers `sigma_k` (OLS standard errors).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyScaling {
    pub sigma: Vec<f64>,
    /// Columns that are zero or exact copies of an earlier column.
    pub flagged: Vec<usize>,
    /// Standard errors came from the ridge fallback.
    pub ridge: bool,
}

impl PenaltyScaling {
    pub fn ones(k: usize) -> Self {
        Self {
            sigma: vec![1.0; k],
            flagged: Vec::new(),
            ridge: false,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        !self.flagged.is_empty()
    }
}

/// OLS standard errors of `y ~ Z`, ridge-stabilized when `k >= n` or `Z'Z` is near singular.
pub fn ols_scaling(z: &DMatrix<f64>, y: &DVector<f64>) -> Result<PenaltyScaling> {
    let gram = z.tr_mul(z);
    ols_scaling_with_gram(z, y, Some(&gram))
}

/// Without a Gram matrix only zero columns can be flagged, and one is built
/// anyway when `k < n`.
pub(crate) fn ols_scaling_with_gram(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    gram: Option<&DMatrix<f64>>,
) -> Result<PenaltyScaling> {
    let (n, k) = z.shape();
    if y.len() != n {
        return Err(Error::Size(format!("y has {} rows, Z has {n}", y.len())));
    }
    let owned;
    let gram = match gram {
        Some(g) => Some(g),
        None if k < n => {
            owned = z.tr_mul(z);
            Some(&owned)
        }
        None => None,
    };
    let flagged = match gram {
        Some(g) => degenerate_columns(g),
        None => z
            .column_iter()
            .enumerate()
            .filter(|(_, c)| !(c.norm_squared() > 0.0))
            .map(|(j, _)| j)
            .collect(),
    };
    if k == 0 {
        return Ok(PenaltyScaling {
            sigma: Vec::new(),
            flagged,
            ridge: false,
        });
    }
    if let (true, true, Some(g)) = (k < n, flagged.is_empty(), gram) {
        if let Some(sigma) = plain_ols(z, y, g) {
            return Ok(PenaltyScaling {
                sigma,
                flagged,
                ridge: false,
            });
        }
    }
    let trace = match gram {
        Some(g) => g.trace(),
        None => z.norm_squared(),
    };
    let sigma = ridge_ols(z, y, trace)?;
    Ok(PenaltyScaling {
        sigma,
        flagged,
        ridge: true,
    })
}

fn degenerate_columns(gram: &DMatrix<f64>) -> Vec<usize> {
    let k = gram.nrows();
    let mut out = Vec::new();
    for j in 0..k {
        let gjj = gram[(j, j)];
        if !(gjj > 0.0) {
            out.push(j);
            continue;
        }
        let dup = (0..j).any(|i| {
            let gii = gram[(i, i)];
            gii > 0.0 && gram[(i, j)].abs() >= (1.0 - 1e-12) * (gii * gjj).sqrt()
        });
        if dup {
            out.push(j);
        }
    }
    out
}

fn plain_ols(z: &DMatrix<f64>, y: &DVector<f64>, gram: &DMatrix<f64>) -> Option<Vec<f64>> {
    let (n, k) = z.shape();
    let chol = gram.clone().cholesky()?;
    // squared ratio of Cholesky pivots as a cheap conditioning check
    let l = chol.l_dirty();
    let (lo, hi) = (0..k).fold((f64::INFINITY, 0.0f64), |(lo, hi), i| {
        let d = l[(i, i)].abs();
        (lo.min(d), hi.max(d))
    });
    if !(hi > 0.0) || lo * lo <= SINGULAR_RCOND * hi * hi {
        return None;
    }
    let beta = chol.solve(&z.tr_mul(y));
    let resid = y - z * &beta;
    let s2 = resid.norm_squared() / (n - k) as f64;
    let inv = chol.inverse();
    Some(
        (0..k)
            .map(|j| (s2 * inv[(j, j)]).sqrt().max(SIGMA_FLOOR))
            .collect(),
    )
}

/// Ridge with penalty `1e-4 * tr(Z'Z) / k`, decomposing whichever of `Z'Z` and
/// `Z Z'` is smaller; standard errors use the sandwich
/// `(Z'Z + a I)^-1 Z'Z (Z'Z + a I)^-1`.
fn ridge_ols(z: &DMatrix<f64>, y: &DVector<f64>, trace: f64) -> Result<Vec<f64>> {
    let (n, k) = z.shape();
    let alpha = (RIDGE_SCALE * trace / k as f64).max(f64::MIN_POSITIVE);
    let (fitted, df, var) = if k < n {
        ridge_gram(z, y, alpha)
    } else {
        ridge_kernel(z, y, alpha)
    };
    let rss = (y - fitted).norm_squared();
    let s2 = rss / (n as f64 - df).max(1.0);
    let sigma = var
        .iter()
        .map(|v| (s2 * v).sqrt().max(SIGMA_FLOOR))
        .collect::<Vec<_>>();
    if sigma.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("ridge standard errors are not finite".into()));
    }
    Ok(sigma)
}

fn ridge_gram(z: &DMatrix<f64>, y: &DVector<f64>, alpha: f64) -> (DVector<f64>, f64, Vec<f64>) {
    let k = z.ncols();
    let eig = SymmetricEigen::new(z.tr_mul(z));
    let v = &eig.eigenvectors;
    let lam = eig.eigenvalues.map(|x| x.max(0.0));
    let vtzty = v.tr_mul(&z.tr_mul(y));
    let coef = DVector::from_fn(k, |i, _| vtzty[i] / (lam[i] + alpha));
    let fitted = z * (v * coef);
    let df = lam.iter().map(|l| l / (l + alpha)).sum();
    let var = (0..k)
        .map(|j| (0..k).map(|i| v[(j, i)].powi(2) * lam[i] / (lam[i] + alpha).powi(2)).sum())
        .collect();
    (fitted, df, var)
}

fn ridge_kernel(z: &DMatrix<f64>, y: &DVector<f64>, alpha: f64) -> (DVector<f64>, f64, Vec<f64>) {
    let (n, k) = z.shape();
    let eig = SymmetricEigen::new(z * z.transpose());
    let u = &eig.eigenvectors;
    let lam = eig.eigenvalues.map(|v| v.max(0.0));
    let uty = u.tr_mul(y);
    let mut fitted = DVector::zeros(n);
    let mut df = 0.0;
    for i in 0..n {
        let shrink = lam[i] / (lam[i] + alpha);
        df += shrink;
        fitted.axpy(shrink * uty[i], &u.column(i), 1.0);
    }
    let ztu = z.tr_mul(u);
    let var = (0..k)
        .map(|j| (0..n).map(|i| ztu[(j, i)].powi(2) / (lam[i] + alpha).powi(2)).sum())
        .collect();
    (fitted, df, var)
}

/// Outcome of minimizing the criterion at one `lambda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenalizedFit {
    pub beta: Vec<f64>,
    pub active: Vec<usize>,
    pub rss: f64,
    pub objective: f64,
    pub df: usize,
    pub lambda: f64,
    pub converged: bool,
    /// Criterion value at the warm start followed by its value after each outer step.
    pub objective_trace: Vec<f64>,
}

pub fn bic_score(fit: &PenalizedFit, n: usize) -> f64 {
    if fit.df >= n {
        return f64::INFINITY;
    }
    let n_f = n as f64;
    n_f * (fit.rss / n_f).ln() + fit.df as f64 * n_f.ln()
}

/// [`bic_score`] with the residual sum of squares floored at `rss_floor`.
pub fn bic_score_floored(fit: &PenalizedFit, n: usize, rss_floor: f64) -> f64 {
    if fit.df >= n {
        return f64::INFINITY;
    }
    let n_f = n as f64;
    n_f * (fit.rss.max(rss_floor) / n_f).ln() + fit.df as f64 * n_f.ln()
}

/// Log-spaced grid from `lambda_max` down to `lambda_min_ratio * lambda_max`.
pub fn lambda_path(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    scaling: &PenaltyScaling,
    config: &ScadConfig,
) -> Result<Vec<f64>> {
    let problem = Problem::new(z, y, None)?;
    Ok(problem.lambda_path(scaling, config))
}

pub fn penalized_fit(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    scaling: &PenaltyScaling,
    config: &ScadConfig,
) -> Result<PenalizedFit> {
    config.validate()?;
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
    }
    let mut problem = Problem::new(z, y, None)?;
    problem.check_scaling(scaling)?;
    let warm = vec![0.0; z.ncols()];
    Ok(problem.solve(lambda, &warm, scaling, config))
}

/// Fits every point of the lambda path, each warm-started from the previous one.
pub fn fit_path(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    scaling: &PenaltyScaling,
    config: &ScadConfig,
) -> Result<Vec<PenalizedFit>> {
    config.validate()?;
    let mut problem = Problem::new(z, y, None)?;
    problem.check_scaling(scaling)?;
    Ok(problem.path(scaling, config))
}

/// Least-squares data with lazily built Gram columns.
pub(crate) struct Problem<'a> {
    z: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    n: usize,
    k: usize,
    /// `Z' y`
    c: Vec<f64>,
    /// `||z_j||^2`
    diag: Vec<f64>,
    yty: f64,
    gram: Vec<Option<Vec<f64>>>,
}

impl<'a> Problem<'a> {
    pub(crate) fn new(
        z: &'a DMatrix<f64>,
        y: &'a DVector<f64>,
        gram: Option<&DMatrix<f64>>,
    ) -> Result<Self> {
        let (n, k) = z.shape();
        if y.len() != n {
            return Err(Error::Size(format!("y has {} rows, Z has {n}", y.len())));
        }
        let c: Vec<f64> = z.tr_mul(y).iter().copied().collect();
        let (diag, gram) = match gram {
            Some(g) => (
                (0..k).map(|j| g[(j, j)]).collect(),
                (0..k)
                    .map(|j| Some(g.column(j).iter().copied().collect()))
                    .collect(),
            ),
            None => (
                z.column_iter().map(|col| col.norm_squared()).collect(),
                vec![None; k],
            ),
        };
        Ok(Self {
            z,
            y,
            n,
            k,
            c,
            diag,
            yty: y.norm_squared(),
            gram,
        })
    }

    fn check_scaling(&self, scaling: &PenaltyScaling) -> Result<()> {
        if scaling.sigma.len() != self.k {
            return Err(Error::Size(format!(
                "scaling has {} entries for {} columns",
                scaling.sigma.len(),
                self.k
            )));
        }
        Ok(())
    }

    fn gram_col(&mut self, j: usize) -> &[f64] {
        if self.gram[j].is_none() {
            let zj = self.z.column(j);
            let col: Vec<f64> = self.z.column_iter().map(|zl| zl.dot(&zj)).collect();
            self.gram[j] = Some(col);
        }
        self.gram[j].as_deref().unwrap()
    }

    fn usable(&self, j: usize) -> bool {
        self.diag[j] > 0.0
    }

    pub(crate) fn lambda_max(&self, scaling: &PenaltyScaling) -> f64 {
        let n = self.n as f64;
        (0..self.k)
            .filter(|&j| self.usable(j))
            .map(|j| self.c[j].abs() / (n * scaling.sigma[j]))
            .fold(0.0, f64::max)
    }

    pub(crate) fn lambda_path(&self, scaling: &PenaltyScaling, config: &ScadConfig) -> Vec<f64> {
        let max = self.lambda_max(scaling);
        if !(max > 0.0) {
            return vec![0.0];
        }
        let len = config.lambda_grid_size;
        if len == 1 {
            return vec![max];
        }
        let log_ratio = config.lambda_min_ratio.ln();
        (0..len)
            .map(|i| max * (log_ratio * i as f64 / (len - 1) as f64).exp())
            .collect()
    }

    pub(crate) fn path(&mut self, scaling: &PenaltyScaling, config: &ScadConfig) -> Vec<PenalizedFit> {
        let lambdas = self.lambda_path(scaling, config);
        let mut warm = vec![0.0; self.k];
        let mut out = Vec::with_capacity(lambdas.len());
        for lambda in lambdas {
            let fit = self.solve(lambda, &warm, scaling, config);
            warm.clone_from(&fit.beta);
            out.push(fit);
        }
        out
    }

    /// `Z' (y - Z beta)` from scratch.
    fn gradient(&mut self, beta: &[f64]) -> Vec<f64> {
        let mut g = self.c.clone();
        for j in 0..self.k {
            if beta[j] != 0.0 {
                let bj = beta[j];
                let col = self.gram_col(j);
                for (gl, cl) in g.iter_mut().zip(col) {
                    *gl -= bj * cl;
                }
            }
        }
        g
    }

    fn rss(&self, beta: &[f64]) -> f64 {
        let mut r: Vec<f64> = self.y.iter().copied().collect();
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (ri, zi) in r.iter_mut().zip(self.z.column(j).iter()) {
                    *ri -= b * zi;
                }
            }
        }
        r.iter().map(|v| v * v).sum()
    }

    /// Criterion with `rss = y'y - beta'c - beta'g`, valid while `g` matches `beta`.
    fn quick_objective(&self, beta: &[f64], g: &[f64], lambda: f64, scaling: &PenaltyScaling, a: f64) -> f64 {
        let mut rss = self.yty;
        let mut pen = 0.0;
        for j in 0..self.k {
            if beta[j] != 0.0 {
                rss -= beta[j] * (self.c[j] + g[j]);
                pen += scad_penalty(beta[j], lambda * scaling.sigma[j], a);
            }
        }
        0.5 * rss.max(0.0) + self.n as f64 * pen
    }

    fn objective(&self, beta: &[f64], lambda: f64, scaling: &PenaltyScaling, a: f64) -> (f64, f64) {
        let rss = self.rss(beta);
        let pen: f64 = beta
            .iter()
            .zip(&scaling.sigma)
            .map(|(b, s)| scad_penalty(*b, lambda * s, a))
            .sum();
        (rss, 0.5 * rss + self.n as f64 * pen)
    }

    pub(crate) fn solve(
        &mut self,
        lambda: f64,
        warm: &[f64],
        scaling: &PenaltyScaling,
        config: &ScadConfig,
    ) -> PenalizedFit {
        let n = self.n as f64;
        let mut beta: Vec<f64> = warm
            .iter()
            .enumerate()
            .map(|(j, &b)| if self.usable(j) { b } else { 0.0 })
            .collect();
        let mut g = self.gradient(&beta);
        let obj0 = self.quick_objective(&beta, &g, lambda, scaling, config.a);
        let mut trace = vec![obj0];
        let mut converged = false;
        let mut best = (obj0, beta.clone());
        let mut weights = vec![0.0; self.k];

        for _ in 0..config.max_iter {
            for j in 0..self.k {
                weights[j] = n * scad_derivative(beta[j], lambda * scaling.sigma[j], config.a);
            }
            let prev = beta.clone();
            let inner_ok = self.feature_sign(&mut beta, &mut g, &weights)
                || self.weighted_lasso(&mut beta, &mut g, &weights, config);
            let obj = self.quick_objective(&beta, &g, lambda, scaling, config.a);
            trace.push(obj);
            if obj <= best.0 {
                best = (obj, beta.clone());
            }
            let change = beta
                .iter()
                .zip(&prev)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if change < config.tol && inner_ok {
                converged = true;
                break;
            }
        }

        let beta = if converged { beta } else { best.1 };
        let (rss, objective) = self.objective(&beta, lambda, scaling, config.a);
        let active: Vec<usize> = (0..self.k).filter(|&j| beta[j] != 0.0).collect();
        PenalizedFit {
            df: active.len(),
            active,
            rss,
            objective,
            lambda,
            converged,
            objective_trace: trace,
            beta,
        }
    }

    /// Active-set (feature-sign) solver for `rss / 2 + sum_j weights_j |beta_j|`:
    /// add the worst violator of the optimality conditions, solve exactly on the
    /// active set for the current signs, and line-search back to the first sign
    /// change when that lowers the criterion. Gives up (returning false) when the
    /// active Gram matrix is singular or progress stalls.
    fn feature_sign(&mut self, beta: &mut [f64], g: &mut [f64], weights: &[f64]) -> bool {
        let scale = self.c.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let eps = 1e-9 * scale;
        let mut signs: Vec<f64> = beta.iter().map(|b| sign_of(*b)).collect();
        let mut active: Vec<usize> = (0..self.k).filter(|&j| beta[j] != 0.0).collect();
        let max_steps = 4 * self.k + 50;
        for _ in 0..max_steps {
            let active_ok = active
                .iter()
                .all(|&j| (g[j] - weights[j] * signs[j]).abs() <= eps);
            if active_ok {
                let mut pick = None;
                let mut worst = eps;
                for j in 0..self.k {
                    if beta[j] != 0.0 || !self.usable(j) {
                        continue;
                    }
                    let v = g[j].abs() - weights[j];
                    if v > worst {
                        worst = v;
                        pick = Some(j);
                    }
                }
                match pick {
                    None => return true,
                    Some(j) => {
                        if active.len() + 1 >= self.n {
                            return false;
                        }
                        signs[j] = sign_of(g[j]);
                        active.push(j);
                        active.sort_unstable();
                    }
                }
            }

            let m = active.len();
            let mut gaa = DMatrix::zeros(m, m);
            for (b, &jb) in active.iter().enumerate() {
                let col = self.gram_col(jb);
                for (a, &ja) in active.iter().enumerate() {
                    gaa[(a, b)] = col[ja];
                }
            }
            let ca = DVector::from_iterator(m, active.iter().map(|&j| self.c[j]));
            let wa: Vec<f64> = active.iter().map(|&j| weights[j]).collect();
            let rhs = DVector::from_iterator(
                m,
                active.iter().map(|&j| self.c[j] - weights[j] * signs[j]),
            );
            let Some(chol) = gaa.clone().cholesky() else {
                return false;
            };
            let target = chol.solve(&rhs);
            if target.iter().any(|v| !v.is_finite()) {
                return false;
            }
            let cur = DVector::from_iterator(m, active.iter().map(|&j| beta[j]));
            let crit = |b: &DVector<f64>| -> f64 {
                let quad = 0.5 * b.dot(&(&gaa * b)) - ca.dot(b);
                quad + b.iter().zip(&wa).map(|(v, w)| w * v.abs()).sum::<f64>()
            };
            let f_cur = crit(&cur);
            let mut best_t = 1.0;
            let mut best_point = target.clone();
            let mut best_f = crit(&target);
            for a in 0..m {
                if wa[a] > 0.0 && cur[a] != 0.0 && cur[a] * target[a] < 0.0 {
                    let t = cur[a] / (cur[a] - target[a]);
                    let mut pt = &cur + (&target - &cur) * t;
                    pt[a] = 0.0;
                    let f = crit(&pt);
                    if f < best_f {
                        best_f = f;
                        best_t = t;
                        best_point = pt;
                    }
                }
            }
            if best_f > f_cur + 1e-12 * f_cur.abs().max(scale) {
                return false;
            }
            if best_t == 1.0 {
                for a in 0..m {
                    if wa[a] > 0.0 && best_point[a] * signs[active[a]] < 0.0 {
                        return false;
                    }
                }
            }
            for (a, &j) in active.iter().enumerate() {
                beta[j] = best_point[a];
            }
            active.retain(|&j| beta[j] != 0.0);
            for j in 0..self.k {
                signs[j] = sign_of(beta[j]);
            }
            let fresh = self.gradient(beta);
            g.copy_from_slice(&fresh);
        }
        false
    }

    /// Coordinate descent on `rss / 2 + sum_j weights_j |beta_j|`, alternating full
    /// sweeps with sweeps restricted to the active set. After each phase an exact
    /// active-set solve is tried and ends the descent when it is optimal.
    /// Returns whether it converged.
    fn weighted_lasso(
        &mut self,
        beta: &mut [f64],
        g: &mut [f64],
        weights: &[f64],
        config: &ScadConfig,
    ) -> bool {
        let mut sweeps = 0;
        loop {
            let change = self.sweep(beta, g, weights, None);
            sweeps += 1;
            if change < config.tol || self.polish(beta, g, weights) {
                return true;
            }
            if sweeps >= config.max_iter {
                return false;
            }
            loop {
                let active: Vec<usize> = (0..self.k).filter(|&j| beta[j] != 0.0).collect();
                let change = self.sweep(beta, g, weights, Some(&active));
                sweeps += 1;
                if change < config.tol {
                    self.polish(beta, g, weights);
                    break;
                }
                if sweeps >= config.max_iter {
                    return false;
                }
            }
        }
    }

    fn sweep(
        &mut self,
        beta: &mut [f64],
        g: &mut [f64],
        weights: &[f64],
        subset: Option<&[usize]>,
    ) -> f64 {
        let mut max_change = 0.0f64;
        let k = self.k;
        let all: Vec<usize>;
        let idx: &[usize] = match subset {
            Some(s) => s,
            None => {
                all = (0..k).collect();
                &all
            }
        };
        for &j in idx {
            if !self.usable(j) {
                continue;
            }
            let d = self.diag[j];
            let rho = g[j] + d * beta[j];
            let new = soft_threshold(rho, weights[j]) / d;
            let delta = new - beta[j];
            if delta != 0.0 {
                beta[j] = new;
                let col = self.gram_col(j);
                for (gl, cl) in g.iter_mut().zip(col) {
                    *gl -= delta * cl;
                }
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    }

    /// Exact weighted-lasso solution on the current active set, accepted only when
    /// it keeps every sign and satisfies the optimality conditions off the set.
    fn polish(&mut self, beta: &mut [f64], g: &mut [f64], weights: &[f64]) -> bool {
        let active: Vec<usize> = (0..self.k).filter(|&j| beta[j] != 0.0).collect();
        let m = active.len();
        if m == 0 || m >= self.n {
            return false;
        }
        let mut gaa = DMatrix::zeros(m, m);
        for (b, &jb) in active.iter().enumerate() {
            let col = self.gram_col(jb).to_vec();
            for (a, &ja) in active.iter().enumerate() {
                gaa[(a, b)] = col[ja];
            }
        }
        let rhs = DVector::from_iterator(
            m,
            active
                .iter()
                .map(|&j| self.c[j] - weights[j] * beta[j].signum()),
        );
        let Some(chol) = gaa.cholesky() else {
            return false;
        };
        let sol = chol.solve(&rhs);
        if sol.iter().any(|v| !v.is_finite()) {
            return false;
        }
        for (a, &j) in active.iter().enumerate() {
            if sol[a] == 0.0 || sol[a].signum() != beta[j].signum() {
                return false;
            }
        }
        let mut candidate = vec![0.0; self.k];
        for (a, &j) in active.iter().enumerate() {
            candidate[j] = sol[a];
        }
        let g_new = self.gradient(&candidate);
        let kkt = (0..self.k)
            .filter(|&j| candidate[j] == 0.0 && self.usable(j))
            .all(|j| g_new[j].abs() <= weights[j] * (1.0 + 1e-9) + 1e-12 * self.diag[j].sqrt());
        if kkt {
            beta.copy_from_slice(&candidate);
            g.copy_from_slice(&g_new);
        }
        kkt
    }
}

#[inline]
fn sign_of(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_design(n: usize, k: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(n, k, |_, _| rng.sample(StandardNormal));
        let beta = DVector::from_fn(k, |j, _| if j % 2 == 0 { 1.5 } else { 0.0 });
        let noise = DVector::from_fn(n, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
        let y = &z * beta + noise;
        (z, y)
    }

    fn ols(z: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
        z.clone().svd(true, true).solve(y, 1e-14).unwrap()
    }

    #[test]
    fn penalty_values() {
        assert_eq!(scad_penalty(0.0, 1.0, 3.7), 0.0);
        assert_eq!(scad_penalty(0.5, 1.0, 3.7), 0.5);
        assert!((scad_penalty(2.0, 1.0, 3.7) - 9.8 / 5.4).abs() < 1e-12);
        assert!((scad_penalty(5.0, 1.0, 3.7) - 2.35).abs() < 1e-12);
        assert_eq!(scad_penalty(-0.5, 1.0, 3.7), 0.5);
    }

    #[test]
    fn derivative_values() {
        assert_eq!(scad_derivative(0.5, 1.0, 3.7), 1.0);
        assert!((scad_derivative(2.0, 1.0, 3.7) - 1.7 / 2.7).abs() < 1e-12);
        assert_eq!(scad_derivative(10.0, 1.0, 3.7), 0.0);
    }

    #[test]
    fn bic_values() {
        let fit = |rss: f64, df: usize| PenalizedFit {
            beta: vec![],
            active: vec![],
            rss,
            objective: 0.0,
            df,
            lambda: 0.0,
            converged: true,
            objective_trace: vec![],
        };
        assert_eq!(bic_score(&fit(50.0, 0), 50), 0.0);
        let a = bic_score(&fit(10.0, 2), 50);
        let b = bic_score(&fit(10.0, 3), 50);
        assert!((b - a - (50f64).ln()).abs() < 1e-12);
        assert!(bic_score(&fit(9.0, 2), 50) < a);
        assert_eq!(bic_score(&fit(1.0, 50), 50), f64::INFINITY);
    }

    #[test]
    fn lambda_zero_is_ols() {
        let (z, y) = random_design(20, 5, 1);
        let s = PenaltyScaling::ones(5);
        let fit = penalized_fit(&z, &y, 0.0, &s, &ScadConfig::default()).unwrap();
        let b = ols(&z, &y);
        for j in 0..5 {
            assert!((fit.beta[j] - b[j]).abs() < 1e-8);
        }
        assert!(fit.converged);
    }

    #[test]
    fn above_lambda_max_is_null() {
        let (z, y) = random_design(30, 6, 2);
        let s = ols_scaling(&z, &y).unwrap();
        let cfg = ScadConfig::default();
        let path = lambda_path(&z, &y, &s, &cfg).unwrap();
        assert_eq!(path.len(), cfg.lambda_grid_size);
        let fit = penalized_fit(&z, &y, path[0] * 1.0001, &s, &cfg).unwrap();
        assert!(fit.beta.iter().all(|b| *b == 0.0));
        let fit = penalized_fit(&z, &y, path[0], &s, &cfg).unwrap();
        assert!(fit.beta.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn zero_response_degenerate_path() {
        let (z, _) = random_design(10, 3, 3);
        let y = DVector::zeros(10);
        let path = lambda_path(&z, &y, &PenaltyScaling::ones(3), &ScadConfig::default()).unwrap();
        assert_eq!(path, vec![0.0]);
    }

    #[test]
    fn unit_scaling_lambda_max_is_correlation_scan() {
        let (z, y) = random_design(25, 4, 4);
        let path = lambda_path(&z, &y, &PenaltyScaling::ones(4), &ScadConfig::default()).unwrap();
        let oracle = (0..4)
            .map(|j| z.column(j).dot(&y).abs() / 25.0)
            .fold(0.0, f64::max);
        assert!((path[0] - oracle).abs() < 1e-14 * oracle.max(1.0));
    }

    #[test]
    fn univariate_matches_grid_minimization() {
        // one column with ||z||^2 = n: criterion is n/2 (b - bhat)^2 + n P(|b|) + const
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = DMatrix::from_column_slice(n, 1, (raw.clone() * ((n as f64).sqrt() / raw.norm())).as_slice());
        let cfg = ScadConfig {
            tol: 1e-12,
            ..ScadConfig::default()
        };
        for (target, lambda) in [(0.3, 0.5), (1.0, 0.5), (1.5, 0.5), (3.0, 0.5), (-2.2, 0.7)] {
            let y = &z * target + DVector::from_fn(n, |i, _| 0.01 * ((i as f64) * 0.37).sin());
            let fit = penalized_fit(&z, &y, lambda, &PenaltyScaling::ones(1), &cfg).unwrap();
            let crit = |b: f64| {
                let r = &y - &z * b;
                0.5 * r.norm_squared() + n as f64 * scad_penalty(b, lambda, 3.7)
            };
            let mut best = (f64::INFINITY, 0.0);
            let steps = 200_000;
            for s in 0..=steps {
                let b = -5.0 + 10.0 * s as f64 / steps as f64;
                let v = crit(b);
                if v < best.0 {
                    best = (v, b);
                }
            }
            assert!(
                (fit.beta[0] - best.1).abs() < 1e-3,
                "target {target}: solver {} grid {}",
                fit.beta[0],
                best.1
            );
            assert!(crit(fit.beta[0]) <= best.0 + 1e-9);
        }
    }

    #[test]
    fn objective_trace_non_increasing() {
        let (z, y) = random_design(40, 8, 6);
        let s = ols_scaling(&z, &y).unwrap();
        let fits = fit_path(&z, &y, &s, &ScadConfig::default()).unwrap();
        for f in &fits {
            for w in f.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "{} > {}", w[1], w[0]);
            }
            assert_eq!(f.df, f.active.len());
            let recomputed: f64 = 0.5 * f.rss
                + 40.0
                    * f.beta
                        .iter()
                        .zip(&s.sigma)
                        .map(|(b, sg)| scad_penalty(*b, f.lambda * sg, 3.7))
                        .sum::<f64>();
            assert!((recomputed - f.objective).abs() < 1e-9 * f.objective.abs().max(1.0));
        }
    }

    #[test]
    fn warm_and_cold_agree() {
        let (z, y) = random_design(60, 6, 7);
        let s = ols_scaling(&z, &y).unwrap();
        let cfg = ScadConfig::default();
        let fits = fit_path(&z, &y, &s, &cfg).unwrap();
        for f in fits.iter().step_by(7) {
            let cold = penalized_fit(&z, &y, f.lambda, &s, &cfg).unwrap();
            let rel = (cold.objective - f.objective).abs() / f.objective.abs().max(1e-12);
            assert!(rel <= 1e-6, "lambda {} warm {} cold {}", f.lambda, f.objective, cold.objective);
        }
    }

    #[test]
    fn orthogonal_design_equal_sigmas() {
        let n = 32;
        // columns of a Hadamard-like +-1 design are orthogonal with norm sqrt(n)
        let z = DMatrix::from_fn(n, 3, |i, j| {
            if (i >> j) & 1 == 0 {
                1.0
            } else {
                -1.0
            }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = ols_scaling(&z, &y).unwrap();
        assert!(!s.ridge);
        let b = ols(&z, &y);
        let s2 = (&y - &z * b).norm_squared() / (n - 3) as f64;
        for sg in &s.sigma {
            assert!((sg - (s2 / n as f64).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_column_flagged() {
        let (mut z, y) = random_design(20, 3, 9);
        let c0 = z.column(0).clone_owned();
        z.set_column(2, &c0);
        let s = ols_scaling(&z, &y).unwrap();
        assert!(s.is_degenerate());
        assert_eq!(s.flagged, vec![2]);
        assert!(s.sigma.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn exact_fit_floors_sigma() {
        let (z, _) = random_design(15, 1, 10);
        let y = z.column(0).clone_owned();
        let s = ols_scaling(&z, &y).unwrap();
        assert_eq!(s.sigma, vec![SIGMA_FLOOR]);
    }

    #[test]
    fn wide_design_uses_ridge() {
        let (z, y) = random_design(10, 25, 11);
        let s = ols_scaling(&z, &y).unwrap();
        assert!(s.ridge);
        assert_eq!(s.sigma.len(), 25);
        assert!(s.sigma.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn ridge_paths_agree() {
        let (mut z, y) = random_design(30, 6, 4);
        let col = z.column(0) * 2.0 - z.column(1);
        z.set_column(5, &col);
        let alpha = 1e-3;
        let (fa, da, va) = ridge_gram(&z, &y, alpha);
        let (fb, db, vb) = ridge_kernel(&z, &y, alpha);
        assert!((fa - fb).amax() < 1e-9);
        assert!((da - db).abs() < 1e-9);
        for (a, b) in va.iter().zip(&vb) {
            assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()), "{a} {b}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(ScadConfig { a: 2.0, ..Default::default() }.validate().is_err());
        assert!(ScadConfig { lambda_min_ratio: 1.0, ..Default::default() }.validate().is_err());
        assert!(ScadConfig::default().validate().is_ok());
    }
}
