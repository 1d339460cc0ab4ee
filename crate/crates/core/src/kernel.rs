//! Projection semimetric, Nadaraya-Watson weights and the residual smoother.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::direction::{project, Direction};
use crate::error::{Error, Result};
use crate::functional::{BiFunctionalDataset, Curve, Grid};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    #[default]
    Epanechnikov,
}

/// Kernel acting on nonnegative distance ratios `u = d / h`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
}

impl KernelSpec {
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        match self.family {
            KernelFamily::Epanechnikov => {
                if (0.0..=1.0).contains(&u) {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }
}

/// `d_theta(chi1, chi2) = |<theta, chi1 - chi2>|`.
pub fn semimetric(theta: &Direction, chi1: &Curve, chi2: &Curve) -> Result<f64> {
    let diff = chi1.combine(1.0, chi2, -1.0)?;
    Ok(project(theta, &diff)?.abs())
}

/// Projected indices `<theta, X_i>` for every row of `x`.
pub fn projected_index(theta: &Direction, x: &DMatrix<f64>, x_grid: &Grid) -> Result<Vec<f64>> {
    if x.ncols() != x_grid.len() {
        return Err(Error::Size(format!(
            "x has {} columns but the grid has {} points",
            x.ncols(),
            x_grid.len()
        )));
    }
    let q = DVector::from_vec(theta.projector(x_grid)?);
    Ok((x * q).iter().copied().collect())
}

/// Row-stochastic local weight matrix `W_{h,theta}`.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    pub w: DMatrix<f64>,
    pub theta: Direction,
    pub h: f64,
}

/// Dense weights from already projected indices; row `i` holds the weights of sample `i`.
pub fn weights_from_index(index: &[f64], h: f64, kernel: KernelSpec) -> Result<DMatrix<f64>> {
    if !(h > 0.0) {
        return Err(Error::Bandwidth(h));
    }
    let n = index.len();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut total = 0.0;
        for l in 0..n {
            let k = kernel.eval((index[i] - index[l]).abs() / h);
            w[(i, l)] = k;
            total += k;
        }
        if total > 0.0 {
            for l in 0..n {
                w[(i, l)] /= total;
            }
        } else {
            // only reachable for non-training query points; training rows always see themselves
            w[(i, i)] = 1.0;
        }
    }
    Ok(w)
}

pub fn nw_weights(
    x_samples: &[Curve],
    theta: &Direction,
    h: f64,
    kernel: KernelSpec,
) -> Result<WeightMatrix> {
    if !(h > 0.0) {
        return Err(Error::Bandwidth(h));
    }
    let index = x_samples
        .iter()
        .map(|c| project(theta, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightMatrix {
        w: weights_from_index(&index, h, kernel)?,
        theta: theta.clone(),
        h,
    })
}

/// `(I - W) y` and `(I - W) Z`.
#[derive(Debug, Clone)]
pub struct TransformedDesign {
    pub y_tilde: DVector<f64>,
    pub z_tilde: DMatrix<f64>,
}

pub fn transform(w: &WeightMatrix, y: &DVector<f64>, z: &DMatrix<f64>) -> Result<TransformedDesign> {
    let n = w.w.nrows();
    if y.len() != n || z.nrows() != n {
        return Err(Error::Size(format!(
            "weight matrix is {n}x{n} but y has {} rows and z has {}",
            y.len(),
            z.nrows()
        )));
    }
    Ok(TransformedDesign {
        y_tilde: y - &w.w * y,
        z_tilde: z - &w.w * z,
    })
}

/// Quantiles (linear interpolation between order statistics) of all pairwise
/// distances `|u_i - u_j|`, `i < j`. Non-positive values are dropped; if nothing
/// positive remains the grid is `[1.0]`.
pub fn bandwidth_grid(index: &[f64], levels: &[f64]) -> Vec<f64> {
    let mut sorted = index.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut dist = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dist.push(sorted[j] - sorted[i]);
        }
    }
    if dist.is_empty() {
        return vec![1.0];
    }
    dist.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = levels
        .iter()
        .map(|&q| quantile_sorted(&dist, q))
        .filter(|h| *h > 0.0 && h.is_finite())
        .collect();
    out.sort_by(f64::total_cmp);
    out.dedup();
    if out.is_empty() {
        out.push(1.0);
    }
    out
}

pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let q = q.clamp(0.0, 1.0);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Nadaraya-Watson weights stored as contiguous windows over samples sorted by
/// their projected index. Equivalent to the dense matrix, with the rows and
/// columns permuted by the sort order.
#[derive(Debug, Clone)]
pub(crate) struct BandedWeights {
    lo: Vec<usize>,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl BandedWeights {
    /// `sorted_index` must be nondecreasing.
    pub(crate) fn new(sorted_index: &[f64], h: f64, kernel: KernelSpec) -> Self {
        let n = sorted_index.len();
        let mut lo = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(n + 1);
        let mut values = Vec::new();
        offsets.push(0);
        let mut start = 0usize;
        let mut end = 0usize;
        for i in 0..n {
            let ui = sorted_index[i];
            while sorted_index[start] < ui - h {
                start += 1;
            }
            if end < i + 1 {
                end = i + 1;
            }
            while end < n && sorted_index[end] <= ui + h {
                end += 1;
            }
            let base = values.len();
            let mut total = 0.0;
            for &ul in &sorted_index[start..end] {
                let k = kernel.eval((ui - ul).abs() / h);
                values.push(k);
                total += k;
            }
            for v in &mut values[base..] {
                *v /= total;
            }
            lo.push(start);
            offsets.push(values.len());
        }
        Self { lo, offsets, values }
    }

    /// `out = (I - W) col`, everything in sorted order.
    pub(crate) fn residualize(&self, col: &[f64], out: &mut [f64]) {
        for i in 0..col.len() {
            let w = &self.values[self.offsets[i]..self.offsets[i + 1]];
            let lo = self.lo[i];
            let smooth: f64 = w.iter().zip(&col[lo..lo + w.len()]).map(|(a, b)| a * b).sum();
            out[i] = col[i] - smooth;
        }
    }

    #[cfg(test)]
    pub(crate) fn to_dense(&self) -> DMatrix<f64> {
        let n = self.lo.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            let w = &self.values[self.offsets[i]..self.offsets[i + 1]];
            for (k, v) in w.iter().enumerate() {
                m[(i, self.lo[i] + k)] = *v;
            }
        }
        m
    }
}

/// Result of smoothing residuals at a query curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkEstimate {
    pub value: f64,
    /// No training index fell inside the kernel window; the nearest neighbor was used.
    pub extrapolated: bool,
}

/// Everything needed to evaluate the estimated link at new curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkEstimator {
    pub theta: Direction,
    pub h: f64,
    pub kernel: KernelSpec,
    pub x_grid: Arc<Grid>,
    /// `<theta, X_i>` for the training sample.
    pub index: Vec<f64>,
    /// `Y_i - zeta_i' beta` for the training sample.
    pub residuals: Vec<f64>,
}

impl LinkEstimator {
    pub fn new(
        train: &BiFunctionalDataset,
        beta_full: &[f64],
        theta: Direction,
        h: f64,
        kernel: KernelSpec,
    ) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::Bandwidth(h));
        }
        if beta_full.len() != train.p() {
            return Err(Error::Size(format!(
                "beta has {} entries, zeta grid has {}",
                beta_full.len(),
                train.p()
            )));
        }
        let index = projected_index(&theta, train.x(), train.x_grid())?;
        let mut residuals: Vec<f64> = train.y().iter().copied().collect();
        for (j, &b) in beta_full.iter().enumerate() {
            if b != 0.0 {
                for (r, z) in residuals.iter_mut().zip(train.zeta_column(j)) {
                    *r -= b * z;
                }
            }
        }
        Ok(Self {
            theta,
            h,
            kernel,
            x_grid: train.x_grid().clone(),
            index,
            residuals,
        })
    }

    pub fn evaluate_index(&self, u: f64) -> LinkEstimate {
        let mut num = 0.0;
        let mut den = 0.0;
        for (ui, ri) in self.index.iter().zip(&self.residuals) {
            let k = self.kernel.eval((u - ui).abs() / self.h);
            num += k * ri;
            den += k;
        }
        if den > 0.0 {
            return LinkEstimate {
                value: num / den,
                extrapolated: false,
            };
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, ui) in self.index.iter().enumerate() {
            let d = (u - ui).abs();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        LinkEstimate {
            value: self.residuals[best],
            extrapolated: true,
        }
    }

    pub fn evaluate(&self, chi: &Curve) -> Result<LinkEstimate> {
        let u = project(&self.theta, chi)?;
        Ok(self.evaluate_index(u))
    }
}

/// Smooths `Y_i - zeta_i' beta_hat` at `chi` with kernel weights `K(d_theta(chi, X_i) / h)`.
pub fn estimate_link(
    train: &BiFunctionalDataset,
    beta_hat: &[f64],
    theta_hat: &Direction,
    h: f64,
    chi: &Curve,
) -> Result<LinkEstimate> {
    LinkEstimator::new(train, beta_hat, theta_hat.clone(), h, KernelSpec::default())?.evaluate(chi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::direction::{BSplineBasis, DirectionSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Arc<Grid> {
        Arc::new(Grid::uniform(0.0, 1.0, 100).unwrap())
    }

    fn theta() -> Direction {
        let b = Arc::new(BSplineBasis::new(3, 3, (0.0, 1.0)).unwrap());
        crate::direction::calibrate(&b, &[0.0, 1.0, 0.0, 1.0, -1.0, -1.0], &grid(), 0.5).unwrap()
    }

    fn random_curves(n: usize, seed: u64) -> Vec<Curve> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let (a, b, c): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
                Curve::from_fn(grid(), |t| {
                    a * (6.0 * t).cos() + b * (4.0 * t).sin() + c * t * t
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn epanechnikov_shape() {
        let k = KernelSpec::default();
        assert_eq!(k.eval(0.0), 0.75);
        assert_eq!(k.eval(1.0), 0.0);
        assert_eq!(k.eval(1.5), 0.0);
        assert!(k.eval(0.5) > 0.0);
    }

    #[test]
    fn semimetric_basics() {
        let th = theta();
        let cs = random_curves(3, 1);
        assert_eq!(semimetric(&th, &cs[0], &cs[0]).unwrap(), 0.0);
        let d01 = semimetric(&th, &cs[0], &cs[1]).unwrap();
        let d10 = semimetric(&th, &cs[1], &cs[0]).unwrap();
        assert_eq!(d01, d10);
        let via_project = (project(&th, &cs[0]).unwrap() - project(&th, &cs[1]).unwrap()).abs();
        assert!((d01 - via_project).abs() < 1e-12);
        let d02 = semimetric(&th, &cs[0], &cs[2]).unwrap();
        let d12 = semimetric(&th, &cs[1], &cs[2]).unwrap();
        assert!(d02 <= d01 + d12 + 1e-15);
    }

    #[test]
    fn single_sample_weight() {
        let cs = random_curves(1, 2);
        let w = nw_weights(&cs, &theta(), 0.1, KernelSpec::default()).unwrap();
        assert_eq!(w.w, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn nonpositive_bandwidth_rejected() {
        let cs = random_curves(3, 2);
        assert!(matches!(
            nw_weights(&cs, &theta(), 0.0, KernelSpec::default()),
            Err(Error::Bandwidth(_))
        ));
    }

    #[test]
    fn wide_bandwidth_rows_stochastic_with_positive_diagonal() {
        let cs = random_curves(20, 3);
        let w = nw_weights(&cs, &theta(), 1e3, KernelSpec::default()).unwrap();
        for i in 0..20 {
            let s: f64 = w.w.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(w.w[(i, i)] > 0.0);
        }
    }

    #[test]
    fn median_bandwidth_rows_sum_to_one() {
        let cs = random_curves(50, 4);
        let th = theta();
        let idx: Vec<f64> = cs.iter().map(|c| project(&th, c).unwrap()).collect();
        let h = bandwidth_grid(&idx, &[0.5])[0];
        let w = nw_weights(&cs, &th, h, KernelSpec::default()).unwrap();
        for i in 0..50 {
            // direct summation oracle
            let mut s = 0.0;
            for l in 0..50 {
                assert!(w.w[(i, l)] >= 0.0);
                s += w.w[(i, l)];
            }
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn point_mass_weights_annihilate_response() {
        let cs = random_curves(10, 5);
        let th = theta();
        let w = nw_weights(&cs, &th, 1e-12, KernelSpec::default()).unwrap();
        let y = DVector::from_fn(10, |i, _| i as f64 * 0.7 - 1.0);
        let z = DMatrix::from_fn(10, 2, |i, j| (i + j) as f64);
        let t = transform(&w, &y, &z).unwrap();
        assert!(t.y_tilde.amax() < 1e-12);
    }

    #[test]
    fn constant_column_annihilated() {
        let cs = random_curves(30, 6);
        let w = nw_weights(&cs, &theta(), 0.3, KernelSpec::default()).unwrap();
        let y = DVector::from_element(30, 2.5);
        let z = DMatrix::from_element(30, 1, -4.0);
        let t = transform(&w, &y, &z).unwrap();
        assert!(t.z_tilde.amax() < 1e-10);
        assert!(t.y_tilde.amax() < 1e-10);
    }

    #[test]
    fn transform_matches_explicit_arithmetic() {
        let cs = random_curves(10, 7);
        let w = nw_weights(&cs, &theta(), 0.2, KernelSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = DVector::from_fn(10, |_, _| rng.gen::<f64>());
        let z = DMatrix::from_fn(10, 3, |_, _| rng.gen::<f64>());
        let t = transform(&w, &y, &z).unwrap();
        for i in 0..10 {
            let mut yi = y[i];
            for l in 0..10 {
                yi -= w.w[(i, l)] * y[l];
            }
            assert!((t.y_tilde[i] - yi).abs() < 1e-12);
            for c in 0..3 {
                let mut zi = z[(i, c)];
                for l in 0..10 {
                    zi -= w.w[(i, l)] * z[(l, c)];
                }
                assert!((t.z_tilde[(i, c)] - zi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn banded_matches_dense_after_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut idx: Vec<f64> = (0..40).map(|_| rng.gen::<f64>() * 3.0).collect();
        idx.sort_by(f64::total_cmp);
        for h in [0.05, 0.3, 5.0] {
            let dense = weights_from_index(&idx, h, KernelSpec::default()).unwrap();
            let banded = BandedWeights::new(&idx, h, KernelSpec::default()).to_dense();
            assert!((dense - banded).amax() < 1e-14);
        }
    }

    #[test]
    fn bandwidth_quantiles() {
        let idx = [0.0, 1.0, 3.0];
        // pairwise distances 1, 2, 3
        assert_eq!(bandwidth_grid(&idx, &[0.0, 0.5, 1.0]), vec![1.0, 2.0, 3.0]);
        assert_eq!(bandwidth_grid(&idx, &[0.25]), vec![1.5]);
        assert_eq!(bandwidth_grid(&[2.0], &[0.5]), vec![1.0]);
    }

    fn noiseless(n: usize, c: f64) -> (BiFunctionalDataset, Vec<f64>) {
        let zg = Arc::new(Grid::uniform(0.0, 1.0, 5).unwrap());
        let cs = random_curves(n, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zeta = DMatrix::from_fn(n, 5, |_, _| rng.gen::<f64>());
        let beta = vec![0.0, 1.5, 0.0, -2.0, 0.0];
        let x = DMatrix::from_fn(n, 100, |i, j| cs[i].values()[j]);
        let y = DVector::from_fn(n, |i, _| {
            c + (0..5).map(|j| beta[j] * zeta[(i, j)]).sum::<f64>()
        });
        (
            BiFunctionalDataset::new(zg, zeta, grid(), x, y).unwrap(),
            beta,
        )
    }

    #[test]
    fn constant_link_recovered() {
        let (d, beta) = noiseless(25, 3.25);
        for i in [0, 7, 24] {
            let est = estimate_link(&d, &beta, &theta(), 0.2, &d.x_curve(i)).unwrap();
            assert!((est.value - 3.25).abs() < 1e-10);
            assert!(!est.extrapolated);
        }
    }

    #[test]
    fn tiny_bandwidth_returns_own_residual() {
        let (d, _) = noiseless(15, 0.0);
        let zero = vec![0.0; 5];
        let est = estimate_link(&d, &zero, &theta(), 1e-12, &d.x_curve(4)).unwrap();
        assert_eq!(est.value, d.y()[4]);
    }

    #[test]
    fn far_query_falls_back_to_nearest() {
        let (d, beta) = noiseless(15, 1.0);
        let link = LinkEstimator::new(&d, &beta, theta(), 1e-3, KernelSpec::default()).unwrap();
        let far = link.index.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 10.0;
        let est = link.evaluate_index(far);
        assert!(est.extrapolated);
        assert!((est.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn link_shift_equivariance() {
        let (d, beta) = noiseless(20, 0.0);
        let shifted = d.with_response(d.y().add_scalar(5.0)).unwrap();
        let chi = d.x_curve(3);
        let a = estimate_link(&d, &beta, &theta(), 0.3, &chi).unwrap().value;
        let b = estimate_link(&shifted, &beta, &theta(), 0.3, &chi).unwrap().value;
        assert!((b - a - 5.0).abs() < 1e-10);
    }

    #[test]
    fn default_level_set_is_nonempty() {
        let set = DirectionSpec::default().build(&grid()).unwrap();
        assert!(!set.is_empty());
    }
}
