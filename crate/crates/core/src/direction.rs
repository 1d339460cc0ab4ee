//! B-spline directions and the finite candidate set they are searched over.
//!
//! A direction is `theta(t) = sum_j alpha_j e_j(t)` for a clamped B-spline basis
//! `e_1..e_d` with uniform interior knots. Candidates are built from small seed
//! tuples, rescaled to unit norm under grid quadrature and sign-anchored so that
//! `theta(t_anchor) > 0`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::{weighted_dot, Curve, Grid};

const DOMAIN_SLACK: f64 = 1e-12;
const ANCHOR_ZERO: f64 = 1e-12;
const DUPLICATE_TOL: f64 = 1e-10;

/// Default cap on the number of seed tuples `|M|^d` that may be enumerated.
pub const DEFAULT_ENUMERATION_CAP: u128 = 100_000;

/// Clamped B-spline basis of a given order (degree + 1) with uniform interior knots.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    order: usize,
    interior_knots: usize,
    domain: (f64, f64),
    knots: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(order: usize, interior_knots: usize, domain: (f64, f64)) -> Result<Self> {
        if order < 2 {
            return Err(Error::Config(format!("spline order must be >= 2, got {order}")));
        }
        let (a, b) = domain;
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(Error::Config(format!("invalid basis domain [{a}, {b}]")));
        }
        let mut knots = Vec::with_capacity(2 * order + interior_knots);
        knots.extend(std::iter::repeat(a).take(order));
        let step = (b - a) / (interior_knots + 1) as f64;
        knots.extend((1..=interior_knots).map(|k| a + step * k as f64));
        knots.extend(std::iter::repeat(b).take(order));
        Ok(Self {
            order,
            interior_knots,
            domain,
            knots,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn interior_knots(&self) -> usize {
        self.interior_knots
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn dim(&self) -> usize {
        self.order + self.interior_knots
    }

    /// Values of all `d` basis functions at `t` (Cox-de Boor recursion).
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let (a, b) = self.domain;
        let slack = DOMAIN_SLACK * (b - a);
        if !(t >= a - slack && t <= b + slack) {
            return Err(Error::Domain { t, a, b });
        }
        let t = t.clamp(a, b);
        let d = self.dim();
        let k = self.order;
        let knots = &self.knots;

        // span s with knots[s] <= t < knots[s + 1]; the right end uses the last span
        let s = if t >= b {
            d - 1
        } else {
            let mut s = k - 1;
            while s + 1 < d && knots[s + 1] <= t {
                s += 1;
            }
            s
        };

        // local[r] holds N_{s-deg+r, deg}(t) for the current degree
        let mut local = vec![0.0; k];
        local[0] = 1.0;
        let mut left = vec![0.0; k];
        let mut right = vec![0.0; k];
        for deg in 1..k {
            left[deg] = t - knots[s + 1 - deg];
            right[deg] = knots[s + deg] - t;
            let mut saved = 0.0;
            for r in 0..deg {
                let denom = right[r + 1] + left[deg - r];
                let temp = if denom == 0.0 { 0.0 } else { local[r] / denom };
                local[r] = saved + right[r + 1] * temp;
                saved = left[deg - r] * temp;
            }
            local[deg] = saved;
        }

        let mut out = vec![0.0; d];
        for (r, v) in local.into_iter().enumerate() {
            out[s + 1 - k + r] = v;
        }
        Ok(out)
    }

    /// Row-major `grid.len() x d` matrix of basis values on a grid.
    pub fn design(&self, grid: &Grid) -> Result<Vec<Vec<f64>>> {
        grid.points().iter().map(|&t| self.eval(t)).collect()
    }
}

/// A candidate direction: basis coefficients on a shared basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    basis: Arc<BSplineBasis>,
    coeffs: Vec<f64>,
}

impl Direction {
    pub fn new(basis: Arc<BSplineBasis>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != basis.dim() {
            return Err(Error::Size(format!(
                "direction has {} coefficients, basis dimension is {}",
                coeffs.len(),
                basis.dim()
            )));
        }
        Ok(Self { basis, coeffs })
    }

    pub fn basis(&self) -> &Arc<BSplineBasis> {
        &self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn value_at(&self, t: f64) -> Result<f64> {
        Ok(dot(&self.basis.eval(t)?, &self.coeffs))
    }

    /// `theta(t_j)` for every grid point.
    pub fn render(&self, grid: &Grid) -> Result<Vec<f64>> {
        grid.points().iter().map(|&t| self.value_at(t)).collect()
    }

    /// Quadrature-weighted values `w_j theta(t_j)`, so that `<theta, chi>` is a plain dot product.
    pub fn projector(&self, grid: &Grid) -> Result<Vec<f64>> {
        self.check_domain(grid)?;
        let values = self.render(grid)?;
        Ok(values
            .iter()
            .zip(grid.quadrature_weights())
            .map(|(v, w)| v * w)
            .collect())
    }

    pub fn norm_sq(&self, grid: &Grid) -> Result<f64> {
        let v = self.render(grid)?;
        Ok(weighted_dot(grid.quadrature_weights(), &v, &v))
    }

    fn check_domain(&self, grid: &Grid) -> Result<()> {
        let (a, b) = self.basis.domain;
        let tol = 1e-9 * (b - a);
        if (grid.start() - a).abs() > tol || (grid.end() - b).abs() > tol {
            return Err(Error::GridMismatch(format!(
                "curve grid spans [{}, {}] but the direction basis spans [{a}, {b}]",
                grid.start(),
                grid.end()
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct DirectionRepr {
    order: usize,
    interior_knots: usize,
    domain: (f64, f64),
    coeffs: Vec<f64>,
}

impl Serialize for Direction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        DirectionRepr {
            order: self.basis.order,
            interior_knots: self.basis.interior_knots,
            domain: self.basis.domain,
            coeffs: self.coeffs.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Direction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = DirectionRepr::deserialize(d)?;
        let basis = BSplineBasis::new(r.order, r.interior_knots, r.domain)
            .map_err(serde::de::Error::custom)?;
        Direction::new(Arc::new(basis), r.coeffs).map_err(serde::de::Error::custom)
    }
}

/// `<theta, chi>` with `theta` rendered on the curve's grid.
pub fn project(theta: &Direction, chi: &Curve) -> Result<f64> {
    let q = theta.projector(chi.grid())?;
    Ok(dot(&q, chi.values()))
}

/// Ordered, duplicate-free set of calibrated directions.
#[derive(Debug, Clone)]
pub struct DirectionSet {
    directions: Vec<Direction>,
    seeds: Vec<Vec<f64>>,
}

impl DirectionSet {
    /// Wraps explicit directions; duplicates (within 1e-10) are dropped, order kept.
    pub fn from_directions(directions: Vec<Direction>) -> Self {
        let mut kept: Vec<Direction> = Vec::with_capacity(directions.len());
        for d in directions {
            if !kept.iter().any(|k| max_abs_diff(&k.coeffs, &d.coeffs) <= DUPLICATE_TOL) {
                kept.push(d);
            }
        }
        let seeds = kept.iter().map(|d| d.coeffs.clone()).collect();
        Self {
            directions: kept,
            seeds,
        }
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    /// Seed tuple each direction was calibrated from.
    pub fn seeds(&self) -> &[Vec<f64>] {
        &self.seeds
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Direction> {
        self.directions.get(i)
    }

    /// Keeps every `stride`-th direction (starting with the first).
    pub fn thinned(&self, stride: usize) -> Self {
        let stride = stride.max(1);
        let idx = (0..self.len()).step_by(stride);
        let mut directions = Vec::new();
        let mut seeds = Vec::new();
        for i in idx {
            directions.push(self.directions[i].clone());
            seeds.push(self.seeds[i].clone());
        }
        Self { directions, seeds }
    }
}

/// Settings for building a candidate set from seed coefficients.
#[derive(Debug, Clone)]
pub struct DirectionSpec {
    pub order: usize,
    pub interior_knots: usize,
    pub seeds: Vec<f64>,
    /// Defaults to the midpoint of the calibration grid.
    pub anchor: Option<f64>,
    pub cap: u128,
}

impl Default for DirectionSpec {
    fn default() -> Self {
        Self {
            order: 3,
            interior_knots: 3,
            seeds: vec![-1.0, 0.0, 1.0],
            anchor: None,
            cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

impl DirectionSpec {
    /// Builds the basis over the grid's range and enumerates the candidates.
    pub fn build(&self, grid: &Grid) -> Result<DirectionSet> {
        let basis = Arc::new(BSplineBasis::new(
            self.order,
            self.interior_knots,
            (grid.start(), grid.end()),
        )?);
        let anchor = self
            .anchor
            .unwrap_or_else(|| 0.5 * (grid.start() + grid.end()));
        enumerate_directions(&basis, &self.seeds, grid, anchor, self.cap)
    }
}

/// Every nonzero tuple of `seeds^d`, calibrated to `<theta, theta> = 1` on `grid` and
/// sign-anchored at `anchor`. Tuples with `theta(anchor) = 0` are dropped, as are
/// duplicates after calibration. Ordering is lexicographic over the sorted seeds.
pub fn enumerate_directions(
    basis: &Arc<BSplineBasis>,
    seeds: &[f64],
    grid: &Grid,
    anchor: f64,
    cap: u128,
) -> Result<DirectionSet> {
    let mut seeds: Vec<f64> = seeds.to_vec();
    if seeds.is_empty() || seeds.iter().any(|s| !s.is_finite()) {
        return Err(Error::Config("seed set must be nonempty and finite".into()));
    }
    seeds.sort_by(f64::total_cmp);
    seeds.dedup();
    let d = basis.dim();
    let m = seeds.len();
    let required = (m as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
    if required > cap {
        return Err(Error::EnumerationTooLarge { required, cap });
    }

    let design = basis.design(grid)?;
    let w = grid.quadrature_weights();
    let mut gram = vec![vec![0.0; d]; d];
    for (row, &wj) in design.iter().zip(w) {
        for a in 0..d {
            if row[a] == 0.0 {
                continue;
            }
            for b in 0..d {
                gram[a][b] += wj * row[a] * row[b];
            }
        }
    }
    let anchor_row = basis.eval(anchor)?;

    let mut digits = vec![0usize; d];
    let mut kept_coeffs: Vec<Vec<f64>> = Vec::new();
    let mut kept_seeds: Vec<Vec<f64>> = Vec::new();
    for _ in 0..required {
        let tuple: Vec<f64> = digits.iter().map(|&i| seeds[i]).collect();
        advance(&mut digits, m);
        if tuple.iter().all(|&v| v == 0.0) {
            continue;
        }
        let norm_sq: f64 = (0..d)
            .map(|a| tuple[a] * (0..d).map(|b| gram[a][b] * tuple[b]).sum::<f64>())
            .sum();
        if !(norm_sq > 0.0) {
            continue;
        }
        let scale = norm_sq.sqrt().recip();
        let at_anchor = dot(&anchor_row, &tuple) * scale;
        if at_anchor.abs() <= ANCHOR_ZERO {
            continue;
        }
        let sign = if at_anchor < 0.0 { -1.0 } else { 1.0 };
        let coeffs: Vec<f64> = tuple.iter().map(|v| sign * scale * v).collect();
        if kept_coeffs
            .iter()
            .any(|k| max_abs_diff(k, &coeffs) <= DUPLICATE_TOL)
        {
            continue;
        }
        kept_coeffs.push(coeffs);
        kept_seeds.push(tuple);
    }

    let directions = kept_coeffs
        .into_iter()
        .map(|c| Direction {
            basis: basis.clone(),
            coeffs: c,
        })
        .collect();
    Ok(DirectionSet {
        directions,
        seeds: kept_seeds,
    })
}

/// Rescales a single seed tuple the same way [`enumerate_directions`] does.
pub fn calibrate(
    basis: &Arc<BSplineBasis>,
    seed: &[f64],
    grid: &Grid,
    anchor: f64,
) -> Result<Direction> {
    let raw = Direction::new(basis.clone(), seed.to_vec())?;
    let norm_sq = raw.norm_sq(grid)?;
    if !(norm_sq > 0.0) {
        return Err(Error::Numerical("seed tuple has zero norm".into()));
    }
    let scale = norm_sq.sqrt().recip();
    let at_anchor = raw.value_at(anchor)? * scale;
    if at_anchor.abs() <= ANCHOR_ZERO {
        return Err(Error::Numerical(format!(
            "seed tuple vanishes at the anchor {anchor}"
        )));
    }
    let sign = at_anchor.signum();
    Direction::new(basis.clone(), seed.iter().map(|v| sign * scale * v).collect())
}

fn advance(digits: &mut [usize], base: usize) {
    for i in (0..digits.len()).rev() {
        digits[i] += 1;
        if digits[i] < base {
            return;
        }
        digits[i] = 0;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
