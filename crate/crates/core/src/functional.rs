//! Grids, discretized curves and bi-functional samples.
//!
//! Every sample carries two curves: `zeta`, whose discretized values enter the
//! model linearly, and `x`, which enters through a single projected index.
//! Inner products use the composite trapezoid rule on the stored grid.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIFORM_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpacingClass {
    Uniform,
    Regular,
}

/// Strictly increasing abscissae `t_1 < ... < t_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct Grid {
    points: Vec<f64>,
    spacing: SpacingClass,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    points: Vec<f64>,
}

impl TryFrom<GridRepr> for Grid {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        Grid::new(r.points)
    }
}

impl From<Grid> for GridRepr {
    fn from(g: Grid) -> Self {
        GridRepr { points: g.points }
    }
}

impl Grid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Grid("grid has no points".into()));
        }
        if let Some(j) = points.iter().position(|t| !t.is_finite()) {
            return Err(Error::Grid(format!("abscissa {} is not finite", j + 1)));
        }
        if let Some(j) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Grid(format!(
                "abscissae must be strictly increasing: t[{}]={} >= t[{}]={}",
                j + 1,
                points[j],
                j + 2,
                points[j + 1]
            )));
        }
        let spacing = classify(&points);
        let weights = trapezoid_weights(&points);
        Ok(Self {
            points,
            spacing,
            weights,
        })
    }

    /// `p` equispaced points from `a` to `b` inclusive.
    pub fn uniform(a: f64, b: f64, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::Grid("grid needs at least one point".into()));
        }
        if p == 1 {
            return Self::new(vec![a]);
        }
        if !(b > a) {
            return Err(Error::Grid(format!("empty interval [{a}, {b}]")));
        }
        let step = (b - a) / (p - 1) as f64;
        let mut points: Vec<f64> = (0..p).map(|j| a + step * j as f64).collect();
        points[p - 1] = b;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn spacing(&self) -> SpacingClass {
        self.spacing
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// Trapezoid weights `w_j` such that `sum_j w_j f(t_j)` approximates the integral.
    pub fn quadrature_weights(&self) -> &[f64] {
        &self.weights
    }

    /// Index of the grid point closest to `t` (lower index wins ties).
    pub fn nearest_index(&self, t: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, &tj) in self.points.iter().enumerate() {
            let d = (tj - t).abs();
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        best
    }

    pub(crate) fn same_as(&self, other: &Grid) -> bool {
        self.points == other.points
    }
}

fn classify(points: &[f64]) -> SpacingClass {
    if points.len() < 3 {
        return SpacingClass::Uniform;
    }
    let step = (points[points.len() - 1] - points[0]) / (points.len() - 1) as f64;
    let uniform = points
        .windows(2)
        .all(|w| ((w[1] - w[0]) - step).abs() <= UNIFORM_REL_TOL * step.abs().max(1.0));
    if uniform {
        SpacingClass::Uniform
    } else {
        SpacingClass::Regular
    }
}

fn trapezoid_weights(points: &[f64]) -> Vec<f64> {
    let p = points.len();
    let mut w = vec![0.0; p];
    for j in 0..p.saturating_sub(1) {
        let half = 0.5 * (points[j + 1] - points[j]);
        w[j] += half;
        w[j + 1] += half;
    }
    w
}

/// A sample path observed on a grid.
#[derive(Debug, Clone)]
pub struct Curve {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl Curve {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Size(format!(
                "curve has {} values but its grid has {} points",
                values.len(),
                grid.len()
            )));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Grid(format!("curve value {} is not finite", j + 1)));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.points().iter().map(|&t| f(t)).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `a * self + b * other` on the shared grid.
    pub fn combine(&self, a: f64, other: &Curve, b: f64) -> Result<Curve> {
        check_same_grid(&self.grid, &other.grid)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Curve::new(self.grid.clone(), values)
    }
}

fn check_same_grid(a: &Arc<Grid>, b: &Arc<Grid>) -> Result<()> {
    if Arc::ptr_eq(a, b) || a.same_as(b) {
        Ok(())
    } else {
        Err(Error::GridMismatch(format!(
            "grids differ ({} points on [{}, {}] vs {} points on [{}, {}])",
            a.len(),
            a.start(),
            a.end(),
            b.len(),
            b.start(),
            b.end()
        )))
    }
}

/// Trapezoid approximation of `integral f(t) g(t) dt` over the grid.
pub fn inner_product(f: &Curve, g: &Curve) -> Result<f64> {
    check_same_grid(&f.grid, &g.grid)?;
    Ok(weighted_dot(f.grid.quadrature_weights(), &f.values, &g.values))
}

pub(crate) fn weighted_dot(w: &[f64], f: &[f64], g: &[f64]) -> f64 {
    w.iter().zip(f).zip(g).map(|((w, f), g)| w * f * g).sum()
}

/// Indices `j` (0-based, sorted) of the grid points carrying a nonzero coefficient.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SupportSet {
    indices: Vec<usize>,
}

impl SupportSet {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { indices }
    }

    pub fn from_coefficients(beta: &[f64]) -> Self {
        Self {
            indices: beta
                .iter()
                .enumerate()
                .filter(|(_, b)| **b != 0.0)
                .map(|(j, _)| j)
                .collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }

    pub fn is_subset_of(&self, other: &[usize]) -> bool {
        self.indices.iter().all(|j| other.contains(j))
    }
}

/// `n` samples of `(zeta, x, y)`; `zeta` is `n x p`, `x` is `n x p_x`.
#[derive(Debug, Clone)]
pub struct BiFunctionalDataset {
    zeta_grid: Arc<Grid>,
    x_grid: Arc<Grid>,
    zeta: DMatrix<f64>,
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl BiFunctionalDataset {
    pub fn new(
        zeta_grid: Arc<Grid>,
        zeta: DMatrix<f64>,
        x_grid: Arc<Grid>,
        x: DMatrix<f64>,
        y: DVector<f64>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Size("dataset has no samples".into()));
        }
        if zeta.nrows() != n || x.nrows() != n {
            return Err(Error::Size(format!(
                "row counts differ: zeta {}, x {}, y {}",
                zeta.nrows(),
                x.nrows(),
                n
            )));
        }
        if zeta.ncols() != zeta_grid.len() {
            return Err(Error::Size(format!(
                "zeta has {} columns but its grid has {} points",
                zeta.ncols(),
                zeta_grid.len()
            )));
        }
        if x.ncols() != x_grid.len() {
            return Err(Error::Size(format!(
                "x has {} columns but its grid has {} points",
                x.ncols(),
                x_grid.len()
            )));
        }
        let finite = zeta.iter().chain(x.iter()).chain(y.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Grid("dataset contains non-finite values".into()));
        }
        Ok(Self {
            zeta_grid,
            x_grid,
            zeta,
            x,
            y,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.zeta.ncols()
    }

    pub fn zeta_grid(&self) -> &Arc<Grid> {
        &self.zeta_grid
    }

    pub fn x_grid(&self) -> &Arc<Grid> {
        &self.x_grid
    }

    pub fn zeta(&self) -> &DMatrix<f64> {
        &self.zeta
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn zeta_curve(&self, i: usize) -> Curve {
        Curve {
            grid: self.zeta_grid.clone(),
            values: self.zeta.row(i).iter().copied().collect(),
        }
    }

    pub fn x_curve(&self, i: usize) -> Curve {
        Curve {
            grid: self.x_grid.clone(),
            values: self.x.row(i).iter().copied().collect(),
        }
    }

    /// Column `j` of `zeta` as a contiguous slice.
    pub fn zeta_column(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.zeta.as_slice()[j * n..(j + 1) * n]
    }

    /// A new dataset made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n()) {
            return Err(Error::Size(format!(
                "row {bad} out of range for {} samples",
                self.n()
            )));
        }
        Self::new(
            self.zeta_grid.clone(),
            self.zeta.select_rows(rows),
            self.x_grid.clone(),
            self.x.select_rows(rows),
            DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r])),
        )
    }

    /// Same curves, different responses.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        Self::new(
            self.zeta_grid.clone(),
            self.zeta.clone(),
            self.x_grid.clone(),
            self.x.clone(),
            y,
        )
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            n: self.n(),
            p: self.p(),
            p_x: self.x_grid.len(),
            zeta_range: (self.zeta_grid.start(), self.zeta_grid.end()),
            x_range: (self.x_grid.start(), self.x_grid.end()),
        }
    }
}

/// Metadata echoed by the command line front end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub p: usize,
    pub p_x: usize,
    pub zeta_range: (f64, f64),
    pub x_range: (f64, f64),
}

/// First `n1` rows and the following `n2` rows, order preserved.
pub fn split_dataset(
    data: &BiFunctionalDataset,
    n1: usize,
    n2: usize,
) -> Result<(BiFunctionalDataset, BiFunctionalDataset)> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::Size(format!(
            "both subsamples need at least one row, got ({n1}, {n2})"
        )));
    }
    if n1 + n2 > data.n() {
        return Err(Error::Size(format!(
            "split ({n1}, {n2}) needs {} rows but the dataset has {}",
            n1 + n2,
            data.n()
        )));
    }
    let first: Vec<usize> = (0..n1).collect();
    let second: Vec<usize> = (n1..n1 + n2).collect();
    Ok((data.select_rows(&first)?, data.select_rows(&second)?))
}

fn parse_cell(path: &Path, row: usize, column: usize, raw: &str) -> Result<f64> {
    let cell = raw.trim();
    let value: f64 = cell.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message: format!("`{cell}` is not a number"),
    })?;
    if !value.is_finite() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row,
            column,
            message: format!("`{cell}` is not finite"),
        });
    }
    Ok(value)
}

fn read_records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: i + 1,
            column: 0,
            message: e.to_string(),
        })?;
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        out.push(rec);
    }
    Ok(out)
}

/// Reads a curve file: header row of abscissae, then one sample per row.
pub fn read_curves(path: &Path) -> Result<(Grid, DMatrix<f64>)> {
    let records = read_records(path)?;
    let header = records.first().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        row: 1,
        column: 0,
        message: "missing header row".into(),
    })?;
    let points = header
        .iter()
        .enumerate()
        .map(|(c, cell)| parse_cell(path, 1, c + 1, cell))
        .collect::<Result<Vec<_>>>()?;
    let grid = Grid::new(points).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        row: 1,
        column: 0,
        message: e.to_string(),
    })?;
    let p = grid.len();
    let n = records.len() - 1;
    let mut m = DMatrix::zeros(n, p);
    for (i, rec) in records[1..].iter().enumerate() {
        if rec.len() != p {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: i + 2,
                column: rec.len().min(p) + 1,
                message: format!("expected {p} columns, found {}", rec.len()),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            m[(i, c)] = parse_cell(path, i + 2, c + 1, cell)?;
        }
    }
    Ok((grid, m))
}

/// Reads a response file: one value per row, no header.
pub fn read_response(path: &Path) -> Result<DVector<f64>> {
    let records = read_records(path)?;
    let mut y = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: i + 1,
                column: 2,
                message: format!("expected one value, found {}", rec.len()),
            });
        }
        y.push(parse_cell(path, i + 1, 1, &rec[0])?);
    }
    Ok(DVector::from_vec(y))
}

pub fn load_csv(
    zeta_path: impl AsRef<Path>,
    x_path: impl AsRef<Path>,
    y_path: impl AsRef<Path>,
) -> Result<BiFunctionalDataset> {
    let (zeta_grid, zeta) = read_curves(zeta_path.as_ref())?;
    let (x_grid, x) = read_curves(x_path.as_ref())?;
    let y = read_response(y_path.as_ref())?;
    if zeta.nrows() != y.len() || x.nrows() != y.len() {
        return Err(Error::Size(format!(
            "row counts differ: {} has {}, {} has {}, {} has {}",
            zeta_path.as_ref().display(),
            zeta.nrows(),
            x_path.as_ref().display(),
            x.nrows(),
            y_path.as_ref().display(),
            y.len()
        )));
    }
    BiFunctionalDataset::new(Arc::new(zeta_grid), zeta, Arc::new(x_grid), x, y)
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_curves(path: &Path, grid: &Grid, values: &DMatrix<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header: Vec<String> = grid.points().iter().map(|&t| fmt_f64(t)).collect();
    let mut body = header.join(",");
    body.push('\n');
    for i in 0..values.nrows() {
        let row: Vec<String> = values.row(i).iter().map(|&v| fmt_f64(v)).collect();
        body.push_str(&row.join(","));
        body.push('\n');
    }
    out.write_all(body.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_response(path: &Path, y: &DVector<f64>) -> Result<()> {
    let mut body = String::new();
    for &v in y.iter() {
        body.push_str(&fmt_f64(v));
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes the three files read back by [`load_csv`].
pub fn write_csv(
    data: &BiFunctionalDataset,
    zeta_path: impl AsRef<Path>,
    x_path: impl AsRef<Path>,
    y_path: impl AsRef<Path>,
) -> Result<()> {
    write_curves(zeta_path.as_ref(), &data.zeta_grid, &data.zeta)?;
    write_curves(x_path.as_ref(), &data.x_grid, &data.x)?;
    write_response(y_path.as_ref(), &data.y)
}
