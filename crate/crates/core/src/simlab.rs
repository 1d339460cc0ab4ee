//! Simulation designs, ground truth, Monte Carlo driver and selection metrics.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::direction::{project, BSplineBasis, Direction};
use crate::error::{Error, Result};
use crate::fassmr::{msep, predict_dataset, FitResult, ReductionScheme};
use crate::functional::{BiFunctionalDataset, Curve, Grid, SupportSet};
use crate::method::SelectionMethod;

pub const X_GRID_POINTS: usize = 100;
pub const THETA_TRUE: [f64; 6] = [0.0, 1.741539, 0.0, 1.741539, -1.741539, -1.741539];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DesignKind {
    #[serde(rename = "designA")]
    A,
    #[serde(rename = "designB")]
    B,
    #[serde(rename = "designC")]
    C,
}

impl DesignKind {
    pub fn name(&self) -> &'static str {
        match self {
            DesignKind::A => "designA",
            DesignKind::B => "designB",
            DesignKind::C => "designC",
        }
    }

}

impl std::str::FromStr for DesignKind {
    type Err = Error;

    /// Accepts `designA`, `A` or `a` (and likewise for B, C).
    fn from_str(s: &str) -> Result<Self> {
        match s.trim_start_matches("design").to_ascii_uppercase().as_str() {
            "A" => Ok(DesignKind::A),
            "B" => Ok(DesignKind::B),
            "C" => Ok(DesignKind::C),
            _ => Err(Error::Config(format!("unknown design `{s}`"))),
        }
    }
}

impl DesignKind {
    fn coef_range(&self) -> f64 {
        match self {
            DesignKind::A => 6.0,
            DesignKind::B | DesignKind::C => 5.0,
        }
    }

    /// `(abscissa, coefficient)` pairs of the linear part.
    fn impacts(&self) -> Vec<(f64, f64)> {
        match self {
            DesignKind::A => vec![(0.18, 2.0), (0.73, -3.0)],
            DesignKind::B => vec![(0.02, 4.0), (0.50, 3.0), (0.70, -3.2)],
            DesignKind::C => vec![
                (0.15, 1.0),
                (0.16, 1.2),
                (0.17, 1.0),
                (0.18, 1.2),
                (0.19, 1.0),
                (0.70, 1.0),
                (0.71, 1.2),
                (0.72, -1.2),
                (0.73, -1.2),
                (0.74, -1.2),
            ],
        }
    }

    fn good_region(&self) -> Vec<(f64, f64)> {
        match self {
            DesignKind::A => vec![(0.15, 0.21), (0.70, 0.76)],
            DesignKind::B => vec![(0.0, 0.05), (0.47, 0.53), (0.67, 0.73)],
            DesignKind::C => vec![(0.14, 0.20), (0.69, 0.75)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    pub kind: DesignKind,
    pub n: usize,
    pub p: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
    /// Noise sd as a fraction of the sd of the noiseless response.
    #[serde(default = "default_noise_ratio")]
    pub noise_ratio: f64,
}

fn default_n_test() -> usize {
    100
}

fn default_noise_ratio() -> f64 {
    0.1
}

impl DesignSpec {
    pub fn new(kind: DesignKind, n: usize, p: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            p,
            n_test: default_n_test(),
            seed,
            noise_ratio: default_noise_ratio(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::Config(format!("p must be at least 2, got {}", self.p)));
        }
        if self.n < 4 {
            return Err(Error::Config(format!("n must be at least 4, got {}", self.n)));
        }
        if self.n_test < 1 {
            return Err(Error::Config("n_test must be at least 1".into()));
        }
        if !(self.noise_ratio >= 0.0 && self.noise_ratio.is_finite()) {
            return Err(Error::Config("noise_ratio must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub design: DesignKind,
    pub beta_true: Vec<f64>,
    pub theta_true: Direction,
    /// 0-based grid indices of the nonzero coefficients.
    pub impact_indices: Vec<usize>,
    /// Grid abscissae of the nonzero coefficients (after snapping).
    pub impact_abscissae: Vec<f64>,
    /// Closed intervals counted as correct selections; the rest of the domain is wrong.
    pub good_region: Vec<(f64, f64)>,
    pub noise_sd: f64,
}

impl GroundTruth {
    pub fn in_good_region(&self, t: f64) -> bool {
        self.good_region
            .iter()
            .any(|&(a, b)| t >= a - 1e-12 && t <= b + 1e-12)
    }
}

/// Brownian path: independent Gaussian increments with variance equal to the spacing,
/// started at 0 at time 0.
pub fn gen_brownian<R: Rng + ?Sized>(grid: &Arc<Grid>, rng: &mut R) -> Result<Curve> {
    let mut values = Vec::with_capacity(grid.len());
    let mut prev_t = 0.0;
    let mut level = 0.0;
    for &t in grid.points() {
        let dt = t - prev_t;
        if dt < 0.0 {
            return Err(Error::Grid("Brownian grid must start at or after 0".into()));
        }
        if dt > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            level += dt.sqrt() * z;
        }
        values.push(level);
        prev_t = t;
    }
    Curve::new(grid.clone(), values)
}

/// `a cos(2 pi t) + b sin(4 pi t) + 2 c (t - 0.25)(t - 0.5)`.
pub fn x_curve_value(a: f64, b: f64, c: f64, t: f64) -> f64 {
    a * (2.0 * PI * t).cos() + b * (4.0 * PI * t).sin() + 2.0 * c * (t - 0.25) * (t - 0.5)
}

/// Draws `a, b, c ~ U[0, hi]` and returns the curve with its coefficients.
pub fn gen_xcurves<R: Rng + ?Sized>(grid: &Arc<Grid>, rng: &mut R, hi: f64) -> Result<(Curve, [f64; 3])> {
    if !(hi > 0.0) {
        return Err(Error::Config(format!("coefficient range must be positive, got {hi}")));
    }
    let u = Uniform::new_inclusive(0.0, hi);
    let a = rng.sample(u);
    let b = rng.sample(u);
    let c = rng.sample(u);
    let curve = Curve::from_fn(grid.clone(), |t| x_curve_value(a, b, c, t))?;
    Ok((curve, [a, b, c]))
}

/// `c t + d` with `d ~ N(0, 1)`.
pub fn gen_lines<R: Rng + ?Sized>(grid: &Arc<Grid>, c: f64, rng: &mut R) -> Result<Curve> {
    let d: f64 = rng.sample(StandardNormal);
    Curve::from_fn(grid.clone(), |t| c * t + d)
}

/// Nearest grid index for each abscissa; a taken index moves to the next free one.
fn snap(grid: &Grid, ts: &[f64]) -> Result<Vec<usize>> {
    let mut used = vec![false; grid.len()];
    let mut out = Vec::with_capacity(ts.len());
    for &t in ts {
        let mut j = grid.nearest_index(t);
        while j < grid.len() && used[j] {
            j += 1;
        }
        if j == grid.len() {
            return Err(Error::Config(format!("grid too coarse to place impact point {t}")));
        }
        used[j] = true;
        out.push(j);
    }
    Ok(out)
}

pub fn ground_truth(kind: DesignKind, zeta_grid: &Arc<Grid>, x_grid: &Grid) -> Result<GroundTruth> {
    let impacts = kind.impacts();
    let ts: Vec<f64> = impacts.iter().map(|(t, _)| *t).collect();
    let idx = snap(zeta_grid, &ts)?;
    let mut beta = vec![0.0; zeta_grid.len()];
    for (&j, (_, b)) in idx.iter().zip(&impacts) {
        beta[j] = *b;
    }
    let basis = Arc::new(BSplineBasis::new(3, 3, (x_grid.start(), x_grid.end()))?);
    let theta = Direction::new(basis, THETA_TRUE.to_vec())?;
    Ok(GroundTruth {
        design: kind,
        beta_true: beta,
        theta_true: theta,
        impact_abscissae: idx.iter().map(|&j| zeta_grid.points()[j]).collect(),
        impact_indices: idx,
        good_region: kind.good_region(),
        noise_sd: 0.0,
    })
}

/// Generated sample with its noiseless part kept for checks.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub train: BiFunctionalDataset,
    pub test: BiFunctionalDataset,
    pub truth: GroundTruth,
    /// Noiseless responses for all `n + n_test` rows.
    pub signal: Vec<f64>,
}

/// Replicate `0` of the design.
pub fn gen_design(spec: &DesignSpec) -> Result<(BiFunctionalDataset, BiFunctionalDataset, GroundTruth)> {
    let s = gen_replicate(spec, 0)?;
    Ok((s.train, s.test, s.truth))
}

/// Replicate `r`: stream `r` of the generator seeded with `spec.seed`.
pub fn gen_replicate(spec: &DesignSpec, r: u64) -> Result<Simulated> {
    gen_with_noise(spec, r, spec.noise_ratio)
}

/// As [`gen_replicate`], but with no noise.
pub fn gen_noiseless(spec: &DesignSpec, r: u64) -> Result<Simulated> {
    gen_with_noise(spec, r, 0.0)
}

fn gen_with_noise(spec: &DesignSpec, r: u64, ratio: f64) -> Result<Simulated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(r);
    let zeta_grid = Arc::new(Grid::uniform(0.0, 1.0, spec.p)?);
    let x_grid = Arc::new(Grid::uniform(0.0, 1.0, X_GRID_POINTS)?);
    let mut truth = ground_truth(spec.kind, &zeta_grid, &x_grid)?;
    let rows = spec.n + spec.n_test;
    let mut zeta = DMatrix::zeros(rows, spec.p);
    let mut x = DMatrix::zeros(rows, X_GRID_POINTS);
    for i in 0..rows {
        let (xc, [_, _, c]) = gen_xcurves(&x_grid, &mut rng, spec.kind.coef_range())?;
        let zc = match spec.kind {
            DesignKind::A | DesignKind::C => gen_brownian(&zeta_grid, &mut rng)?,
            DesignKind::B => gen_lines(&zeta_grid, c, &mut rng)?,
        };
        x.row_mut(i).copy_from_slice(xc.values());
        zeta.row_mut(i).copy_from_slice(zc.values());
    }
    let signal: Vec<f64> = (0..rows)
        .map(|i| {
            let linear: f64 = truth
                .impact_indices
                .iter()
                .map(|&j| truth.beta_true[j] * zeta[(i, j)])
                .sum();
            let xi = Curve::new(x_grid.clone(), x.row(i).iter().copied().collect())?;
            Ok(linear + project(&truth.theta_true, &xi)?.powi(3))
        })
        .collect::<Result<_>>()?;
    let sd = sample_sd(&signal);
    let noise_sd = ratio * sd;
    truth.noise_sd = noise_sd;
    let y: Vec<f64> = if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd).map_err(|e| Error::Numerical(e.to_string()))?;
        signal.iter().map(|s| s + rng.sample(normal)).collect()
    } else {
        signal.clone()
    };
    let all = BiFunctionalDataset::new(
        zeta_grid,
        zeta,
        x_grid,
        x,
        DVector::from_vec(y),
    )?;
    let train = all.select_rows(&(0..spec.n).collect::<Vec<_>>())?;
    let test = all.select_rows(&(spec.n..rows).collect::<Vec<_>>())?;
    Ok(Simulated {
        train,
        test,
        truth,
        signal,
    })
}

pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Selected abscissae inside and outside the good region.
pub fn impact_metrics(support: &SupportSet, truth: &GroundTruth, grid: &Grid) -> Result<(usize, usize)> {
    let mut right = 0;
    let mut wrong = 0;
    for &j in support.indices() {
        let t = *grid
            .points()
            .get(j)
            .ok_or_else(|| Error::Size(format!("support index {j} outside the grid")))?;
        if truth.in_good_region(t) {
            right += 1;
        } else {
            wrong += 1;
        }
    }
    Ok((right, wrong))
}

/// Whether the representative of every true impact point's block (for the chosen `w`)
/// is in the support.
pub fn representatives_recovered(fit: &FitResult, truth: &GroundTruth) -> Result<bool> {
    let scheme = ReductionScheme::build(fit.beta_full.len(), fit.chosen.w)?;
    Ok(truth.impact_indices.iter().all(|&j| {
        scheme
            .block_of(j)
            .map(|k| fit.support.contains(scheme.reps[k]))
            .unwrap_or(false)
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub method: String,
    pub replicate: u64,
    pub msep: f64,
    pub right: usize,
    pub wrong: usize,
    pub support: SupportSet,
    pub reps_recovered: bool,
    pub extrapolated: usize,
    pub wall_time: f64,
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub replicates: usize,
    pub failures: usize,
    pub mean_msep: f64,
    pub sd_msep: f64,
    pub mean_right: f64,
    pub mean_wrong: f64,
    pub recovery_rate: f64,
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub spec: DesignSpec,
    pub m: usize,
    pub methods: Vec<MethodSummary>,
    pub replicates: Vec<ReplicateResult>,
}

impl MetricsSummary {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Copy with all wall-clock fields zeroed, for run-to-run comparisons.
    pub fn without_timing(&self) -> Self {
        let mut s = self.clone();
        for m in &mut s.methods {
            m.mean_seconds = 0.0;
        }
        for r in &mut s.replicates {
            r.wall_time = 0.0;
        }
        s
    }
}

fn run_replicate(
    spec: &DesignSpec,
    methods: &[&dyn SelectionMethod],
    r: u64,
) -> Result<Vec<ReplicateResult>> {
    let sim = gen_replicate(spec, r)?;
    let truth_y: Vec<f64> = sim.test.y().iter().copied().collect();
    Ok(methods
        .iter()
        .map(|m| {
            let start = Instant::now();
            let fitted = m.fit(&sim.train);
            let wall_time = start.elapsed().as_secs_f64();
            let scored = fitted.and_then(|fit| {
                let preds = predict_dataset(&fit, &sim.test)?;
                let values: Vec<f64> = preds.iter().map(|p| p.0).collect();
                let err = msep(&values, &truth_y)?;
                let (right, wrong) = impact_metrics(&fit.support, &sim.truth, sim.train.zeta_grid())?;
                let recovered = representatives_recovered(&fit, &sim.truth)?;
                Ok((fit.support, err, right, wrong, recovered, preds.iter().filter(|p| p.1).count()))
            });
            match scored {
                Ok((support, err, right, wrong, recovered, extrapolated)) => ReplicateResult {
                    method: m.name().to_string(),
                    replicate: r,
                    msep: err,
                    right,
                    wrong,
                    support,
                    reps_recovered: recovered,
                    extrapolated,
                    wall_time,
                    failed: None,
                },
                Err(e) => ReplicateResult {
                    method: m.name().to_string(),
                    replicate: r,
                    msep: f64::NAN,
                    right: 0,
                    wrong: 0,
                    support: SupportSet::default(),
                    reps_recovered: false,
                    extrapolated: 0,
                    wall_time,
                    failed: Some(e.to_string()),
                },
            }
        })
        .collect())
}

/// Runs `m` replicates (streams `0..m`) of every method on `workers` threads
/// (`None` uses the global pool).
pub fn monte_carlo(
    spec: &DesignSpec,
    methods: &[&dyn SelectionMethod],
    m: usize,
    workers: Option<usize>,
) -> Result<MetricsSummary> {
    spec.validate()?;
    if m == 0 {
        return Err(Error::Config("need at least one replicate".into()));
    }
    if methods.is_empty() {
        return Err(Error::Config("no methods to run".into()));
    }
    let run = || -> Result<Vec<Vec<ReplicateResult>>> {
        (0..m as u64)
            .into_par_iter()
            .map(|r| run_replicate(spec, methods, r))
            .collect()
    };
    let per_rep = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let replicates: Vec<ReplicateResult> = per_rep.into_iter().flatten().collect();
    let summaries = methods
        .iter()
        .map(|meth| summarize(meth.name(), &replicates))
        .collect();
    Ok(MetricsSummary {
        spec: spec.clone(),
        m,
        methods: summaries,
        replicates,
    })
}

fn summarize(name: &str, all: &[ReplicateResult]) -> MethodSummary {
    let mine: Vec<&ReplicateResult> = all.iter().filter(|r| r.method == name).collect();
    let ok: Vec<&&ReplicateResult> = mine.iter().filter(|r| r.failed.is_none()).collect();
    let k = ok.len() as f64;
    let mean = |f: &dyn Fn(&ReplicateResult) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / k
        }
    };
    let msep: Vec<f64> = ok.iter().map(|r| r.msep).collect();
    MethodSummary {
        method: name.to_string(),
        replicates: mine.len(),
        failures: mine.len() - ok.len(),
        mean_msep: mean(&|r| r.msep),
        sd_msep: sample_sd(&msep),
        mean_right: mean(&|r| r.right as f64),
        mean_wrong: mean(&|r| r.wrong as f64),
        recovery_rate: mean(&|r| if r.reps_recovered { 1.0 } else { 0.0 }),
        mean_seconds: mean(&|r| r.wall_time),
    }
}
