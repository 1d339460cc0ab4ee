//! Fast selection on a thinned grid: a block partition of the `zeta` grid, one
//! representative per block, and a BIC-tuned SCAD fit on the representatives.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::direction::{Direction, DirectionSet, DirectionSpec};
use crate::engine::{search, CellChoice, SearchSpec, SetOutcome};
use crate::error::{Error, Result};
use crate::functional::{BiFunctionalDataset, Curve, Grid, SupportSet};
use crate::kernel::{KernelSpec, LinkEstimate, LinkEstimator};
use crate::scad::ScadConfig;

pub const DEFAULT_W_CANDIDATES: [usize; 3] = [10, 15, 20];

pub fn default_bandwidth_quantiles() -> Vec<f64> {
    (1..=10).map(|i| i as f64 * 0.05).collect()
}

/// Partition of `0..p` into `w` contiguous blocks. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionScheme {
    pub p: usize,
    pub w: usize,
    /// Block sizes `q_k`.
    pub q: Vec<usize>,
    /// First index of each block.
    pub starts: Vec<usize>,
    /// Representative index of each block.
    pub reps: Vec<usize>,
}

impl ReductionScheme {
    /// The first `p - w * floor(p / w)` blocks get one extra point; each
    /// representative sits `ceil(q_k / 2)` points into its block (1-based).
    pub fn build(p: usize, w: usize) -> Result<Self> {
        if w == 0 || w > p {
            return Err(Error::Reduction(format!("need 1 <= w <= p, got w={w}, p={p}")));
        }
        let base = p / w;
        let extra = p - w * base;
        let q: Vec<usize> = (0..w).map(|k| if k < extra { base + 1 } else { base }).collect();
        let mut starts = Vec::with_capacity(w);
        let mut reps = Vec::with_capacity(w);
        let mut start = 0;
        for &qk in &q {
            starts.push(start);
            reps.push(start + qk.div_ceil(2) - 1);
            start += qk;
        }
        Ok(Self { p, w, q, starts, reps })
    }

    pub fn block_range(&self, k: usize) -> std::ops::Range<usize> {
        self.starts[k]..self.starts[k] + self.q[k]
    }

    /// Block containing full-grid index `j`.
    pub fn block_of(&self, j: usize) -> Option<usize> {
        if j >= self.p {
            return None;
        }
        Some(self.starts.partition_point(|&s| s <= j) - 1)
    }
}

#[derive(Debug, Clone)]
pub struct FassmrConfig {
    pub w_candidates: Vec<usize>,
    pub directions: DirectionSet,
    pub bandwidth_quantiles: Vec<f64>,
    pub scad: ScadConfig,
    pub kernel: KernelSpec,
}

impl FassmrConfig {
    /// Defaults with the standard direction set built on `x_grid`.
    pub fn new(x_grid: &Grid) -> Result<Self> {
        Ok(Self::with_directions(DirectionSpec::default().build(x_grid)?))
    }

    pub fn with_directions(directions: DirectionSet) -> Self {
        Self {
            w_candidates: DEFAULT_W_CANDIDATES.to_vec(),
            directions,
            bandwidth_quantiles: default_bandwidth_quantiles(),
            scad: ScadConfig::default(),
            kernel: KernelSpec::default(),
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.w_candidates.is_empty() {
            return Err(Error::Config("no candidate w values".into()));
        }
        if let Some(&w) = self.w_candidates.iter().find(|&&w| w == 0 || w > p) {
            return Err(Error::Reduction(format!("need 1 <= w <= p, got w={w}, p={p}")));
        }
        if self.directions.is_empty() {
            return Err(Error::Config("direction set is empty".into()));
        }
        validate_levels(&self.bandwidth_quantiles)?;
        self.scad.validate()
    }

    pub(crate) fn search_spec(&self) -> SearchSpec<'_> {
        SearchSpec {
            directions: &self.directions,
            bandwidth_levels: &self.bandwidth_quantiles,
            scad: &self.scad,
            kernel: self.kernel,
        }
    }
}

pub(crate) fn validate_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() || levels.iter().any(|q| !(*q > 0.0 && *q <= 1.0)) {
        return Err(Error::Config(
            "bandwidth quantile levels must be nonempty and lie in (0, 1]".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenTuning {
    pub w: usize,
    pub direction_index: usize,
    pub h: f64,
    pub lambda: f64,
    pub bic: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitFlags {
    pub cells: usize,
    pub nonconverged_cells: usize,
    /// No cell of the search converged.
    pub all_nonconverged: bool,
    /// The chosen cell's penalty scaling saw zero or duplicated columns.
    pub degenerate_scaling: bool,
    /// No linear covariate survived; the link was fitted on the raw response.
    pub fsim_fallback: bool,
}

/// Per-`w` record of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub w: usize,
    /// Full-grid indices selected by the thinned fit.
    pub stage1_support: Vec<usize>,
    /// Size of the second-stage candidate set (two-stage fits only).
    pub second_stage_size: Option<usize>,
    pub bic: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub method: String,
    pub zeta_grid: Arc<Grid>,
    pub beta_full: Vec<f64>,
    pub support: SupportSet,
    pub support_abscissae: Vec<f64>,
    /// Full-grid indices the final penalized fit could choose from.
    pub candidates: Vec<usize>,
    pub theta_hat: Direction,
    pub chosen: ChosenTuning,
    pub link: LinkEstimator,
    pub flags: FitFlags,
    pub stage_trace: Vec<StageRecord>,
}

impl FitResult {
    pub(crate) fn assemble(
        method: &str,
        data: &BiFunctionalDataset,
        columns: &[usize],
        w: usize,
        cell: &CellChoice,
        config_directions: &DirectionSet,
        kernel: KernelSpec,
        mut flags: FitFlags,
        stage_trace: Vec<StageRecord>,
    ) -> Result<Self> {
        let mut beta_full = vec![0.0; data.p()];
        for (&j, &b) in columns.iter().zip(&cell.fit.beta) {
            beta_full[j] = b;
        }
        let support = SupportSet::from_coefficients(&beta_full);
        let support_abscissae = support
            .indices()
            .iter()
            .map(|&j| data.zeta_grid().points()[j])
            .collect();
        let theta_hat = config_directions.directions()[cell.direction].clone();
        flags.degenerate_scaling = cell.degenerate_scaling;
        flags.fsim_fallback = support.is_empty();
        let link = LinkEstimator::new(data, &beta_full, theta_hat.clone(), cell.h, kernel)?;
        Ok(Self {
            method: method.to_string(),
            zeta_grid: data.zeta_grid().clone(),
            beta_full,
            support,
            support_abscissae,
            candidates: columns.to_vec(),
            theta_hat,
            chosen: ChosenTuning {
                w,
                direction_index: cell.direction,
                h: cell.h,
                lambda: cell.lambda,
                bic: cell.bic,
            },
            link,
            flags,
            stage_trace,
        })
    }

    pub fn predict(&self, zeta_new: &Curve, x_new: &Curve) -> Result<f64> {
        predict(self, zeta_new, x_new)
    }
}

pub(crate) fn require_rows(data: &BiFunctionalDataset, min: usize) -> Result<()> {
    if data.n() < min {
        return Err(Error::Size(format!("need at least {min} samples, got {}", data.n())));
    }
    Ok(())
}

fn sorted_candidates(ws: &[usize]) -> Vec<usize> {
    let mut ws = ws.to_vec();
    ws.sort_unstable();
    ws.dedup();
    ws
}

pub(crate) fn flags_from(outcomes: &[SetOutcome]) -> FitFlags {
    let cells: usize = outcomes.iter().map(|o| o.cells).sum();
    let nonconverged: usize = outcomes.iter().map(|o| o.nonconverged).sum();
    FitFlags {
        cells,
        nonconverged_cells: nonconverged,
        all_nonconverged: cells > 0 && nonconverged == cells,
        ..FitFlags::default()
    }
}

/// Per-`w` winners of the thinned search, in increasing `w`.
pub(crate) fn thinned_search(
    data: &BiFunctionalDataset,
    config: &FassmrConfig,
) -> Result<(Vec<ReductionScheme>, Vec<SetOutcome>)> {
    config.validate(data.p())?;
    let schemes = sorted_candidates(&config.w_candidates)
        .into_iter()
        .map(|w| ReductionScheme::build(data.p(), w))
        .collect::<Result<Vec<_>>>()?;
    let sets: Vec<Vec<usize>> = schemes.iter().map(|s| s.reps.clone()).collect();
    let outcomes = search(data, &sets, &config.search_spec())?;
    Ok((schemes, outcomes))
}

/// Index of the winner under `(BIC, smaller w)`; `ws` must be increasing.
pub(crate) fn pick_w(outcomes: &[SetOutcome], eligible: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, o) in outcomes.iter().enumerate() {
        if !eligible(i) {
            continue;
        }
        if best.map_or(true, |b| o.best.bic < outcomes[b].best.bic) {
            best = Some(i);
        }
    }
    best
}

fn fit_thinned(method: &str, data: &BiFunctionalDataset, config: &FassmrConfig) -> Result<FitResult> {
    require_rows(data, 2)?;
    let (schemes, outcomes) = thinned_search(data, config)?;
    let trace: Vec<StageRecord> = schemes
        .iter()
        .zip(&outcomes)
        .map(|(s, o)| StageRecord {
            w: s.w,
            stage1_support: selected_columns(&s.reps, &o.best.fit.beta),
            second_stage_size: None,
            bic: o.best.bic,
        })
        .collect();
    let i = pick_w(&outcomes, |_| true).expect("at least one w");
    FitResult::assemble(
        method,
        data,
        &schemes[i].reps,
        schemes[i].w,
        &outcomes[i].best,
        &config.directions,
        config.kernel,
        flags_from(&outcomes),
        trace,
    )
}

pub(crate) fn selected_columns(columns: &[usize], beta: &[f64]) -> Vec<usize> {
    columns
        .iter()
        .zip(beta)
        .filter(|(_, b)| **b != 0.0)
        .map(|(&j, _)| j)
        .collect()
}

pub fn fassmr_fit(data: &BiFunctionalDataset, config: &FassmrConfig) -> Result<FitResult> {
    fit_thinned("fassmr", data, config)
}

/// Penalized fit on every grid point (the `w = p` reduction).
pub fn standard_pls_fit(data: &BiFunctionalDataset, config: &FassmrConfig) -> Result<FitResult> {
    let mut cfg = config.clone();
    cfg.w_candidates = vec![data.p()];
    fit_thinned("pls", data, &cfg)
}

/// `zeta_new' beta_hat + m_hat(x_new)`.
pub fn predict(fit: &FitResult, zeta_new: &Curve, x_new: &Curve) -> Result<f64> {
    Ok(predict_detail(fit, zeta_new, x_new)?.0)
}

fn predict_detail(fit: &FitResult, zeta_new: &Curve, x_new: &Curve) -> Result<(f64, LinkEstimate)> {
    if !zeta_new.grid().same_as(&fit.zeta_grid) {
        return Err(Error::GridMismatch("zeta curve is not on the training grid".into()));
    }
    if !x_new.grid().same_as(&fit.link.x_grid) {
        return Err(Error::GridMismatch("x curve is not on the training grid".into()));
    }
    let linear: f64 = fit
        .support
        .indices()
        .iter()
        .map(|&j| fit.beta_full[j] * zeta_new.values()[j])
        .sum();
    let link = fit.link.evaluate(x_new)?;
    Ok((linear + link.value, link))
}

/// Predictions for every row of `data`, with per-row extrapolation flags.
pub fn predict_dataset(fit: &FitResult, data: &BiFunctionalDataset) -> Result<Vec<(f64, bool)>> {
    (0..data.n())
        .map(|i| {
            let (v, link) = predict_detail(fit, &data.zeta_curve(i), &data.x_curve(i))?;
            Ok((v, link.extrapolated))
        })
        .collect()
}

pub fn msep(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truth.len() {
        return Err(Error::Size(format!(
            "need equal nonempty lengths, got {} and {}",
            predictions.len(),
            truth.len()
        )));
    }
    let sum: f64 = predictions
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(sum / predictions.len() as f64)
}
