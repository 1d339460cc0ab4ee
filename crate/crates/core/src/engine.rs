//! Shared `(theta, h, lambda)` grid search over one or more column sets.
//!
//! For each direction the sample is sorted by projected index so that the
//! Epanechnikov weights become contiguous windows; every needed column of `zeta`
//! is residualized once per bandwidth and reused by all column sets.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::direction::DirectionSet;
use crate::error::{Error, Result};
use crate::functional::BiFunctionalDataset;
use crate::kernel::{bandwidth_grid, projected_index, BandedWeights, KernelSpec};
use crate::scad::{bic_score_floored, ols_scaling_with_gram, PenalizedFit, PenaltyScaling, Problem, ScadConfig};

const RSS_FLOOR: f64 = 1e-12;

pub(crate) struct SearchSpec<'a> {
    pub directions: &'a DirectionSet,
    pub bandwidth_levels: &'a [f64],
    pub scad: &'a ScadConfig,
    pub kernel: KernelSpec,
}

/// Best cell for one column set.
#[derive(Debug, Clone)]
pub(crate) struct CellChoice {
    pub direction: usize,
    pub h: f64,
    pub lambda: f64,
    pub bic: f64,
    /// Coefficients in the order of the column set.
    pub fit: PenalizedFit,
    pub degenerate_scaling: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct SetOutcome {
    pub best: CellChoice,
    pub cells: usize,
    pub nonconverged: usize,
}

impl CellChoice {
    /// `(BIC, direction, h, larger lambda)` ordering; true when `self` wins.
    fn beats(&self, other: &CellChoice) -> bool {
        self.bic
            .total_cmp(&other.bic)
            .then(self.direction.cmp(&other.direction))
            .then(self.h.total_cmp(&other.h))
            .then(other.lambda.total_cmp(&self.lambda))
            .is_lt()
    }
}

fn merge(acc: &mut Option<SetOutcome>, next: SetOutcome) {
    match acc {
        None => *acc = Some(next),
        Some(cur) => {
            cur.cells += next.cells;
            cur.nonconverged += next.nonconverged;
            if next.best.beats(&cur.best) {
                cur.best = next.best;
            }
        }
    }
}

/// Runs the full grid for every column set and returns the winning cell of each.
pub(crate) fn search(
    data: &BiFunctionalDataset,
    sets: &[Vec<usize>],
    spec: &SearchSpec<'_>,
) -> Result<Vec<SetOutcome>> {
    if spec.directions.is_empty() {
        return Err(Error::Config("direction set is empty".into()));
    }
    let p = data.p();
    if let Some(bad) = sets.iter().flatten().find(|&&j| j >= p) {
        return Err(Error::Size(format!("column {bad} outside a grid of {p} points")));
    }
    let mut union: Vec<usize> = sets.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    let mut slot = vec![usize::MAX; p];
    for (s, &j) in union.iter().enumerate() {
        slot[j] = s;
    }
    let set_slots: Vec<Vec<usize>> = sets
        .iter()
        .map(|s| s.iter().map(|&j| slot[j]).collect())
        .collect();

    let per_direction: Vec<Vec<SetOutcome>> = (0..spec.directions.len())
        .into_par_iter()
        .map(|d| search_direction(data, d, &union, &set_slots, spec))
        .collect::<Result<_>>()?;

    let mut acc: Vec<Option<SetOutcome>> = vec![None; sets.len()];
    for outcomes in per_direction {
        for (a, o) in acc.iter_mut().zip(outcomes) {
            merge(a, o);
        }
    }
    Ok(acc.into_iter().map(|a| a.expect("at least one direction")).collect())
}

fn search_direction(
    data: &BiFunctionalDataset,
    d: usize,
    union: &[usize],
    set_slots: &[Vec<usize>],
    spec: &SearchSpec<'_>,
) -> Result<Vec<SetOutcome>> {
    let n = data.n();
    let theta = &spec.directions.directions()[d];
    let index = projected_index(theta, data.x(), data.x_grid())?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| index[a].total_cmp(&index[b]).then(a.cmp(&b)));
    let sorted_index: Vec<f64> = order.iter().map(|&i| index[i]).collect();
    let y_sorted: Vec<f64> = order.iter().map(|&i| data.y()[i]).collect();
    // residualizing a near-constant response leaves rounding noise on the scale of y
    let raw_scale = data.y().norm_squared();
    let cols_sorted: Vec<Vec<f64>> = union
        .iter()
        .map(|&j| {
            let col = data.zeta_column(j);
            order.iter().map(|&i| col[i]).collect()
        })
        .collect();
    let bandwidths = bandwidth_grid(&index, spec.bandwidth_levels);

    let mut acc: Vec<Option<SetOutcome>> = vec![None; set_slots.len()];
    let mut y_t = vec![0.0; n];
    let mut cols_t: Vec<Vec<f64>> = vec![vec![0.0; n]; union.len()];
    for &h in &bandwidths {
        let weights = BandedWeights::new(&sorted_index, h, spec.kernel);
        weights.residualize(&y_sorted, &mut y_t);
        for (src, dst) in cols_sorted.iter().zip(cols_t.iter_mut()) {
            weights.residualize(src, dst);
        }
        let y_vec = DVector::from_column_slice(&y_t);
        let floor = (RSS_FLOOR * y_vec.norm_squared().max(raw_scale)).max(f64::MIN_POSITIVE);
        for (a, slots) in acc.iter_mut().zip(set_slots) {
            let outcome = fit_cell(&y_vec, &cols_t, slots, d, h, floor, spec.scad)?;
            merge(a, outcome);
        }
    }
    Ok(acc.into_iter().map(|a| a.expect("bandwidth grid is nonempty")).collect())
}

fn fit_cell(
    y: &DVector<f64>,
    cols: &[Vec<f64>],
    slots: &[usize],
    direction: usize,
    h: f64,
    rss_floor: f64,
    scad: &ScadConfig,
) -> Result<SetOutcome> {
    let n = y.len();
    let k = slots.len();
    let mut z = DMatrix::zeros(n, k);
    for (c, &s) in slots.iter().enumerate() {
        z.column_mut(c).copy_from_slice(&cols[s]);
    }
    let gram = (k <= n).then(|| z.tr_mul(&z));
    let scaling = if k == 0 {
        PenaltyScaling::ones(0)
    } else {
        ols_scaling_with_gram(&z, y, gram.as_ref())?
    };
    let mut problem = Problem::new(&z, y, gram.as_ref())?;
    let path = problem.path(&scaling, scad);

    let mut best: Option<(f64, PenalizedFit)> = None;
    let mut nonconverged = 0;
    let cells = path.len();
    for fit in path {
        if !fit.converged {
            nonconverged += 1;
        }
        let bic = bic_score_floored(&fit, n, rss_floor);
        // descending lambda: strict improvement keeps the larger lambda on ties
        if best.as_ref().map_or(true, |(b, _)| bic < *b) {
            best = Some((bic, fit));
        }
    }
    let (bic, fit) = best.expect("lambda path is nonempty");
    Ok(SetOutcome {
        best: CellChoice {
            direction,
            h,
            lambda: fit.lambda,
            bic,
            fit,
            degenerate_scaling: scaling.is_degenerate(),
        },
        cells,
        nonconverged,
    })
}
