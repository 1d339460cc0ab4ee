//! Two-stage selection: the thinned fit on a first subsample marks blocks,
//! and a second penalized fit over every point of those blocks runs on an
//! independent subsample.

use serde::{Deserialize, Serialize};

use crate::direction::DirectionSet;
use crate::engine::{search, SearchSpec};
use crate::error::{Error, Result};
use crate::fassmr::{
    flags_from, pick_w, require_rows, selected_columns, thinned_search, validate_levels,
    FassmrConfig, FitResult, ReductionScheme, StageRecord,
};
use crate::functional::{split_dataset, BiFunctionalDataset, SupportSet};
use crate::scad::ScadConfig;

/// Union of complete blocks around the first-stage winners (0-based indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecondStageSet {
    pub indices: Vec<usize>,
    pub r: usize,
}

impl SecondStageSet {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `selected_k` are 0-based block numbers.
pub fn second_stage_set(scheme: &ReductionScheme, selected_k: &[usize]) -> Result<SecondStageSet> {
    if let Some(&k) = selected_k.iter().find(|&&k| k >= scheme.w) {
        return Err(Error::Reduction(format!("block {k} out of range for w={}", scheme.w)));
    }
    let mut ks = selected_k.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let indices: Vec<usize> = ks.iter().flat_map(|&k| scheme.block_range(k)).collect();
    Ok(SecondStageSet {
        r: indices.len(),
        indices,
    })
}

#[derive(Debug, Clone)]
pub struct IassmrConfig {
    /// `(n1, n2)`; defaults to `(n / 2, n - n / 2)`.
    pub split: Option<(usize, usize)>,
    pub stage1: FassmrConfig,
    pub stage2_scad: ScadConfig,
    pub stage2_bandwidth_quantiles: Vec<f64>,
    /// Defaults to the first-stage directions.
    pub stage2_directions: Option<DirectionSet>,
}

impl IassmrConfig {
    pub fn new(stage1: FassmrConfig) -> Self {
        Self {
            split: None,
            stage2_scad: stage1.scad,
            stage2_bandwidth_quantiles: stage1.bandwidth_quantiles.clone(),
            stage2_directions: None,
            stage1,
        }
    }

    pub fn resolve_split(&self, n: usize) -> Result<(usize, usize)> {
        resolve_split(self.split, n)
    }

    fn stage2_directions(&self) -> &DirectionSet {
        self.stage2_directions.as_ref().unwrap_or(&self.stage1.directions)
    }

    pub fn validate(&self, data: &BiFunctionalDataset) -> Result<()> {
        self.resolve_split(data.n())?;
        self.stage1.validate(data.p())?;
        validate_levels(&self.stage2_bandwidth_quantiles)?;
        if self.stage2_directions().is_empty() {
            return Err(Error::Config("second-stage direction set is empty".into()));
        }
        self.stage2_scad.validate()
    }
}

/// Explicit split or halves, checked against `n`.
pub fn resolve_split(split: Option<(usize, usize)>, n: usize) -> Result<(usize, usize)> {
    let (n1, n2) = split.unwrap_or((n / 2, n - n / 2));
    if n1 < 2 || n2 < 2 {
        return Err(Error::Size(format!("both subsamples need at least 2 rows, got ({n1}, {n2})")));
    }
    if n1 + n2 > n {
        return Err(Error::Size(format!("split ({n1}, {n2}) exceeds {n} samples")));
    }
    Ok((n1, n2))
}

pub fn iassmr_fit(data: &BiFunctionalDataset, config: &IassmrConfig) -> Result<FitResult> {
    config.validate(data)?;
    let (n1, n2) = config.resolve_split(data.n())?;
    let (e1, e2) = split_dataset(data, n1, n2)?;

    let (schemes, outcomes) = thinned_search(&e1, &config.stage1)?;
    let mut stage1_support = Vec::with_capacity(schemes.len());
    let mut sets = Vec::with_capacity(schemes.len());
    for (scheme, outcome) in schemes.iter().zip(&outcomes) {
        let selected: Vec<usize> = outcome
            .best
            .fit
            .beta
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(k, _)| k)
            .collect();
        stage1_support.push(selected_columns(&scheme.reps, &outcome.best.fit.beta));
        sets.push((scheme.w, second_stage_set(scheme, &selected)?));
    }
    let mut fit = second_stage_fit(&e2, &sets, config)?;
    for (rec, support) in fit.stage_trace.iter_mut().zip(stage1_support) {
        rec.stage1_support = support;
    }
    let stage1_flags = flags_from(&outcomes);
    fit.flags.cells += stage1_flags.cells;
    fit.flags.nonconverged_cells += stage1_flags.nonconverged_cells;
    fit.flags.all_nonconverged = fit.flags.nonconverged_cells == fit.flags.cells;
    Ok(fit)
}

/// Second stage on `e2` for given `(w, R_w)` pairs: every set is searched over
/// `(theta, h, lambda)` and the `w` with the smallest BIC wins. Empty sets only
/// compete when all of them are empty, which yields the link-only fit.
pub fn second_stage_fit(
    e2: &BiFunctionalDataset,
    sets: &[(usize, SecondStageSet)],
    config: &IassmrConfig,
) -> Result<FitResult> {
    require_rows(e2, 2)?;
    if sets.is_empty() {
        return Err(Error::Config("no second-stage candidate sets".into()));
    }
    let mut order: Vec<usize> = (0..sets.len()).collect();
    order.sort_by_key(|&i| sets[i].0);
    let sets: Vec<&(usize, SecondStageSet)> = order.iter().map(|&i| &sets[i]).collect();

    let mut unique: Vec<Vec<usize>> = Vec::new();
    let mut which = Vec::with_capacity(sets.len());
    for (_, s) in &sets {
        match unique.iter().position(|u| *u == s.indices) {
            Some(u) => which.push(u),
            None => {
                which.push(unique.len());
                unique.push(s.indices.clone());
            }
        }
    }
    let spec = SearchSpec {
        directions: config.stage2_directions(),
        bandwidth_levels: &config.stage2_bandwidth_quantiles,
        scad: &config.stage2_scad,
        kernel: config.stage1.kernel,
    };
    let unique_outcomes = search(e2, &unique, &spec)?;
    let outcomes: Vec<_> = which.iter().map(|&u| unique_outcomes[u].clone()).collect();

    let all_empty = sets.iter().all(|(_, s)| s.is_empty());
    let i = pick_w(&outcomes, |i| all_empty || !sets[i].1.is_empty()).expect("at least one set");
    let trace = sets
        .iter()
        .zip(&outcomes)
        .map(|((w, s), o)| StageRecord {
            w: *w,
            stage1_support: Vec::new(),
            second_stage_size: Some(s.r),
            bic: o.best.bic,
        })
        .collect();
    FitResult::assemble(
        "iassmr",
        e2,
        &sets[i].1.indices,
        sets[i].0,
        &outcomes[i].best,
        spec.directions,
        config.stage1.kernel,
        flags_from(&unique_outcomes),
        trace,
    )
}

/// Grid indices with nonzero second-stage coefficients.
pub fn final_support(fit: &FitResult) -> SupportSet {
    SupportSet::from_coefficients(&fit.beta_full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_block() {
        let s = ReductionScheme::build(100, 10).unwrap();
        let r = second_stage_set(&s, &[2]).unwrap();
        assert_eq!(r.indices, (20..30).collect::<Vec<_>>());
        assert_eq!(r.r, 10);
    }

    #[test]
    fn uneven_blocks_union() {
        let s = ReductionScheme::build(101, 5).unwrap();
        let r = second_stage_set(&s, &[1, 0]).unwrap();
        assert_eq!(r.indices, (0..41).collect::<Vec<_>>());
        assert_eq!(r.r, 41);
    }

    #[test]
    fn all_blocks_cover_grid() {
        let s = ReductionScheme::build(101, 15).unwrap();
        let all: Vec<usize> = (0..15).collect();
        let r = second_stage_set(&s, &all).unwrap();
        assert_eq!(r.indices, (0..101).collect::<Vec<_>>());
    }

    #[test]
    fn empty_selection() {
        let s = ReductionScheme::build(50, 10).unwrap();
        let r = second_stage_set(&s, &[]).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.r, 0);
    }

    #[test]
    fn out_of_range_block() {
        let s = ReductionScheme::build(50, 10).unwrap();
        assert!(second_stage_set(&s, &[10]).is_err());
    }
}
