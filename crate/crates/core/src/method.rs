//! Named selection methods behind a common trait.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::direction::{DirectionSet, DirectionSpec, DEFAULT_ENUMERATION_CAP};
use crate::error::{Error, Result};
use crate::fassmr::{
    default_bandwidth_quantiles, fassmr_fit, standard_pls_fit, FassmrConfig, FitResult,
    DEFAULT_W_CANDIDATES,
};
use crate::functional::{BiFunctionalDataset, Grid};
use crate::iassmr::{iassmr_fit, resolve_split, IassmrConfig};
use crate::kernel::KernelSpec;
use crate::scad::ScadConfig;

/// Tuning shared by every method. Fields a method does not use are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSettings {
    pub w_set: Vec<usize>,
    pub bandwidth_quantiles: Vec<f64>,
    pub scad: ScadConfig,
    pub spline_order: usize,
    /// Interior knot counts tried; the one with the smallest BIC is kept.
    pub m_knots: Vec<usize>,
    pub seeds: Vec<f64>,
    /// Keep every `direction_stride`-th candidate direction.
    pub direction_stride: usize,
    pub anchor: Option<f64>,
    /// Two-stage split `(n1, n2)`.
    pub split: Option<(usize, usize)>,
    /// Single-stage methods fit on the first `train_rows` samples only.
    pub train_rows: Option<usize>,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            w_set: DEFAULT_W_CANDIDATES.to_vec(),
            bandwidth_quantiles: default_bandwidth_quantiles(),
            scad: ScadConfig::default(),
            spline_order: 3,
            m_knots: vec![3],
            seeds: vec![-1.0, 0.0, 1.0],
            direction_stride: 1,
            anchor: None,
            split: None,
            train_rows: None,
        }
    }
}

impl MethodSettings {
    pub fn validate(&self) -> Result<()> {
        if self.m_knots.is_empty() {
            return Err(Error::Config("m_knots must not be empty".into()));
        }
        if self.direction_stride == 0 {
            return Err(Error::Config("direction_stride must be at least 1".into()));
        }
        if self.w_set.is_empty() {
            return Err(Error::Config("w_set must not be empty".into()));
        }
        self.scad.validate()
    }

    pub fn directions(&self, x_grid: &Grid, m: usize) -> Result<DirectionSet> {
        let spec = DirectionSpec {
            order: self.spline_order,
            interior_knots: m,
            seeds: self.seeds.clone(),
            anchor: self.anchor,
            cap: DEFAULT_ENUMERATION_CAP,
        };
        Ok(spec.build(x_grid)?.thinned(self.direction_stride))
    }

    pub fn fassmr_config(&self, x_grid: &Grid, m: usize) -> Result<FassmrConfig> {
        Ok(FassmrConfig {
            w_candidates: self.w_set.clone(),
            directions: self.directions(x_grid, m)?,
            bandwidth_quantiles: self.bandwidth_quantiles.clone(),
            scad: self.scad,
            kernel: KernelSpec::default(),
        })
    }

    fn training_rows(&self, data: &BiFunctionalDataset) -> Result<Option<BiFunctionalDataset>> {
        match self.train_rows {
            None => Ok(None),
            Some(r) if r == data.n() => Ok(None),
            Some(r) if r >= 2 && r < data.n() => {
                let rows: Vec<usize> = (0..r).collect();
                Ok(Some(data.select_rows(&rows)?))
            }
            Some(r) => Err(Error::Size(format!(
                "train_rows={r} must lie in [2, {}]",
                data.n()
            ))),
        }
    }

    /// Runs `fit` once per knot count and keeps the smallest BIC (smaller `m` on ties).
    fn over_knots(
        &self,
        data: &BiFunctionalDataset,
        fit: impl Fn(&BiFunctionalDataset, FassmrConfig) -> Result<FitResult>,
    ) -> Result<FitResult> {
        self.validate()?;
        let owned = self.training_rows(data)?;
        let data = owned.as_ref().unwrap_or(data);
        let mut knots = self.m_knots.clone();
        knots.sort_unstable();
        knots.dedup();
        let mut best: Option<FitResult> = None;
        for m in knots {
            let result = fit(data, self.fassmr_config(data.x_grid(), m)?)?;
            if best.as_ref().map_or(true, |b| result.chosen.bic < b.chosen.bic) {
                best = Some(result);
            }
        }
        Ok(best.expect("m_knots is nonempty"))
    }
}

pub trait SelectionMethod: Send + Sync {
    fn name(&self) -> &'static str;
    fn fit(&self, data: &BiFunctionalDataset) -> Result<FitResult>;
}

pub struct Fassmr(pub MethodSettings);
pub struct Iassmr(pub MethodSettings);
pub struct Pls(pub MethodSettings);

impl SelectionMethod for Fassmr {
    fn name(&self) -> &'static str {
        "fassmr"
    }

    fn fit(&self, data: &BiFunctionalDataset) -> Result<FitResult> {
        self.0.over_knots(data, |d, cfg| fassmr_fit(d, &cfg))
    }
}

impl SelectionMethod for Pls {
    fn name(&self) -> &'static str {
        "pls"
    }

    fn fit(&self, data: &BiFunctionalDataset) -> Result<FitResult> {
        self.0.over_knots(data, |d, cfg| standard_pls_fit(d, &cfg))
    }
}

impl SelectionMethod for Iassmr {
    fn name(&self) -> &'static str {
        "iassmr"
    }

    fn fit(&self, data: &BiFunctionalDataset) -> Result<FitResult> {
        let settings = MethodSettings {
            train_rows: None,
            ..self.0.clone()
        };
        resolve_split(settings.split, data.n())?;
        settings.over_knots(data, |d, cfg| {
            let mut config = IassmrConfig::new(cfg);
            config.split = settings.split;
            iassmr_fit(d, &config)
        })
    }
}

pub type MethodFactory = fn(&MethodSettings) -> Box<dyn SelectionMethod>;

pub struct MethodRegistry {
    factories: BTreeMap<String, MethodFactory>,
}

impl MethodRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, factory: MethodFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn create(&self, name: &str, settings: &MethodSettings) -> Result<Box<dyn SelectionMethod>> {
        self.factories
            .get(name)
            .map(|f| f(settings))
            .ok_or_else(|| Error::UnknownMethod(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }
}

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("fassmr", |s| Box::new(Fassmr(s.clone())));
        r.register("iassmr", |s| Box::new(Iassmr(s.clone())));
        r.register("pls", |s| Box::new(Pls(s.clone())));
        r
    }
}
