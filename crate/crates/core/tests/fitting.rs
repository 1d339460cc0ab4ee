use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mfplsim::fassmr::{
    fassmr_fit, predict, predict_dataset, standard_pls_fit, FassmrConfig, FitResult, ReductionScheme,
};
use mfplsim::functional::{split_dataset, BiFunctionalDataset, Grid, SupportSet};
use mfplsim::iassmr::{final_support, iassmr_fit, second_stage_fit, second_stage_set, IassmrConfig, SecondStageSet};
use mfplsim::kernel::{KernelSpec, LinkEstimator};
use mfplsim::simlab::{gen_replicate, gen_xcurves, DesignKind, DesignSpec};
use mfplsim::Error;

/// `zeta` with independent N(0,1) entries and design-A style `x` curves.
fn dataset(n: usize, p: usize, seed: u64, response: impl Fn(&DMatrix<f64>) -> DVector<f64>) -> BiFunctionalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zeta_grid = Arc::new(Grid::uniform(0.0, 1.0, p).unwrap());
    let x_grid = Arc::new(Grid::uniform(0.0, 1.0, 100).unwrap());
    let zeta = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let mut x = DMatrix::zeros(n, 100);
    for i in 0..n {
        let (c, _) = gen_xcurves(&x_grid, &mut rng, 6.0).unwrap();
        x.row_mut(i).copy_from_slice(c.values());
    }
    let y = response(&zeta);
    BiFunctionalDataset::new(zeta_grid, zeta, x_grid, x, y).unwrap()
}

fn config(x_grid: &Grid, ws: Vec<usize>, stride: usize) -> FassmrConfig {
    let mut c = FassmrConfig::new(x_grid).unwrap();
    c.directions = c.directions.thinned(stride);
    c.w_candidates = ws;
    c
}

#[test]
fn noiseless_reduced_model_is_recovered() {
    let scheme = ReductionScheme::build(101, 10).unwrap();
    let (j1, j2) = (scheme.reps[2], scheme.reps[7]);
    let data = dataset(80, 101, 11, |z| z.column(j1) * 2.0 - z.column(j2) * 3.0);
    let fit = fassmr_fit(&data, &config(data.x_grid(), vec![10, 15, 20], 27)).unwrap();
    assert_eq!(fit.chosen.w, 10);
    assert_eq!(fit.support.indices(), &[j1, j2]);
    assert!((fit.beta_full[j1] - 2.0).abs() <= 1e-4);
    assert!((fit.beta_full[j2] + 3.0).abs() <= 1e-4);
    assert!(fit.support.is_subset_of(&scheme.reps));
}

#[test]
fn zero_response_gives_empty_support() {
    let data = dataset(40, 31, 3, |z| DVector::zeros(z.nrows()));
    let cfg = config(data.x_grid(), vec![5, 10], 40);
    for fit in [
        fassmr_fit(&data, &cfg).unwrap(),
        standard_pls_fit(&data, &cfg).unwrap(),
        iassmr_fit(&data, &IassmrConfig::new(cfg.clone())).unwrap(),
    ] {
        assert!(fit.beta_full.iter().all(|&b| b == 0.0), "{}", fit.method);
        assert!(fit.support.is_empty());
        assert!(fit.flags.fsim_fallback);
    }
}

#[test]
fn support_lies_in_candidates() {
    let sim = gen_replicate(&DesignSpec::new(DesignKind::A, 60, 101, 5), 0).unwrap();
    let cfg = config(sim.train.x_grid(), vec![10, 15, 20], 30);
    let fit = fassmr_fit(&sim.train, &cfg).unwrap();
    let scheme = ReductionScheme::build(101, fit.chosen.w).unwrap();
    assert!(fit.support.is_subset_of(&scheme.reps));
    assert_eq!(fit.candidates, scheme.reps);
    let pls = standard_pls_fit(&sim.train, &cfg).unwrap();
    assert_eq!(pls.chosen.w, 101);
    assert_eq!(pls.candidates, (0..101).collect::<Vec<_>>());
}

#[test]
fn second_stage_fills_in_the_block() {
    let scheme = ReductionScheme::build(100, 10).unwrap();
    let block: Vec<usize> = scheme.block_range(3).collect();
    let coef = [1.5, -2.0, 1.0, 2.5, -1.5, 2.0, -1.0, 1.5, -2.5, 1.0];
    let data = dataset(200, 100, 17, |z| {
        let mut y = DVector::zeros(z.nrows());
        for (&j, &b) in block.iter().zip(&coef) {
            y += z.column(j) * b;
        }
        y
    });
    let mut cfg = IassmrConfig::new(config(data.x_grid(), vec![10], 40));
    cfg.split = Some((100, 100));
    let fit = iassmr_fit(&data, &cfg).unwrap();
    let stage1 = &fit.stage_trace[0].stage1_support;
    assert!(stage1.contains(&scheme.reps[3]));
    let support = final_support(&fit);
    assert!(block.iter().all(|j| support.contains(*j)), "{:?}", support.indices());
    assert!(support.len() > stage1.len());
    for (&j, &b) in block.iter().zip(&coef) {
        assert!((fit.beta_full[j] - b).abs() <= 1e-4);
    }
    assert!(support.is_subset_of(&fit.candidates));
}

fn rebuild_sets(fit: &FitResult, p: usize) -> Vec<(usize, SecondStageSet)> {
    fit.stage_trace
        .iter()
        .map(|rec| {
            let scheme = ReductionScheme::build(p, rec.w).unwrap();
            let ks: Vec<usize> = rec.stage1_support.iter().map(|&j| scheme.block_of(j).unwrap()).collect();
            (rec.w, second_stage_set(&scheme, &ks).unwrap())
        })
        .collect()
}

fn same_fit(a: &FitResult, b: &FitResult) {
    assert_eq!(a.beta_full, b.beta_full);
    assert_eq!(a.chosen.direction_index, b.chosen.direction_index);
    assert_eq!(a.chosen.h, b.chosen.h);
    assert_eq!(a.chosen.lambda, b.chosen.lambda);
    assert_eq!(a.chosen.bic, b.chosen.bic);
}

#[test]
fn second_stage_sees_first_sample_only_through_the_set() {
    let sim = gen_replicate(&DesignSpec::new(DesignKind::B, 120, 101, 9), 0).unwrap();
    let mut cfg = IassmrConfig::new(config(sim.train.x_grid(), vec![10, 20], 30));
    cfg.split = Some((60, 60));
    let (_, e2) = split_dataset(&sim.train, 60, 60).unwrap();

    let fit = iassmr_fit(&sim.train, &cfg).unwrap();
    same_fit(&fit, &second_stage_fit(&e2, &rebuild_sets(&fit, 101), &cfg).unwrap());

    // scramble the first-stage responses; whatever stage 1 now picks, stage 2 only sees the set
    let mut y: Vec<f64> = sim.train.y().iter().copied().collect();
    y[..60].reverse();
    let permuted = sim.train.with_response(DVector::from_vec(y)).unwrap();
    let refit = iassmr_fit(&permuted, &cfg).unwrap();
    same_fit(&refit, &second_stage_fit(&e2, &rebuild_sets(&refit, 101), &cfg).unwrap());
}

#[test]
fn all_blocks_second_stage_equals_pls() {
    let sim = gen_replicate(&DesignSpec::new(DesignKind::A, 50, 41, 4), 0).unwrap();
    let cfg = IassmrConfig::new(config(sim.train.x_grid(), vec![5], 30));
    let scheme = ReductionScheme::build(41, 5).unwrap();
    let all = second_stage_set(&scheme, &[0, 1, 2, 3, 4]).unwrap();
    let two_stage = second_stage_fit(&sim.train, &[(5, all)], &cfg).unwrap();
    let pls = standard_pls_fit(&sim.train, &cfg.stage1).unwrap();
    same_fit(&two_stage, &pls);
    assert_eq!(two_stage.candidates, pls.candidates);
}

#[test]
fn oversized_split_fails_before_fitting() {
    let data = dataset(20, 11, 2, |z| z.column(3).into_owned());
    let mut cfg = IassmrConfig::new(config(data.x_grid(), vec![5], 40));
    cfg.split = Some((15, 10));
    assert!(matches!(iassmr_fit(&data, &cfg), Err(Error::Size(_))));
}

#[test]
fn constant_residuals_predict_constant() {
    let data = dataset(30, 11, 8, |z| DVector::from_element(z.nrows(), 2.5));
    let cfg = config(data.x_grid(), vec![5], 40);
    let theta = cfg.directions.directions()[0].clone();
    let link = LinkEstimator::new(&data, &[0.0; 11], theta, 0.3, KernelSpec::default()).unwrap();
    for i in 0..data.n() {
        assert!((link.evaluate(&data.x_curve(i)).unwrap().value - 2.5).abs() <= 1e-10);
    }
    let fit = fassmr_fit(&data, &cfg).unwrap();
    assert!(fit.support.is_empty());
    for i in 0..5 {
        let y = predict(&fit, &data.zeta_curve(i), &data.x_curve(i)).unwrap();
        assert!((y - 2.5).abs() <= 1e-10);
    }
}

#[test]
fn tiny_bandwidth_reproduces_training_rows() {
    let data = dataset(25, 11, 21, |z| z.column(4) * 2.0 + z.column(8));
    let cfg = config(data.x_grid(), vec![5], 40);
    let mut fit = fassmr_fit(&data, &cfg).unwrap();
    let index = fit.link.index.clone();
    let mut gaps: Vec<f64> = Vec::new();
    for i in 0..index.len() {
        for j in 0..i {
            let d = (index[i] - index[j]).abs();
            if d > 0.0 {
                gaps.push(d);
            }
        }
    }
    fit.link.h = 0.5 * gaps.iter().copied().fold(f64::INFINITY, f64::min);
    for i in 0..data.n() {
        let linear: f64 = fit.beta_full.iter().zip(data.zeta_curve(i).values()).map(|(b, z)| b * z).sum();
        let y = predict(&fit, &data.zeta_curve(i), &data.x_curve(i)).unwrap();
        assert!((y - (linear + fit.link.residuals[i])).abs() <= 1e-10);
        assert!((y - data.y()[i]).abs() <= 1e-10);
    }
}

#[test]
fn design_a_prediction_beats_the_variance() {
    let mut spec = DesignSpec::new(DesignKind::A, 200, 101, 13);
    spec.n_test = 100;
    let sim = gen_replicate(&spec, 0).unwrap();
    let fit = fassmr_fit(&sim.train, &config(sim.train.x_grid(), vec![10, 15, 20], 9)).unwrap();
    let preds: Vec<f64> = predict_dataset(&fit, &sim.test).unwrap().iter().map(|p| p.0).collect();
    let y = sim.test.y();
    let err = mfplsim::fassmr::msep(&preds, y.as_slice()).unwrap();
    let mean = y.mean();
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
    assert!(err.is_finite() && err < var, "msep {err}, var {var}");
}

#[test]
fn grid_mismatch_on_predict() {
    let a = dataset(20, 11, 1, |z| z.column(2).into_owned());
    let b = dataset(20, 13, 1, |z| z.column(2).into_owned());
    let fit = fassmr_fit(&a, &config(a.x_grid(), vec![5], 60)).unwrap();
    assert!(matches!(
        predict(&fit, &b.zeta_curve(0), &b.x_curve(0)),
        Err(Error::GridMismatch(_))
    ));
}

#[test]
fn fit_result_round_trips_through_json() {
    let sim = gen_replicate(&DesignSpec::new(DesignKind::A, 40, 51, 6), 0).unwrap();
    let fit = fassmr_fit(&sim.train, &config(sim.train.x_grid(), vec![10], 50)).unwrap();
    let text = serde_json::to_string(&fit).unwrap();
    let back: FitResult = serde_json::from_str(&text).unwrap();
    let a = predict_dataset(&fit, &sim.test).unwrap();
    let b = predict_dataset(&back, &sim.test).unwrap();
    assert_eq!(a, b);
    assert_eq!(back.support, fit.support);
    assert_eq!(SupportSet::from_coefficients(&back.beta_full), fit.support);
}
