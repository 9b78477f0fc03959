mod common;

use common::{svd_wls, toy_grid_gap, worst_fusion_gaps};
use drfusion::calibration::{calibrate_all, CressieRead, SolverOptions};
use drfusion::eval::adjusted_rand_index;
use drfusion::fusion::{fit_main_effect, fuse, oracle_refit, transform, FusionConfig, MainEffect};
use drfusion::synth::{generate, ScenarioConfig, LINEAR_COEFFICIENTS};

#[test]
fn zero_and_large_penalty_match_least_squares() {
    let (separate, pooled) = worst_fusion_gaps(50, 71);
    assert!(separate < 1e-6, "lambda = 0 off by {separate}");
    assert!(pooled < 1e-4, "fully fused fit off by {pooled}");
}

#[test]
fn two_arm_toy_matches_grid_search() {
    let gap = toy_grid_gap();
    assert!(gap < 1e-3, "off by {gap}");
}

#[test]
fn recovered_grouping_refits_to_group_least_squares() {
    let mut recovered = 0;
    for seed in 0..5 {
        let cfg = ScenarioConfig::linear_misspecified().with_seed(300 + seed);
        let s = generate(&cfg).unwrap();
        let d = &s.dataset;
        let cal = calibrate_all(d, CressieRead::default(), &cfg.calibration_covariates, SolverOptions::default()).unwrap();
        let fit = fuse(d, &cal.weights, &FusionConfig::default()).unwrap();
        if adjusted_rand_index(s.true_groups.delta(), fit.groups.delta()).unwrap() < 1.0 {
            continue;
        }
        recovered += 1;
        let ytilde = transform(d, &fit.m0_coefficients);
        let refit = oracle_refit(d, &ytilde, &cal.weights, &s.true_groups).unwrap();
        for b in 1..=s.true_groups.m() {
            let members = s.true_groups.members(b);
            let rows: Vec<usize> = (0..d.n()).filter(|&i| members.contains(&d.treatments()[i])).collect();
            let oracle = svd_wls(d.x(), &ytilde, &cal.weights, &rows);
            for &a in &members {
                for (j, o) in oracle.iter().enumerate() {
                    assert!((fit.refit_beta[(a - 1, j)] - o).abs() < 1e-8);
                    assert!((refit[(a - 1, j)] - o).abs() < 1e-8);
                }
            }
        }
    }
    assert!(recovered > 0, "no replication recovered the grouping");
}

#[test]
fn true_grouping_recovers_linear_coefficients() {
    let reps = 20;
    let mut draws = vec![Vec::new(); 16];
    for seed in 0..reps {
        let cfg = ScenarioConfig::linear_misspecified().with_seed(900 + seed);
        let s = generate(&cfg).unwrap();
        let d = &s.dataset;
        let all: Vec<usize> = (1..d.p()).collect();
        let cal = calibrate_all(d, CressieRead::default(), &all, SolverOptions::default()).unwrap();
        let m0 = fit_main_effect(d, MainEffect::PooledOls);
        let beta = oracle_refit(d, &transform(d, &m0), &cal.weights, &s.true_groups).unwrap();
        for b in 0..4 {
            let a = s.true_groups.members(b + 1)[0] - 1;
            for j in 0..4 {
                draws[b * 4 + j].push(beta[(a, j)] + m0[j]);
            }
        }
    }
    for (idx, v) in draws.iter().enumerate() {
        let r = v.len() as f64;
        let mean = v.iter().sum::<f64>() / r;
        let se = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt() / r.sqrt();
        let truth = LINEAR_COEFFICIENTS[idx / 4][idx % 4];
        assert!((mean - truth).abs() <= 3.0 * se, "group {} coefficient {}: {mean:.4} vs {truth}, se {se:.4}", idx / 4 + 1, idx % 4);
    }
}
