//! Calibrate, fuse and learn a policy on one simulated dataset, then score
//! the policy against the generating model.
//!
//! `cargo run --release --example pipeline -- [K] [seed]`

use drfusion::calibration::{calibrate_all, CressieRead, SolverOptions};
use drfusion::eval::{adjusted_rand_index, population_value};
use drfusion::fusion::{fuse, FusionConfig};
use drfusion::policy::{learn_policy, PolicyConfig};
use drfusion::synth::{generate, ScenarioConfig, DEFAULT_TEST_SIZE};

fn main() -> drfusion::Result<()> {
    let mut args = std::env::args().skip(1);
    let k: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(16);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);

    let cfg = ScenarioConfig::nonlinear(k).with_seed(seed);
    let scenario = generate(&cfg)?;
    let d = &scenario.dataset;
    println!("{} units, {} treatments", d.n(), d.k());

    let cal = calibrate_all(d, CressieRead::default(), &cfg.calibration_covariates, SolverOptions::default())?;
    let fit = fuse(d, &cal.weights, &FusionConfig::default())?;
    let ari = adjusted_rand_index(scenario.true_groups.delta(), fit.groups.delta())?;
    println!("fused into {} groups (ARI {ari:.3}): {:?}", fit.groups.m(), fit.groups.delta());

    let learned = learn_policy(d, &fit.groups, &[], &PolicyConfig::default(), seed)?;
    println!("\n{}", learned.tree.to_text());
    let value = population_value(
        &cfg,
        &fit.groups,
        |x| {
            let row: Vec<f64> = std::iter::once(1.0).chain(x.iter().copied()).collect();
            learned.recommend(&row)
        },
        DEFAULT_TEST_SIZE,
        seed ^ 0x5DEE_CE66_D1CE_4E5B,
    )?;
    println!("estimated value {:.3}, population value {value:.3}", learned.value);
    Ok(())
}
