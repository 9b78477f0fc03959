//! Seeded generators for the benchmark scenarios: four latent groups of
//! treatments with shifted covariate distributions and unequal arm sizes.
//!
//! Each treatment follows one of four covariate patterns. Pattern `j`
//! draws `X1 ~ Bernoulli(q_j)` with `q = (0.3, 0.4, 0.5, 0.6)` and then
//! `(X2, X3) | X1` from a bivariate normal whose mean and correlation depend
//! on `X1`. Treatments `1..=K/4` form group 1, the next `K/4` group 2, and
//! so on; the pattern of treatment `a` is `(a - 1) mod 4`.

use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, GroupMapping};
use crate::error::{Error, Result};

/// Reference arm sizes of the four covariate patterns at `K = 16`, `n = 1800`.
pub const PATTERN_SIZES: [usize; 4] = [150, 125, 100, 75];
pub const PATTERN_X1_PROB: [f64; 4] = [0.3, 0.4, 0.5, 0.6];
pub const NUM_GROUPS: usize = 4;
pub const COVARIATE_NAMES: [&str; 3] = ["x1", "x2", "x3"];

const REFERENCE_K: usize = 16;
const REFERENCE_N: usize = 1800;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Exponential outcome means with sign discontinuities.
    Nonlinear,
    /// Linear outcome means.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub k: usize,
    pub n_total: usize,
    pub noise_sd: f64,
    pub seed: u64,
    /// Design-column indices (1 = x1, ...) that downstream calibration should
    /// balance. Dropping `x1` reproduces the misspecified-weighting study.
    pub calibration_covariates: Vec<usize>,
}

impl ScenarioConfig {
    pub fn nonlinear(k: usize) -> Self {
        Self {
            kind: ScenarioKind::Nonlinear,
            k,
            n_total: REFERENCE_N,
            noise_sd: 1.0,
            seed: 0,
            calibration_covariates: vec![1, 2, 3],
        }
    }

    /// Linear outcomes with `x1` left out of the calibration covariates.
    pub fn linear_misspecified() -> Self {
        Self {
            kind: ScenarioKind::Linear,
            calibration_covariates: vec![2, 3],
            ..Self::nonlinear(REFERENCE_K)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !self.k.is_multiple_of(NUM_GROUPS) {
            return Err(Error::Unsupported(format!(
                "{:?} scenario needs k divisible by {NUM_GROUPS}, got {}",
                self.kind, self.k
            )));
        }
        if self.n_total < self.k {
            return Err(Error::Invalid(format!("n_total {} < k {}", self.n_total, self.k)));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Invalid(format!("noise_sd must be >= 0, got {}", self.noise_sd)));
        }
        if self.calibration_covariates.iter().any(|&j| j == 0 || j > COVARIATE_NAMES.len()) {
            return Err(Error::Invalid("calibration covariates must index x1..x3 (1..=3)".into()));
        }
        let sizes = self.arm_sizes();
        if sizes.iter().any(|&s| s < 2) {
            return Err(Error::Unsupported(format!(
                "k = {} with n_total = {} leaves arms with fewer than 2 units",
                self.k, self.n_total
            )));
        }
        Ok(())
    }

    /// Per-treatment sample sizes. Pattern sizes are rescaled by
    /// `16 / k · n_total / 1800` and the last arm absorbs rounding so the total
    /// is exactly `n_total`.
    pub fn arm_sizes(&self) -> Vec<usize> {
        let scale = (REFERENCE_K * self.n_total) as f64 / (self.k * REFERENCE_N) as f64;
        let mut sizes: Vec<usize> = (0..self.k)
            .map(|a| (PATTERN_SIZES[pattern_of(a + 1)] as f64 * scale).round() as usize)
            .collect();
        let assigned: usize = sizes[..self.k - 1].iter().sum();
        sizes[self.k - 1] = self.n_total.saturating_sub(assigned);
        sizes
    }

    pub fn true_groups(&self) -> GroupMapping {
        GroupMapping::blocks(self.k, NUM_GROUPS)
    }

    /// Noise-free mean outcome of latent group `b` (1-based) at covariates `x = (x1, x2, x3)`.
    pub fn mu(&self, b: usize, x: &[f64]) -> f64 {
        match self.kind {
            ScenarioKind::Nonlinear => nonlinear_mu(b, x),
            ScenarioKind::Linear => linear_mu(b, x),
        }
    }
}

/// Covariate pattern (0-based) of treatment `a` (1-based).
pub fn pattern_of(a: usize) -> usize {
    (a - 1) % 4
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn nonlinear_mu(b: usize, x: &[f64]) -> f64 {
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    let s = sign(x2 * x2 + 3.0 * x3 - 2.5);
    let exponent = match b {
        1 => 0.7 + 0.1 * x1 - 0.3 * x2 - 0.2 * x3 * x3 + 0.4 * s,
        2 => 0.5 + 0.1 * x1 + 0.15 * x2 - 0.3 * x3 * x3 + 0.5 * s,
        3 => 0.6 + 0.1 * x1 - 0.15 * x2 - 0.3 * x3 + 0.6 * s,
        4 => {
            let s4 = sign(x2 * x2 - x3 - 2.0);
            0.6 + 0.1 * x1 + 0.2 * x2 - 0.1 * x3 - 0.1 * x3 * x3 + 0.7 * s4
        }
        _ => panic!("group {b} outside 1..=4"),
    };
    3.0 * exponent.exp()
}

/// Coefficients `(intercept, x1, x2, x3)` of the linear outcome means.
pub const LINEAR_COEFFICIENTS: [[f64; 4]; 4] = [
    [2.5, 0.5, -1.5, -1.0],
    [0.0, 1.0, -2.0, -2.5],
    [2.0, -0.5, 2.0, -2.0],
    [-1.0, 1.0, -1.0, 1.0],
];

pub fn linear_mu(b: usize, x: &[f64]) -> f64 {
    let c = &LINEAR_COEFFICIENTS[b - 1];
    c[0] + c[1] * x[0] + c[2] * x[1] + c[3] * x[2]
}

/// Draws `(x1, x2, x3)` for covariate pattern `pattern` (0-based).
fn draw_covariates<R: rand::Rng>(pattern: usize, rng: &mut R) -> [f64; 3] {
    let x1 = if rng.random::<f64>() < PATTERN_X1_PROB[pattern] { 1.0 } else { 0.0 };
    let (mean, corr) = if x1 == 1.0 { ((1.0, -1.0), -0.25) } else { ((-1.0, 1.0), -0.3) };
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    let x2 = mean.0 + z1;
    let x3 = mean.1 + corr * z1 + (1.0f64 - corr * corr).sqrt() * z2;
    [x1, x2, x3]
}

/// A generated dataset together with the truth it was drawn from.
#[derive(Debug, Clone)]
pub struct OracleScenario {
    pub config: ScenarioConfig,
    pub dataset: Dataset,
    pub true_groups: GroupMapping,
    /// Noise-free outcome mean of each unit under its received treatment.
    pub mean_outcome: Vec<f64>,
}

impl OracleScenario {
    pub fn mu(&self, b: usize, x: &[f64]) -> f64 {
        self.config.mu(b, x)
    }

    /// Mean outcome of treatment `a` (1-based) at `x`.
    pub fn mu_treatment(&self, a: usize, x: &[f64]) -> f64 {
        let b = self.true_groups.group_of(a).expect("treatment in range");
        self.config.mu(b, x)
    }
}

pub fn generate(cfg: &ScenarioConfig) -> Result<OracleScenario> {
    cfg.validate()?;
    let sizes = cfg.arm_sizes();
    let n: usize = sizes.iter().sum();
    let groups = cfg.true_groups();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut covariates = DMatrix::zeros(n, 3);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut mean_outcome = Vec::with_capacity(n);
    let mut row = 0;
    for (arm_idx, &size) in sizes.iter().enumerate() {
        let arm = arm_idx + 1;
        let pattern = pattern_of(arm);
        let b = groups.group_of(arm).expect("arm in range");
        for _ in 0..size {
            let x = draw_covariates(pattern, &mut rng);
            let noise: f64 = StandardNormal.sample(&mut rng);
            let mu = cfg.mu(b, &x);
            for (j, v) in x.iter().enumerate() {
                covariates[(row, j)] = *v;
            }
            a.push(arm);
            mean_outcome.push(mu);
            y.push(mu + cfg.noise_sd * noise);
            row += 1;
        }
    }
    let names = COVARIATE_NAMES.iter().map(|s| s.to_string()).collect();
    let dataset = Dataset::from_covariates(&covariates, a, y, names, Some(cfg.k))?;
    Ok(OracleScenario {
        config: cfg.clone(),
        dataset,
        true_groups: groups,
        mean_outcome,
    })
}

/// Fresh covariate draws from the population: patterns are mixed in
/// proportion to their total arm sizes.
pub fn population_sample(cfg: &ScenarioConfig, n: usize, seed: u64) -> Vec<[f64; 3]> {
    let sizes = cfg.arm_sizes();
    let mut pattern_mass = [0.0; 4];
    for (arm_idx, &s) in sizes.iter().enumerate() {
        pattern_mass[pattern_of(arm_idx + 1)] += s as f64;
    }
    let total: f64 = pattern_mass.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut pattern = 3;
            for (j, &m) in pattern_mass.iter().enumerate() {
                if u < m {
                    pattern = j;
                    break;
                }
                u -= m;
            }
            draw_covariates(pattern, &mut rng)
        })
        .collect()
}

/// Average of `f` over `n_test` population draws.
pub fn population_mean<F>(cfg: &ScenarioConfig, n_test: usize, seed: u64, f: F) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let draws = population_sample(cfg, n_test, seed);
    draws.iter().map(|x| f(x)).sum::<f64>() / n_test as f64
}

/// Test value of a rule over latent groups: mean of `mu_{policy(x)}(x)` on
/// fresh draws, without outcome noise.
pub fn true_value<P>(policy: P, cfg: &ScenarioConfig, n_test: usize, seed: u64) -> f64
where
    P: Fn(&[f64]) -> usize,
{
    population_mean(cfg, n_test, seed, |x| cfg.mu(policy(x), x))
}

/// Like [`true_value`] for randomized rules: `policy(x)` returns a
/// probability over the latent groups.
pub fn true_value_randomized<P>(policy: P, cfg: &ScenarioConfig, n_test: usize, seed: u64) -> f64
where
    P: Fn(&[f64]) -> [f64; NUM_GROUPS],
{
    population_mean(cfg, n_test, seed, |x| {
        policy(x)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(b, &p)| p * cfg.mu(b + 1, x))
            .sum()
    })
}

pub const DEFAULT_TEST_SIZE: usize = 100_000;
