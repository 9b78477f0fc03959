use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adjusted_rand_index;
use crate::calibration::{calibrate_all, CalibrationConfig, CalibrationResult};
use crate::dataset::{fmt_num, GroupMapping};
use crate::fusion::{fuse, FusionConfig, FusionResult};
use crate::policy::{learn_policy, PolicyConfig};
use crate::synth::{generate, true_value_randomized, OracleScenario, ScenarioConfig, DEFAULT_TEST_SIZE, NUM_GROUPS};
use crate::{Error, Result};

/// Pipelines compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Policy tree over all K treatments, no fusion.
    Baseline,
    /// Unweighted fusion, then a policy tree over the groups.
    Fusion,
    /// Calibration-weighted fusion, then a policy tree over the groups.
    CwFusion,
    /// Unweighted fusion, then argmax of the fitted linear group means.
    LinearMa,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Fusion, Method::CwFusion, Method::LinearMa];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Fusion => "fusion",
            Method::CwFusion => "cw_fusion",
            Method::LinearMa => "linear_ma",
        }
    }

    fn fuses(self) -> bool {
        self != Method::Baseline
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub reps: usize,
    pub base_seed: u64,
    /// Population draws used to score each learned policy.
    pub test_size: usize,
    pub calibration: CalibrationConfig,
    pub fusion: FusionConfig,
    pub policy: PolicyConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            methods: Method::ALL.to_vec(),
            reps: 50,
            base_seed: 1,
            test_size: DEFAULT_TEST_SIZE,
            calibration: CalibrationConfig::default(),
            fusion: FusionConfig::default(),
            policy: PolicyConfig::default(),
        }
    }
}

/// One method's outcome on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub rep: usize,
    pub seed: u64,
    pub method: Method,
    /// Agreement with the true grouping; absent for the baseline.
    pub ari: Option<f64>,
    pub m_hat: usize,
    /// Population value of the learned rule.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub rep: usize,
    pub seed: u64,
    pub method: Method,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub completed: usize,
    pub failures: usize,
    pub ari_mean: Option<f64>,
    pub ari_se: Option<f64>,
    pub groups_mean: f64,
    pub groups_se: f64,
    pub value_mean: f64,
    pub value_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scenario: ScenarioConfig,
    pub records: Vec<Replication>,
    pub failures: Vec<Failure>,
    pub summary: Vec<MethodSummary>,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

impl BenchResult {
    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    /// One row per method: counts, then mean and standard error of ARI,
    /// group count and value.
    pub fn table_csv(&self) -> String {
        let mut out =
            String::from("method,completed,failures,ari_mean,ari_se,groups_mean,groups_se,value_mean,value_se\n");
        let opt = |v: Option<f64>| v.map(fmt_num).unwrap_or_default();
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                s.method,
                s.completed,
                s.failures,
                opt(s.ari_mean),
                opt(s.ari_se),
                fmt_num(s.groups_mean),
                fmt_num(s.groups_se),
                fmt_num(s.value_mean),
                fmt_num(s.value_se)
            );
        }
        out
    }

    /// Per-replication records as JSON lines, failures included.
    pub fn log_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        for f in &self.failures {
            out.push_str(&serde_json::to_string(f)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Population value of "recommend group `b̂(x)`, then a uniformly random
/// member of it", averaged over the random member. `rule` receives the
/// covariates without the intercept.
pub fn population_value<F>(
    scenario: &ScenarioConfig,
    groups: &GroupMapping,
    rule: F,
    test_size: usize,
    test_seed: u64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> usize,
{
    let truth = scenario.true_groups();
    if groups.k() != truth.k() {
        return Err(Error::Dimension {
            expected: truth.k(),
            got: groups.k(),
        });
    }
    let mix: Vec<[f64; NUM_GROUPS]> = (1..=groups.m())
        .map(|b| {
            let members = groups.members(b);
            let mut p = [0.0; NUM_GROUPS];
            for &a in &members {
                p[truth.group_of(a).expect("treatment in range") - 1] += 1.0 / members.len() as f64;
            }
            p
        })
        .collect();
    Ok(true_value_randomized(|x| mix[rule(x) - 1], scenario, test_size, test_seed))
}

fn tree_method(
    scenario: &OracleScenario,
    groups: &GroupMapping,
    cfg: &BenchConfig,
    seed: u64,
    test_seed: u64,
) -> Result<f64> {
    let d = &scenario.dataset;
    let learned = learn_policy(d, groups, &[], &cfg.policy, seed)?;
    population_value(
        &scenario.config,
        groups,
        |x| {
            let mut row = Vec::with_capacity(x.len() + 1);
            row.push(1.0);
            row.extend_from_slice(x);
            learned.recommend(&row)
        },
        cfg.test_size,
        test_seed,
    )
}

/// Argmax over groups of `xᵀ(m0 + β_b)` from the grouped refit.
fn linear_rule(fit: &FusionResult) -> impl Fn(&[f64]) -> usize + Sync + '_ {
    let m = fit.groups.m();
    let p = fit.m0_coefficients.len();
    let coef = DMatrix::from_fn(m, p, |b, j| {
        let a = fit.groups.members(b + 1)[0];
        fit.m0_coefficients[j] + fit.refit_beta[(a - 1, j)]
    });
    move |x: &[f64]| {
        let mut best = (1, f64::NEG_INFINITY);
        for b in 0..m {
            let v = coef[(b, 0)] + (1..p).map(|j| coef[(b, j)] * x[j - 1]).sum::<f64>();
            if v > best.1 {
                best = (b + 1, v);
            }
        }
        best.0
    }
}

/// Runs every requested method on the replication with the given seed.
pub fn run_replication(
    scenario_cfg: &ScenarioConfig,
    cfg: &BenchConfig,
    rep: usize,
    seed: u64,
) -> Vec<std::result::Result<Replication, Failure>> {
    let fail = |method: Method, e: &Error| Failure {
        rep,
        seed,
        method,
        error: e.to_string(),
    };
    let scenario = match generate(&scenario_cfg.clone().with_seed(seed)) {
        Ok(s) => s,
        Err(e) => return cfg.methods.iter().map(|&m| Err(fail(m, &e))).collect(),
    };
    let d = &scenario.dataset;
    let test_seed = seed ^ 0x5DEE_CE66_D1CE_4E5B;
    let unweighted = || fuse(d, &CalibrationResult::uniform(d).weights, &cfg.fusion);
    let needs_unweighted = cfg.methods.iter().any(|m| matches!(m, Method::Fusion | Method::LinearMa));
    let unweighted_fit = needs_unweighted.then(unweighted);

    let mut out = Vec::new();
    for &method in &cfg.methods {
        let outcome: Result<(Option<f64>, usize, f64)> = (|| {
            let fit = match method {
                Method::Baseline => None,
                Method::Fusion | Method::LinearMa => match unweighted_fit.as_ref().expect("fitted above") {
                    Ok(f) => Some(f.clone()),
                    Err(e) => return Err(Error::Invalid(e.to_string())),
                },
                Method::CwFusion => {
                    let cal = calibrate_all(
                        d,
                        cfg.calibration.spec(),
                        &scenario_cfg.calibration_covariates,
                        cfg.calibration.options(),
                    )?;
                    Some(fuse(d, &cal.weights, &cfg.fusion)?)
                }
            };
            let groups = fit
                .as_ref()
                .map(|f| f.groups.clone())
                .unwrap_or_else(|| GroupMapping::identity(d.k()));
            let ari = if method.fuses() {
                Some(adjusted_rand_index(scenario.true_groups.delta(), groups.delta())?)
            } else {
                None
            };
            let value = match method {
                Method::LinearMa => {
                    let fit = fit.as_ref().expect("fusion ran");
                    population_value(&scenario.config, &groups, linear_rule(fit), cfg.test_size, test_seed)?
                }
                _ => tree_method(&scenario, &groups, cfg, seed, test_seed)?,
            };
            Ok((ari, groups.m(), value))
        })();
        out.push(match outcome {
            Ok((ari, m_hat, value)) => Ok(Replication {
                rep,
                seed,
                method,
                ari,
                m_hat,
                value,
            }),
            Err(e) => {
                log::warn!("replication {rep} ({method}) failed: {e}");
                Err(fail(method, &e))
            }
        });
    }
    out
}

/// Runs `cfg.reps` replications with seeds `base_seed + r` and summarizes
/// each method. Failed replications are excluded and counted.
pub fn run_benchmark(scenario: &ScenarioConfig, cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.methods.is_empty() {
        return Err(Error::Invalid("no benchmark methods selected".into()));
    }
    if cfg.reps == 0 {
        return Err(Error::Invalid("reps must be positive".into()));
    }
    if cfg.test_size == 0 {
        return Err(Error::Invalid("test_size must be positive".into()));
    }
    scenario.validate()?;
    cfg.policy.validate()?;
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();
    let cfg = BenchConfig {
        methods,
        ..cfg.clone()
    };
    let per_rep: Vec<_> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| run_replication(scenario, &cfg, r, cfg.base_seed.wrapping_add(r as u64)))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for outcome in per_rep.into_iter().flatten() {
        match outcome {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    let summary = cfg
        .methods
        .iter()
        .map(|&method| {
            let rows: Vec<&Replication> = records.iter().filter(|r| r.method == method).collect();
            let aris: Vec<f64> = rows.iter().filter_map(|r| r.ari).collect();
            let groups: Vec<f64> = rows.iter().map(|r| r.m_hat as f64).collect();
            let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
            let (ari_mean, ari_se) = if aris.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_se(&aris);
                (Some(m), Some(s))
            };
            let (groups_mean, groups_se) = mean_se(&groups);
            let (value_mean, value_se) = mean_se(&values);
            MethodSummary {
                method,
                completed: rows.len(),
                failures: failures.iter().filter(|f| f.method == method).count(),
                ari_mean,
                ari_se,
                groups_mean,
                groups_se,
                value_mean,
                value_se,
            }
        })
        .collect();
    Ok(BenchResult {
        scenario: scenario.clone(),
        records,
        failures,
        summary,
    })
}
