use std::path::{Path, PathBuf};

use drfusion::calibration::CalibrationConfig;
use drfusion::eval::{BenchConfig, Method};
use drfusion::fusion::FusionConfig;
use drfusion::policy::PolicyConfig;
use drfusion::synth::{ScenarioConfig, ScenarioKind, COVARIATE_NAMES, DEFAULT_TEST_SIZE};
use drfusion::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Synthetic scenario settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
    pub k: usize,
    pub n: usize,
    pub noise_sd: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let s = ScenarioConfig::nonlinear(16);
        ScenarioSection {
            kind: s.kind,
            k: s.k,
            n: s.n_total,
            noise_sd: s.noise_sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub methods: Vec<Method>,
    pub reps: usize,
    pub base_seed: u64,
    pub test_size: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        BenchSection {
            methods: b.methods,
            reps: b.reps,
            base_seed: b.base_seed,
            test_size: DEFAULT_TEST_SIZE,
        }
    }
}

/// Every setting of every subcommand. Loaded from TOML, then overridden by
/// command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub data: Option<PathBuf>,
    pub groups: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Fuse with uniform within-arm weights instead of calibrating.
    pub no_weights: bool,
    /// Covariates balanced by calibration; all covariates when unset.
    pub calibration_columns: Option<Vec<String>>,
    /// Covariates the policy tree may split on; all covariates when unset.
    pub policy_columns: Option<Vec<String>>,
    pub scenario: ScenarioSection,
    pub calibration: CalibrationConfig,
    pub fusion: FusionConfig,
    pub policy: PolicyConfig,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            threads: None,
            data: None,
            groups: None,
            out: None,
            no_weights: false,
            calibration_columns: None,
            policy_columns: None,
            scenario: ScenarioSection::default(),
            calibration: CalibrationConfig::default(),
            fusion: FusionConfig::default(),
            policy: PolicyConfig::default(),
            bench: BenchSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Invalid(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering, leaving out the output path
    /// and thread count since neither changes results.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            out: None,
            threads: None,
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            tool: format!("drfusion {}", env!("CARGO_PKG_VERSION")),
            config_sha256: self.hash(),
            seed: self.seed,
        }
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig> {
        let base = match self.scenario.kind {
            ScenarioKind::Nonlinear => ScenarioConfig::nonlinear(self.scenario.k),
            ScenarioKind::Linear => ScenarioConfig {
                k: self.scenario.k,
                ..ScenarioConfig::linear_misspecified()
            },
        };
        let mut cfg = ScenarioConfig {
            n_total: self.scenario.n,
            noise_sd: self.scenario.noise_sd,
            seed: self.seed,
            ..base
        };
        if let Some(cols) = &self.calibration_columns {
            cfg.calibration_covariates = cols
                .iter()
                .map(|name| {
                    COVARIATE_NAMES
                        .iter()
                        .position(|c| c == name)
                        .map(|j| j + 1)
                        .ok_or_else(|| Error::MissingColumn(name.clone()))
                })
                .collect::<Result<_>>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            methods: self.bench.methods.clone(),
            reps: self.bench.reps,
            base_seed: self.bench.base_seed,
            test_size: self.bench.test_size,
            calibration: self.calibration,
            fusion: self.fusion.clone(),
            policy: self.policy.clone(),
        }
    }
}

/// Identifies the tool version, effective configuration and seed behind an
/// output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn header(&self) -> String {
        format!("{} config={} seed={}", self.tool, self.config_sha256, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[fusion]\nthreshhold = 0.3").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[fusion]\nebic_gamma = 1.0\n[policy.nuisance]\nfolds = 3\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.fusion.ebic_gamma, 1.0);
        assert_eq!(cfg.fusion.threshold, FusionConfig::default().threshold);
        assert_eq!(cfg.policy.nuisance.folds, 3);
        assert_eq!(cfg.policy.depth, 3);
    }

    #[test]
    fn round_trip_and_hash() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.hash(), back.hash());
        let other = RunConfig { seed: 2, ..cfg.clone() };
        assert_ne!(cfg.hash(), other.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn calibration_columns_map_to_design_indices() {
        let cfg = RunConfig {
            calibration_columns: Some(vec!["x2".into(), "x3".into()]),
            ..RunConfig::default()
        };
        assert_eq!(cfg.scenario_config().unwrap().calibration_covariates, vec![2, 3]);
        let bad = RunConfig {
            calibration_columns: Some(vec!["x9".into()]),
            ..RunConfig::default()
        };
        assert!(bad.scenario_config().is_err());
    }
}
