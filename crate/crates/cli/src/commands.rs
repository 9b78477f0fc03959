use std::fs;
use std::path::{Path, PathBuf};

use drfusion::calibration::{calibrate_all, CalibrationResult};
use drfusion::dataset::{group_labels, load_csv, save_csv, CsvSchema, Dataset, DatasetMeta, GroupMapping};
use drfusion::eval::{adjusted_rand_index, population_value, run_benchmark};
use drfusion::fusion::{fuse as fuse_arms, FusionResult};
use drfusion::nuisance::{estimate_nuisance, make_folds};
use drfusion::policy::{aipw_scores, estimate_value, learn_policy, policy_matrix, PolicyTree};
use drfusion::synth::generate;
use drfusion::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Provenance, RunConfig};

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Invalid(format!("missing {what} (flag or config key)")))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = require(&cfg.out, "--out directory")?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Ok(load_csv(path, &CsvSchema::default())?.dataset)
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let out = require(&cfg.out, "--out file")?;
    let scenario = cfg.scenario_config()?;
    let s = generate(&scenario)?;
    let prov = cfg.provenance();
    save_csv(&s.dataset, out, &CsvSchema::default(), Some(&prov.header()), &[])?;
    let mut meta = DatasetMeta::of(&s.dataset);
    meta.extra.insert("provenance".into(), serde_json::to_value(&prov)?);
    meta.extra.insert("scenario".into(), serde_json::to_value(&scenario)?);
    meta.extra.insert("true_groups".into(), serde_json::to_value(&s.true_groups)?);
    meta.write(&DatasetMeta::sidecar_path(out))?;
    println!("wrote {} rows, {} treatments to {}", s.dataset.n(), s.dataset.k(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct FuseReport<'a> {
    provenance: Provenance,
    config: &'a RunConfig,
    calibrated: bool,
    calibration_columns: Vec<String>,
    max_calibration_residual: f64,
    result: &'a FusionResult,
}

pub fn fuse(cfg: &RunConfig) -> Result<()> {
    let data = require(&cfg.data, "--data")?;
    let d = load_dataset(data)?;
    let dir = out_dir(cfg)?;
    let cal = if cfg.no_weights {
        CalibrationResult::uniform(&d)
    } else {
        let cols = match &cfg.calibration_columns {
            Some(names) => d.resolve_columns(names)?,
            None => Vec::new(),
        };
        calibrate_all(&d, cfg.calibration.spec(), &cols, cfg.calibration.options())?
    };
    let result = fuse_arms(&d, &cal.weights, &cfg.fusion)?;
    let prov = cfg.provenance();
    result.groups.write_csv(&dir.join("groups.csv"), Some(&prov.header()))?;
    let mut w = format!("# {}\nunit,a,weight\n", prov.header());
    for (i, (&a, wt)) in d.treatments().iter().zip(&cal.weights).enumerate() {
        w.push_str(&format!("{},{a},{}\n", i + 1, drfusion::dataset::fmt_num(*wt)));
    }
    write_text(&dir.join("weights.csv"), &w)?;
    let report = FuseReport {
        provenance: prov,
        config: cfg,
        calibrated: !cfg.no_weights,
        calibration_columns: cal.columns.iter().map(|&j| d.feature_names()[j].clone()).collect(),
        max_calibration_residual: cal.residual.iter().copied().fold(0.0, f64::max),
        result: &result,
    };
    write_json(&dir.join("fusion.json"), &report)?;
    println!(
        "{} treatments fused into {} groups (lambda {}); wrote {}",
        d.k(),
        result.groups.m(),
        result.lambda_selected,
        dir.display()
    );
    Ok(())
}

/// What `learn` writes and `evaluate` reads back.
#[derive(Debug, Serialize, Deserialize)]
pub struct PolicyFile {
    pub provenance: Provenance,
    pub tree: PolicyTree,
    pub groups: GroupMapping,
    /// In-sample cross-fitted AIPW value.
    pub value: f64,
    pub warnings: Vec<String>,
    pub config: RunConfig,
}

fn load_groups(cfg: &RunConfig, d: &Dataset) -> Result<GroupMapping> {
    match &cfg.groups {
        Some(path) => GroupMapping::read_csv(path),
        None => Ok(GroupMapping::identity(d.k())),
    }
}

pub fn learn(cfg: &RunConfig) -> Result<()> {
    let data = require(&cfg.data, "--data")?;
    let d = load_dataset(data)?;
    let groups = load_groups(cfg, &d)?;
    let dir = out_dir(cfg)?;
    let cols = match &cfg.policy_columns {
        Some(names) => d.resolve_columns(names)?,
        None => Vec::new(),
    };
    let learned = learn_policy(&d, &groups, &cols, &cfg.policy, cfg.seed)?;
    let prov = cfg.provenance();
    write_text(&dir.join("tree.txt"), &format!("# {}\n{}", prov.header(), learned.tree.to_text()))?;
    write_text(&dir.join("tree.dot"), &format!("// {}\n{}", prov.header(), learned.tree.to_dot()))?;
    let file = PolicyFile {
        provenance: prov,
        tree: learned.tree.clone(),
        groups,
        value: learned.value,
        warnings: learned.warnings.clone(),
        config: cfg.clone(),
    };
    write_json(&dir.join("policy.json"), &file)?;
    println!(
        "depth-{} tree with {} leaves, estimated value {}; wrote {}",
        learned.tree.depth,
        learned.tree.leaves(),
        learned.value,
        dir.display()
    );
    Ok(())
}

pub struct EvaluateInputs {
    pub truth: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub scenario_value: bool,
}

fn load_truth(path: &Path) -> Result<GroupMapping> {
    if path.extension().is_some_and(|e| e == "json") {
        let meta = DatasetMeta::read(path)?;
        let value = meta
            .extra
            .get("true_groups")
            .ok_or_else(|| Error::Invalid(format!("{} has no true_groups entry", path.display())))?;
        Ok(serde_json::from_value(value.clone())?)
    } else {
        GroupMapping::read_csv(path)
    }
}

fn policy_columns(tree: &PolicyTree, d: &Dataset) -> Result<Vec<usize>> {
    d.resolve_columns(&tree.features)
}

pub fn evaluate(cfg: &RunConfig, inputs: &EvaluateInputs) -> Result<()> {
    let mut report = serde_json::Map::new();
    report.insert("provenance".into(), serde_json::to_value(cfg.provenance())?);
    if let (Some(groups), Some(truth)) = (&cfg.groups, &inputs.truth) {
        let g = GroupMapping::read_csv(groups)?;
        let t = load_truth(truth)?;
        report.insert("ari".into(), json!(adjusted_rand_index(t.delta(), g.delta())?));
        report.insert("groups".into(), json!(g.m()));
        report.insert("true_groups".into(), json!(t.m()));
    } else if inputs.truth.is_some() {
        return Err(Error::Invalid("--truth needs --groups".into()));
    }
    if let Some(path) = &inputs.policy {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pf: PolicyFile = serde_json::from_str(&text)?;
        if let Some(data) = &cfg.data {
            let d = load_dataset(data)?;
            let cols = policy_columns(&pf.tree, &d)?;
            let labels = group_labels(&d, &pf.groups)?;
            let plan = make_folds(&labels, cfg.policy.nuisance.folds, cfg.seed)?;
            let nuis = estimate_nuisance(d.x(), d.outcomes(), &labels, pf.groups.m(), &plan, &cfg.policy.nuisance)?;
            let scores = aipw_scores(d.outcomes(), &labels, &nuis)?;
            let actions = pf.tree.predict_all(&policy_matrix(&d, &cols));
            report.insert("aipw_value".into(), json!(estimate_value(&scores, &actions)?));
        }
        if inputs.scenario_value {
            let scenario = cfg.scenario_config()?;
            let names: Vec<&str> = drfusion::synth::COVARIATE_NAMES.to_vec();
            let idx: Vec<usize> = pf
                .tree
                .features
                .iter()
                .map(|f| names.iter().position(|n| n == f).ok_or_else(|| Error::MissingColumn(f.clone())))
                .collect::<Result<_>>()?;
            let value = population_value(
                &scenario,
                &pf.groups,
                |x| {
                    let sub: Vec<f64> = idx.iter().map(|&j| x[j]).collect();
                    pf.tree.predict(&sub)
                },
                cfg.bench.test_size,
                cfg.seed,
            )?;
            report.insert("population_value".into(), json!(value));
        }
        if cfg.data.is_none() && !inputs.scenario_value {
            return Err(Error::Invalid("--policy needs --data or --scenario-value".into()));
        }
    }
    if report.len() == 1 {
        return Err(Error::Invalid(
            "nothing to evaluate: pass --groups with --truth, or --policy".into(),
        ));
    }
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &cfg.out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let scenario = cfg.scenario_config()?;
    let bench_cfg = cfg.bench_config();
    let result = run_benchmark(&scenario, &bench_cfg)?;
    let table = result.table_csv();
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let prov = cfg.provenance();
        write_text(&dir.join("table.csv"), &format!("# {}\n{table}", prov.header()))?;
        write_text(&dir.join("replications.jsonl"), &result.log_jsonl()?)?;
    }
    print!("{table}");
    Ok(())
}
