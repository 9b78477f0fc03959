//! Observational datasets with many-armed treatments: the in-memory model,
//! CSV ingestion and serialization, and treatment groupings.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INTERCEPT: &str = "intercept";

/// Covariates, treatment labels and outcomes for `n` units.
///
/// Column 0 of `x` is the intercept (identically 1). Treatment labels are
/// dense integers in `1..=k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    a: Vec<usize>,
    y: Vec<f64>,
    feature_names: Vec<String>,
    k: usize,
    label_names: Option<Vec<String>>,
}

impl Dataset {
    /// Builds a dataset from covariates *without* the intercept column; the
    /// intercept is prepended. `k` defaults to the largest observed label.
    pub fn from_covariates(
        covariates: &DMatrix<f64>,
        a: Vec<usize>,
        y: Vec<f64>,
        covariate_names: Vec<String>,
        k: Option<usize>,
    ) -> Result<Self> {
        let n = covariates.nrows();
        let q = covariates.ncols();
        let x = DMatrix::from_fn(n, q + 1, |i, j| if j == 0 { 1.0 } else { covariates[(i, j - 1)] });
        let mut names = Vec::with_capacity(q + 1);
        names.push(INTERCEPT.to_string());
        names.extend(covariate_names);
        Self::new(x, a, y, names, k)
    }

    /// Builds a dataset from a design matrix whose first column is the intercept.
    pub fn new(
        x: DMatrix<f64>,
        a: Vec<usize>,
        y: Vec<f64>,
        feature_names: Vec<String>,
        k: Option<usize>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::Empty("dataset has no rows".into()));
        }
        if a.len() != n {
            return Err(Error::Dimension { expected: n, got: a.len() });
        }
        if y.len() != n {
            return Err(Error::Dimension { expected: n, got: y.len() });
        }
        if feature_names.len() != x.ncols() {
            return Err(Error::Dimension {
                expected: x.ncols(),
                got: feature_names.len(),
            });
        }
        if x.ncols() == 0 {
            return Err(Error::Invalid("design matrix has no columns".into()));
        }
        for i in 0..n {
            if x[(i, 0)] != 1.0 {
                return Err(Error::BadValue {
                    row: i + 1,
                    column: feature_names[0].clone(),
                    message: "intercept column must be identically 1".into(),
                });
            }
            for j in 1..x.ncols() {
                if !x[(i, j)].is_finite() {
                    return Err(Error::BadValue {
                        row: i + 1,
                        column: feature_names[j].clone(),
                        message: format!("non-finite covariate {}", x[(i, j)]),
                    });
                }
            }
            if !y[i].is_finite() {
                return Err(Error::BadValue {
                    row: i + 1,
                    column: "outcome".into(),
                    message: format!("non-finite outcome {}", y[i]),
                });
            }
        }
        let observed_max = a.iter().copied().max().unwrap_or(0);
        let k = k.unwrap_or(observed_max);
        for (i, &label) in a.iter().enumerate() {
            if label == 0 || label > k {
                return Err(Error::BadValue {
                    row: i + 1,
                    column: "treatment".into(),
                    message: format!("treatment label {label} outside 1..={k}"),
                });
            }
        }
        Ok(Self {
            x,
            a,
            y,
            feature_names,
            k,
            label_names: None,
        })
    }

    pub fn with_label_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.k {
            return Err(Error::Dimension {
                expected: self.k,
                got: names.len(),
            });
        }
        self.label_names = Some(names);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Number of design columns, intercept included.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn treatments(&self) -> &[usize] {
        &self.a
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.y
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn label_names(&self) -> Option<&[String]> {
        self.label_names.as_deref()
    }

    /// Row indices of the units that received treatment `arm` (1-based).
    pub fn arm_rows(&self, arm: usize) -> Vec<usize> {
        self.a
            .iter()
            .enumerate()
            .filter(|(_, &label)| label == arm)
            .map(|(i, _)| i)
            .collect()
    }

    /// Row indices grouped by arm, indexed `0..k`.
    pub fn rows_by_arm(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.k];
        for (i, &label) in self.a.iter().enumerate() {
            rows[label - 1].push(i);
        }
        rows
    }

    /// Covariate row `i` without the intercept.
    pub fn covariates(&self, i: usize) -> Vec<f64> {
        (1..self.p()).map(|j| self.x[(i, j)]).collect()
    }

    /// Column-wise sample mean of the design matrix.
    pub fn column_means(&self) -> Vec<f64> {
        let n = self.n() as f64;
        (0..self.p()).map(|j| self.x.column(j).sum() / n).collect()
    }

    /// Copy of this dataset with a different outcome vector.
    pub fn with_outcomes(&self, y: Vec<f64>) -> Result<Self> {
        let mut out = Self::new(self.x.clone(), self.a.clone(), y, self.feature_names.clone(), Some(self.k))?;
        out.label_names = self.label_names.clone();
        Ok(out)
    }

    /// Subset of rows, keeping `k` and names.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let x = DMatrix::from_fn(rows.len(), self.p(), |i, j| self.x[(rows[i], j)]);
        let a = rows.iter().map(|&i| self.a[i]).collect();
        let y = rows.iter().map(|&i| self.y[i]).collect();
        let mut out = Self::new(x, a, y, self.feature_names.clone(), Some(self.k))?;
        out.label_names = self.label_names.clone();
        Ok(out)
    }

    /// Resolves covariate names to design-column indices (intercept excluded).
    pub fn resolve_columns(&self, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|name| {
                self.feature_names
                    .iter()
                    .position(|f| f == name)
                    .filter(|&j| j > 0)
                    .ok_or_else(|| Error::MissingColumn(name.clone()))
            })
            .collect()
    }
}

/// Units per arm, indexed `0..k`; sums to `n`.
pub fn arm_sizes(d: &Dataset) -> Vec<usize> {
    let mut counts = vec![0; d.k()];
    for &a in d.treatments() {
        counts[a - 1] += 1;
    }
    counts
}

/// Maps each unit's treatment onto its group: `b_i = δ(a_i)`.
pub fn group_labels(d: &Dataset, g: &GroupMapping) -> Result<Vec<usize>> {
    d.treatments()
        .iter()
        .map(|&a| g.group_of(a).ok_or(Error::LabelOutOfRange { label: a, k: g.k() }))
        .collect()
}

/// A partition of treatments `1..=K` into groups `1..=M`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct GroupMapping {
    delta: Vec<usize>,
    m: usize,
}

impl GroupMapping {
    /// Validates an explicit mapping; ids must be exactly `1..=M`, each used.
    pub fn from_delta(delta: Vec<usize>) -> Result<Self> {
        if delta.is_empty() {
            return Err(Error::Empty("group mapping has no treatments".into()));
        }
        let m = delta.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; m];
        for &g in &delta {
            if g == 0 {
                return Err(Error::Invalid("group ids start at 1".into()));
            }
            seen[g - 1] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Invalid(format!("group {} has no treatments", missing + 1)));
        }
        Ok(Self { delta, m })
    }

    /// Relabels arbitrary cluster ids so that groups are numbered by their
    /// smallest member treatment.
    pub fn canonical(labels: &[usize]) -> Self {
        let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
        let delta = labels
            .iter()
            .map(|&l| {
                let next = remap.len() + 1;
                *remap.entry(l).or_insert(next)
            })
            .collect();
        Self { delta, m: remap.len() }
    }

    pub fn identity(k: usize) -> Self {
        Self {
            delta: (1..=k).collect(),
            m: k,
        }
    }

    pub fn single(k: usize) -> Self {
        Self { delta: vec![1; k], m: 1 }
    }

    /// Consecutive equal-size blocks: treatments `1..=k/m` form group 1, etc.
    pub fn blocks(k: usize, m: usize) -> Self {
        let size = k / m;
        Self {
            delta: (0..k).map(|a| a / size + 1).collect(),
            m,
        }
    }

    pub fn k(&self) -> usize {
        self.delta.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn delta(&self) -> &[usize] {
        &self.delta
    }

    pub fn group_of(&self, treatment: usize) -> Option<usize> {
        treatment.checked_sub(1).and_then(|a| self.delta.get(a)).copied()
    }

    /// Member treatments of group `b`, ascending.
    pub fn members(&self, b: usize) -> Vec<usize> {
        (1..=self.k()).filter(|&a| self.delta[a - 1] == b).collect()
    }

    /// Writes `treatment,group` rows, optionally preceded by `#` comment
    /// lines.
    pub fn write_csv(&self, path: &Path, header_comment: Option<&str>) -> Result<()> {
        use std::io::Write as _;
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        if let Some(comment) = header_comment {
            for line in comment.lines() {
                writeln!(file, "# {line}").map_err(|e| Error::io(path, e))?;
            }
        }
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["treatment", "group"])?;
        for (a, g) in self.delta.iter().enumerate() {
            w.write_record([(a + 1).to_string(), g.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
        let mut pairs = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |idx: usize, col: &str| -> Result<usize> {
                rec.get(idx).and_then(|s| s.trim().parse().ok()).ok_or_else(|| Error::BadValue {
                    row: row + 1,
                    column: col.into(),
                    message: "expected a positive integer".into(),
                })
            };
            pairs.push((parse(0, "treatment")?, parse(1, "group")?));
        }
        pairs.sort_unstable();
        for (idx, &(a, _)) in pairs.iter().enumerate() {
            if a != idx + 1 {
                return Err(Error::Invalid(format!("grouping file must list treatments 1..=K; found {a} at position {}", idx + 1)));
            }
        }
        Self::from_delta(pairs.into_iter().map(|(_, g)| g).collect())
    }
}

impl TryFrom<Vec<usize>> for GroupMapping {
    type Error = Error;

    fn try_from(delta: Vec<usize>) -> Result<Self> {
        Self::from_delta(delta)
    }
}

impl From<GroupMapping> for Vec<usize> {
    fn from(g: GroupMapping) -> Self {
        g.delta
    }
}

/// Column configuration for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub treatment: String,
    pub outcome: String,
    /// Explicit covariate columns; `None` takes every other numeric column in
    /// file order.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            treatment: "a".into(),
            outcome: "y".into(),
            covariates: None,
        }
    }
}

/// A parsed dataset plus non-fatal findings from ingestion.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

/// Reads a header-row CSV. Lines beginning with `#` are ignored.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Loaded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Loaded> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let t_col = find(&schema.treatment)?;
    let y_col = find(&schema.outcome)?;
    let records: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
    if records.is_empty() {
        return Err(Error::Empty("csv file has no data rows".into()));
    }

    let mut warnings = Vec::new();
    let covariate_cols: Vec<usize> = match &schema.covariates {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|&j| j != t_col && j != y_col)
            .filter(|&j| {
                let numeric = records
                    .iter()
                    .all(|rec| rec.get(j).is_some_and(|s| s.parse::<f64>().is_ok()));
                if !numeric {
                    warnings.push(format!("column `{}` is not numeric and was skipped", headers[j]));
                }
                numeric
            })
            .collect(),
    };

    let n = records.len();
    let q = covariate_cols.len();
    let mut x = DMatrix::from_element(n, q + 1, 1.0);
    let mut y = Vec::with_capacity(n);
    let mut raw_labels = Vec::with_capacity(n);
    for (row, rec) in records.iter().enumerate() {
        let value = |j: usize| -> Result<f64> {
            let s = rec.get(j).unwrap_or("");
            let v: f64 = s.parse().map_err(|_| Error::BadValue {
                row: row + 1,
                column: headers[j].clone(),
                message: format!("cannot parse `{s}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::BadValue {
                    row: row + 1,
                    column: headers[j].clone(),
                    message: format!("non-finite value `{s}`"),
                });
            }
            Ok(v)
        };
        for (c, &j) in covariate_cols.iter().enumerate() {
            x[(row, c + 1)] = value(j)?;
        }
        y.push(value(y_col)?);
        raw_labels.push(rec.get(t_col).unwrap_or("").to_string());
    }

    let integer_coded = raw_labels.iter().all(|s| s.parse::<i64>().is_ok());
    let (labels, names) = if integer_coded {
        let mut labels = Vec::with_capacity(n);
        for (row, s) in raw_labels.iter().enumerate() {
            let v: i64 = s.parse().expect("checked integer");
            if v <= 0 {
                return Err(Error::BadValue {
                    row: row + 1,
                    column: schema.treatment.clone(),
                    message: format!("treatment label {v} must be a positive integer"),
                });
            }
            labels.push(v as usize);
        }
        (labels, None)
    } else {
        let mut distinct: Vec<&String> = raw_labels.iter().collect();
        distinct.sort();
        distinct.dedup();
        let names: Vec<String> = distinct.iter().map(|s| s.to_string()).collect();
        let labels = raw_labels
            .iter()
            .map(|s| names.binary_search(s).expect("present") + 1)
            .collect();
        (labels, Some(names))
    };

    let mut feature_names = vec![INTERCEPT.to_string()];
    feature_names.extend(covariate_cols.iter().map(|&j| headers[j].clone()));
    let mut dataset = Dataset::new(x, labels, y, feature_names, None)?;
    if let Some(names) = names {
        dataset = dataset.with_label_names(names)?;
    }
    for (arm, size) in arm_sizes(&dataset).iter().enumerate() {
        if *size == 0 {
            warnings.push(format!("treatment label {} is unobserved", arm + 1));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Loaded { dataset, warnings })
}

/// Formats a number with 12 significant digits in its shortest form.
pub fn fmt_num(v: f64) -> String {
    let rounded: f64 = format!("{v:.11e}").parse().unwrap_or(v);
    format!("{rounded}")
}

/// Writes covariates (intercept omitted), treatment and outcome columns.
/// `extra` columns are appended; each must have length `n`.
pub fn save_csv(
    d: &Dataset,
    path: &Path,
    schema: &CsvSchema,
    header_comment: Option<&str>,
    extra: &[(&str, &[f64])],
) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(d, &mut file, schema, header_comment, extra).map_err(|e| match e {
        Error::Csv(c) if c.is_io_error() => Error::io(path, std::io::Error::other(c.to_string())),
        other => other,
    })
}

pub fn write_csv<W: std::io::Write>(
    d: &Dataset,
    mut out: W,
    schema: &CsvSchema,
    header_comment: Option<&str>,
    extra: &[(&str, &[f64])],
) -> Result<()> {
    if let Some(comment) = header_comment {
        for line in comment.lines() {
            writeln!(out, "# {line}").map_err(|e| Error::io("<csv>", e))?;
        }
    }
    for (_, col) in extra {
        if col.len() != d.n() {
            return Err(Error::Dimension { expected: d.n(), got: col.len() });
        }
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = d.feature_names()[1..].iter().map(String::as_str).collect();
    header.push(&schema.treatment);
    header.push(&schema.outcome);
    header.extend(extra.iter().map(|(name, _)| *name));
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..d.n() {
        record.clear();
        record.extend((1..d.p()).map(|j| fmt_num(d.x()[(i, j)])));
        record.push(d.treatments()[i].to_string());
        record.push(fmt_num(d.outcomes()[i]));
        record.extend(extra.iter().map(|(_, col)| fmt_num(col[i])));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Sidecar metadata stored next to a dataset CSV as `<file>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub k: usize,
    pub feature_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_names: Option<Vec<String>>,
    /// Free-form additions such as the generating scenario or provenance.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl DatasetMeta {
    pub fn of(d: &Dataset) -> Self {
        Self {
            n: d.n(),
            k: d.k(),
            feature_names: d.feature_names().to_vec(),
            label_names: d.label_names().map(<[String]>::to_vec),
            extra: BTreeMap::new(),
        }
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        let mut s = csv_path.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
