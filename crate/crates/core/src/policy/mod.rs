//! Doubly robust policy learning over fused treatment groups.
//!
//! Cross-fitted nuisance estimates are combined into augmented inverse
//! propensity weighted scores `Γ` (one column per group). The value of any
//! rule is the sample mean of `Γ[i, rule(x_i)]`, and [`exact_tree_search`]
//! finds the depth-limited decision tree maximizing it.

mod search;

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{group_labels, Dataset, GroupMapping};
use crate::nuisance::{estimate_nuisance, make_folds, CrossFitPlan, NuisanceConfig, NuisanceEstimates};
use crate::{Error, Result};

pub use search::{exact_tree_search, split_candidates, SearchOptions, DEFAULT_MAX_SPLITS};

/// Augmented IPW scores, `n × M`.
#[derive(Debug, Clone)]
pub struct AipwScores {
    pub gamma: DMatrix<f64>,
}

/// `Γ[i, b] = 1{B_i = b}(Y_i − μ̂_{B_i}(X_i))/π̂_{B_i}(X_i) + μ̂_b(X_i)`, with
/// `labels` in `1..=M` and out-of-fold nuisance predictions.
pub fn aipw_scores(y: &[f64], labels: &[usize], nuis: &NuisanceEstimates) -> Result<AipwScores> {
    let n = y.len();
    let m = nuis.mu_hat.ncols();
    if labels.len() != n || nuis.mu_hat.nrows() != n || nuis.pi_hat.nrows() != n {
        return Err(Error::Dimension {
            expected: n,
            got: labels.len().min(nuis.mu_hat.nrows()).min(nuis.pi_hat.nrows()),
        });
    }
    if nuis.pi_hat.ncols() != m {
        return Err(Error::Dimension {
            expected: m,
            got: nuis.pi_hat.ncols(),
        });
    }
    let mut gamma = nuis.mu_hat.clone();
    for i in 0..n {
        let b = labels[i];
        if b == 0 || b > m {
            return Err(Error::LabelOutOfRange { label: b, k: m });
        }
        let pi = nuis.pi_hat[(i, b - 1)];
        if pi.is_nan() || pi <= 0.0 {
            return Err(Error::Invalid(format!("unit {} has non-positive propensity", i + 1)));
        }
        gamma[(i, b - 1)] += (y[i] - nuis.mu_hat[(i, b - 1)]) / pi;
    }
    Ok(AipwScores { gamma })
}

/// Mean score of the rule assigning `actions[i]` (in `1..=M`) to unit `i`.
pub fn estimate_value(scores: &AipwScores, actions: &[usize]) -> Result<f64> {
    let n = scores.gamma.nrows();
    let m = scores.gamma.ncols();
    if actions.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: actions.len(),
        });
    }
    let mut total = 0.0;
    for (i, &b) in actions.iter().enumerate() {
        if b == 0 || b > m {
            return Err(Error::LabelOutOfRange { label: b, k: m });
        }
        total += scores.gamma[(i, b - 1)];
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf {
        action: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// A decision tree over policy covariates whose leaves are group ids.
/// Units go left when `x[feature] < threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTree {
    pub depth: usize,
    pub features: Vec<String>,
    pub n_actions: usize,
    pub root: Node,
}

impl PolicyTree {
    pub fn constant(action: usize, features: Vec<String>, n_actions: usize) -> Self {
        PolicyTree {
            depth: 0,
            features,
            n_actions,
            root: Node::Leaf { action },
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { action } => return *action,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] < *threshold { left } else { right },
            }
        }
    }

    /// Actions for every row of `x_policy`.
    pub fn predict_all(&self, x_policy: &DMatrix<f64>) -> Vec<usize> {
        let mut row = vec![0.0; x_policy.ncols()];
        (0..x_policy.nrows())
            .map(|i| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = x_policy[(i, j)];
                }
                self.predict(&row)
            })
            .collect()
    }

    pub fn leaves(&self) -> usize {
        fn count(n: &Node) -> usize {
            match n {
                Node::Leaf { .. } => 1,
                Node::Split { left, right, .. } => count(left) + count(right),
            }
        }
        count(&self.root)
    }

    /// Indented text rendering, one node per line.
    pub fn to_text(&self) -> String {
        fn walk(t: &PolicyTree, n: &Node, indent: usize, out: &mut String) {
            let pad = "  ".repeat(indent);
            match n {
                Node::Leaf { action } => {
                    let _ = writeln!(out, "{pad}action {action}");
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let name = &t.features[*feature];
                    let _ = writeln!(out, "{pad}{name} < {threshold}");
                    walk(t, left, indent + 1, out);
                    let _ = writeln!(out, "{pad}{name} >= {threshold}");
                    walk(t, right, indent + 1, out);
                }
            }
        }
        let mut out = String::new();
        walk(self, &self.root, 0, &mut out);
        out
    }

    /// Graphviz rendering. Edges are labelled with the branch condition.
    pub fn to_dot(&self) -> String {
        fn walk(t: &PolicyTree, n: &Node, next: &mut usize, out: &mut String) -> usize {
            let id = *next;
            *next += 1;
            match n {
                Node::Leaf { action } => {
                    let _ = writeln!(out, "  n{id} [shape=box, label=\"group {action}\"];");
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let name = t.features[*feature].replace('"', "\\\"");
                    let _ = writeln!(out, "  n{id} [label=\"{name}\"];");
                    let l = walk(t, left, next, out);
                    let _ = writeln!(out, "  n{id} -> n{l} [label=\"< {threshold}\"];");
                    let r = walk(t, right, next, out);
                    let _ = writeln!(out, "  n{id} -> n{r} [label=\">= {threshold}\"];");
                }
            }
            id
        }
        let mut out = String::from("digraph policy {\n");
        let mut next = 0;
        walk(self, &self.root, &mut next, &mut out);
        out.push_str("}\n");
        out
    }
}

/// Picks a treatment for each recommended group uniformly among the group's
/// members, using a seeded generator.
pub fn materialize_treatment(
    tree: &PolicyTree,
    groups: &GroupMapping,
    x_policy: &DMatrix<f64>,
    seed: u64,
) -> Result<Vec<usize>> {
    if tree.n_actions != groups.m() {
        return Err(Error::Dimension {
            expected: groups.m(),
            got: tree.n_actions,
        });
    }
    let members: Vec<Vec<usize>> = (1..=groups.m()).map(|b| groups.members(b)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(tree
        .predict_all(x_policy)
        .into_iter()
        .map(|b| {
            let g = &members[b - 1];
            g[rng.random_range(0..g.len())]
        })
        .collect())
}

/// Settings for [`learn_policy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub depth: usize,
    pub max_splits: usize,
    pub exact_splits: bool,
    pub nuisance: NuisanceConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            depth: 3,
            max_splits: DEFAULT_MAX_SPLITS,
            exact_splits: false,
            nuisance: NuisanceConfig::default(),
        }
    }
}

impl PolicyConfig {
    pub fn search_options(&self) -> SearchOptions {
        SearchOptions {
            depth: self.depth,
            max_splits: (!self.exact_splits).then_some(self.max_splits),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth > 4 {
            return Err(Error::Invalid(format!("tree depth {} exceeds 4", self.depth)));
        }
        if self.max_splits == 0 {
            return Err(Error::Invalid("max_splits must be positive".into()));
        }
        Ok(())
    }
}

/// Output of [`learn_policy`].
#[derive(Debug, Clone)]
pub struct LearnedPolicy {
    pub tree: PolicyTree,
    /// In-sample AIPW value of the tree.
    pub value: f64,
    pub scores: AipwScores,
    pub plan: CrossFitPlan,
    /// Design-matrix columns the tree splits on.
    pub policy_columns: Vec<usize>,
    pub warnings: Vec<String>,
}

impl LearnedPolicy {
    /// Group recommended for a full covariate row (intercept first).
    pub fn recommend(&self, x_row: &[f64]) -> usize {
        let sub: Vec<f64> = self.policy_columns.iter().map(|&j| x_row[j]).collect();
        self.tree.predict(&sub)
    }
}

/// Columns `cols` of the design matrix, as an `n × q` matrix.
pub fn policy_matrix(d: &Dataset, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(d.n(), cols.len(), |i, j| d.x()[(i, cols[j])])
}

/// Cross-fitted AIPW policy learning on the groups of `groups`.
///
/// `policy_columns` are design-matrix columns (never the intercept); empty
/// means every covariate.
pub fn learn_policy(
    d: &Dataset,
    groups: &GroupMapping,
    policy_columns: &[usize],
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<LearnedPolicy> {
    cfg.validate()?;
    if groups.k() != d.k() {
        return Err(Error::Dimension {
            expected: d.k(),
            got: groups.k(),
        });
    }
    let cols: Vec<usize> = if policy_columns.is_empty() {
        (1..d.p()).collect()
    } else {
        policy_columns.to_vec()
    };
    if let Some(&bad) = cols.iter().find(|&&j| j == 0 || j >= d.p()) {
        return Err(Error::Invalid(format!("policy column {bad} is not a covariate")));
    }
    let labels = group_labels(d, groups)?;
    let m = groups.m();
    let plan = make_folds(&labels, cfg.nuisance.folds, seed)?;
    let nuis = estimate_nuisance(d.x(), d.outcomes(), &labels, m, &plan, &cfg.nuisance)?;
    let scores = aipw_scores(d.outcomes(), &labels, &nuis)?;
    let x_policy = policy_matrix(d, &cols);
    let names: Vec<String> = cols.iter().map(|&j| d.feature_names()[j].clone()).collect();
    let (tree, value) = exact_tree_search(&scores.gamma, &x_policy, names, &cfg.search_options())?;
    Ok(LearnedPolicy {
        tree,
        value,
        scores,
        plan,
        policy_columns: cols,
        warnings: nuis.warnings,
    })
}
