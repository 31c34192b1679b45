//! Random-forest crop classifier over harmonic feature vectors.
//!
//! Trees are grown on bootstrap resamples with a per-split random feature
//! subset. Every random draw comes from a stream derived from
//! `(seed, tree_index)`, so training in parallel gives the same model as
//! training serially.

mod codec;
mod metrics;
mod tree;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::{CropClass, N_CLASSES};

pub use metrics::{evaluate, read_report, write_report, Metrics, REPORT_HEADER};
pub use tree::{Node, Tree};

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("no training rows")]
    EmptyData,
    #[error("{rows} feature rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("row {row} has {found} features, expected {expected}")]
    Shape { row: usize, found: usize, expected: usize },
    #[error("row {row}: non-finite feature {feature}")]
    NonFinite { row: usize, feature: usize },
    #[error("invalid forest parameters: {0}")]
    Params(String),
    #[error("unknown split criterion {0:?}")]
    UnknownCriterion(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_features: usize,
    pub min_leaf: usize,
    /// `None` grows until leaves are pure or cannot be split.
    pub max_depth: Option<usize>,
    pub criterion: String,
    /// Set by the caller rather than from configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 500,
            max_features: 6,
            min_leaf: 1,
            max_depth: None,
            criterion: "gini".into(),
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self, n_features: usize) -> Result<(), ForestError> {
        if self.n_trees == 0 {
            return Err(ForestError::Params("n_trees must be at least 1".into()));
        }
        if self.max_features == 0 || self.max_features > n_features {
            return Err(ForestError::Params(format!(
                "max_features {} outside 1..={n_features}",
                self.max_features
            )));
        }
        if self.min_leaf == 0 {
            return Err(ForestError::Params("min_leaf must be at least 1".into()));
        }
        if self.max_depth == Some(0) {
            return Err(ForestError::Params("max_depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Node impurity from class counts.
pub trait Impurity: Send + Sync {
    fn name(&self) -> &str;
    fn of(&self, counts: &[u32; N_CLASSES], total: u32) -> f64;
}

pub struct Gini;

impl Impurity for Gini {
    fn name(&self) -> &str {
        "gini"
    }

    fn of(&self, counts: &[u32; N_CLASSES], total: u32) -> f64 {
        if total == 0 {
            return 0.0;
        }
        let n = total as f64;
        1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
    }
}

pub struct Entropy;

impl Impurity for Entropy {
    fn name(&self) -> &str {
        "entropy"
    }

    fn of(&self, counts: &[u32; N_CLASSES], total: u32) -> f64 {
        let n = total as f64;
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.log2()
            })
            .sum()
    }
}

type ImpurityFactory = fn() -> Box<dyn Impurity>;

/// Split criteria by name.
pub struct ImpurityRegistry {
    criteria: BTreeMap<String, ImpurityFactory>,
}

impl ImpurityRegistry {
    pub fn with_builtins() -> Self {
        let mut r = Self {
            criteria: BTreeMap::new(),
        };
        r.register("gini", || Box::new(Gini));
        r.register("entropy", || Box::new(Entropy));
        r
    }

    pub fn register(&mut self, name: &str, factory: ImpurityFactory) {
        self.criteria.insert(name.to_string(), factory);
    }

    pub fn build(&self, name: &str) -> Result<Box<dyn Impurity>, ForestError> {
        self.criteria
            .get(name)
            .map(|f| f())
            .ok_or_else(|| ForestError::UnknownCriterion(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.criteria.keys().map(String::as_str)
    }
}

impl Default for ImpurityRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG stream for one tree.
pub(crate) fn tree_rng(seed: u64, tree_index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(tree_index as u64)))
}

/// Bootstrap row indices of one tree: `n` uniform draws with replacement.
/// Depends only on the seed, the tree index and `n`.
pub fn bootstrap_indices(seed: u64, tree_index: usize, n: usize) -> Vec<u32> {
    tree::bootstrap(&mut tree_rng(seed, tree_index), n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForestModel {
    params: ForestParams,
    n_features: usize,
    trees: Vec<Tree>,
}

impl RandomForestModel {
    pub fn train<R: AsRef<[f64]> + Sync>(
        x: &[R],
        y: &[CropClass],
        params: &ForestParams,
    ) -> Result<Self, ForestError> {
        Self::train_with(x, y, params, &ImpurityRegistry::with_builtins())
    }

    pub fn train_with<R: AsRef<[f64]> + Sync>(
        x: &[R],
        y: &[CropClass],
        params: &ForestParams,
        registry: &ImpurityRegistry,
    ) -> Result<Self, ForestError> {
        if x.is_empty() {
            return Err(ForestError::EmptyData);
        }
        if x.len() != y.len() {
            return Err(ForestError::LengthMismatch {
                rows: x.len(),
                labels: y.len(),
            });
        }
        if x.len() > u32::MAX as usize {
            return Err(ForestError::Params("too many training rows".into()));
        }
        let d = x[0].as_ref().len();
        params.validate(d)?;
        let impurity = registry.build(&params.criterion)?;
        let mut cols = vec![Vec::with_capacity(x.len()); d];
        for (row, r) in x.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(ForestError::Shape {
                    row,
                    found: r.len(),
                    expected: d,
                });
            }
            for (f, &v) in r.iter().enumerate() {
                if !v.is_finite() {
                    return Err(ForestError::NonFinite { row, feature: f });
                }
                cols[f].push(v);
            }
        }
        let labels: Vec<u8> = y.iter().map(|c| c.index() as u8).collect();
        let data = tree::TrainData {
            cols: &cols,
            labels: &labels,
        };
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| tree::grow(&data, params, impurity.as_ref(), &mut tree_rng(params.seed, t)))
            .collect();
        Ok(Self {
            params: params.clone(),
            n_features: d,
            trees,
        })
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    /// Mean of the leaf distributions reached in every tree.
    pub fn predict_proba(&self, x: &[f64]) -> Result<[f64; N_CLASSES], ForestError> {
        if x.len() != self.n_features {
            return Err(ForestError::Shape {
                row: 0,
                found: x.len(),
                expected: self.n_features,
            });
        }
        if let Some(f) = x.iter().position(|v| !v.is_finite()) {
            return Err(ForestError::NonFinite { row: 0, feature: f });
        }
        let mut p = [0.0; N_CLASSES];
        for t in &self.trees {
            for (acc, v) in p.iter_mut().zip(t.leaf(x)) {
                *acc += v;
            }
        }
        let n = self.trees.len() as f64;
        p.iter_mut().for_each(|v| *v /= n);
        Ok(p)
    }

    /// Most probable class; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> Result<(CropClass, [f64; N_CLASSES]), ForestError> {
        let p = self.predict_proba(x)?;
        let mut best = 0;
        for k in 1..N_CLASSES {
            if p[k] > p[best] {
                best = k;
            }
        }
        Ok((CropClass::ALL[best], p))
    }

    pub fn predict_many<R: AsRef<[f64]> + Sync>(&self, x: &[R]) -> Result<Vec<CropClass>, ForestError> {
        x.par_iter()
            .enumerate()
            .map(|(row, r)| {
                self.predict(r.as_ref()).map(|(c, _)| c).map_err(|e| match e {
                    ForestError::Shape { found, expected, .. } => ForestError::Shape { row, found, expected },
                    ForestError::NonFinite { feature, .. } => ForestError::NonFinite { row, feature },
                    other => other,
                })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        codec::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ForestError> {
        codec::decode(bytes)
    }

    /// Human-readable description of the model.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let p = &self.params;
        let _ = writeln!(s, "random forest, {} trees over {} features", self.trees.len(), self.n_features);
        let _ = writeln!(
            s,
            "criterion = {}, max_features = {}, min_leaf = {}, max_depth = {}, seed = {}",
            p.criterion,
            p.max_features,
            p.min_leaf,
            p.max_depth.map_or("unlimited".to_string(), |d| d.to_string()),
            p.seed
        );
        let classes: Vec<&str> = CropClass::ALL.iter().map(|c| c.name()).collect();
        let _ = writeln!(s, "classes = {}", classes.join(", "));
        let nodes: usize = self.trees.iter().map(|t| t.nodes().len()).sum();
        let leaves: usize = self.trees.iter().map(Tree::n_leaves).sum();
        let depth = self.trees.iter().map(Tree::depth).max().unwrap_or(0);
        let _ = writeln!(s, "nodes = {nodes}, leaves = {leaves}, max depth = {depth}");
        let mut splits = vec![0usize; self.n_features];
        for t in &self.trees {
            for n in t.nodes() {
                if let Node::Split { feature, .. } = n {
                    splits[*feature as usize] += 1;
                }
            }
        }
        let counts: Vec<String> = splits.iter().enumerate().map(|(i, c)| format!("f{i}:{c}")).collect();
        let _ = writeln!(s, "split counts = {}", counts.join(" "));
        s
    }
}
