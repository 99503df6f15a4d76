//! Base regression learners.
//!
//! Every learner minimizes a weighted squared-error loss and accepts
//! optional per-observation weights. Weights are normalized to mean one
//! before fitting, so rescaling them leaves every fit unchanged.

mod ridge;
mod tree;

use ndarray::ArrayView2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, CateError, Result};
use crate::rng;

pub use ridge::RidgeModel;
use tree::{ColumnData, TreeParams};
pub use tree::{RegressionTree, TreeNode};

fn default_min_node_size() -> usize {
    10
}

fn default_feature_fraction() -> f64 {
    1.0 / 3.0
}

/// Learner family and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerKind {
    RegressionTree {
        /// `None` grows until `min_node_size` stops it.
        #[serde(default)]
        max_depth: Option<usize>,
        #[serde(default = "default_min_node_size")]
        min_node_size: usize,
    },
    RandomForest {
        n_trees: usize,
        #[serde(default = "default_min_node_size")]
        min_node_size: usize,
        #[serde(default = "default_feature_fraction")]
        feature_fraction: f64,
    },
    GradientBoosting {
        n_rounds: usize,
        learning_rate: f64,
        max_depth: usize,
        #[serde(default = "default_min_node_size")]
        min_node_size: usize,
    },
    Ridge {
        penalty: f64,
    },
}

/// A learner configuration. Serializes as a flat JSON object:
/// `{"kind": "random_forest", "n_trees": 1000, "min_node_size": 10, "seed": 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    #[serde(flatten)]
    pub kind: LearnerKind,
    #[serde(default)]
    pub seed: u64,
}

impl LearnerSpec {
    pub fn regression_tree(max_depth: Option<usize>, min_node_size: usize) -> Self {
        Self::from(LearnerKind::RegressionTree {
            max_depth,
            min_node_size,
        })
    }

    pub fn random_forest(n_trees: usize, min_node_size: usize, feature_fraction: f64) -> Self {
        Self::from(LearnerKind::RandomForest {
            n_trees,
            min_node_size,
            feature_fraction,
        })
    }

    pub fn gradient_boosting(n_rounds: usize, learning_rate: f64, max_depth: usize) -> Self {
        Self::from(LearnerKind::GradientBoosting {
            n_rounds,
            learning_rate,
            max_depth,
            min_node_size: default_min_node_size(),
        })
    }

    pub fn ridge(penalty: f64) -> Self {
        Self::from(LearnerKind::Ridge { penalty })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            LearnerKind::RegressionTree { .. } => "regression_tree",
            LearnerKind::RandomForest { .. } => "random_forest",
            LearnerKind::GradientBoosting { .. } => "gradient_boosting",
            LearnerKind::Ridge { .. } => "ridge",
        }
    }

    fn min_node_size(&self) -> usize {
        match self.kind {
            LearnerKind::RegressionTree { min_node_size, .. }
            | LearnerKind::RandomForest { min_node_size, .. }
            | LearnerKind::GradientBoosting { min_node_size, .. } => min_node_size,
            LearnerKind::Ridge { .. } => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LearnerKind::RegressionTree {
                max_depth,
                min_node_size,
            } => {
                if min_node_size == 0 {
                    return Err(invalid_arg("min_node_size must be positive"));
                }
                let _ = max_depth;
            }
            LearnerKind::RandomForest {
                n_trees,
                min_node_size,
                feature_fraction,
            } => {
                if n_trees == 0 || min_node_size == 0 {
                    return Err(invalid_arg(
                        "random forest needs n_trees > 0 and min_node_size > 0",
                    ));
                }
                if !(feature_fraction > 0.0 && feature_fraction <= 1.0) {
                    return Err(invalid_arg("feature_fraction must lie in (0, 1]"));
                }
            }
            LearnerKind::GradientBoosting {
                learning_rate,
                min_node_size,
                ..
            } => {
                if !(learning_rate > 0.0 && learning_rate <= 1.0) {
                    return Err(invalid_arg("learning_rate must lie in (0, 1]"));
                }
                if min_node_size == 0 {
                    return Err(invalid_arg("min_node_size must be positive"));
                }
            }
            LearnerKind::Ridge { penalty } => {
                if !(penalty >= 0.0 && penalty.is_finite()) {
                    return Err(invalid_arg("ridge penalty must be finite and >= 0"));
                }
            }
        }
        Ok(())
    }
}

impl From<LearnerKind> for LearnerSpec {
    fn from(kind: LearnerKind) -> Self {
        LearnerSpec { kind, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum ModelState {
    Tree(RegressionTree),
    Forest(Vec<RegressionTree>),
    Boosting {
        init: f64,
        learning_rate: f64,
        trees: Vec<RegressionTree>,
        train_loss: Vec<f64>,
    },
    Ridge(RidgeModel),
}

/// A fitted learner together with the spec and dimensionality it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    spec: LearnerSpec,
    p: usize,
    state: ModelState,
}

/// Validate weights and rescale them to mean one.
pub(crate) fn normalized_weights(n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; n]),
        Some(w) => {
            if w.len() != n {
                return Err(invalid_arg(format!(
                    "{} weights for {n} observations",
                    w.len()
                )));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(invalid_arg("weights must be finite and non-negative"));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(invalid_arg("weights are all zero"));
            }
            let scale = n as f64 / total;
            Ok(w.iter().map(|v| v * scale).collect())
        }
    }
}

pub fn fit(
    spec: &LearnerSpec,
    x: ArrayView2<'_, f64>,
    y: &[f64],
    weights: Option<&[f64]>,
) -> Result<FittedModel> {
    spec.validate()?;
    let (n, p) = x.dim();
    if n == 0 || p == 0 {
        return Err(invalid_arg("cannot fit on empty data"));
    }
    if y.len() != n {
        return Err(invalid_arg(format!("{} targets for {n} rows", y.len())));
    }
    if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
        return Err(invalid_arg("non-finite values in training data"));
    }
    if n < spec.min_node_size() {
        return Err(invalid_arg(format!(
            "{n} observations is fewer than min_node_size {}",
            spec.min_node_size()
        )));
    }
    let w = normalized_weights(n, weights)?;

    let state = match spec.kind {
        LearnerKind::Ridge { penalty } => ModelState::Ridge(ridge::fit(x, y, &w, penalty)?),
        LearnerKind::RegressionTree {
            max_depth,
            min_node_size,
        } => {
            let data = ColumnData::new(x);
            let samples: Vec<usize> = (0..n).collect();
            let params = TreeParams {
                max_depth,
                min_node_size,
                mtry: p,
            };
            ModelState::Tree(tree::grow(&data, y, &w, &samples, params, None))
        }
        LearnerKind::RandomForest {
            n_trees,
            min_node_size,
            feature_fraction,
        } => {
            let data = ColumnData::new(x);
            let sampler =
                WeightedIndex::new(&w).map_err(|e| CateError::Estimation(e.to_string()))?;
            let ones = vec![1.0; n];
            let params = TreeParams {
                max_depth: None,
                min_node_size,
                mtry: ((feature_fraction * p as f64).floor() as usize).clamp(1, p),
            };
            let trees = (0..n_trees)
                .into_par_iter()
                .map(|t| {
                    let mut rng = rng::stream(spec.seed, t as u64);
                    let samples: Vec<usize> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
                    tree::grow(&data, y, &ones, &samples, params, Some(&mut rng))
                })
                .collect();
            ModelState::Forest(trees)
        }
        LearnerKind::GradientBoosting {
            n_rounds,
            learning_rate,
            max_depth,
            min_node_size,
        } => {
            let data = ColumnData::new(x);
            let samples: Vec<usize> = (0..n).collect();
            let init = weighted_mean(y, &w);
            let mut fitted = vec![init; n];
            let mut residual: Vec<f64> = y.iter().map(|v| v - init).collect();
            let params = TreeParams {
                max_depth: Some(max_depth),
                min_node_size,
                mtry: p,
            };
            let mut trees = Vec::with_capacity(n_rounds);
            let mut train_loss = vec![weighted_sse(&residual, &w)];
            for _ in 0..n_rounds {
                let tree = tree::grow(&data, &residual, &w, &samples, params, None);
                for i in 0..n {
                    let step = learning_rate * tree.predict_row_col(&data, i);
                    fitted[i] += step;
                    residual[i] = y[i] - fitted[i];
                }
                train_loss.push(weighted_sse(&residual, &w));
                trees.push(tree);
            }
            ModelState::Boosting {
                init,
                learning_rate,
                trees,
                train_loss,
            }
        }
    };
    Ok(FittedModel {
        spec: spec.clone(),
        p,
        state,
    })
}

fn weighted_mean(y: &[f64], w: &[f64]) -> f64 {
    y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>()
}

fn weighted_sse(r: &[f64], w: &[f64]) -> f64 {
    r.iter().zip(w).map(|(a, b)| b * a * a).sum()
}

impl FittedModel {
    pub fn spec(&self) -> &LearnerSpec {
        &self.spec
    }

    pub fn n_features(&self) -> usize {
        self.p
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.p {
            return Err(CateError::DimensionMismatch {
                expected: self.p,
                got: x.ncols(),
            });
        }
        let rows = x.rows().into_iter().map(|r| r.to_vec());
        let out = match &self.state {
            ModelState::Ridge(m) => rows.map(|r| m.predict_row(r)).collect(),
            ModelState::Tree(t) => rows.map(|r| t.predict_row(&r)).collect(),
            ModelState::Forest(trees) => rows
                .map(|r| trees.iter().map(|t| t.predict_row(&r)).sum::<f64>() / trees.len() as f64)
                .collect(),
            ModelState::Boosting {
                init,
                learning_rate,
                trees,
                ..
            } => rows
                .map(|r| {
                    init + learning_rate * trees.iter().map(|t| t.predict_row(&r)).sum::<f64>()
                })
                .collect(),
        };
        Ok(out)
    }

    /// Predictions clamped to `[0, 1]`, for models trained on a 0/1 target.
    pub fn predict_probability(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self
            .predict(x)?
            .into_iter()
            .map(clamp_probability)
            .collect())
    }

    /// The individual trees of a random forest.
    pub fn forest_trees(&self) -> Option<&[RegressionTree]> {
        match &self.state {
            ModelState::Forest(trees) => Some(trees),
            _ => None,
        }
    }

    pub fn ridge_model(&self) -> Option<&RidgeModel> {
        match &self.state {
            ModelState::Ridge(m) => Some(m),
            _ => None,
        }
    }

    pub fn tree(&self) -> Option<&RegressionTree> {
        match &self.state {
            ModelState::Tree(t) => Some(t),
            _ => None,
        }
    }

    /// Weighted training loss before the first round and after each round.
    pub fn boosting_train_loss(&self) -> Option<&[f64]> {
        match &self.state {
            ModelState::Boosting { train_loss, .. } => Some(train_loss),
            _ => None,
        }
    }
}

pub fn clamp_probability(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

pub fn predict(model: &FittedModel, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    model.predict(x)
}

pub fn predict_probability(model: &FittedModel, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    model.predict_probability(x)
}
