//! Cross-fitted nuisance functions: the propensity score `e(x)`, the pooled
//! conditional mean `μ(x)` and the arm-specific means `μ₀(x)`, `μ₁(x)`.
//!
//! Every prediction for an observation comes from models trained on the
//! other folds; the training sets are kept so that this can be audited.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{format_float, write_string, Dataset, FoldPlan};
use crate::error::{invalid_arg, invalid_data, CateError, Result};
use crate::rng::derive_path;
use crate::stacking::{fit_stacked, StackSpec};

pub const DEFAULT_CLIP_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceEstimates {
    /// Clipped propensity scores.
    pub e_hat: Vec<f64>,
    /// Propensity predictions before clipping.
    pub e_raw: Vec<f64>,
    pub mu_hat: Vec<f64>,
    pub mu0_hat: Vec<f64>,
    pub mu1_hat: Vec<f64>,
    pub clip_epsilon: f64,
    /// Fold that produced each prediction.
    pub fold_of: Vec<usize>,
    /// Training rows of the models for each fold (sorted). Empty for oracle values.
    pub training_sets: Vec<Vec<usize>>,
    pub stack_weights: Option<StackWeightTable>,
}

/// Stack weights averaged over folds, one row per nuisance function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackWeightTable {
    pub e_members: Vec<String>,
    pub mu_members: Vec<String>,
    pub e: Vec<f64>,
    pub mu: Vec<f64>,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
}

pub fn clip_propensity(e: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    check_epsilon(epsilon)?;
    Ok(e.iter().map(|v| v.clamp(epsilon, 1.0 - epsilon)).collect())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon < 0.5 {
        Ok(())
    } else {
        Err(invalid_arg(format!(
            "clip epsilon must lie in (0, 0.5), got {epsilon}"
        )))
    }
}

impl NuisanceEstimates {
    /// Known nuisance functions (for simulation studies); `μ = e·μ₁ + (1−e)·μ₀`.
    pub fn oracle(e: Vec<f64>, mu0: Vec<f64>, mu1: Vec<f64>, clip_epsilon: f64) -> Result<Self> {
        let n = e.len();
        if mu0.len() != n || mu1.len() != n {
            return Err(invalid_arg(
                "oracle nuisance vectors must have equal length",
            ));
        }
        let e_hat = clip_propensity(&e, clip_epsilon)?;
        let mu_hat = (0..n)
            .map(|i| e[i] * mu1[i] + (1.0 - e[i]) * mu0[i])
            .collect();
        Ok(NuisanceEstimates {
            e_hat,
            e_raw: e,
            mu_hat,
            mu0_hat: mu0,
            mu1_hat: mu1,
            clip_epsilon,
            fold_of: vec![0; n],
            training_sets: Vec::new(),
            stack_weights: None,
        })
    }

    pub fn n(&self) -> usize {
        self.e_hat.len()
    }

    /// Check that no prediction came from a model trained on its own row.
    pub fn verify_no_leakage(&self) -> Result<()> {
        if self.training_sets.is_empty() {
            return Ok(());
        }
        for (i, &fold) in self.fold_of.iter().enumerate() {
            let train = self
                .training_sets
                .get(fold)
                .ok_or_else(|| CateError::Estimation(format!("row {i} has unknown fold {fold}")))?;
            if train.binary_search(&i).is_ok() {
                return Err(CateError::Estimation(format!(
                    "row {i} was predicted by a model trained on it (fold {fold})"
                )));
            }
        }
        Ok(())
    }

    /// Audit table with columns `e_hat, mu_hat, mu0_hat, mu1_hat, fold`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("id,e_hat,mu_hat,mu0_hat,mu1_hat,fold\n");
        for i in 0..self.n() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i,
                format_float(self.e_hat[i]),
                format_float(self.mu_hat[i]),
                format_float(self.mu0_hat[i]),
                format_float(self.mu1_hat[i]),
                self.fold_of[i]
            ));
        }
        write_string(path.as_ref(), &out)
    }
}

struct FoldNuisance {
    estimate: Vec<usize>,
    train: Vec<usize>,
    e: Vec<f64>,
    mu: Vec<f64>,
    mu0: Vec<f64>,
    mu1: Vec<f64>,
    weights: [Vec<f64>; 4],
}

/// Fit `ê`, `μ̂` on each training complement, `μ̂₀`/`μ̂₁` on its control and
/// treated rows, predict the held-out fold, and clip `ê`.
pub fn crossfit_nuisances(
    data: &Dataset,
    plan: &FoldPlan,
    e_spec: &StackSpec,
    mu_spec: &StackSpec,
    clip_epsilon: f64,
) -> Result<NuisanceEstimates> {
    check_epsilon(clip_epsilon)?;
    if plan.n() != data.n() {
        return Err(invalid_arg(format!(
            "fold plan covers {} rows, data has {}",
            plan.n(),
            data.n()
        )));
    }
    let min_arm = mu_spec
        .members
        .iter()
        .map(|m| match m.kind {
            crate::learners::LearnerKind::Ridge { .. } => 1,
            crate::learners::LearnerKind::RegressionTree { min_node_size, .. }
            | crate::learners::LearnerKind::RandomForest { min_node_size, .. }
            | crate::learners::LearnerKind::GradientBoosting { min_node_size, .. } => min_node_size,
        })
        .max()
        .unwrap_or(1);
    let splits = plan.splits();
    for (fold, split) in splits.iter().enumerate() {
        let treated = data.arm_members(&split.train_indices, 1).len();
        let control = split.train_indices.len() - treated;
        if treated < min_arm || control < min_arm {
            return Err(invalid_data(format!(
                "training complement of fold {fold} has {control} control and {treated} treated rows; need at least {min_arm} per arm"
            )));
        }
    }

    let d = data.d_f64();
    let per_fold: Vec<FoldNuisance> = splits
        .into_par_iter()
        .enumerate()
        .map(|(fold, split)| -> Result<FoldNuisance> {
            let tr = &split.train_indices;
            let xt = data.x_rows(tr);
            let xe = data.x_rows(&split.estimate_indices);
            let seed = |tag: u64, spec: &StackSpec| derive_path(spec.seed, &[fold as u64, tag]);

            let dt: Vec<f64> = tr.iter().map(|&i| d[i]).collect();
            let e_model = fit_stacked(
                &e_spec.clone().with_seed(seed(1, e_spec)),
                xt.view(),
                &dt,
                None,
            )?;
            let e = e_model.predict_probability(xe.view())?;

            let yt = data.y_rows(tr);
            let mu_model = fit_stacked(
                &mu_spec.clone().with_seed(seed(2, mu_spec)),
                xt.view(),
                &yt,
                None,
            )?;
            let mu = mu_model.predict(xe.view())?;

            let c = data.arm_members(tr, 0);
            let mu0_model = fit_stacked(
                &mu_spec.clone().with_seed(seed(3, mu_spec)),
                data.x_rows(&c).view(),
                &data.y_rows(&c),
                None,
            )?;
            let mu0 = mu0_model.predict(xe.view())?;

            let t = data.arm_members(tr, 1);
            let mu1_model = fit_stacked(
                &mu_spec.clone().with_seed(seed(4, mu_spec)),
                data.x_rows(&t).view(),
                &data.y_rows(&t),
                None,
            )?;
            let mu1 = mu1_model.predict(xe.view())?;

            Ok(FoldNuisance {
                estimate: split.estimate_indices,
                train: split.train_indices,
                e,
                mu,
                mu0,
                mu1,
                weights: [
                    e_model.weights().to_vec(),
                    mu_model.weights().to_vec(),
                    mu0_model.weights().to_vec(),
                    mu1_model.weights().to_vec(),
                ],
            })
        })
        .collect::<Result<_>>()?;

    let n = data.n();
    let k = per_fold.len() as f64;
    let mut out = NuisanceEstimates {
        e_hat: vec![0.0; n],
        e_raw: vec![0.0; n],
        mu_hat: vec![0.0; n],
        mu0_hat: vec![0.0; n],
        mu1_hat: vec![0.0; n],
        clip_epsilon,
        fold_of: vec![0; n],
        training_sets: Vec::with_capacity(per_fold.len()),
        stack_weights: None,
    };
    let mut table = StackWeightTable {
        e_members: e_spec.member_names(),
        mu_members: mu_spec.member_names(),
        e: vec![0.0; e_spec.members.len()],
        mu: vec![0.0; mu_spec.members.len()],
        mu0: vec![0.0; mu_spec.members.len()],
        mu1: vec![0.0; mu_spec.members.len()],
    };
    for (fold, f) in per_fold.into_iter().enumerate() {
        for (pos, &i) in f.estimate.iter().enumerate() {
            out.e_raw[i] = f.e[pos];
            out.mu_hat[i] = f.mu[pos];
            out.mu0_hat[i] = f.mu0[pos];
            out.mu1_hat[i] = f.mu1[pos];
            out.fold_of[i] = fold;
        }
        for (row, w) in [&mut table.e, &mut table.mu, &mut table.mu0, &mut table.mu1]
            .into_iter()
            .zip(&f.weights)
        {
            row.iter_mut().zip(w).for_each(|(a, b)| *a += b / k);
        }
        out.training_sets.push(f.train);
    }
    out.e_hat = clip_propensity(&out.e_raw, clip_epsilon)?;
    out.stack_weights = Some(table);
    out.verify_no_leakage()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub clip_epsilon: f64,
    pub n_clipped_low: usize,
    pub n_clipped_high: usize,
    pub clipped_low: Vec<usize>,
    pub clipped_high: Vec<usize>,
    pub min: f64,
    pub max: f64,
    /// Quantiles at 0%, 10%, ..., 100%.
    pub deciles: Vec<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn overlap_report(e: &[f64], epsilon: f64) -> OverlapReport {
    let clipped_low: Vec<usize> = (0..e.len()).filter(|&i| e[i] < epsilon).collect();
    let clipped_high: Vec<usize> = (0..e.len()).filter(|&i| e[i] > 1.0 - epsilon).collect();
    let mut sorted = e.to_vec();
    sorted.sort_by(f64::total_cmp);
    OverlapReport {
        clip_epsilon: epsilon,
        n_clipped_low: clipped_low.len(),
        n_clipped_high: clipped_high.len(),
        clipped_low,
        clipped_high,
        min: sorted.first().copied().unwrap_or(f64::NAN),
        max: sorted.last().copied().unwrap_or(f64::NAN),
        deciles: (0..=10)
            .map(|k| quantile_sorted(&sorted, k as f64 / 10.0))
            .collect(),
    }
}
