//! Cross-validated stacking (super learner).
//!
//! Each member is fitted on `cv_folds − 1` folds and predicts the held-out
//! fold, giving an out-of-fold prediction matrix `Z`. The ensemble weights
//! minimize `‖y − Zβ‖²` over the probability simplex (`β ≥ 0`, `Σβ = 1`);
//! the plain non-negative least squares coefficients are kept alongside for
//! reporting. Members are then refitted on all data.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::make_folds;
use crate::error::{invalid_arg, CateError, Result};
use crate::learners::{self, normalized_weights, FittedModel, LearnerSpec};
use crate::rng::{derive_path, derive_seed};

fn default_cv_folds() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackSpec {
    pub members: Vec<LearnerSpec>,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
    #[serde(default)]
    pub seed: u64,
}

impl StackSpec {
    pub fn new(members: Vec<LearnerSpec>) -> Self {
        StackSpec {
            members,
            cv_folds: default_cv_folds(),
            seed: 0,
        }
    }

    pub fn single(member: LearnerSpec) -> Self {
        Self::new(vec![member])
    }

    pub fn with_cv_folds(mut self, cv_folds: usize) -> Self {
        self.cv_folds = cv_folds;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn member_names(&self) -> Vec<String> {
        self.members.iter().map(|m| m.name().to_string()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(invalid_arg("a stack needs at least one member"));
        }
        if self.cv_folds < 2 {
            return Err(invalid_arg("cv_folds must be at least 2"));
        }
        self.members.iter().try_for_each(LearnerSpec::validate)
    }

    fn member_seed(&self, member: usize, fold: u64) -> u64 {
        derive_path(self.members[member].seed, &[self.seed, member as u64, fold])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackedModel {
    members: Vec<FittedModel>,
    weights: Vec<f64>,
    nnls_coefficients: Vec<f64>,
    cv_risk: Vec<f64>,
    stack_cv_risk: f64,
}

impl StackedModel {
    pub fn members(&self) -> &[FittedModel] {
        &self.members
    }

    /// Ensemble weights: non-negative, summing to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Unnormalized non-negative least squares solution on the out-of-fold matrix.
    pub fn nnls_coefficients(&self) -> &[f64] {
        &self.nnls_coefficients
    }

    /// Weighted out-of-fold mean squared error of each member. `NaN` for a
    /// single-member stack, which skips cross-validation.
    pub fn cv_risk(&self) -> &[f64] {
        &self.cv_risk
    }

    /// Out-of-fold risk of the weighted combination.
    pub fn stack_cv_risk(&self) -> f64 {
        self.stack_cv_risk
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.nrows()];
        for (model, &w) in self.members.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(model.predict(x)?) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    pub fn predict_probability(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self
            .predict(x)?
            .into_iter()
            .map(learners::clamp_probability)
            .collect())
    }
}

/// Out-of-fold prediction matrix (`n × members`).
pub fn out_of_fold_predictions(
    spec: &StackSpec,
    x: ArrayView2<'_, f64>,
    y: &[f64],
    weights: Option<&[f64]>,
) -> Result<Array2<f64>> {
    spec.validate()?;
    let n = x.nrows();
    let k = spec.cv_folds.min(n);
    if k < 2 {
        return Err(invalid_arg(format!(
            "cannot cross-validate {n} observations"
        )));
    }
    let plan = make_folds(n, k, derive_seed(spec.seed, 0x5157))?;
    let mut z = Array2::zeros((n, spec.members.len()));
    for (fold, split) in plan.splits().into_iter().enumerate() {
        let xt = x.select(ndarray::Axis(0), &split.train_indices);
        let yt: Vec<f64> = split.train_indices.iter().map(|&i| y[i]).collect();
        let wt: Option<Vec<f64>> =
            weights.map(|w| split.train_indices.iter().map(|&i| w[i]).collect());
        let xe = x.select(ndarray::Axis(0), &split.estimate_indices);
        for (j, member) in spec.members.iter().enumerate() {
            let member = member
                .clone()
                .with_seed(spec.member_seed(j, fold as u64 + 1));
            let model = learners::fit(&member, xt.view(), &yt, wt.as_deref())?;
            for (&i, v) in split.estimate_indices.iter().zip(model.predict(xe.view())?) {
                z[[i, j]] = v;
            }
        }
    }
    Ok(z)
}

pub fn fit_stacked(
    spec: &StackSpec,
    x: ArrayView2<'_, f64>,
    y: &[f64],
    weights: Option<&[f64]>,
) -> Result<StackedModel> {
    spec.validate()?;
    let n = x.nrows();
    let w = normalized_weights(n, weights)?;
    let m = spec.members.len();

    let (ensemble, nnls_coefficients, cv_risk, stack_cv_risk) = if m == 1 {
        (vec![1.0], vec![1.0], vec![f64::NAN], f64::NAN)
    } else {
        let z = out_of_fold_predictions(spec, x, y, weights)?;
        let risk = |pred: &dyn Fn(usize) -> f64| -> f64 {
            (0..n).map(|i| w[i] * (y[i] - pred(i)).powi(2)).sum::<f64>() / n as f64
        };
        let cv_risk: Vec<f64> = (0..m).map(|j| risk(&|i| z[[i, j]])).collect();
        // Rows scaled by √w turn the weighted problem into an ordinary one.
        let zs = Array2::from_shape_fn((n, m), |(i, j)| w[i].sqrt() * z[[i, j]]);
        let ys: Vec<f64> = (0..n).map(|i| w[i].sqrt() * y[i]).collect();
        let raw = nnls(zs.view(), &ys)?;
        let ensemble = simplex_weights_with_ties(zs.view(), &ys)?;
        let stack_risk = risk(&|i| (0..m).map(|j| ensemble[j] * z[[i, j]]).sum());
        (ensemble, raw, cv_risk, stack_risk)
    };

    let members = spec
        .members
        .iter()
        .enumerate()
        .map(|(j, member)| {
            let member = member.clone().with_seed(spec.member_seed(j, 0));
            learners::fit(&member, x, y, weights)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(StackedModel {
        members,
        weights: ensemble,
        nnls_coefficients,
        cv_risk,
        stack_cv_risk,
    })
}

/// Simplex-constrained weights where exactly identical columns share their
/// group's weight equally (the solver alone would pick one arbitrarily).
pub fn simplex_weights_with_ties(z: ArrayView2<'_, f64>, y: &[f64]) -> Result<Vec<f64>> {
    let m = z.ncols();
    let mut group_of = vec![usize::MAX; m];
    let mut reps: Vec<usize> = Vec::new();
    for j in 0..m {
        if let Some(g) = reps.iter().position(|&r| z.column(r) == z.column(j)) {
            group_of[j] = g;
        } else {
            group_of[j] = reps.len();
            reps.push(j);
        }
    }
    let zr = z.select(ndarray::Axis(1), &reps);
    let group_weights = simplex_least_squares(zr.view(), y)?;
    let mut sizes = vec![0usize; reps.len()];
    for &g in &group_of {
        sizes[g] += 1;
    }
    Ok(group_of
        .iter()
        .map(|&g| group_weights[g] / sizes[g] as f64)
        .collect())
}

fn check_problem(z: ArrayView2<'_, f64>, y: &[f64]) -> Result<()> {
    if z.nrows() == 0 || z.ncols() == 0 {
        return Err(invalid_arg("empty least squares problem"));
    }
    if z.nrows() != y.len() {
        return Err(invalid_arg(format!(
            "{} rows but {} targets",
            z.nrows(),
            y.len()
        )));
    }
    if z.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid_arg("non-finite value in least squares problem"));
    }
    Ok(())
}

/// Minimum-norm least squares on the columns in `cols`.
fn least_squares(z: ArrayView2<'_, f64>, y: &[f64], cols: &[usize]) -> Result<Vec<f64>> {
    let n = z.nrows();
    let a = DMatrix::from_fn(n, cols.len(), |i, k| z[[i, cols[k]]]);
    let b = DVector::from_column_slice(y);
    let s = a
        .svd(true, true)
        .solve(&b, 1e-13)
        .map_err(|e| CateError::Estimation(format!("least squares failed: {e}")))?;
    Ok(s.iter().copied().collect())
}

fn residual_correlation(z: ArrayView2<'_, f64>, y: &[f64], beta: &[f64]) -> Vec<f64> {
    let (n, m) = z.dim();
    let r: Vec<f64> = (0..n)
        .map(|i| y[i] - (0..m).map(|j| z[[i, j]] * beta[j]).sum::<f64>())
        .collect();
    (0..m)
        .map(|j| (0..n).map(|i| z[[i, j]] * r[i]).sum())
        .collect()
}

fn kkt_tolerance(z: ArrayView2<'_, f64>, y: &[f64]) -> f64 {
    let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let yn = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    1e-12 * (1.0 + zn * yn.max(zn))
}

/// Non-negative least squares, `min ‖y − Zβ‖²` subject to `β ≥ 0`, by the
/// Lawson–Hanson active-set method.
pub fn nnls(z: ArrayView2<'_, f64>, y: &[f64]) -> Result<Vec<f64>> {
    check_problem(z, y)?;
    let m = z.ncols();
    let tol = kkt_tolerance(z, y);
    let mut x = vec![0.0; m];
    let mut passive = vec![false; m];
    let max_iter = 30 * m + 30;

    for _ in 0..max_iter {
        let w = residual_correlation(z, y, &x);
        let entering = (0..m)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]).then(b.cmp(&a)));
        let Some(t) = entering else {
            break;
        };
        passive[t] = true;
        let mut first = true;
        loop {
            let cols: Vec<usize> = (0..m).filter(|&j| passive[j]).collect();
            let sol = least_squares(z, y, &cols)?;
            let mut s = vec![0.0; m];
            for (k, &j) in cols.iter().enumerate() {
                s[j] = sol[k];
            }
            if cols.iter().all(|&j| s[j] > 0.0) {
                x = s;
                break;
            }
            if first && s[t] <= 0.0 {
                // Degenerate entering column; stop rather than cycle.
                passive[t] = false;
                return Ok(x);
            }
            first = false;
            let alpha = cols
                .iter()
                .filter(|&&j| s[j] <= 0.0)
                .map(|&j| x[j] / (x[j] - s[j]))
                .fold(f64::INFINITY, f64::min);
            for j in 0..m {
                x[j] += alpha * (s[j] - x[j]);
                if passive[j] && x[j] <= 1e-15 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    Ok(x)
}

/// Equality-constrained least squares on `cols` with `Σβ = 1`, by
/// eliminating the last column.
fn simplex_subproblem(z: ArrayView2<'_, f64>, y: &[f64], cols: &[usize]) -> Result<Vec<f64>> {
    let (&last, rest) = cols.split_last().expect("non-empty support");
    if rest.is_empty() {
        return Ok(vec![1.0]);
    }
    let n = z.nrows();
    let shifted = Array2::from_shape_fn((n, rest.len()), |(i, k)| z[[i, rest[k]]] - z[[i, last]]);
    let target: Vec<f64> = (0..n).map(|i| y[i] - z[[i, last]]).collect();
    let all: Vec<usize> = (0..rest.len()).collect();
    let mut s = least_squares(shifted.view(), &target, &all)?;
    let tail = 1.0 - s.iter().sum::<f64>();
    s.push(tail);
    Ok(s)
}

/// `min ‖y − Zβ‖²` over the probability simplex, by an active-set method
/// in the Lawson–Hanson style with the sum-to-one constraint kept in every
/// subproblem.
pub fn simplex_least_squares(z: ArrayView2<'_, f64>, y: &[f64]) -> Result<Vec<f64>> {
    check_problem(z, y)?;
    let (n, m) = z.dim();
    let tol = kkt_tolerance(z, y);
    let sse = |j: usize| (0..n).map(|i| (y[i] - z[[i, j]]).powi(2)).sum::<f64>();
    let start = (0..m)
        .min_by(|&a, &b| sse(a).total_cmp(&sse(b)).then(a.cmp(&b)))
        .expect("m >= 1");
    let mut beta = vec![0.0; m];
    beta[start] = 1.0;
    let mut passive = vec![false; m];
    passive[start] = true;

    for _ in 0..30 * m + 30 {
        let g = residual_correlation(z, y, &beta);
        let cols: Vec<usize> = (0..m).filter(|&j| passive[j]).collect();
        let level = cols.iter().map(|&j| g[j]).fold(f64::NEG_INFINITY, f64::max);
        let entering = (0..m)
            .filter(|&j| !passive[j] && g[j] - level > tol)
            .max_by(|&a, &b| g[a].total_cmp(&g[b]).then(b.cmp(&a)));
        let Some(t) = entering else {
            break;
        };
        passive[t] = true;
        let mut first = true;
        loop {
            let cols: Vec<usize> = (0..m).filter(|&j| passive[j]).collect();
            let sol = simplex_subproblem(z, y, &cols)?;
            let mut s = vec![0.0; m];
            for (k, &j) in cols.iter().enumerate() {
                s[j] = sol[k];
            }
            if cols.iter().all(|&j| s[j] > 0.0) {
                beta = s;
                break;
            }
            if first && s[t] <= 0.0 {
                passive[t] = false;
                return Ok(beta);
            }
            first = false;
            let alpha = cols
                .iter()
                .filter(|&&j| s[j] <= 0.0)
                .map(|&j| beta[j] / (beta[j] - s[j]))
                .fold(f64::INFINITY, f64::min);
            for j in 0..m {
                beta[j] += alpha * (s[j] - beta[j]);
                if passive[j] && beta[j] <= 1e-15 {
                    beta[j] = 0.0;
                    passive[j] = false;
                }
            }
            let total: f64 = beta.iter().sum();
            beta.iter_mut().for_each(|b| *b /= total);
        }
    }
    Ok(beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::Rng as _;

    use crate::rng::rng_from;

    #[test]
    fn nnls_identity() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let b = nnls(z.view(), &[3.0, 5.0]).unwrap();
        assert!((b[0] - 3.0).abs() < 1e-12 && (b[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn nnls_clips_negative_solution() {
        let z = Array2::from_elem((5, 1), 1.0);
        let b = nnls(z.view(), &[-1.0, -2.0, -3.0, -2.0, -2.0]).unwrap();
        assert_eq!(b, vec![0.0]);
    }

    #[test]
    fn nnls_rejects_non_finite() {
        let z = array![[1.0], [f64::NAN]];
        assert!(nnls(z.view(), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn simplex_solution_beats_grid() {
        let mut rng = rng_from(11);
        for _ in 0..20 {
            let z = Array2::from_shape_fn((15, 3), |_| rng.random_range(-1.0..1.0));
            let y: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = simplex_least_squares(z.view(), &y).unwrap();
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(b.iter().all(|v| *v >= 0.0));
            let obj = |b: &[f64]| -> f64 {
                (0..15)
                    .map(|i| (y[i] - (0..3).map(|j| z[[i, j]] * b[j]).sum::<f64>()).powi(2))
                    .sum()
            };
            let best = obj(&b);
            for a in 0..=100 {
                for c in 0..=(100 - a) {
                    let g = [
                        a as f64 / 100.0,
                        c as f64 / 100.0,
                        (100 - a - c) as f64 / 100.0,
                    ];
                    assert!(best <= obj(&g) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_columns_split_weight() {
        let z = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let b = simplex_weights_with_ties(z.view(), &[1.0, 2.0, 3.5]).unwrap();
        assert_eq!(b, vec![0.5, 0.5]);
    }

    #[test]
    fn single_member_gets_full_weight() {
        let x = Array2::from_shape_fn((30, 1), |(i, _)| i as f64);
        let y: Vec<f64> = (0..30).map(|i| i as f64 * 0.5).collect();
        let model = fit_stacked(
            &StackSpec::single(LearnerSpec::ridge(0.0)),
            x.view(),
            &y,
            None,
        )
        .unwrap();
        assert_eq!(model.weights(), &[1.0]);
    }

    #[test]
    fn identical_members_share_weight() {
        let mut rng = rng_from(5);
        let x = Array2::from_shape_fn((40, 2), |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..40)
            .map(|i| x[[i, 0]] + rng.random_range(-0.1..0.1))
            .collect();
        let spec =
            StackSpec::new(vec![LearnerSpec::ridge(1.0), LearnerSpec::ridge(1.0)]).with_cv_folds(5);
        let model = fit_stacked(&spec, x.view(), &y, None).unwrap();
        assert_eq!(model.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn stacked_prediction_is_weighted_sum() {
        let mut rng = rng_from(6);
        let x: Array2<f64> = Array2::from_shape_fn((60, 3), |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..60)
            .map(|i| x[[i, 0]].powi(2) + x[[i, 1]] + rng.random_range(-0.2..0.2))
            .collect();
        let spec = StackSpec::new(vec![
            LearnerSpec::ridge(0.1),
            LearnerSpec::regression_tree(Some(3), 3),
            LearnerSpec::gradient_boosting(20, 0.2, 2),
        ])
        .with_cv_folds(4);
        let model = fit_stacked(&spec, x.view(), &y, None).unwrap();
        let pred = model.predict(x.view()).unwrap();
        for i in 0..60 {
            let row = x.slice(ndarray::s![i..i + 1, ..]);
            let manual: f64 = model
                .members()
                .iter()
                .zip(model.weights())
                .map(|(m, w)| w * m.predict(row).unwrap()[0])
                .sum();
            assert!((manual - pred[i]).abs() < 1e-12);
        }
        let best_member = model
            .cv_risk()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        assert!(model.stack_cv_risk() <= best_member + 1e-8);
    }
}
