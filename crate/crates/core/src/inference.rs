//! Uncertainty and post-estimation analysis: bootstrap intervals, sorted
//! effects, CLAN group comparisons, cross-method correlation and inverse
//! propensity weighted covariate balance.

use std::path::Path;

use ndarray::ArrayView2;
use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{format_float, write_string, Dataset, FoldPlan};
use crate::error::{invalid_arg, CateError, Result};
use crate::metalearners::{CateEstimate, Method};
use crate::nuisance::quantile_sorted;
use crate::rng::{derive_seed, rng_from};

/// Share of bootstrap replicates that may fail before the whole run fails.
pub const MAX_DROPPED_SHARE: f64 = 0.10;

/// A CATE estimator that can be refit on bootstrap data.
pub trait CateProcedure: Sync {
    fn method(&self) -> Method;

    /// Point estimate on the full data.
    fn estimate(&self, data: &Dataset, plan: &FoldPlan) -> Result<CateEstimate>;

    /// Fit on `train` and predict effects at the rows of `x_new`.
    fn fit_predict(
        &self,
        train: &Dataset,
        x_new: ArrayView2<'_, f64>,
        seed: u64,
    ) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    /// `τ̂ ± z₁₋α/₂ σ̂`
    #[default]
    Normal,
    /// Empirical quantiles of the replicates, widened to contain `τ̂`.
    Percentile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub method: Method,
    pub tau_hat: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub interval: IntervalKind,
    pub replicates_requested: usize,
    pub replicates_used: usize,
    pub replicates_dropped: usize,
    pub seed: u64,
}

impl BootstrapResult {
    pub fn to_estimate(&self, base: &CateEstimate) -> Result<CateEstimate> {
        base.clone()
            .with_interval(self.lower.clone(), self.upper.clone())
    }
}

/// Two-sided standard normal quantile `z₁₋α/₂`.
pub fn normal_quantile(alpha: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - alpha / 2.0)
}

/// One replicate: per fold, resample the training complement with
/// replacement within each arm, refit, and predict the held-out fold.
fn replicate(
    proc_: &dyn CateProcedure,
    data: &Dataset,
    plan: &FoldPlan,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; data.n()];
    for (k, split) in plan.splits().into_iter().enumerate() {
        let mut rng = rng_from(derive_seed(seed, k as u64));
        let mut rows = Vec::with_capacity(split.train_indices.len());
        for arm in [0u8, 1] {
            let members = data.arm_members(&split.train_indices, arm);
            if members.is_empty() {
                return Err(CateError::Estimation(format!(
                    "fold {k} training complement lacks arm {arm}"
                )));
            }
            rows.extend(
                (0..members.len()).map(|_| *members.choose(&mut rng).expect("non-empty arm")),
            );
        }
        let train = data.subset(&rows)?;
        let pred = proc_.fit_predict(
            &train,
            data.x_rows(&split.estimate_indices).view(),
            derive_seed(seed, 100 + k as u64),
        )?;
        if pred.len() != split.estimate_indices.len() || pred.iter().any(|v| !v.is_finite()) {
            return Err(CateError::Estimation(format!(
                "fold {k}: invalid replicate predictions"
            )));
        }
        for (&i, v) in split.estimate_indices.iter().zip(pred) {
            out[i] = v;
        }
    }
    Ok(out)
}

pub fn bootstrap_ci(
    proc_: &dyn CateProcedure,
    data: &Dataset,
    plan: &FoldPlan,
    replicates: usize,
    alpha: f64,
    seed: u64,
    interval: IntervalKind,
) -> Result<BootstrapResult> {
    let point = proc_.estimate(data, plan)?;
    bootstrap_around(
        proc_,
        &point.tau_hat,
        data,
        plan,
        replicates,
        alpha,
        seed,
        interval,
    )
}

/// Bootstrap intervals around an already computed point estimate.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_around(
    proc_: &dyn CateProcedure,
    tau_hat: &[f64],
    data: &Dataset,
    plan: &FoldPlan,
    replicates: usize,
    alpha: f64,
    seed: u64,
    interval: IntervalKind,
) -> Result<BootstrapResult> {
    if replicates < 2 {
        return Err(invalid_arg(format!(
            "need at least 2 bootstrap replicates, got {replicates}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid_arg(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if tau_hat.len() != data.n() {
        return Err(CateError::DimensionMismatch {
            expected: data.n(),
            got: tau_hat.len(),
        });
    }
    let runs: Vec<Result<Vec<f64>>> = (0..replicates as u64)
        .into_par_iter()
        .map(|b| replicate(proc_, data, plan, derive_seed(seed, b)))
        .collect();
    let mut draws = Vec::with_capacity(replicates);
    let mut dropped = 0;
    for (b, r) in runs.into_iter().enumerate() {
        match r {
            Ok(v) => draws.push(v),
            Err(e) => {
                log::warn!("bootstrap replicate {b} dropped: {e}");
                dropped += 1;
            }
        }
    }
    if dropped as f64 > MAX_DROPPED_SHARE * replicates as f64 {
        return Err(CateError::Estimation(format!(
            "{dropped} of {replicates} bootstrap replicates failed (limit {:.0}%)",
            MAX_DROPPED_SHARE * 100.0
        )));
    }
    let used = draws.len();
    if used < 2 {
        return Err(CateError::Estimation(
            "fewer than 2 bootstrap replicates succeeded".into(),
        ));
    }
    let n = data.n();
    let z = normal_quantile(alpha);
    let mut sigma = vec![0.0; n];
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut col = vec![0.0; used];
    for i in 0..n {
        for (b, d) in draws.iter().enumerate() {
            col[b] = d[i];
        }
        let mean = col.iter().sum::<f64>() / used as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (used as f64 - 1.0);
        sigma[i] = var.sqrt();
        match interval {
            IntervalKind::Normal => {
                lower[i] = tau_hat[i] - z * sigma[i];
                upper[i] = tau_hat[i] + z * sigma[i];
            }
            IntervalKind::Percentile => {
                col.sort_by(f64::total_cmp);
                lower[i] = quantile_sorted(&col, alpha / 2.0).min(tau_hat[i]);
                upper[i] = quantile_sorted(&col, 1.0 - alpha / 2.0).max(tau_hat[i]);
            }
        }
    }
    Ok(BootstrapResult {
        method: proc_.method(),
        tau_hat: tau_hat.to_vec(),
        sigma_hat: sigma,
        lower,
        upper,
        alpha,
        interval,
        replicates_requested: replicates,
        replicates_used: used,
        replicates_dropped: dropped,
        seed,
    })
}

/// Row indices ordered by estimate, ties by index.
fn ranked(tau: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..tau.len()).collect();
    idx.sort_by(|&a, &b| tau[a].total_cmp(&tau[b]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortedEffect {
    pub rank: usize,
    pub id: usize,
    pub tau_hat: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

pub fn sorted_effects(cate: &CateEstimate) -> Vec<SortedEffect> {
    ranked(&cate.tau_hat)
        .into_iter()
        .enumerate()
        .map(|(rank, id)| SortedEffect {
            rank: rank + 1,
            id,
            tau_hat: cate.tau_hat[id],
            lower: cate.lower.as_ref().map(|v| v[id]),
            upper: cate.upper.as_ref().map(|v| v[id]),
        })
        .collect()
}

/// Long-format table `method, rank, id, tau_hat[, lower, upper]`; bound
/// columns appear only if every estimate has an interval.
pub fn write_sorted_effects_csv(cates: &[CateEstimate], path: impl AsRef<Path>) -> Result<()> {
    let bounds = !cates.is_empty() && cates.iter().all(|c| c.lower.is_some());
    let mut out = String::from(if bounds {
        "method,rank,id,tau_hat,lower,upper\n"
    } else {
        "method,rank,id,tau_hat\n"
    });
    for c in cates {
        for r in sorted_effects(c) {
            out.push_str(&format!(
                "{},{},{},{}",
                c.method,
                r.rank,
                r.id,
                format_float(r.tau_hat)
            ));
            if bounds {
                out.push_str(&format!(
                    ",{},{}",
                    format_float(r.lower.unwrap_or(f64::NAN)),
                    format_float(r.upper.unwrap_or(f64::NAN))
                ));
            }
            out.push('\n');
        }
    }
    write_string(path.as_ref(), &out)
}

fn group_size(n: usize, q: f64) -> Result<usize> {
    if !(q > 0.0 && q <= 0.5) {
        return Err(invalid_arg(format!(
            "quantile fraction must lie in (0, 0.5], got {q}"
        )));
    }
    Ok((q * n as f64 + 1e-9).floor() as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClanRow {
    pub covariate: String,
    pub mean_least: f64,
    pub mean_most: f64,
    /// `mean_most − mean_least`.
    pub difference: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClanReport {
    pub method: Method,
    pub q: f64,
    pub gamma: f64,
    pub least: Vec<usize>,
    pub most: Vec<usize>,
    pub rows: Vec<ClanRow>,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (
        m,
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0),
    )
}

/// Compare covariate means between the bottom and top `q` shares of `τ̂`
/// with Welch standard errors and normal `gamma`-level intervals.
pub fn clan(cate: &CateEstimate, data: &Dataset, q: f64, gamma: f64) -> Result<ClanReport> {
    if cate.len() != data.n() {
        return Err(CateError::DimensionMismatch {
            expected: data.n(),
            got: cate.len(),
        });
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid_arg(format!(
            "confidence level must lie in (0, 1), got {gamma}"
        )));
    }
    let m = group_size(data.n(), q)?;
    if m < 2 {
        return Err(invalid_arg(format!(
            "CLAN groups need at least 2 rows, got {m}"
        )));
    }
    let order = ranked(&cate.tau_hat);
    let least = order[..m].to_vec();
    let most = order[order.len() - m..].to_vec();
    let z = normal_quantile(1.0 - gamma);
    let phi = Normal::standard();
    let x = data.x();
    let rows = data
        .feature_names()
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let a: Vec<f64> = least.iter().map(|&i| x[[i, j]]).collect();
            let b: Vec<f64> = most.iter().map(|&i| x[[i, j]]).collect();
            let (ma, va) = mean_var(&a);
            let (mb, vb) = mean_var(&b);
            let diff = mb - ma;
            let se = (va / m as f64 + vb / m as f64).sqrt();
            let p_value = if se > 0.0 {
                2.0 * (1.0 - phi.cdf((diff / se).abs()))
            } else if diff == 0.0 {
                1.0
            } else {
                0.0
            };
            ClanRow {
                covariate: name.clone(),
                mean_least: ma,
                mean_most: mb,
                difference: diff,
                std_error: se,
                ci_lower: diff - z * se,
                ci_upper: diff + z * se,
                p_value,
            }
        })
        .collect();
    Ok(ClanReport {
        method: cate.method,
        q,
        gamma,
        least,
        most,
        rows,
    })
}

pub fn write_clan_csv(reports: &[ClanReport], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from(
        "method,covariate,mean_least,mean_most,difference,std_error,ci_lower,ci_upper,p_value\n",
    );
    for r in reports {
        for row in &r.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.method,
                row.covariate,
                format_float(row.mean_least),
                format_float(row.mean_most),
                format_float(row.difference),
                format_float(row.std_error),
                format_float(row.ci_lower),
                format_float(row.ci_upper),
                format_float(row.p_value)
            ));
        }
    }
    write_string(path.as_ref(), &out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub methods: Vec<Method>,
    /// `None` where a vector has zero variance.
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn method_correlation(cates: &[CateEstimate]) -> Result<CorrelationMatrix> {
    if cates.len() < 2 {
        return Err(invalid_arg("correlation needs at least two estimates"));
    }
    let n = cates[0].len();
    if let Some(c) = cates.iter().find(|c| c.len() != n) {
        return Err(CateError::DimensionMismatch {
            expected: n,
            got: c.len(),
        });
    }
    let k = cates.len();
    let mut values = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i..k {
            let r = if i == j {
                pearson(&cates[i].tau_hat, &cates[i].tau_hat).map(|_| 1.0)
            } else {
                pearson(&cates[i].tau_hat, &cates[j].tau_hat)
            };
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        methods: cates.iter().map(|c| c.method).collect(),
        values,
    })
}

/// Square table with a `method` column; undefined entries are written as `NA`.
pub fn write_correlation_csv(m: &CorrelationMatrix, path: impl AsRef<Path>) -> Result<()> {
    let names: Vec<String> = m.methods.iter().map(|x| x.to_string()).collect();
    let mut out = format!("method,{}\n", names.join(","));
    for (i, row) in m.values.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .map(|v| v.map(format_float).unwrap_or_else(|| "NA".into()))
            .collect();
        out.push_str(&format!("{},{}\n", names[i], cells.join(",")));
    }
    write_string(path.as_ref(), &out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub covariate: String,
    pub mean_treated: f64,
    pub mean_control: f64,
    pub weighted_mean_treated: f64,
    pub weighted_mean_control: f64,
    pub smd_before: f64,
    pub smd_after: f64,
}

/// Raw and inverse-propensity weighted (normalized) arm means per covariate.
/// Both standardized differences divide by the unweighted pooled SD
/// `√((s₁² + s₀²)/2)`; a constant covariate gets 0.
pub fn ipw_balance(data: &Dataset, e_hat: &[f64]) -> Result<Vec<BalanceRow>> {
    if e_hat.len() != data.n() {
        return Err(CateError::DimensionMismatch {
            expected: data.n(),
            got: e_hat.len(),
        });
    }
    if e_hat.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
        return Err(invalid_arg(
            "propensity scores must lie strictly inside (0, 1)",
        ));
    }
    let all: Vec<usize> = (0..data.n()).collect();
    let t = data.arm_members(&all, 1);
    let c = data.arm_members(&all, 0);
    let x = data.x();
    let weighted = |rows: &[usize], j: usize, w: &dyn Fn(usize) -> f64| {
        let (mut s, mut sw) = (0.0, 0.0);
        for &i in rows {
            s += w(i) * x[[i, j]];
            sw += w(i);
        }
        s / sw
    };
    Ok(data
        .feature_names()
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let xt: Vec<f64> = t.iter().map(|&i| x[[i, j]]).collect();
            let xc: Vec<f64> = c.iter().map(|&i| x[[i, j]]).collect();
            let (mt, vt) = mean_var(&xt);
            let (mc, vc) = mean_var(&xc);
            let wt = weighted(&t, j, &|i| 1.0 / e_hat[i]);
            let wc = weighted(&c, j, &|i| 1.0 / (1.0 - e_hat[i]));
            let sd = ((vt.max(0.0) + vc.max(0.0)) / 2.0).sqrt();
            let smd = |d: f64| {
                if sd > 0.0 && sd.is_finite() {
                    d / sd
                } else {
                    0.0
                }
            };
            BalanceRow {
                covariate: name.clone(),
                mean_treated: mt,
                mean_control: mc,
                weighted_mean_treated: wt,
                weighted_mean_control: wc,
                smd_before: smd(mt - mc),
                smd_after: smd(wt - wc),
            }
        })
        .collect())
}

pub fn write_balance_csv(rows: &[BalanceRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from(
        "covariate,mean_treated,mean_control,weighted_mean_treated,weighted_mean_control,smd_before,smd_after\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.covariate,
            format_float(r.mean_treated),
            format_float(r.mean_control),
            format_float(r.weighted_mean_treated),
            format_float(r.weighted_mean_control),
            format_float(r.smd_before),
            format_float(r.smd_after)
        ));
    }
    write_string(path.as_ref(), &out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteSummary {
    pub ate: f64,
    pub least_mean: f64,
    pub most_mean: f64,
    pub q: f64,
}

pub fn ate_summary(cate: &CateEstimate, q: f64) -> Result<AteSummary> {
    let n = cate.len();
    let m = group_size(n, q)?.max(1);
    let order = ranked(&cate.tau_hat);
    let mean_of =
        |idx: &[usize]| idx.iter().map(|&i| cate.tau_hat[i]).sum::<f64>() / idx.len() as f64;
    Ok(AteSummary {
        ate: cate.ate(),
        least_mean: mean_of(&order[..m]),
        most_mean: mean_of(&order[n - m..]),
        q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn est(tau: Vec<f64>, method: Method) -> CateEstimate {
        CateEstimate::new(tau, method, 0, String::new()).unwrap()
    }

    fn data_with(x: Array2<f64>) -> Dataset {
        let n = x.nrows();
        let names = (0..x.ncols()).map(|j| format!("x{}", j + 1)).collect();
        Dataset::new(
            vec![0.0; n],
            (0..n).map(|i| (i % 2) as u8).collect(),
            x,
            names,
        )
        .unwrap()
    }

    struct Constant(f64);

    impl CateProcedure for Constant {
        fn method(&self) -> Method {
            Method::T
        }
        fn estimate(&self, data: &Dataset, _: &FoldPlan) -> Result<CateEstimate> {
            Ok(est(vec![self.0; data.n()], Method::T))
        }
        fn fit_predict(&self, _: &Dataset, x: ArrayView2<'_, f64>, _: u64) -> Result<Vec<f64>> {
            Ok(vec![self.0; x.nrows()])
        }
    }

    /// Predicts the training mean outcome; fails when the seed is divisible by `fail_every`.
    struct MeanY {
        fail_every: u64,
    }

    impl CateProcedure for MeanY {
        fn method(&self) -> Method {
            Method::S
        }
        fn estimate(&self, data: &Dataset, _: &FoldPlan) -> Result<CateEstimate> {
            let m = data.y().iter().sum::<f64>() / data.n() as f64;
            Ok(est(vec![m; data.n()], Method::S))
        }
        fn fit_predict(
            &self,
            train: &Dataset,
            x: ArrayView2<'_, f64>,
            seed: u64,
        ) -> Result<Vec<f64>> {
            if self.fail_every > 0 && seed % self.fail_every == 0 {
                return Err(CateError::Estimation("synthetic failure".into()));
            }
            let m = train.y().iter().sum::<f64>() / train.n() as f64;
            Ok(vec![m; x.nrows()])
        }
    }

    fn noisy(n: usize) -> Dataset {
        let x: Array2<f64> = Array2::from_shape_fn((n, 2), |(i, j)| ((i * (j + 2)) % 13) as f64);
        let y = (0..n).map(|i| ((i * 7919) % 101) as f64 / 10.0).collect();
        Dataset::new(
            y,
            (0..n).map(|i| (i % 2) as u8).collect(),
            x,
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn constant_estimator_collapses_interval() {
        let data = noisy(40);
        let plan = crate::make_folds(40, 5, 1).unwrap();
        let r = bootstrap_ci(
            &Constant(2.0),
            &data,
            &plan,
            20,
            0.05,
            3,
            IntervalKind::Normal,
        )
        .unwrap();
        assert!(r.sigma_hat.iter().all(|&s| s == 0.0));
        assert!(r.lower.iter().chain(&r.upper).all(|&v| v == 2.0));
    }

    #[test]
    fn normal_multiplier() {
        assert!((normal_quantile(0.05) - 1.959964).abs() < 1e-6);
    }

    #[test]
    fn bootstrap_is_deterministic_and_nested_in_alpha() {
        let data = noisy(60);
        let plan = crate::make_folds(60, 5, 1).unwrap();
        let p = MeanY { fail_every: 0 };
        let a = bootstrap_ci(&p, &data, &plan, 30, 0.05, 7, IntervalKind::Normal).unwrap();
        let b = bootstrap_ci(&p, &data, &plan, 30, 0.05, 7, IntervalKind::Normal).unwrap();
        assert_eq!(a.sigma_hat, b.sigma_hat);
        assert!(a.sigma_hat.iter().all(|&s| s > 0.0));
        let narrow = bootstrap_ci(&p, &data, &plan, 30, 0.2, 7, IntervalKind::Normal).unwrap();
        for i in 0..60 {
            assert!(a.lower[i] <= narrow.lower[i] && narrow.upper[i] <= a.upper[i]);
        }
        let pct = bootstrap_ci(&p, &data, &plan, 30, 0.05, 7, IntervalKind::Percentile).unwrap();
        for i in 0..60 {
            assert!(pct.lower[i] <= pct.tau_hat[i] && pct.tau_hat[i] <= pct.upper[i]);
        }
    }

    #[test]
    fn dropped_replicates_are_counted_and_capped() {
        let data = noisy(40);
        let plan = crate::make_folds(40, 2, 1).unwrap();
        // Replicate seeds are hashed, so divisibility picks an arbitrary subset.
        let few = bootstrap_ci(
            &MeanY { fail_every: 1 },
            &data,
            &plan,
            10,
            0.05,
            1,
            IntervalKind::Normal,
        );
        assert!(few.is_err());
        let r = bootstrap_ci(
            &MeanY { fail_every: 97 },
            &data,
            &plan,
            200,
            0.05,
            1,
            IntervalKind::Normal,
        )
        .unwrap();
        assert_eq!(r.replicates_used + r.replicates_dropped, 200);
        assert!(r.replicates_dropped > 0);
        assert!(bootstrap_ci(
            &MeanY { fail_every: 0 },
            &data,
            &plan,
            1,
            0.05,
            1,
            IntervalKind::Normal
        )
        .is_err());
        assert!(bootstrap_ci(
            &MeanY { fail_every: 0 },
            &data,
            &plan,
            5,
            1.0,
            1,
            IntervalKind::Normal
        )
        .is_err());
    }

    #[test]
    fn sorted_effects_examples() {
        let s = sorted_effects(&est(vec![3.0, 1.0, 2.0], Method::T));
        assert_eq!(
            s.iter().map(|r| r.tau_hat).collect::<Vec<_>>(),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(s.iter().map(|r| r.id).collect::<Vec<_>>(), vec![1, 2, 0]);
        let s = sorted_effects(&est(vec![5.0; 4], Method::T));
        assert_eq!(s.iter().map(|r| r.id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn clan_examples() {
        let n = 100;
        let tau: Vec<f64> = (0..n).map(|i| ((i * 37) % 100) as f64).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { 1.0 } else { tau[i] });
        let data = data_with(x);
        let r = clan(&est(tau, Method::DR), &data, 0.2, 0.9).unwrap();
        assert_eq!((r.least.len(), r.most.len()), (20, 20));
        assert!(r.least.iter().all(|i| !r.most.contains(i)));
        assert_eq!(r.rows[0].difference, 0.0);
        assert_eq!(r.rows[0].p_value, 1.0);
        assert!(r.rows[1].difference > 0.0 && r.rows[1].p_value < 0.01);
        assert!(clan(&est(vec![1.0; n], Method::DR), &data, 0.6, 0.9).is_err());
        assert!(clan(&est(vec![1.0; n], Method::DR), &data, 0.01, 0.9).is_err());
    }

    #[test]
    fn correlation_examples() {
        let a: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v + 5.0).collect();
        let c: Vec<f64> = a.iter().map(|v| -v).collect();
        let m = method_correlation(&[
            est(a, Method::T),
            est(b, Method::X),
            est(c, Method::DR),
            est(vec![1.0; 20], Method::R),
        ])
        .unwrap();
        assert_eq!(m.values[0][0], Some(1.0));
        assert!((m.values[0][1].unwrap() - 1.0).abs() < 1e-12);
        assert!((m.values[0][2].unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(m.values[0][3], None);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.values[i][j], m.values[j][i]);
            }
        }
    }

    #[test]
    fn balance_examples() {
        let n = 40;
        let x = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { 3.0 } else { (i % 7) as f64 });
        let data = data_with(x);
        let rows = ipw_balance(&data, &vec![0.5; n]).unwrap();
        assert_eq!((rows[0].smd_before, rows[0].smd_after), (0.0, 0.0));
        assert!((rows[1].weighted_mean_treated - rows[1].mean_treated).abs() < 1e-12);
        assert!((rows[1].weighted_mean_control - rows[1].mean_control).abs() < 1e-12);
    }

    #[test]
    fn ate_summary_examples() {
        let s = ate_summary(&est((1..=10).map(f64::from).collect(), Method::T), 0.2).unwrap();
        assert_eq!((s.least_mean, s.ate, s.most_mean), (1.5, 5.5, 9.5));
        let s = ate_summary(&est(vec![2.0; 7], Method::T), 0.2).unwrap();
        assert_eq!((s.least_mean, s.ate, s.most_mean), (2.0, 2.0, 2.0));
    }
}
