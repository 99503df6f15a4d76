//! Meta-learners: pseudo-outcome construction and second-stage regressions.
//!
//! | learner | first stage | pseudo-outcome / estimate |
//! |---|---|---|
//! | S | `μ(x, d)` | `μ̂(x,1) − μ̂(x,0)` |
//! | T | `μ₀`, `μ₁` | `μ̂₁ − μ̂₀` |
//! | X | `μ₀`, `μ₁`, `e` | `ê·τ̂₀ + (1−ê)·τ̂₁` |
//! | DR | `μ₀`, `μ₁`, `e` | `μ̂₁ − μ̂₀ + D(Y−μ̂₁)/ê − (1−D)(Y−μ̂₀)/(1−ê)` |
//! | R | `μ`, `e` | `(Y−μ̂)/(D−ê)` with weight `(D−ê)²` |
//! | IPW | `e` | `DY/ê − (1−D)Y/(1−ê)` |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{format_float, make_folds, read_table, write_string, Dataset, FoldPlan};
use crate::error::{invalid_arg, invalid_data, CateError, Result};
use crate::nuisance::NuisanceEstimates;
use crate::rng::{derive_path, derive_seed};
use crate::stacking::{fit_stacked, StackSpec, StackedModel};

/// Sub-folds per half in the cross-fitted second stage.
pub const SECOND_STAGE_FOLDS: usize = 5;
/// Below this many rows the cross-fitted second stage falls back to an in-sample fit.
pub const MIN_CROSSFIT_ROWS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    S,
    T,
    X,
    DR,
    R,
    IPW,
    CF,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::S,
        Method::T,
        Method::X,
        Method::DR,
        Method::R,
        Method::IPW,
        Method::CF,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::S => "S",
            Method::T => "T",
            Method::X => "X",
            Method::DR => "DR",
            Method::R => "R",
            Method::IPW => "IPW",
            Method::CF => "CF",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = CateError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                invalid_arg(format!(
                    "unknown method '{s}' (expected one of S, T, X, DR, R, IPW, CF)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PseudoKind {
    S,
    T,
    X0,
    X1,
    DR,
    R,
    IPW,
}

impl PseudoKind {
    fn method(self) -> Method {
        match self {
            PseudoKind::S => Method::S,
            PseudoKind::T => Method::T,
            PseudoKind::X0 | PseudoKind::X1 => Method::X,
            PseudoKind::DR => Method::DR,
            PseudoKind::R => Method::R,
            PseudoKind::IPW => Method::IPW,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOutcome {
    pub psi: Vec<f64>,
    pub weights: Vec<f64>,
    pub kind: PseudoKind,
}

impl PseudoOutcome {
    pub fn new(psi: Vec<f64>, weights: Vec<f64>, kind: PseudoKind) -> Result<Self> {
        if psi.len() != weights.len() {
            return Err(CateError::DimensionMismatch {
                expected: psi.len(),
                got: weights.len(),
            });
        }
        if let Some(i) = psi.iter().position(|v| !v.is_finite()) {
            return Err(CateError::Estimation(format!(
                "non-finite pseudo-outcome at row {}",
                i + 1
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(CateError::Estimation(
                "pseudo-outcome weights must be finite and nonnegative".into(),
            ));
        }
        Ok(PseudoOutcome { psi, weights, kind })
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.psi.iter().sum::<f64>() / self.psi.len() as f64
    }

    fn unit_weights(&self) -> bool {
        self.weights.iter().all(|&w| w == 1.0)
    }

    fn subset(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        (
            idx.iter().map(|&i| self.psi[i]).collect(),
            idx.iter().map(|&i| self.weights[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateEstimate {
    pub tau_hat: Vec<f64>,
    pub method: Method,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub seed: u64,
    /// Hex SHA-256 of the configuration that produced the estimate.
    pub fingerprint: String,
}

pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).unwrap_or_default();
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl CateEstimate {
    pub fn new(tau_hat: Vec<f64>, method: Method, seed: u64, fingerprint: String) -> Result<Self> {
        if let Some(i) = tau_hat.iter().position(|v| !v.is_finite()) {
            return Err(CateError::Estimation(format!(
                "{method}: non-finite estimate at row {}",
                i + 1
            )));
        }
        Ok(CateEstimate {
            tau_hat,
            method,
            lower: None,
            upper: None,
            seed,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.tau_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau_hat.is_empty()
    }

    pub fn ate(&self) -> f64 {
        self.tau_hat.iter().sum::<f64>() / self.tau_hat.len() as f64
    }

    pub fn with_interval(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let n = self.len();
        if lower.len() != n || upper.len() != n {
            return Err(CateError::DimensionMismatch {
                expected: n,
                got: lower.len().min(upper.len()),
            });
        }
        for i in 0..n {
            if !(lower[i] <= self.tau_hat[i] && self.tau_hat[i] <= upper[i]) {
                return Err(CateError::Estimation(format!(
                    "interval [{}, {}] does not contain estimate {} at row {}",
                    lower[i],
                    upper[i],
                    self.tau_hat[i],
                    i + 1
                )));
            }
        }
        self.lower = Some(lower);
        self.upper = Some(upper);
        Ok(self)
    }

    /// CSV with columns `id, tau_hat, lower, upper, method`; bounds are empty when absent.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("id,tau_hat,lower,upper,method\n");
        for i in 0..self.len() {
            let bound =
                |b: &Option<Vec<f64>>| b.as_ref().map(|v| format_float(v[i])).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i,
                format_float(self.tau_hat[i]),
                bound(&self.lower),
                bound(&self.upper),
                self.method
            ));
        }
        write_string(path.as_ref(), &out)
    }

    /// Inverse of [`CateEstimate::write_csv`]; seed and fingerprint are not stored in the file.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let table = read_table(path)?;
        let tau = table.column_f64("tau_hat")?;
        let methods = table.column_str("method")?;
        let method = match methods.first() {
            Some(m) => m.parse()?,
            None => return Err(invalid_data("CATE file has no rows")),
        };
        let ids = table.column_f64("id")?;
        if ids.iter().enumerate().any(|(i, &v)| v != i as f64) {
            return Err(invalid_data("CATE file ids must be 0..n in order"));
        }
        let mut est = CateEstimate::new(tau, method, 0, String::new())?;
        let lower = table.column_str("lower")?;
        if lower.iter().all(|s| !s.is_empty()) {
            est = est.with_interval(table.column_f64("lower")?, table.column_f64("upper")?)?;
        }
        Ok(est)
    }
}

fn check_nuisance(data: &Dataset, nuis: &NuisanceEstimates) -> Result<()> {
    if nuis.n() != data.n() {
        return Err(CateError::DimensionMismatch {
            expected: data.n(),
            got: nuis.n(),
        });
    }
    if nuis.e_hat.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
        return Err(invalid_arg(
            "propensity scores must lie strictly inside (0, 1); clip them first",
        ));
    }
    Ok(())
}

pub fn dr_pseudo(data: &Dataset, nuis: &NuisanceEstimates) -> Result<PseudoOutcome> {
    check_nuisance(data, nuis)?;
    let psi = (0..data.n())
        .map(|i| {
            let (y, e, m0, m1) = (data.y()[i], nuis.e_hat[i], nuis.mu0_hat[i], nuis.mu1_hat[i]);
            if data.d()[i] == 1 {
                m1 - m0 + (y - m1) / e
            } else {
                m1 - m0 - (y - m0) / (1.0 - e)
            }
        })
        .collect();
    PseudoOutcome::new(psi, vec![1.0; data.n()], PseudoKind::DR)
}

pub fn r_pseudo(data: &Dataset, nuis: &NuisanceEstimates) -> Result<PseudoOutcome> {
    check_nuisance(data, nuis)?;
    let d = data.d_f64();
    let mut psi = Vec::with_capacity(data.n());
    let mut w = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let dr = d[i] - nuis.e_hat[i];
        psi.push((data.y()[i] - nuis.mu_hat[i]) / dr);
        w.push(dr * dr);
    }
    PseudoOutcome::new(psi, w, PseudoKind::R)
}

pub fn ipw_pseudo(data: &Dataset, nuis: &NuisanceEstimates) -> Result<PseudoOutcome> {
    check_nuisance(data, nuis)?;
    let psi = (0..data.n())
        .map(|i| {
            let (y, e) = (data.y()[i], nuis.e_hat[i]);
            if data.d()[i] == 1 {
                y / e
            } else {
                -y / (1.0 - e)
            }
        })
        .collect();
    PseudoOutcome::new(psi, vec![1.0; data.n()], PseudoKind::IPW)
}

/// Imputed effects `Y − μ̂₀(x)` for treated rows and `μ̂₁(x) − Y` for controls.
pub fn x_pseudo(
    data: &Dataset,
    nuis: &NuisanceEstimates,
) -> Result<(PseudoOutcome, PseudoOutcome)> {
    check_nuisance(data, nuis)?;
    let n = data.n();
    let mut psi1 = vec![0.0; n];
    let mut psi0 = vec![0.0; n];
    let mut w1 = vec![0.0; n];
    let mut w0 = vec![0.0; n];
    for i in 0..n {
        if data.d()[i] == 1 {
            psi1[i] = data.y()[i] - nuis.mu0_hat[i];
            w1[i] = 1.0;
        } else {
            psi0[i] = nuis.mu1_hat[i] - data.y()[i];
            w0[i] = 1.0;
        }
    }
    Ok((
        PseudoOutcome::new(psi0, w0, PseudoKind::X0)?,
        PseudoOutcome::new(psi1, w1, PseudoKind::X1)?,
    ))
}

/// Stacked regression of `ψ` on `x` over all rows with positive weight.
pub fn fit_pseudo_model(
    pseudo: &PseudoOutcome,
    x: ArrayView2<'_, f64>,
    spec: &StackSpec,
) -> Result<StackedModel> {
    check_second_stage(pseudo, x)?;
    let all: Vec<usize> = (0..pseudo.len()).collect();
    fit_rows(pseudo, x, &all, spec)
}

/// Stacked regression of `ψ` on `x` restricted to `rows`, with positive-weight rows only.
fn fit_rows(
    pseudo: &PseudoOutcome,
    x: ArrayView2<'_, f64>,
    rows: &[usize],
    spec: &StackSpec,
) -> Result<StackedModel> {
    let rows: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&i| pseudo.weights[i] > 0.0)
        .collect();
    if rows.is_empty() {
        return Err(CateError::Estimation(format!(
            "{:?} second stage has no rows with positive weight",
            pseudo.kind
        )));
    }
    let (psi, w) = pseudo.subset(&rows);
    let xs = x.select(Axis(0), &rows);
    let weights = if pseudo.unit_weights() {
        None
    } else {
        Some(w.as_slice())
    };
    fit_stacked(spec, xs.view(), &psi, weights)
}

fn check_second_stage(pseudo: &PseudoOutcome, x: ArrayView2<'_, f64>) -> Result<()> {
    if pseudo.len() != x.nrows() {
        return Err(CateError::DimensionMismatch {
            expected: x.nrows(),
            got: pseudo.len(),
        });
    }
    Ok(())
}

/// One fit of `ψ` on all rows, predicted on all rows.
pub fn in_sample_second_stage(
    pseudo: &PseudoOutcome,
    x: ArrayView2<'_, f64>,
    t_spec: &StackSpec,
) -> Result<CateEstimate> {
    check_second_stage(pseudo, x)?;
    let all: Vec<usize> = (0..pseudo.len()).collect();
    let model = fit_rows(pseudo, x, &all, t_spec)?;
    CateEstimate::new(
        model.predict(x)?,
        pseudo.kind.method(),
        t_spec.seed,
        fingerprint(&("in_sample", pseudo.kind, t_spec)),
    )
}

/// Per-observation record of the cross-fitted second stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondStageTrace {
    /// Half (0 or 1) each row belongs to; rows are predicted by models fit on the other half.
    pub half_of: Vec<usize>,
    /// The sub-fold model outputs averaged into each row's estimate.
    pub model_outputs: Vec<Vec<f64>>,
}

/// Two-step cross-fitted second stage: split rows into random halves A and
/// B, cut A into five sub-folds, fit one regression per sub-fold, average
/// their predictions on B, then swap the halves.
pub fn second_stage_crossfit(
    pseudo: &PseudoOutcome,
    x: ArrayView2<'_, f64>,
    t_spec: &StackSpec,
    seed: u64,
) -> Result<CateEstimate> {
    second_stage_crossfit_traced(pseudo, x, t_spec, seed).map(|(est, _)| est)
}

pub fn second_stage_crossfit_traced(
    pseudo: &PseudoOutcome,
    x: ArrayView2<'_, f64>,
    t_spec: &StackSpec,
    seed: u64,
) -> Result<(CateEstimate, SecondStageTrace)> {
    check_second_stage(pseudo, x)?;
    let n = pseudo.len();
    if n < MIN_CROSSFIT_ROWS {
        log::warn!("second stage: n = {n} < {MIN_CROSSFIT_ROWS}, using an in-sample fit");
        let est = in_sample_second_stage(pseudo, x, t_spec)?;
        let trace = SecondStageTrace {
            half_of: vec![0; n],
            model_outputs: est.tau_hat.iter().map(|&v| vec![v]).collect(),
        };
        return Ok((est, trace));
    }
    let halves = make_folds(n, 2, derive_seed(seed, 0x4841))?;
    let members = [halves.members(0), halves.members(1)];

    let jobs: Vec<(usize, usize)> = (0..2)
        .flat_map(|h| (0..SECOND_STAGE_FOLDS).map(move |l| (h, l)))
        .collect();
    let preds: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(h, l)| -> Result<Vec<f64>> {
            let train_half = &members[h];
            let sub = make_folds(
                train_half.len(),
                SECOND_STAGE_FOLDS,
                derive_path(seed, &[0x5346, h as u64]),
            )?;
            let rows: Vec<usize> = sub.members(l).into_iter().map(|j| train_half[j]).collect();
            let spec = t_spec
                .clone()
                .with_seed(derive_path(t_spec.seed, &[seed, h as u64, l as u64]));
            let model = fit_rows(pseudo, x, &rows, &spec)?;
            model.predict(x.select(Axis(0), &members[1 - h]).view())
        })
        .collect::<Result<_>>()?;

    let mut tau = vec![0.0; n];
    let mut half_of = vec![0; n];
    let mut outputs = vec![Vec::with_capacity(SECOND_STAGE_FOLDS); n];
    for (job, &(h, _)) in jobs.iter().enumerate() {
        for (pos, &i) in members[1 - h].iter().enumerate() {
            outputs[i].push(preds[job][pos]);
            half_of[i] = 1 - h;
        }
    }
    for i in 0..n {
        tau[i] = outputs[i].iter().sum::<f64>() / outputs[i].len() as f64;
    }
    let est = CateEstimate::new(
        tau,
        pseudo.kind.method(),
        seed,
        fingerprint(&("crossfit", pseudo.kind, t_spec, seed)),
    )?;
    Ok((
        est,
        SecondStageTrace {
            half_of,
            model_outputs: outputs,
        },
    ))
}

fn check_plan(data: &Dataset, plan: &FoldPlan) -> Result<()> {
    if plan.n() != data.n() {
        return Err(invalid_arg(format!(
            "fold plan covers {} rows, data has {}",
            plan.n(),
            data.n()
        )));
    }
    Ok(())
}

/// `μ̂(x, d)` fit with `D` appended as the last covariate, differenced at `d = 1` and `d = 0`.
pub fn s_learner(data: &Dataset, plan: &FoldPlan, mu_spec: &StackSpec) -> Result<CateEstimate> {
    check_plan(data, plan)?;
    let d = Array2::from_shape_vec((data.n(), 1), data.d_f64()).expect("column shape");
    let xd = concatenate(Axis(1), &[data.x(), d.view()]).expect("aligned rows");
    let folds: Vec<(Vec<usize>, Vec<f64>)> = plan
        .splits()
        .into_par_iter()
        .enumerate()
        .map(|(k, split)| -> Result<(Vec<usize>, Vec<f64>)> {
            let spec = mu_spec
                .clone()
                .with_seed(derive_path(mu_spec.seed, &[k as u64, 5]));
            let model = fit_stacked(
                &spec,
                xd.select(Axis(0), &split.train_indices).view(),
                &data.y_rows(&split.train_indices),
                None,
            )?;
            let mut xe = xd.select(Axis(0), &split.estimate_indices);
            let last = xe.ncols() - 1;
            xe.column_mut(last).fill(1.0);
            let y1 = model.predict(xe.view())?;
            xe.column_mut(last).fill(0.0);
            let y0 = model.predict(xe.view())?;
            Ok((
                split.estimate_indices,
                y1.iter().zip(&y0).map(|(a, b)| a - b).collect(),
            ))
        })
        .collect::<Result<_>>()?;
    let mut tau = vec![0.0; data.n()];
    for (idx, vals) in folds {
        for (i, v) in idx.into_iter().zip(vals) {
            tau[i] = v;
        }
    }
    CateEstimate::new(
        tau,
        Method::S,
        mu_spec.seed,
        fingerprint(&("S", mu_spec, plan.seed())),
    )
}

/// Arm-specific fits per fold, differenced on the held-out fold.
pub fn t_learner(data: &Dataset, plan: &FoldPlan, mu_spec: &StackSpec) -> Result<CateEstimate> {
    check_plan(data, plan)?;
    let folds: Vec<(Vec<usize>, Vec<f64>)> = plan
        .splits()
        .into_par_iter()
        .enumerate()
        .map(|(k, split)| -> Result<(Vec<usize>, Vec<f64>)> {
            let xe = data.x_rows(&split.estimate_indices);
            let mut arm_pred = Vec::with_capacity(2);
            for arm in [0u8, 1] {
                let rows = data.arm_members(&split.train_indices, arm);
                if rows.is_empty() {
                    return Err(invalid_data(format!(
                        "training complement of fold {k} has no rows with d = {arm}"
                    )));
                }
                let spec = mu_spec
                    .clone()
                    .with_seed(derive_path(mu_spec.seed, &[k as u64, 3 + arm as u64]));
                let model =
                    fit_stacked(&spec, data.x_rows(&rows).view(), &data.y_rows(&rows), None)?;
                arm_pred.push(model.predict(xe.view())?);
            }
            let tau = arm_pred[1]
                .iter()
                .zip(&arm_pred[0])
                .map(|(a, b)| a - b)
                .collect();
            Ok((split.estimate_indices, tau))
        })
        .collect::<Result<_>>()?;
    let mut tau = vec![0.0; data.n()];
    for (idx, vals) in folds {
        for (i, v) in idx.into_iter().zip(vals) {
            tau[i] = v;
        }
    }
    CateEstimate::new(
        tau,
        Method::T,
        mu_spec.seed,
        fingerprint(&("T", mu_spec, plan.seed())),
    )
}

/// T-learner estimate read off already cross-fitted arm means.
pub fn t_from_nuisances(nuis: &NuisanceEstimates) -> Result<CateEstimate> {
    let tau = nuis
        .mu1_hat
        .iter()
        .zip(&nuis.mu0_hat)
        .map(|(a, b)| a - b)
        .collect();
    CateEstimate::new(tau, Method::T, 0, fingerprint(&("T", "nuisance")))
}

/// Regress the imputed effects of each arm on `x` over all rows of that arm,
/// then combine as `ê(x)·τ̂₀(x) + (1 − ê(x))·τ̂₁(x)`.
pub fn x_learner(
    data: &Dataset,
    nuis: &NuisanceEstimates,
    t_spec: &StackSpec,
) -> Result<CateEstimate> {
    let (p0, p1) = x_pseudo(data, nuis)?;
    let all: Vec<usize> = (0..data.n()).collect();
    let m0 = fit_rows(
        &p0,
        data.x(),
        &all,
        &t_spec.clone().with_seed(derive_seed(t_spec.seed, 0)),
    )?;
    let m1 = fit_rows(
        &p1,
        data.x(),
        &all,
        &t_spec.clone().with_seed(derive_seed(t_spec.seed, 1)),
    )?;
    let tau0 = m0.predict(data.x())?;
    let tau1 = m1.predict(data.x())?;
    let tau = (0..data.n())
        .map(|i| nuis.e_hat[i] * tau0[i] + (1.0 - nuis.e_hat[i]) * tau1[i])
        .collect();
    CateEstimate::new(tau, Method::X, t_spec.seed, fingerprint(&("X", t_spec)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondStage {
    #[default]
    CrossFit,
    InSample,
}

pub fn fit_pseudo(
    pseudo: &PseudoOutcome,
    x: ArrayView2<'_, f64>,
    t_spec: &StackSpec,
    stage: SecondStage,
    seed: u64,
) -> Result<CateEstimate> {
    match stage {
        SecondStage::CrossFit => second_stage_crossfit(pseudo, x, t_spec, seed),
        SecondStage::InSample => in_sample_second_stage(pseudo, x, t_spec),
    }
}
