//! Simulated data with known treatment effects.
//!
//! The outcome model is `Y = τ(X)·D + μ₀(X) + U` with correlated normal
//! covariates, a four-valued fifth covariate, two propensity settings and two
//! effect settings (plus the step effect used for the cross-fitting study).

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{make_folds, Dataset};
use crate::error::{invalid_arg, invalid_data, CateError, Result};
use crate::learners::LearnerSpec;
use crate::metalearners::{in_sample_second_stage, r_pseudo, second_stage_crossfit};
use crate::nuisance::{crossfit_nuisances, DEFAULT_CLIP_EPSILON};
use crate::rng::{derive_seed, stream};
use crate::stacking::StackSpec;

/// Support of the fifth covariate.
pub const X5_VALUES: [f64; 4] = [-0.2, 0.0, 0.2, 0.6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectSetting {
    /// `0.6(x₁+x₂+x₃+x₄) + x₅ + W`
    Linear,
    /// `sin(x₁ + x₂/2 + x₃/3) + 1.5 cos(x₄) + x₅`
    Nonlinear,
    /// `x₁ + 1{x₂ > 0} + W`
    Step,
}

impl EffectSetting {
    pub fn from_number(setting: u8) -> Result<Self> {
        match setting {
            1 => Ok(EffectSetting::Linear),
            2 => Ok(EffectSetting::Nonlinear),
            3 => Ok(EffectSetting::Step),
            _ => Err(invalid_arg(format!(
                "effect setting must be 1, 2 or 3, got {setting}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n: usize,
    pub p: usize,
    /// 1: randomized with `e ≡ 0.5`; 2: confounded through `x₁x₂ + x₃x₄`.
    pub propensity_setting: u8,
    pub effect_setting: EffectSetting,
    pub u_sd: f64,
    pub w_sd: f64,
    pub seed: u64,
    /// Assign every unit to control.
    pub force_control: bool,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n: 2000,
            p: 20,
            propensity_setting: 1,
            effect_setting: EffectSetting::Linear,
            u_sd: 1.0,
            w_sd: 0.5,
            seed: 0,
            force_control: false,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 50 {
            return Err(invalid_arg(format!(
                "simulation needs n >= 50, got {}",
                self.n
            )));
        }
        if self.p < 5 {
            return Err(invalid_arg(format!(
                "simulation needs p >= 5, got {}",
                self.p
            )));
        }
        if !matches!(self.propensity_setting, 1 | 2) {
            return Err(invalid_arg(format!(
                "propensity setting must be 1 or 2, got {}",
                self.propensity_setting
            )));
        }
        if !(self.u_sd >= 0.0 && self.u_sd.is_finite() && self.w_sd >= 0.0 && self.w_sd.is_finite())
        {
            return Err(invalid_arg(
                "noise standard deviations must be finite and nonnegative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub data: Dataset,
    pub true_tau: Vec<f64>,
    pub true_e: Vec<f64>,
    pub true_mu0: Vec<f64>,
    pub sigma: Array2<f64>,
}

impl SimulatedDataset {
    pub fn true_mu1(&self) -> Vec<f64> {
        self.true_mu0
            .iter()
            .zip(&self.true_tau)
            .map(|(m, t)| m + t)
            .collect()
    }

    pub fn true_ate(&self) -> f64 {
        self.true_tau.iter().sum::<f64>() / self.true_tau.len() as f64
    }

    /// Table of `true_tau, true_e, true_mu0`.
    pub fn write_truth_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        use crate::dataset::format_float;
        let mut out = String::from("true_tau,true_e,true_mu0\n");
        for i in 0..self.true_tau.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                format_float(self.true_tau[i]),
                format_float(self.true_e[i]),
                format_float(self.true_mu0[i])
            ));
        }
        crate::dataset::write_string(path.as_ref(), &out)
    }
}

/// Random correlation matrix `corr(AAᵀ + pI)` with standard normal `A`.
pub fn random_correlation(p: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, 0);
    let a = DMatrix::<f64>::from_fn(p, p, |_, _| rng.sample(StandardNormal));
    let mut s = &a * a.transpose();
    for i in 0..p {
        s[(i, i)] += p as f64;
    }
    let d: Vec<f64> = (0..p).map(|i| s[(i, i)].sqrt()).collect();
    Array2::from_shape_fn((p, p), |(i, j)| {
        if i == j {
            1.0
        } else {
            s[(i, j)] / (d[i] * d[j])
        }
    })
}

/// Covariates `X ~ N(0, Σ)` with the fifth column redrawn uniformly from [`X5_VALUES`].
pub fn gen_covariates(n: usize, p: usize, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    if p < 2 {
        return Err(invalid_arg(format!(
            "covariate generation needs p >= 2, got {p}"
        )));
    }
    let sigma = random_correlation(p, derive_seed(seed, 1));
    let chol = DMatrix::from_fn(p, p, |i, j| sigma[[i, j]])
        .cholesky()
        .ok_or_else(|| {
            CateError::Estimation("correlation matrix is not positive definite".into())
        })?;
    let l = chol.l();
    let mut rng = stream(seed, 2);
    let mut x = Array2::<f64>::zeros((n, p));
    let mut z = vec![0.0; p];
    for i in 0..n {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        for j in 0..p {
            x[[i, j]] = (0..=j).map(|k| l[(j, k)] * z[k]).sum();
        }
    }
    if p >= 5 {
        let mut rng = stream(seed, 3);
        for i in 0..n {
            x[[i, 4]] = X5_VALUES[rng.random_range(0..X5_VALUES.len())];
        }
    }
    Ok((x, sigma))
}

pub fn mu0_fn(x: &[f64]) -> f64 {
    x[0] * x[1] + x[2] * x[3] + x[4]
}

/// Propensities and Bernoulli treatment draws.
pub fn gen_propensity(
    x: ArrayView2<'_, f64>,
    setting: u8,
    seed: u64,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let n = x.nrows();
    if x.ncols() < 4 {
        return Err(invalid_arg("propensity generation needs p >= 4"));
    }
    let e = match setting {
        1 => vec![0.5; n],
        2 => {
            let a: Vec<f64> = x
                .rows()
                .into_iter()
                .map(|r| r[0] * r[1] + r[2] * r[3])
                .collect();
            let mean = a.iter().sum::<f64>() / n as f64;
            let sd = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
            if !(sd > 0.0) {
                return Err(invalid_data("propensity index has zero variance"));
            }
            let phi = Normal::standard();
            a.iter().map(|v| phi.cdf((v - mean) / sd)).collect()
        }
        _ => {
            return Err(invalid_arg(format!(
                "propensity setting must be 1 or 2, got {setting}"
            )))
        }
    };
    let mut rng = stream(seed, 4);
    let d = e
        .iter()
        .map(|&p| u8::from(rng.random::<f64>() < p))
        .collect();
    Ok((e, d))
}

/// Individual treatment effects; `w_sd` scales the unit-level noise `W`.
pub fn gen_effect(
    x: ArrayView2<'_, f64>,
    setting: EffectSetting,
    w_sd: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if x.ncols() < 5 {
        return Err(invalid_arg("effect generation needs p >= 5"));
    }
    let mut rng = stream(seed, 5);
    Ok(x.rows()
        .into_iter()
        .map(|r| match setting {
            EffectSetting::Linear => {
                let w: f64 = rng.sample(StandardNormal);
                0.6 * (r[0] + r[1] + r[2] + r[3]) + r[4] + w_sd * w
            }
            EffectSetting::Nonlinear => {
                (r[0] + r[1] / 2.0 + r[2] / 3.0).sin() + 1.5 * r[3].cos() + r[4]
            }
            EffectSetting::Step => {
                let w: f64 = rng.sample(StandardNormal);
                r[0] + f64::from(u8::from(r[1] > 0.0)) + w_sd * w
            }
        })
        .collect())
}

pub fn gen_dgp(config: &DgpConfig) -> Result<SimulatedDataset> {
    config.validate()?;
    let seed = config.seed;
    let (x, sigma) = gen_covariates(config.n, config.p, seed)?;
    let (true_e, mut d) = gen_propensity(x.view(), config.propensity_setting, seed)?;
    if config.force_control {
        d.iter_mut().for_each(|v| *v = 0);
    }
    let true_tau = gen_effect(x.view(), config.effect_setting, config.w_sd, seed)?;
    let true_mu0: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| mu0_fn(r.as_slice().unwrap()))
        .collect();
    let mut rng = stream(seed, 6);
    let y: Vec<f64> = (0..config.n)
        .map(|i| {
            let u: f64 = rng.sample(StandardNormal);
            true_tau[i] * f64::from(d[i]) + true_mu0[i] + config.u_sd * u
        })
        .collect();
    let names = (1..=config.p).map(|j| format!("x{j}")).collect();
    let data = if config.force_control {
        Dataset::new_allow_single_arm(y, d, x, names)?
    } else {
        Dataset::new(y, d, x, names)?
    };
    Ok(SimulatedDataset {
        data,
        true_tau,
        true_e,
        true_mu0,
        sigma,
    })
}

pub fn evaluate_mse(tau_hat: &[f64], truth: &[f64]) -> Result<f64> {
    if tau_hat.len() != truth.len() {
        return Err(CateError::DimensionMismatch {
            expected: truth.len(),
            got: tau_hat.len(),
        });
    }
    if truth.is_empty() {
        return Err(invalid_arg("cannot evaluate an empty estimate"));
    }
    Ok(tau_hat
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / truth.len() as f64)
}

/// Settings for the cross-fitting versus single-estimate comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Figure3Options {
    pub n: usize,
    pub p: usize,
    pub folds: usize,
    pub nuisance: StackSpec,
    pub effect: StackSpec,
}

impl Default for Figure3Options {
    fn default() -> Self {
        let forest = LearnerSpec::random_forest(200, 10, 1.0 / 3.0);
        Figure3Options {
            n: 2000,
            p: 10,
            folds: 5,
            nuisance: StackSpec::single(forest.clone()),
            effect: StackSpec::single(forest),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Figure3Replication {
    pub seed: u64,
    pub mse_single: f64,
    pub mse_crossfit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Figure3Summary {
    pub replications: usize,
    pub crossfit_win_rate: f64,
    pub mean_mse_single: f64,
    pub mean_mse_crossfit: f64,
    pub var_mse_single: f64,
    pub var_mse_crossfit: f64,
}

pub fn figure3_replication(seed: u64, opts: &Figure3Options) -> Result<Figure3Replication> {
    let sim = gen_dgp(&DgpConfig {
        n: opts.n,
        p: opts.p,
        propensity_setting: 1,
        effect_setting: EffectSetting::Step,
        seed,
        ..DgpConfig::default()
    })?;
    let data = &sim.data;
    let plan = make_folds(data.n(), opts.folds, derive_seed(seed, 10))?;
    let nuis = crossfit_nuisances(
        data,
        &plan,
        &opts.nuisance.clone().with_seed(derive_seed(seed, 11)),
        &opts.nuisance.clone().with_seed(derive_seed(seed, 12)),
        DEFAULT_CLIP_EPSILON,
    )?;
    let pseudo = r_pseudo(data, &nuis)?;
    let effect = opts.effect.clone().with_seed(derive_seed(seed, 13));
    let single = in_sample_second_stage(&pseudo, data.x(), &effect)?;
    let cross = second_stage_crossfit(&pseudo, data.x(), &effect, derive_seed(seed, 14))?;
    Ok(Figure3Replication {
        seed,
        mse_single: evaluate_mse(&single.tau_hat, &sim.true_tau)?,
        mse_crossfit: evaluate_mse(&cross.tau_hat, &sim.true_tau)?,
    })
}

/// R-learner fit with a single in-sample second stage and with the
/// two-step cross-fitted second stage on fresh draws of the step-effect DGP.
pub fn figure3_experiment(
    replications: usize,
    seed: u64,
    opts: &Figure3Options,
) -> Result<Vec<Figure3Replication>> {
    if replications < 10 {
        return Err(invalid_arg(format!(
            "need at least 10 replications, got {replications}"
        )));
    }
    (0..replications as u64)
        .into_par_iter()
        .map(|r| figure3_replication(derive_seed(seed, r), opts))
        .collect()
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var)
}

pub fn summarize_figure3(reps: &[Figure3Replication]) -> Figure3Summary {
    let single: Vec<f64> = reps.iter().map(|r| r.mse_single).collect();
    let cross: Vec<f64> = reps.iter().map(|r| r.mse_crossfit).collect();
    let (ms, vs) = mean_var(&single);
    let (mc, vc) = mean_var(&cross);
    let wins = reps
        .iter()
        .filter(|r| r.mse_crossfit < r.mse_single)
        .count();
    Figure3Summary {
        replications: reps.len(),
        crossfit_win_rate: wins as f64 / reps.len().max(1) as f64,
        mean_mse_single: ms,
        mean_mse_crossfit: mc,
        var_mse_single: vs,
        var_mse_crossfit: vc,
    }
}
