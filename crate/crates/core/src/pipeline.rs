//! Run several CATE methods on one dataset with shared folds and nuisances.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::causal_forest::{
    crossfit_causal_forest, fit_causal_forest, CausalForestModel, CausalForestParams,
};
use crate::dataset::{make_folds, Dataset, FoldPlan};
use crate::error::{invalid_arg, CateError, Result};
use crate::inference::CateProcedure;
use crate::learners::LearnerSpec;
use crate::metalearners::{
    dr_pseudo, fit_pseudo, fit_pseudo_model, ipw_pseudo, r_pseudo, s_learner, t_learner, x_learner,
    x_pseudo, CateEstimate, Method, SecondStage,
};
use crate::nuisance::{
    clip_propensity, crossfit_nuisances, NuisanceEstimates, DEFAULT_CLIP_EPSILON,
};
use crate::rng::{derive_path, derive_seed};
use crate::stacking::{fit_stacked, StackSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub folds: usize,
    pub clip_epsilon: f64,
    pub propensity: StackSpec,
    pub outcome: StackSpec,
    pub effect: StackSpec,
    pub forest: CausalForestParams,
    pub second_stage: SecondStage,
    pub seed: u64,
}

/// Random forest (1000 trees, min node 10) stacked with boosting (200 rounds, rate 0.1, depth 3).
pub fn default_stack() -> StackSpec {
    StackSpec::new(vec![
        LearnerSpec::random_forest(1000, 10, 1.0 / 3.0),
        LearnerSpec::gradient_boosting(200, 0.1, 3),
    ])
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            folds: 5,
            clip_epsilon: DEFAULT_CLIP_EPSILON,
            propensity: default_stack(),
            outcome: default_stack(),
            effect: default_stack(),
            forest: CausalForestParams::default(),
            second_stage: SecondStage::CrossFit,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(invalid_arg(format!(
                "need at least 2 folds, got {}",
                self.folds
            )));
        }
        clip_propensity(&[0.5], self.clip_epsilon)?;
        self.propensity.validate()?;
        self.outcome.validate()?;
        self.effect.validate()?;
        self.forest.validate()
    }

    pub fn plan(&self, n: usize) -> Result<FoldPlan> {
        make_folds(n, self.folds, derive_seed(self.seed, 1))
    }

    fn propensity_spec(&self) -> StackSpec {
        let s = self.propensity.seed;
        self.propensity
            .clone()
            .with_seed(derive_path(self.seed, &[2, s]))
    }

    fn outcome_spec(&self) -> StackSpec {
        let s = self.outcome.seed;
        self.outcome
            .clone()
            .with_seed(derive_path(self.seed, &[3, s]))
    }

    fn effect_spec(&self, method: Method) -> StackSpec {
        let s = self.effect.seed;
        self.effect
            .clone()
            .with_seed(derive_path(self.seed, &[4, s, method as u64]))
    }

    fn forest_params(&self) -> CausalForestParams {
        CausalForestParams {
            seed: derive_path(self.seed, &[5, self.forest.seed]),
            ..self.forest.clone()
        }
    }

    fn second_stage_seed(&self, method: Method) -> u64 {
        derive_path(self.seed, &[6, method as u64])
    }

    fn with_seed(&self, seed: u64) -> Self {
        EstimatorConfig {
            seed,
            ..self.clone()
        }
    }
}

pub fn needs_nuisances(method: Method) -> bool {
    matches!(
        method,
        Method::X | Method::DR | Method::R | Method::IPW | Method::CF
    )
}

pub fn nuisances_for(
    data: &Dataset,
    plan: &FoldPlan,
    cfg: &EstimatorConfig,
) -> Result<NuisanceEstimates> {
    crossfit_nuisances(
        data,
        plan,
        &cfg.propensity_spec(),
        &cfg.outcome_spec(),
        cfg.clip_epsilon,
    )
}

/// One method on the full data; nuisance-based methods require `nuis`.
pub fn estimate_method(
    data: &Dataset,
    plan: &FoldPlan,
    method: Method,
    cfg: &EstimatorConfig,
    nuis: Option<&NuisanceEstimates>,
) -> Result<(CateEstimate, Option<Vec<CausalForestModel>>)> {
    let need = || nuis.ok_or_else(|| invalid_arg(format!("{method} needs cross-fitted nuisances")));
    let x = data.x();
    let est = match method {
        Method::S => s_learner(data, plan, &cfg.outcome_spec())?,
        Method::T => t_learner(data, plan, &cfg.outcome_spec())?,
        Method::X => x_learner(data, need()?, &cfg.effect_spec(method))?,
        Method::DR | Method::R | Method::IPW => {
            let nuis = need()?;
            let pseudo = match method {
                Method::DR => dr_pseudo(data, nuis)?,
                Method::R => r_pseudo(data, nuis)?,
                _ => ipw_pseudo(data, nuis)?,
            };
            fit_pseudo(
                &pseudo,
                x,
                &cfg.effect_spec(method),
                cfg.second_stage,
                cfg.second_stage_seed(method),
            )?
        }
        Method::CF => {
            let (est, models) = crossfit_causal_forest(data, plan, &cfg.forest_params(), need()?)?;
            return Ok((est, Some(models)));
        }
    };
    Ok((est, None))
}

#[derive(Debug)]
pub struct MethodOutcome {
    pub method: Method,
    pub result: Result<CateEstimate>,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct Estimation {
    pub plan: FoldPlan,
    pub nuisances: Option<Result<NuisanceEstimates>>,
    pub nuisance_seconds: f64,
    pub outcomes: Vec<MethodOutcome>,
    pub forests: Vec<CausalForestModel>,
}

impl Estimation {
    pub fn successes(&self) -> impl Iterator<Item = &CateEstimate> {
        self.outcomes.iter().filter_map(|o| o.result.as_ref().ok())
    }

    pub fn failures(&self) -> BTreeMap<Method, String> {
        self.outcomes
            .iter()
            .filter_map(|o| o.result.as_ref().err().map(|e| (o.method, e.to_string())))
            .collect()
    }
}

/// Run `methods` in order; a failing method is recorded and the rest continue.
pub fn estimate_methods(
    data: &Dataset,
    methods: &[Method],
    cfg: &EstimatorConfig,
) -> Result<Estimation> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(invalid_arg("no methods requested"));
    }
    let plan = cfg.plan(data.n())?;
    let start = Instant::now();
    let nuisances = methods
        .iter()
        .any(|&m| needs_nuisances(m))
        .then(|| nuisances_for(data, &plan, cfg));
    let nuisance_seconds = start.elapsed().as_secs_f64();
    let mut outcomes = Vec::with_capacity(methods.len());
    let mut forests = Vec::new();
    for &method in methods {
        let start = Instant::now();
        let result = match (&nuisances, needs_nuisances(method)) {
            (Some(Err(e)), true) => Err(CateError::Estimation(format!(
                "nuisance estimation failed: {e}"
            ))),
            (nuis, _) => {
                let nuis = nuis.as_ref().and_then(|r| r.as_ref().ok());
                estimate_method(data, &plan, method, cfg, nuis).map(|(est, models)| {
                    forests.extend(models.unwrap_or_default());
                    est
                })
            }
        };
        if let Err(e) = &result {
            log::error!("{method} failed: {e}");
        }
        outcomes.push(MethodOutcome {
            method,
            result,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(Estimation {
        plan,
        nuisances,
        nuisance_seconds,
        outcomes,
        forests,
    })
}

/// A method with its configuration, refittable for the bootstrap.
#[derive(Debug, Clone)]
pub struct MethodProcedure {
    pub method: Method,
    pub config: EstimatorConfig,
}

impl MethodProcedure {
    pub fn new(method: Method, config: EstimatorConfig) -> Self {
        MethodProcedure { method, config }
    }
}

fn with_treatment(x: ArrayView2<'_, f64>, d: f64) -> Array2<f64> {
    let col = Array2::from_elem((x.nrows(), 1), d);
    concatenate(Axis(1), &[x, col.view()]).expect("aligned rows")
}

impl CateProcedure for MethodProcedure {
    fn method(&self) -> Method {
        self.method
    }

    fn estimate(&self, data: &Dataset, plan: &FoldPlan) -> Result<CateEstimate> {
        let nuis = if needs_nuisances(self.method) {
            Some(nuisances_for(data, plan, &self.config)?)
        } else {
            None
        };
        estimate_method(data, plan, self.method, &self.config, nuis.as_ref()).map(|(est, _)| est)
    }

    fn fit_predict(
        &self,
        train: &Dataset,
        x_new: ArrayView2<'_, f64>,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let cfg = self.config.with_seed(seed);
        let method = self.method;
        match method {
            Method::S => {
                let d =
                    Array2::from_shape_vec((train.n(), 1), train.d_f64()).expect("column shape");
                let xd = concatenate(Axis(1), &[train.x(), d.view()]).expect("aligned rows");
                let model = fit_stacked(&cfg.outcome_spec(), xd.view(), train.y(), None)?;
                let y1 = model.predict(with_treatment(x_new, 1.0).view())?;
                let y0 = model.predict(with_treatment(x_new, 0.0).view())?;
                Ok(y1.iter().zip(&y0).map(|(a, b)| a - b).collect())
            }
            Method::T => {
                let all: Vec<usize> = (0..train.n()).collect();
                let mut preds = Vec::with_capacity(2);
                for arm in [0u8, 1] {
                    let rows = train.arm_members(&all, arm);
                    let spec = cfg
                        .outcome_spec()
                        .with_seed(derive_path(cfg.seed, &[7, u64::from(arm)]));
                    let model = fit_stacked(
                        &spec,
                        train.x_rows(&rows).view(),
                        &train.y_rows(&rows),
                        None,
                    )?;
                    preds.push(model.predict(x_new)?);
                }
                Ok(preds[1].iter().zip(&preds[0]).map(|(a, b)| a - b).collect())
            }
            Method::X | Method::DR | Method::R | Method::IPW | Method::CF => {
                let plan = cfg.plan(train.n())?;
                let nuis = nuisances_for(train, &plan, &cfg)?;
                match method {
                    Method::CF => {
                        fit_causal_forest(train, &cfg.forest_params(), &nuis)?.predict(x_new)
                    }
                    Method::X => {
                        let (p0, p1) = x_pseudo(train, &nuis)?;
                        let spec = cfg.effect_spec(method);
                        let m0 = fit_pseudo_model(
                            &p0,
                            train.x(),
                            &spec.clone().with_seed(derive_seed(spec.seed, 0)),
                        )?;
                        let m1 = fit_pseudo_model(
                            &p1,
                            train.x(),
                            &spec.clone().with_seed(derive_seed(spec.seed, 1)),
                        )?;
                        let e_model =
                            fit_stacked(&cfg.propensity_spec(), train.x(), &train.d_f64(), None)?;
                        let e = clip_propensity(
                            &e_model.predict_probability(x_new)?,
                            cfg.clip_epsilon,
                        )?;
                        let (t0, t1) = (m0.predict(x_new)?, m1.predict(x_new)?);
                        Ok((0..x_new.nrows())
                            .map(|i| e[i] * t0[i] + (1.0 - e[i]) * t1[i])
                            .collect())
                    }
                    _ => {
                        let pseudo = match method {
                            Method::DR => dr_pseudo(train, &nuis)?,
                            Method::R => r_pseudo(train, &nuis)?,
                            _ => ipw_pseudo(train, &nuis)?,
                        };
                        fit_pseudo_model(&pseudo, train.x(), &cfg.effect_spec(method))?
                            .predict(x_new)
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{gen_dgp, DgpConfig};

    fn light() -> EstimatorConfig {
        let tree = StackSpec::single(LearnerSpec::regression_tree(Some(3), 10));
        EstimatorConfig {
            propensity: StackSpec::single(LearnerSpec::ridge(1.0)),
            outcome: tree.clone(),
            effect: tree,
            forest: CausalForestParams {
                n_trees: 20,
                ..CausalForestParams::default()
            },
            seed: 4,
            ..EstimatorConfig::default()
        }
    }

    #[test]
    fn all_methods_run_and_are_deterministic() {
        let sim = gen_dgp(&DgpConfig {
            n: 300,
            p: 6,
            seed: 1,
            ..DgpConfig::default()
        })
        .unwrap();
        let cfg = light();
        let a = estimate_methods(&sim.data, &Method::ALL, &cfg).unwrap();
        assert!(a.failures().is_empty(), "{:?}", a.failures());
        assert_eq!(a.successes().count(), 7);
        let b = estimate_methods(&sim.data, &Method::ALL, &cfg).unwrap();
        for (x, y) in a.successes().zip(b.successes()) {
            assert_eq!(x, y);
        }
        assert_eq!(a.forests.len(), cfg.folds);
    }

    #[test]
    fn procedures_predict_new_rows() {
        let sim = gen_dgp(&DgpConfig {
            n: 200,
            p: 5,
            seed: 2,
            ..DgpConfig::default()
        })
        .unwrap();
        let x_new = sim.data.x_rows(&[0, 1, 2]);
        for m in Method::ALL {
            let p = MethodProcedure::new(m, light());
            let pred = p.fit_predict(&sim.data, x_new.view(), 9).unwrap();
            assert_eq!(pred.len(), 3);
            assert!(pred.iter().all(|v| v.is_finite()));
        }
    }
}
