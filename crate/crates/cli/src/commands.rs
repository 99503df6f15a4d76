use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cate_core::dataset::{format_float, load_csv_with, read_table, write_csv, LoadOptions};
use cate_core::inference::{
    ate_summary, bootstrap_around, clan, ipw_balance, method_correlation, write_balance_csv,
    write_clan_csv, write_correlation_csv, write_sorted_effects_csv, AteSummary, CateProcedure,
    IntervalKind,
};
use cate_core::metalearners::{fingerprint, CateEstimate, Method, SecondStage};
use cate_core::nuisance::{overlap_report, OverlapReport, StackWeightTable};
use cate_core::pipeline::{estimate_methods, nuisances_for, MethodProcedure};
use cate_core::simulation::{figure3_experiment, gen_dgp, summarize_figure3, EffectSetting};
use cate_core::{CateError, Dataset, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{
    AnalyzeArgs, BootstrapArgs, Cli, Command, DataArgs, EstimatorArgs, Figure3Args, FitArgs,
    SimulateArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => simulate(&mut cfg, a),
        Command::Fit(a) => fit(&mut cfg, a),
        Command::Bootstrap(a) => bootstrap(&mut cfg, a),
        Command::Analyze(a) => analyze(&mut cfg, a),
        Command::Figure3(a) => figure3(&mut cfg, a),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| CateError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| CateError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for name in names {
        let m: Method = name.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(CateError::InvalidArgument("method list is empty".into()));
    }
    Ok(out)
}

fn cate_path(dir: &Path, m: Method) -> PathBuf {
    dir.join(format!("cate_{m}.csv"))
}

fn load_options(cfg: &mut RunConfig, a: &DataArgs) -> LoadOptions {
    if let Some(v) = &a.outcome_col {
        cfg.outcome_col = v.clone();
    }
    if let Some(v) = &a.treatment_col {
        cfg.treatment_col = v.clone();
    }
    if let Some(v) = &a.one_hot {
        cfg.one_hot = v.clone();
    }
    LoadOptions {
        outcome_col: cfg.outcome_col.clone(),
        treatment_col: cfg.treatment_col.clone(),
        one_hot: cfg.one_hot.clone(),
    }
}

/// Apply estimator flags and return the parsed method list.
fn apply_estimator(cfg: &mut RunConfig, a: &EstimatorArgs) -> Result<Vec<Method>> {
    if let Some(m) = &a.methods {
        cfg.methods = m.clone();
    }
    let e = &mut cfg.estimator;
    if let Some(v) = a.folds {
        e.folds = v;
    }
    if let Some(v) = a.clip_epsilon {
        e.clip_epsilon = v;
    }
    if let Some(v) = a.seed {
        e.seed = v;
    }
    if a.in_sample {
        e.second_stage = SecondStage::InSample;
    }
    e.validate()?;
    parse_methods(&cfg.methods)
}

fn simulate(cfg: &mut RunConfig, a: SimulateArgs) -> Result<()> {
    let d = &mut cfg.dgp;
    if let Some(v) = a.n {
        d.n = v;
    }
    if let Some(v) = a.p {
        d.p = v;
    }
    if let Some(v) = a.propensity_setting {
        d.propensity_setting = v;
    }
    if let Some(v) = a.effect_setting {
        d.effect_setting = EffectSetting::from_number(v)?;
    }
    if let Some(v) = a.seed {
        d.seed = v;
    }
    d.validate()?;
    ensure_dir(&a.out)?;
    let sim = gen_dgp(d)?;
    write_csv(
        &sim.data,
        a.out.join("data.csv"),
        &cfg.outcome_col,
        &cfg.treatment_col,
    )?;
    sim.write_truth_csv(a.out.join("truth.csv"))?;
    write_json(&a.out.join("config.json"), &cfg.dgp)?;
    log::info!(
        "simulated n = {}, p = {}, ATE = {}",
        sim.data.n(),
        sim.data.p(),
        sim.true_ate()
    );
    Ok(())
}

fn load_data(cfg: &mut RunConfig, a: &DataArgs) -> Result<Dataset> {
    let opts = load_options(cfg, a);
    load_csv_with(&a.data, &opts)
}

#[derive(Serialize)]
struct MethodSummary {
    ate: f64,
    least_mean: f64,
    most_mean: f64,
    q: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mse: Option<f64>,
    fingerprint: String,
}

#[derive(Serialize)]
struct FitReport {
    n: usize,
    p: usize,
    folds: usize,
    config_fingerprint: String,
    methods: Vec<Method>,
    estimates: BTreeMap<Method, MethodSummary>,
    failures: BTreeMap<Method, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nuisance_error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stack_weights: Option<StackWeightTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    overlap: Option<OverlapReport>,
    forest_files: Vec<String>,
}

#[derive(Serialize)]
struct Timing {
    nuisance_seconds: f64,
    methods: BTreeMap<Method, f64>,
}

fn read_truth(path: &Path, n: usize) -> Result<Vec<f64>> {
    let truth = read_table(path)?.column_f64("true_tau")?;
    if truth.len() != n {
        return Err(CateError::InvalidData(format!(
            "{} has {} rows, data has {n}",
            path.display(),
            truth.len()
        )));
    }
    Ok(truth)
}

fn summarize(est: &CateEstimate, q: f64, truth: Option<&[f64]>) -> Result<MethodSummary> {
    let AteSummary {
        ate,
        least_mean,
        most_mean,
        q,
    } = ate_summary(est, q)?;
    let mse = truth
        .map(|t| cate_core::simulation::evaluate_mse(&est.tau_hat, t))
        .transpose()?;
    Ok(MethodSummary {
        ate,
        least_mean,
        most_mean,
        q,
        mse,
        fingerprint: est.fingerprint.clone(),
    })
}

fn fit(cfg: &mut RunConfig, a: FitArgs) -> Result<()> {
    let methods = apply_estimator(cfg, &a.estimator)?;
    let data = load_data(cfg, &a.data)?;
    let truth = a
        .truth
        .as_deref()
        .map(|p| read_truth(p, data.n()))
        .transpose()?;
    ensure_dir(&a.out)?;

    let est = estimate_methods(&data, &methods, &cfg.estimator)?;
    let mut report = FitReport {
        n: data.n(),
        p: data.p(),
        folds: cfg.estimator.folds,
        config_fingerprint: fingerprint(&cfg.estimator),
        methods: methods.clone(),
        estimates: BTreeMap::new(),
        failures: est.failures(),
        nuisance_error: None,
        stack_weights: None,
        overlap: None,
        forest_files: Vec::new(),
    };
    match &est.nuisances {
        Some(Ok(nuis)) => {
            nuis.write_csv(a.out.join("nuisances.csv"))?;
            report.stack_weights = nuis.stack_weights.clone();
            report.overlap = Some(overlap_report(&nuis.e_raw, nuis.clip_epsilon));
        }
        Some(Err(e)) => report.nuisance_error = Some(e.to_string()),
        None => {}
    }
    for e in est.successes() {
        e.write_csv(cate_path(&a.out, e.method))?;
        report
            .estimates
            .insert(e.method, summarize(e, cfg.clan.q, truth.as_deref())?);
    }
    if a.save_forests {
        for (k, forest) in est.forests.iter().enumerate() {
            let name = format!("forest_fold{k}.json");
            forest.save(a.out.join(&name))?;
            report.forest_files.push(name);
        }
    }
    write_json(&a.out.join("report.json"), &report)?;
    write_json(
        &a.out.join("timing.json"),
        &Timing {
            nuisance_seconds: est.nuisance_seconds,
            methods: est.outcomes.iter().map(|o| (o.method, o.seconds)).collect(),
        },
    )?;
    if report.estimates.is_empty() {
        return Err(CateError::Estimation(format!(
            "every method failed: {}",
            report
                .failures
                .iter()
                .map(|(m, e)| format!("{m}: {e}"))
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct BootstrapSummary {
    replicates_requested: usize,
    replicates_used: usize,
    replicates_dropped: usize,
    alpha: f64,
    interval: IntervalKind,
    mean_sigma: f64,
    mean_width: f64,
}

fn bootstrap(cfg: &mut RunConfig, a: BootstrapArgs) -> Result<()> {
    let methods = apply_estimator(cfg, &a.estimator)?;
    let b = &mut cfg.bootstrap;
    if let Some(v) = a.replicates {
        b.replicates = v;
    }
    if let Some(v) = a.alpha {
        b.alpha = v;
    }
    if a.percentile {
        b.interval = IntervalKind::Percentile;
    }
    if b.replicates < 2 || !(b.alpha > 0.0 && b.alpha < 1.0) {
        return Err(CateError::InvalidArgument(format!(
            "bootstrap needs replicates >= 2 and 0 < alpha < 1 (got {}, {})",
            b.replicates, b.alpha
        )));
    }
    let data = load_data(cfg, &a.data)?;
    ensure_dir(&a.out)?;
    let plan = cfg.estimator.plan(data.n())?;
    let b = cfg.bootstrap.clone();
    let mut summaries = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for m in methods {
        let proc_ = MethodProcedure::new(m, cfg.estimator.clone());
        let run = proc_.estimate(&data, &plan).and_then(|point| {
            let r = bootstrap_around(
                &proc_,
                &point.tau_hat,
                &data,
                &plan,
                b.replicates,
                b.alpha,
                b.seed,
                b.interval,
            )?;
            Ok((r.to_estimate(&point)?, r))
        });
        match run {
            Ok((est, r)) => {
                est.write_csv(cate_path(&a.out, m))?;
                let n = r.sigma_hat.len() as f64;
                summaries.insert(
                    m,
                    BootstrapSummary {
                        replicates_requested: r.replicates_requested,
                        replicates_used: r.replicates_used,
                        replicates_dropped: r.replicates_dropped,
                        alpha: r.alpha,
                        interval: r.interval,
                        mean_sigma: r.sigma_hat.iter().sum::<f64>() / n,
                        mean_width: r
                            .upper
                            .iter()
                            .zip(&r.lower)
                            .map(|(u, l)| u - l)
                            .sum::<f64>()
                            / n,
                    },
                );
            }
            Err(e) => {
                log::error!("{m} bootstrap failed: {e}");
                failures.insert(m, e.to_string());
            }
        }
    }
    #[derive(Serialize)]
    struct Report<'a> {
        methods: &'a BTreeMap<Method, BootstrapSummary>,
        failures: &'a BTreeMap<Method, String>,
    }
    write_json(
        &a.out.join("bootstrap.json"),
        &Report {
            methods: &summaries,
            failures: &failures,
        },
    )?;
    if summaries.is_empty() {
        return Err(CateError::Estimation("every bootstrap run failed".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct AnalysisReport {
    q: f64,
    gamma: f64,
    group_size: usize,
    ate: BTreeMap<Method, AteSummary>,
    correlation_written: bool,
    propensity_source: String,
}

fn analyze(cfg: &mut RunConfig, a: AnalyzeArgs) -> Result<()> {
    if let Some(m) = &a.methods {
        cfg.methods = m.clone();
    }
    if let Some(v) = a.q {
        cfg.clan.q = v;
    }
    if let Some(v) = a.gamma {
        cfg.clan.gamma = v;
    }
    let methods = match &a.methods {
        Some(_) => parse_methods(&cfg.methods)?,
        None => Method::ALL
            .into_iter()
            .filter(|&m| cate_path(&a.dir, m).exists())
            .collect(),
    };
    if methods.is_empty() {
        return Err(CateError::InvalidData(format!(
            "no cate_<method>.csv files in {}",
            a.dir.display()
        )));
    }
    let data = load_data(cfg, &a.data)?;
    let mut cates = Vec::with_capacity(methods.len());
    for &m in &methods {
        let path = cate_path(&a.dir, m);
        if !path.exists() {
            return Err(CateError::InvalidData(format!(
                "missing input {}",
                path.display()
            )));
        }
        let est = CateEstimate::read_csv(&path)?;
        if est.len() != data.n() {
            return Err(CateError::InvalidData(format!(
                "{} has {} rows, data has {}",
                path.display(),
                est.len(),
                data.n()
            )));
        }
        cates.push(est);
    }
    let out = a.out.clone().unwrap_or_else(|| a.dir.clone());
    ensure_dir(&out)?;

    write_sorted_effects_csv(&cates, out.join("sorted_effects.csv"))?;
    let (q, gamma) = (cfg.clan.q, cfg.clan.gamma);
    let reports = cates
        .iter()
        .map(|c| clan(c, &data, q, gamma))
        .collect::<Result<Vec<_>>>()?;
    write_clan_csv(&reports, out.join("clan.csv"))?;
    let correlation_written = cates.len() >= 2;
    if correlation_written {
        write_correlation_csv(&method_correlation(&cates)?, out.join("correlation.csv"))?;
    } else {
        log::info!("one method only; correlation.csv not written");
    }

    let nuis_path = a.dir.join("nuisances.csv");
    let (e_hat, propensity_source) = if nuis_path.exists() {
        let e = read_table(&nuis_path)?.column_f64("e_hat")?;
        if e.len() != data.n() {
            return Err(CateError::InvalidData(format!(
                "{} has {} rows, data has {}",
                nuis_path.display(),
                e.len(),
                data.n()
            )));
        }
        (e, "nuisances.csv".to_string())
    } else {
        cfg.estimator.validate()?;
        let plan = cfg.estimator.plan(data.n())?;
        (
            nuisances_for(&data, &plan, &cfg.estimator)?.e_hat,
            "cross-fitted".to_string(),
        )
    };
    write_balance_csv(&ipw_balance(&data, &e_hat)?, out.join("balance.csv"))?;

    let report = AnalysisReport {
        q,
        gamma,
        group_size: reports.first().map_or(0, |r| r.least.len()),
        ate: cates
            .iter()
            .map(|c| Ok((c.method, ate_summary(c, q)?)))
            .collect::<Result<_>>()?,
        correlation_written,
        propensity_source,
    };
    write_json(&out.join("analysis.json"), &report)
}

fn figure3(cfg: &mut RunConfig, a: Figure3Args) -> Result<()> {
    let opts = &mut cfg.figure3;
    if let Some(v) = a.n {
        opts.n = v;
    }
    if let Some(v) = a.p {
        opts.p = v;
    }
    ensure_dir(&a.out)?;
    let reps = figure3_experiment(a.replications, a.seed, opts)?;
    let mut csv = String::from("replication,seed,mse_single,mse_crossfit\n");
    for (r, rep) in reps.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r,
            rep.seed,
            format_float(rep.mse_single),
            format_float(rep.mse_crossfit)
        ));
    }
    write_text(&a.out.join("figure3.csv"), &csv)?;
    write_json(
        &a.out.join("figure3_summary.json"),
        &summarize_figure3(&reps),
    )
}
