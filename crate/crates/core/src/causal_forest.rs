//! Honest causal forest on locally centered data.
//!
//! Outcomes and treatments are replaced by residuals `Ỹ = Y − μ̂(x)` and
//! `D̃ = D − ê(x)`. Each tree draws a subsample without replacement and cuts
//! it into a split half, which alone decides the splits, and an estimate
//! half, which alone supplies the leaf effects. A split maximizes
//! `n_L·n_R·(τ̂_L − τ̂_R)²` with `τ̂ = ΣỸD̃ / ΣD̃²` computed on the split half.
//!
//! Predictions use the forest weights
//! `αᵢ(x) = B⁻¹ Σ_b 1{i ∈ L_b(x)} / |L_b(x)|` over estimate-half rows:
//! `τ̂(x) = Σ αᵢ ỸᵢD̃ᵢ / Σ αᵢ D̃ᵢ²`.
//!
//! # Persisted format
//!
//! [`CausalForestModel::to_json`] writes an object with `format`
//! (`"cate-causal-forest"`), `version`, `params`, `n_features`, the training
//! residuals `y_res`/`d_res`, and `trees`. Each tree lists its `split_sample`
//! and `estimate_sample` row indices and `nodes`; node 0 is the root, a
//! `split` node sends `x[feature] <= threshold` to `left`, and a `leaf`
//! node carries its estimate-half `members`, sums and effect.

use std::path::Path;

use ndarray::ArrayView2;
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_string, Dataset, FoldPlan};
use crate::error::{invalid_arg, CateError, Result};
use crate::metalearners::{fingerprint, CateEstimate, Method};
use crate::nuisance::NuisanceEstimates;
use crate::rng::{derive_seed, stream, Rng};

pub const FORMAT_NAME: &str = "cate-causal-forest";
pub const FORMAT_VERSION: u32 = 1;

/// Denominators at or below this are treated as zero.
const MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CenteredData {
    pub y_res: Vec<f64>,
    pub d_res: Vec<f64>,
    pub d: Vec<u8>,
}

pub fn local_center(data: &Dataset, nuis: &NuisanceEstimates) -> Result<CenteredData> {
    if nuis.n() != data.n() {
        return Err(CateError::DimensionMismatch {
            expected: data.n(),
            got: nuis.n(),
        });
    }
    Ok(CenteredData {
        y_res: data
            .y()
            .iter()
            .zip(&nuis.mu_hat)
            .map(|(y, m)| y - m)
            .collect(),
        d_res: data
            .d()
            .iter()
            .zip(&nuis.e_hat)
            .map(|(&d, e)| f64::from(d) - e)
            .collect(),
        d: data.d().to_vec(),
    })
}

/// Residual-on-residual slope `ΣỸD̃ / ΣD̃²`; `None` when the denominator vanishes.
pub fn leaf_tau(y_res: &[f64], d_res: &[f64]) -> Option<f64> {
    let num: f64 = y_res.iter().zip(d_res).map(|(y, d)| y * d).sum();
    let den: f64 = d_res.iter().map(|d| d * d).sum();
    (den > MIN_DENOMINATOR).then(|| num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CausalForestParams {
    pub n_trees: usize,
    pub min_node_size: usize,
    pub subsample_fraction: f64,
    /// Share of features tried at each node.
    pub mtry_fraction: f64,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for CausalForestParams {
    fn default() -> Self {
        CausalForestParams {
            n_trees: 500,
            min_node_size: 10,
            subsample_fraction: 0.5,
            mtry_fraction: 1.0,
            max_depth: None,
            seed: 0,
        }
    }
}

impl CausalForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(invalid_arg("causal forest needs at least one tree"));
        }
        if self.min_node_size == 0 {
            return Err(invalid_arg("min_node_size must be positive"));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(invalid_arg(format!(
                "subsample_fraction must lie in (0, 1], got {}",
                self.subsample_fraction
            )));
        }
        if !(self.mtry_fraction > 0.0 && self.mtry_fraction <= 1.0) {
            return Err(invalid_arg(format!(
                "mtry_fraction must lie in (0, 1], got {}",
                self.mtry_fraction
            )));
        }
        Ok(())
    }

    fn mtry(&self, p: usize) -> usize {
        ((self.mtry_fraction * p as f64).ceil() as usize).clamp(1, p)
    }
}

/// Estimate-half sums at a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub n: usize,
    pub n_treated: usize,
    pub sum_yd: f64,
    pub sum_dd: f64,
}

impl NodeStats {
    fn of(rows: &[usize], c: &CenteredData) -> Self {
        let mut s = NodeStats {
            n: rows.len(),
            n_treated: 0,
            sum_yd: 0.0,
            sum_dd: 0.0,
        };
        for &i in rows {
            s.n_treated += usize::from(c.d[i]);
            s.sum_yd += c.y_res[i] * c.d_res[i];
            s.sum_dd += c.d_res[i] * c.d_res[i];
        }
        s
    }

    fn tau(&self) -> Option<f64> {
        (self.sum_dd > MIN_DENOMINATOR).then(|| self.sum_yd / self.sum_dd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CausalNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Heterogeneity criterion of the chosen split on the split half.
        criterion: f64,
        stats: NodeStats,
    },
    Leaf {
        /// Honest effect, or the nearest valid ancestor's when this leaf's denominator vanishes.
        tau: f64,
        stats: NodeStats,
        members: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalTree {
    pub nodes: Vec<CausalNode>,
    pub split_sample: Vec<usize>,
    pub estimate_sample: Vec<usize>,
}

impl CausalTree {
    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                CausalNode::Leaf { .. } => return i,
                CausalNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if row[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match &self.nodes[self.leaf_index(row)] {
            CausalNode::Leaf { tau, .. } => *tau,
            CausalNode::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[CausalNode], i: usize) -> usize {
            match &nodes[i] {
                CausalNode::Leaf { .. } => 0,
                CausalNode::Split { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn root_split(&self) -> Option<(usize, f64)> {
        match &self.nodes[0] {
            CausalNode::Split {
                feature, threshold, ..
            } => Some((*feature, *threshold)),
            CausalNode::Leaf { .. } => None,
        }
    }
}

/// Best split of `rows` (split half) under the estimate-half arm constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    pub criterion: f64,
}

/// Running sums over the split half.
#[derive(Clone, Copy, Default)]
struct Sums {
    n: usize,
    yd: f64,
    dd: f64,
}

pub(crate) fn best_split(
    x: ArrayView2<'_, f64>,
    c: &CenteredData,
    split_rows: &[usize],
    est_rows: &[usize],
    features: &[usize],
    min_node_size: usize,
) -> Option<SplitChoice> {
    let m = split_rows.len();
    if m < 2 * min_node_size {
        return None;
    }
    let mut total = Sums::default();
    for &i in split_rows {
        total.n += 1;
        total.yd += c.y_res[i] * c.d_res[i];
        total.dd += c.d_res[i] * c.d_res[i];
    }
    let est_treated_total = est_rows.iter().filter(|&&i| c.d[i] == 1).count();
    let est_control_total = est_rows.len() - est_treated_total;

    let mut best: Option<SplitChoice> = None;
    let mut order = split_rows.to_vec();
    let mut est_order = est_rows.to_vec();
    for &f in features {
        let col = x.column(f);
        order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
        est_order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
        let mut left = Sums::default();
        let (mut e_ptr, mut e_treated, mut e_control) = (0, 0, 0);
        for j in 0..m - 1 {
            let i = order[j];
            left.n += 1;
            left.yd += c.y_res[i] * c.d_res[i];
            left.dd += c.d_res[i] * c.d_res[i];
            let (a, b) = (col[i], col[order[j + 1]]);
            if a == b || left.n < min_node_size {
                continue;
            }
            if m - left.n < min_node_size {
                break;
            }
            let mut threshold = a + (b - a) / 2.0;
            if threshold >= b {
                threshold = a;
            }
            while e_ptr < est_order.len() && col[est_order[e_ptr]] <= threshold {
                if c.d[est_order[e_ptr]] == 1 {
                    e_treated += 1;
                } else {
                    e_control += 1;
                }
                e_ptr += 1;
            }
            if e_treated == 0
                || e_control == 0
                || est_treated_total == e_treated
                || est_control_total == e_control
            {
                continue;
            }
            let right_dd = total.dd - left.dd;
            if left.dd <= MIN_DENOMINATOR || right_dd <= MIN_DENOMINATOR {
                continue;
            }
            let tau_l = left.yd / left.dd;
            let tau_r = (total.yd - left.yd) / right_dd;
            let criterion = left.n as f64 * (m - left.n) as f64 * (tau_l - tau_r).powi(2);
            if best.is_none_or(|bst| criterion > bst.criterion) {
                best = Some(SplitChoice {
                    feature: f,
                    threshold,
                    criterion,
                });
            }
        }
    }
    best
}

/// Grow one honest tree on explicit halves.
pub fn fit_causal_tree(
    x: ArrayView2<'_, f64>,
    c: &CenteredData,
    split_sample: Vec<usize>,
    estimate_sample: Vec<usize>,
    params: &CausalForestParams,
    rng: &mut Rng,
) -> CausalTree {
    let p = x.ncols();
    let mtry = params.mtry(p);
    let all_features: Vec<usize> = (0..p).collect();
    let mut nodes = vec![];
    // (node slot, split rows, estimate rows, depth, fallback effect)
    let mut stack = vec![(
        0usize,
        split_sample.clone(),
        estimate_sample.clone(),
        0usize,
        None::<f64>,
    )];
    nodes.push(None);
    while let Some((slot, s_rows, e_rows, depth, inherited)) = stack.pop() {
        let stats = NodeStats::of(&e_rows, c);
        let tau_here = stats.tau().or(inherited);
        let depth_ok = params.max_depth.is_none_or(|d| depth < d);
        let features = if mtry < p {
            let mut f = index::sample(rng, p, mtry).into_vec();
            f.sort_unstable();
            f
        } else {
            all_features.clone()
        };
        let choice = if depth_ok {
            best_split(x, c, &s_rows, &e_rows, &features, params.min_node_size)
        } else {
            None
        };
        match choice {
            Some(ch) => {
                let goes_left = |i: &usize| x[[*i, ch.feature]] <= ch.threshold;
                let (sl, sr): (Vec<usize>, Vec<usize>) =
                    s_rows.iter().copied().partition(goes_left);
                let (el, er): (Vec<usize>, Vec<usize>) =
                    e_rows.iter().copied().partition(goes_left);
                let left = nodes.len();
                nodes.push(None);
                nodes.push(None);
                nodes[slot] = Some(CausalNode::Split {
                    feature: ch.feature,
                    threshold: ch.threshold,
                    left,
                    right: left + 1,
                    criterion: ch.criterion,
                    stats,
                });
                stack.push((left + 1, sr, er, depth + 1, tau_here));
                stack.push((left, sl, el, depth + 1, tau_here));
            }
            None => {
                nodes[slot] = Some(CausalNode::Leaf {
                    tau: tau_here.unwrap_or(0.0),
                    stats,
                    members: e_rows,
                });
            }
        }
    }
    CausalTree {
        nodes: nodes
            .into_iter()
            .map(|n| n.expect("every slot is filled"))
            .collect(),
        split_sample,
        estimate_sample,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalForestModel {
    pub format: String,
    pub version: u32,
    pub params: CausalForestParams,
    pub n_features: usize,
    pub y_res: Vec<f64>,
    pub d_res: Vec<f64>,
    pub trees: Vec<CausalTree>,
}

/// Grow `params.n_trees` honest trees on already centered data.
pub fn fit_causal_forest_centered(
    x: ArrayView2<'_, f64>,
    c: &CenteredData,
    params: &CausalForestParams,
) -> Result<CausalForestModel> {
    params.validate()?;
    let n = x.nrows();
    if c.y_res.len() != n || c.d_res.len() != n || c.d.len() != n {
        return Err(CateError::DimensionMismatch {
            expected: n,
            got: c.y_res.len(),
        });
    }
    let s = ((params.subsample_fraction * n as f64).floor() as usize).min(n);
    if s < 2 {
        return Err(invalid_arg(format!(
            "subsample of {s} rows is too small for honest halves"
        )));
    }
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(params.seed, b as u64);
            let mut sub = index::sample(&mut rng, n, s).into_vec();
            sub.shuffle(&mut rng);
            let mut split_sample = sub[..s / 2].to_vec();
            let mut estimate_sample = sub[s / 2..].to_vec();
            split_sample.sort_unstable();
            estimate_sample.sort_unstable();
            fit_causal_tree(x, c, split_sample, estimate_sample, params, &mut rng)
        })
        .collect();
    Ok(CausalForestModel {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        params: params.clone(),
        n_features: x.ncols(),
        y_res: c.y_res.clone(),
        d_res: c.d_res.clone(),
        trees,
    })
}

/// Forest fit on all rows of `data` with residuals from `nuis`.
pub fn fit_causal_forest(
    data: &Dataset,
    params: &CausalForestParams,
    nuis: &NuisanceEstimates,
) -> Result<CausalForestModel> {
    let c = local_center(data, nuis)?;
    fit_causal_forest_centered(data.x(), &c, params)
}

impl CausalForestModel {
    fn check_row(&self, len: usize) -> Result<()> {
        if len != self.n_features {
            return Err(CateError::DimensionMismatch {
                expected: self.n_features,
                got: len,
            });
        }
        Ok(())
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let (mut num, mut den, mut fallback) = (0.0, 0.0, 0.0);
        for tree in &self.trees {
            if let CausalNode::Leaf { tau, stats, .. } = &tree.nodes[tree.leaf_index(row)] {
                if stats.n > 0 {
                    num += stats.sum_yd / stats.n as f64;
                    den += stats.sum_dd / stats.n as f64;
                }
                fallback += tau;
            }
        }
        if den > MIN_DENOMINATOR / self.trees.len() as f64 {
            num / den
        } else {
            fallback / self.trees.len() as f64
        }
    }

    /// Weights `αᵢ(x)` over the training rows.
    pub fn forest_weights(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.check_row(row.len())?;
        let mut alpha = vec![0.0; self.y_res.len()];
        let b = self.trees.len() as f64;
        for tree in &self.trees {
            if let CausalNode::Leaf { members, .. } = &tree.nodes[tree.leaf_index(row)] {
                let share = 1.0 / (b * members.len() as f64);
                for &i in members {
                    alpha[i] += share;
                }
            }
        }
        Ok(alpha)
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.check_row(x.ncols())?;
        let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        Ok(rows.par_iter().map(|r| self.predict_row(r)).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: CausalForestModel = serde_json::from_str(s)?;
        if model.format != FORMAT_NAME || model.version != FORMAT_VERSION {
            return Err(CateError::InvalidData(format!(
                "unsupported forest file: format '{}' version {}",
                model.format, model.version
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_string(path.as_ref(), &self.to_json()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| CateError::io(path, e))?;
        Self::from_json(&s)
    }
}

pub fn predict_cate(model: &CausalForestModel, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    model.predict(x)
}

pub fn forest_weights(model: &CausalForestModel, row: &[f64]) -> Result<Vec<f64>> {
    model.forest_weights(row)
}

/// Forests fit on each training complement predict the held-out fold.
pub fn crossfit_causal_forest(
    data: &Dataset,
    plan: &FoldPlan,
    params: &CausalForestParams,
    nuis: &NuisanceEstimates,
) -> Result<(CateEstimate, Vec<CausalForestModel>)> {
    if plan.n() != data.n() {
        return Err(invalid_arg(format!(
            "fold plan covers {} rows, data has {}",
            plan.n(),
            data.n()
        )));
    }
    let c = local_center(data, nuis)?;
    let mut tau = vec![0.0; data.n()];
    let mut models = Vec::with_capacity(plan.k());
    for (k, split) in plan.splits().into_iter().enumerate() {
        let tr = &split.train_indices;
        let sub = CenteredData {
            y_res: tr.iter().map(|&i| c.y_res[i]).collect(),
            d_res: tr.iter().map(|&i| c.d_res[i]).collect(),
            d: tr.iter().map(|&i| c.d[i]).collect(),
        };
        let fold_params = CausalForestParams {
            seed: derive_seed(params.seed, k as u64),
            ..params.clone()
        };
        let model = fit_causal_forest_centered(data.x_rows(tr).view(), &sub, &fold_params)?;
        let pred = model.predict(data.x_rows(&split.estimate_indices).view())?;
        for (&i, v) in split.estimate_indices.iter().zip(pred) {
            tau[i] = v;
        }
        models.push(model);
    }
    let est = CateEstimate::new(
        tau,
        Method::CF,
        params.seed,
        fingerprint(&("CF", params, plan.seed())),
    )?;
    Ok((est, models))
}
