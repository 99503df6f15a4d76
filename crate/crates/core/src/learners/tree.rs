//! Weighted CART regression trees grown on presorted columns.
//!
//! Split search is exhaustive over the distinct values of every candidate
//! feature with midpoint thresholds. The criterion is the weighted
//! squared-error reduction; ties go to the lowest feature index, then the
//! lowest threshold.

use ndarray::ArrayView2;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, left).max(walk(nodes, right))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if row[feature] <= threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    pub(crate) fn predict_row_col(&self, data: &ColumnData, row: usize) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if data.cols[feature][row] <= threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| match r.as_slice() {
                Some(s) => self.predict_row(s),
                None => self.predict_row(&r.to_vec()),
            })
            .collect()
    }
}

/// Column-major copy of a design matrix with per-feature row orderings.
pub(crate) struct ColumnData {
    cols: Vec<Vec<f64>>,
    sorted: Vec<Vec<u32>>,
}

impl ColumnData {
    pub(crate) fn new(x: ArrayView2<'_, f64>) -> Self {
        let cols: Vec<Vec<f64>> = x.columns().into_iter().map(|c| c.to_vec()).collect();
        let sorted = cols
            .iter()
            .map(|c| {
                let mut idx: Vec<u32> = (0..c.len() as u32).collect();
                idx.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        ColumnData { cols, sorted }
    }

    pub(crate) fn n_rows(&self) -> usize {
        self.cols.first().map_or(0, Vec::len)
    }

    pub(crate) fn n_features(&self) -> usize {
        self.cols.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_node_size: usize,
    /// Features tried per node; `>= p` means all of them.
    pub mtry: usize,
}

struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Grow a tree on `samples` (row indices, repeats allowed).
pub(crate) fn grow(
    data: &ColumnData,
    target: &[f64],
    weight: &[f64],
    samples: &[usize],
    params: TreeParams,
    mut rng: Option<&mut Rng>,
) -> RegressionTree {
    let p = data.n_features();
    let m = samples.len();
    let min_node = params.min_node_size.max(1);

    // Slots sorted by each feature, built from the presorted rows.
    let n = data.n_rows();
    let mut start_of_row = vec![0usize; n + 1];
    for &r in samples {
        start_of_row[r + 1] += 1;
    }
    for r in 0..n {
        start_of_row[r + 1] += start_of_row[r];
    }
    let mut slots_by_row = vec![0u32; m];
    let mut fill = start_of_row.clone();
    for (s, &r) in samples.iter().enumerate() {
        slots_by_row[fill[r]] = s as u32;
        fill[r] += 1;
    }
    let mut orders: Vec<Vec<u32>> = data
        .sorted
        .iter()
        .map(|rows| {
            let mut o = Vec::with_capacity(m);
            for &r in rows {
                let r = r as usize;
                o.extend_from_slice(&slots_by_row[start_of_row[r]..start_of_row[r + 1]]);
            }
            o
        })
        .collect();

    let t: Vec<f64> = samples.iter().map(|&r| target[r]).collect();
    let w: Vec<f64> = samples.iter().map(|&r| weight[r]).collect();

    let mut nodes = vec![TreeNode::Leaf { value: 0.0 }];
    let mut stack = vec![(0usize, 0usize, m, 0usize)];
    let mut go_left = vec![false; m];
    let mut buf: Vec<u32> = Vec::with_capacity(m);
    let mut all_features: Vec<usize> = (0..p).collect();

    while let Some((node, start, end, depth)) = stack.pop() {
        let (mut sw, mut swt, mut swtt) = (0.0, 0.0, 0.0);
        for &s in &orders[0][start..end] {
            let s = s as usize;
            sw += w[s];
            swt += w[s] * t[s];
            swtt += w[s] * t[s] * t[s];
        }
        let value = if sw > 0.0 { swt / sw } else { 0.0 };
        let size = end - start;
        let sst = swtt - swt * swt / sw.max(f64::MIN_POSITIVE);
        let can_split = params.max_depth.is_none_or(|d| depth < d)
            && size >= 2 * min_node
            && sw > 0.0
            && sst > 0.0;
        if !can_split {
            nodes[node] = TreeNode::Leaf { value };
            continue;
        }

        let candidates: &[usize] = if params.mtry < p {
            let rng = rng
                .as_deref_mut()
                .expect("feature subsampling requires an rng");
            let mut picked = index::sample(rng, p, params.mtry.max(1)).into_vec();
            picked.sort_unstable();
            all_features = picked;
            &all_features
        } else {
            if all_features.len() != p {
                all_features = (0..p).collect();
            }
            &all_features
        };

        let parent_score = swt * swt / sw;
        let mut best: Option<Best> = None;
        for &f in candidates {
            let col = &data.cols[f];
            let ord = &orders[f][start..end];
            let (mut lw, mut lwt) = (0.0, 0.0);
            for j in 0..size - 1 {
                let s = ord[j] as usize;
                lw += w[s];
                lwt += w[s] * t[s];
                let nl = j + 1;
                if nl < min_node {
                    continue;
                }
                if size - nl < min_node {
                    break;
                }
                let a = col[samples[s]];
                let b = col[samples[ord[j + 1] as usize]];
                if a == b {
                    continue;
                }
                let rw = sw - lw;
                if lw <= 0.0 || rw <= 0.0 {
                    continue;
                }
                let rwt = swt - lwt;
                let gain = lwt * lwt / lw + rwt * rwt / rw - parent_score;
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mut threshold = a + (b - a) / 2.0;
                    if threshold >= b {
                        threshold = a;
                    }
                    best = Some(Best {
                        gain,
                        feature: f,
                        threshold,
                    });
                }
            }
        }

        let Some(best) = best.filter(|b| b.gain > 1e-12 * sst) else {
            nodes[node] = TreeNode::Leaf { value };
            continue;
        };

        let col = &data.cols[best.feature];
        for &s in &orders[0][start..end] {
            let s = s as usize;
            go_left[s] = col[samples[s]] <= best.threshold;
        }
        let mut n_left = 0;
        for ord in orders.iter_mut() {
            buf.clear();
            let range = &mut ord[start..end];
            n_left = 0;
            for idx in 0..range.len() {
                let s = range[idx];
                if go_left[s as usize] {
                    range[n_left] = s;
                    n_left += 1;
                } else {
                    buf.push(s);
                }
            }
            range[n_left..].copy_from_slice(&buf);
        }

        let left = nodes.len();
        let right = left + 1;
        nodes.push(TreeNode::Leaf { value: 0.0 });
        nodes.push(TreeNode::Leaf { value: 0.0 });
        nodes[node] = TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        stack.push((right, start + n_left, end, depth + 1));
        stack.push((left, start, start + n_left, depth + 1));
    }
    RegressionTree { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn fit_all(
        x: &Array2<f64>,
        y: &[f64],
        w: &[f64],
        max_depth: Option<usize>,
        min_node: usize,
    ) -> RegressionTree {
        let data = ColumnData::new(x.view());
        let samples: Vec<usize> = (0..y.len()).collect();
        grow(
            &data,
            y,
            w,
            &samples,
            TreeParams {
                max_depth,
                min_node_size: min_node,
                mtry: usize::MAX,
            },
            None,
        )
    }

    #[test]
    fn separable_step_is_found() {
        let x = array![[-1.0], [-1.0], [1.0], [1.0], [-1.0], [1.0]];
        let y = [0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let tree = fit_all(&x, &y, &[1.0; 6], Some(1), 1);
        match tree.nodes()[0] {
            TreeNode::Split {
                feature, threshold, ..
            } => {
                assert_eq!(feature, 0);
                assert_eq!(threshold, 0.0);
            }
            _ => panic!("expected a split"),
        }
        assert_eq!(tree.predict_row(&[-1.0]), 0.0);
        assert_eq!(tree.predict_row(&[1.0]), 1.0);
    }

    #[test]
    fn ties_go_to_lowest_feature() {
        // Both columns separate y identically.
        let x = array![[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]];
        let tree = fit_all(&x, &[0.0, 0.0, 5.0, 5.0], &[1.0; 4], Some(1), 1);
        assert!(matches!(
            tree.nodes()[0],
            TreeNode::Split { feature: 0, .. }
        ));
    }

    #[test]
    fn constant_target_is_a_leaf() {
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let tree = fit_all(&x, &[2.5; 4], &[1.0; 4], None, 1);
        assert_eq!(tree.nodes().len(), 1);
        assert_eq!(tree.predict_row(&[10.0]), 2.5);
    }

    #[test]
    fn weighted_leaf_means() {
        let x = array![[0.0], [0.0], [1.0], [1.0]];
        let y = [1.0, 3.0, 10.0, 20.0];
        let tree = fit_all(&x, &y, &[3.0, 1.0, 1.0, 1.0], Some(1), 1);
        assert!((tree.predict_row(&[0.0]) - 1.5).abs() < 1e-12);
        assert!((tree.predict_row(&[1.0]) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn min_node_size_is_respected() {
        let x = Array2::from_shape_fn((20, 1), |(i, _)| i as f64);
        let y: Vec<f64> = (0..20).map(|i| (i * i) as f64).collect();
        let tree = fit_all(&x, &y, &[1.0; 20], None, 5);
        // Every leaf holds at least 5 of the training rows.
        let mut counts = std::collections::HashMap::new();
        for i in 0..20 {
            *counts
                .entry(tree.predict_row(&[i as f64]).to_bits())
                .or_insert(0) += 1;
        }
        assert!(counts.values().all(|&c| c >= 5), "{counts:?}");
    }
}
