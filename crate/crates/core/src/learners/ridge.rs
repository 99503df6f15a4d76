//! Weighted ridge regression with an unpenalized intercept.
//!
//! Minimizes `Σ wᵢ (yᵢ − a − xᵢᵀβ)² + λ ‖β̃‖²` where `β̃` are the
//! coefficients on weighted-standardized columns and the weights have been
//! normalized to mean one. Constant columns get a zero coefficient.

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{CateError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl RidgeModel {
    pub fn predict_row(&self, row: impl IntoIterator<Item = f64>) -> f64 {
        self.intercept
            + row
                .into_iter()
                .zip(&self.coefficients)
                .map(|(v, c)| v * c)
                .sum::<f64>()
    }
}

pub(crate) fn fit(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    w: &[f64],
    penalty: f64,
) -> Result<RidgeModel> {
    let (n, p) = x.dim();
    let sw: f64 = w.iter().sum();
    let x_mean: Vec<f64> = (0..p)
        .map(|j| x.column(j).iter().zip(w).map(|(v, wi)| v * wi).sum::<f64>() / sw)
        .collect();
    let y_mean = y.iter().zip(w).map(|(v, wi)| v * wi).sum::<f64>() / sw;
    let scale: Vec<f64> = (0..p)
        .map(|j| {
            let var = x
                .column(j)
                .iter()
                .zip(w)
                .map(|(v, wi)| wi * (v - x_mean[j]).powi(2))
                .sum::<f64>()
                / sw;
            var.sqrt()
        })
        .collect();
    let active: Vec<usize> = (0..p)
        .filter(|&j| scale[j] > 1e-12 * (1.0 + x_mean[j].abs()))
        .collect();

    let mut coefficients = vec![0.0; p];
    if !active.is_empty() {
        let q = active.len();
        let mut a = DMatrix::<f64>::zeros(n, q);
        let mut b = DVector::<f64>::zeros(n);
        for i in 0..n {
            let sq = w[i].sqrt();
            for (k, &j) in active.iter().enumerate() {
                a[(i, k)] = sq * (x[[i, j]] - x_mean[j]) / scale[j];
            }
            b[i] = sq * (y[i] - y_mean);
        }
        let mut gram = a.transpose() * &a;
        for k in 0..q {
            gram[(k, k)] += penalty;
        }
        let rhs = a.transpose() * &b;
        let beta = match gram.clone().cholesky() {
            Some(ch) if penalty > 0.0 => ch.solve(&rhs),
            _ => {
                // Least squares through the SVD of the scaled design handles
                // rank deficiency at λ = 0 with a minimum-norm solution.
                if penalty > 0.0 {
                    gram.svd(true, true)
                        .solve(&rhs, 1e-12)
                        .map_err(|e| CateError::Estimation(format!("ridge solve failed: {e}")))?
                } else {
                    a.svd(true, true).solve(&b, 1e-12).map_err(|e| {
                        CateError::Estimation(format!("least squares solve failed: {e}"))
                    })?
                }
            }
        };
        for (k, &j) in active.iter().enumerate() {
            coefficients[j] = beta[k] / scale[j];
        }
    }
    let intercept = y_mean
        - coefficients
            .iter()
            .zip(&x_mean)
            .map(|(c, m)| c * m)
            .sum::<f64>();
    Ok(RidgeModel {
        intercept,
        coefficients,
    })
}
