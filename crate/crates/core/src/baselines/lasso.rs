use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LASSO_TOLERANCE: f64 = 1e-8;
pub const LASSO_MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    /// `‖y - Xw - b‖₂` at the solution.
    pub residual_norm: f64,
    pub sweeps: usize,
}

/// `0.01 · max_j |x_jᵀ(y - ȳ)| / n`.
pub fn default_lambda(x: ArrayView2<f64>, y: ArrayView1<f64>) -> f64 {
    let n = y.len() as f64;
    let yc = &y - y.mean().unwrap_or(0.0);
    let xc = &x - &x.mean_axis(Axis(0)).expect("non-empty design");
    0.01 * xc.t().dot(&yc).iter().fold(0.0f64, |m, v| m.max(v.abs())) / n
}

/// `(1/2n)‖y - Xw - b‖² + λ‖w‖₁`.
pub fn lasso_objective(x: ArrayView2<f64>, y: ArrayView1<f64>, weights: &[f64], intercept: f64, lambda: f64) -> f64 {
    let w = ArrayView1::from(weights);
    let r = &y - &x.dot(&w) - intercept;
    r.dot(&r) / (2.0 * y.len() as f64) + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Lasso by cyclic coordinate descent with an unpenalized intercept.
pub fn lasso_fit(x: ArrayView2<f64>, y: ArrayView1<f64>, lambda: f64) -> Result<SurrogateFit> {
    fit(x, y, lambda, |_| {})
}

/// Same as [`lasso_fit`], calling `on_sweep` with the objective after each sweep.
pub(crate) fn fit(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    lambda: f64,
    mut on_sweep: impl FnMut(f64),
) -> Result<SurrogateFit> {
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return Err(Error::InvalidParameter(format!("lasso needs a non-empty design, got {n}x{d}")));
    }
    if y.len() != n {
        return Err(Error::InvalidParameter(format!("design has {n} rows but {} targets", y.len())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lasso inputs".into()));
    }

    let nf = n as f64;
    let x_mean = x.mean_axis(Axis(0)).expect("n > 0");
    let y_mean = y.mean().expect("n > 0");
    let xc: Array2<f64> = &x - &x_mean;
    let norms: Vec<f64> = xc.axis_iter(Axis(1)).map(|c| c.dot(&c) / nf).collect();

    let mut w = Array1::<f64>::zeros(d);
    let mut residual: Array1<f64> = &y - y_mean;
    let objective = |r: &Array1<f64>, w: &Array1<f64>| r.dot(r) / (2.0 * nf) + lambda * w.iter().map(|v| v.abs()).sum::<f64>();

    let mut sweeps = 0;
    while sweeps < LASSO_MAX_SWEEPS {
        sweeps += 1;
        let mut max_change = 0.0f64;
        for j in 0..d {
            if norms[j] == 0.0 {
                continue;
            }
            let col = xc.column(j);
            let old = w[j];
            let rho = col.dot(&residual) / nf + norms[j] * old;
            let new = soft_threshold(rho, lambda) / norms[j];
            if new != old {
                residual.scaled_add(old - new, &col);
                w[j] = new;
                max_change = max_change.max((new - old).abs());
            }
        }
        on_sweep(objective(&residual, &w));
        let scale = w.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if max_change <= LASSO_TOLERANCE * scale {
            break;
        }
    }

    let intercept = y_mean - x_mean.dot(&w);
    let weights = w.to_vec();
    if weights.iter().any(|v| !v.is_finite()) || !intercept.is_finite() {
        return Err(Error::NonFinite("lasso solution".into()));
    }
    let r = &y - &x.dot(&w) - intercept;
    Ok(SurrogateFit { weights, intercept, lambda, residual_norm: r.dot(&r).sqrt(), sweeps })
}
