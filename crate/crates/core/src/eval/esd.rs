use serde::{Deserialize, Serialize};

use super::tdist::t_upper_quantile;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsdConfig {
    /// Significance level.
    pub alpha: f64,
    /// Maximum number of outliers.
    pub k_max: usize,
}

impl Default for EsdConfig {
    fn default() -> Self {
        Self { alpha: 0.05, k_max: 50 }
    }
}

impl EsdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.alpha < 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("significance must lie in (0, 1), got {}", self.alpha)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsdIteration {
    /// Index (into the original values) of the tested maximum.
    pub index: usize,
    pub g: f64,
    pub g_crit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EsdStop {
    TooFewValues,
    NotSignificant,
    ZeroVariance,
    MaxOutliers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsdResult {
    /// Outliers in removal order.
    pub outliers: Vec<usize>,
    /// Every computed test, including the final non-significant one.
    pub iterations: Vec<EsdIteration>,
    pub stop: EsdStop,
}

impl EsdResult {
    pub fn n_out(&self) -> usize {
        self.outliers.len()
    }
}

/// Critical value of the one-sided Grubbs test on `n` values.
pub fn grubbs_critical(n: usize, alpha: f64) -> f64 {
    let nf = n as f64;
    let t = t_upper_quantile(alpha / (2.0 * nf), nf - 2.0);
    (nf - 1.0) * t / (nf.sqrt() * (nf - 2.0 + t * t).sqrt())
}

/// Generalized ESD test for large outliers: repeatedly test the current
/// maximum with Grubbs' statistic and remove it while significant.
pub fn esd_outliers(values: &[f64], config: &EsdConfig) -> Result<EsdResult> {
    config.validate()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("outlier test input".into()));
    }
    let mut result = EsdResult { outliers: Vec::new(), iterations: Vec::new(), stop: EsdStop::MaxOutliers };
    let mut remaining: Vec<usize> = (0..values.len()).collect();
    while result.outliers.len() < config.k_max {
        let n = remaining.len();
        if n < 3 {
            result.stop = EsdStop::TooFewValues;
            return Ok(result);
        }
        let (pos, &index) = remaining
            .iter()
            .enumerate()
            .fold(None::<(usize, &usize)>, |best, (p, i)| match best {
                Some((_, b)) if values[*b] >= values[*i] => best,
                _ => Some((p, i)),
            })
            .expect("n >= 3");
        let min = remaining.iter().map(|&i| values[i]).fold(f64::INFINITY, f64::min);
        if values[index] == min {
            result.stop = EsdStop::ZeroVariance;
            return Ok(result);
        }
        let nf = n as f64;
        let mean = remaining.iter().map(|&i| values[i]).sum::<f64>() / nf;
        let s = (remaining.iter().map(|&i| (values[i] - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
        if s == 0.0 {
            result.stop = EsdStop::ZeroVariance;
            return Ok(result);
        }
        let g = (values[index] - mean) / s;
        let g_crit = grubbs_critical(n, config.alpha);
        result.iterations.push(EsdIteration { index, g, g_crit });
        if g <= g_crit {
            result.stop = EsdStop::NotSignificant;
            return Ok(result);
        }
        result.outliers.push(index);
        remaining.remove(pos);
    }
    Ok(result)
}
