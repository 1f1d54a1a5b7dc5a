use serde::{Deserialize, Serialize};

use crate::accel::rank_desc;
use crate::error::{Error, Result};

/// Average precision of the descending-score ranking against `relevant`.
pub fn average_precision(scores: &[f64], relevant: &[usize]) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Evaluation("average precision needs at least one relevant item".into()));
    }
    let mut is_relevant = vec![false; scores.len()];
    for &r in relevant {
        *is_relevant
            .get_mut(r)
            .ok_or_else(|| Error::Evaluation(format!("relevant index {r} out of range for {} scores", scores.len())))? =
            true;
    }
    let total = is_relevant.iter().filter(|&&r| r).count();
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, i) in rank_desc(scores).into_iter().enumerate() {
        if is_relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    /// `None` when every example was skipped.
    pub map: Option<f64>,
    pub evaluated: usize,
    /// Examples with no relevant items.
    pub skipped: usize,
}

/// Mean AP over `(scores, relevant)` pairs, skipping empty relevant sets.
pub fn mean_ap<'a>(examples: impl IntoIterator<Item = (&'a [f64], &'a [usize])>) -> Result<MapSummary> {
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for (scores, relevant) in examples {
        if relevant.is_empty() {
            skipped += 1;
        } else {
            sum += average_precision(scores, relevant)?;
            evaluated += 1;
        }
    }
    Ok(MapSummary { map: (evaluated > 0).then(|| sum / evaluated as f64), evaluated, skipped })
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Evaluation(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Evaluation("correlation needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Evaluation("correlation is undefined for zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
