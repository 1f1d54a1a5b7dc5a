use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::results::RunResult;
use crate::error::{Error, Result};
use crate::eval::{average_precision, esd_outliers, mean_ap, EsdConfig, MapSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleReport {
    pub id: String,
    pub sources: usize,
    /// Outliers of the truth scores.
    pub relevant: Vec<usize>,
    /// `None` when there are no outliers.
    pub ap: Option<f64>,
    pub truth_flops: f64,
    pub pred_flops: f64,
    /// `None` when the candidate reports zero FLOPs.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub truth_method: String,
    pub pred_method: String,
    pub esd: EsdConfig,
    pub summary: MapSummary,
    pub mean_speedup: Option<f64>,
    /// Ids present in only one of the two streams.
    pub unmatched: Vec<String>,
    pub examples: Vec<ExampleReport>,
}

impl EvaluationReport {
    /// Aligned text table, one row per example plus a summary line.
    pub fn table(&self) -> String {
        let width = self.examples.iter().map(|e| e.id.len()).max().unwrap_or(2).max(2);
        let mut out = String::new();
        let fmt_opt = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |v| format!("{v:.digits$}"));
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>5}  {:>8}  {:>10}", "id", "sources", "n_out", "AP", "speedup");
        for e in &self.examples {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>5}  {:>8}  {:>10}",
                e.id,
                e.sources,
                e.relevant.len(),
                fmt_opt(e.ap, 4),
                fmt_opt(e.speedup, 2)
            );
        }
        let _ = writeln!(
            out,
            "{} vs {}: mAP {} over {} examples ({} without outliers skipped), mean speedup {}",
            self.pred_method,
            self.truth_method,
            fmt_opt(self.summary.map, 4),
            self.summary.evaluated,
            self.summary.skipped,
            fmt_opt(self.mean_speedup, 2)
        );
        out
    }
}

fn method_of(results: &[RunResult]) -> String {
    let mut names: Vec<&str> = results.iter().map(|r| r.method.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    names.join(",")
}

/// Compares candidate scores against ground-truth LOO scores: AP against the
/// outliers of the truth scores, mAP, and FLOPs speedup.
pub fn evaluate(truth: &[RunResult], pred: &[RunResult], esd: &EsdConfig) -> Result<EvaluationReport> {
    let by_id: HashMap<&str, &RunResult> = pred.iter().map(|r| (r.id.as_str(), r)).collect();
    if by_id.len() != pred.len() {
        return Err(Error::Evaluation("duplicate ids in candidate results".into()));
    }
    let truth_ids: HashMap<&str, ()> = truth.iter().map(|r| (r.id.as_str(), ())).collect();
    let mut unmatched: Vec<String> = truth
        .iter()
        .filter(|t| !by_id.contains_key(t.id.as_str()))
        .chain(pred.iter().filter(|p| !truth_ids.contains_key(p.id.as_str())))
        .map(|r| r.id.clone())
        .collect();
    unmatched.sort();

    let mut examples = Vec::new();
    for t in truth {
        let Some(p) = by_id.get(t.id.as_str()) else { continue };
        if t.scores.is_empty() {
            return Err(Error::Evaluation(format!("truth for {} has no scores", t.id)));
        }
        if t.scores.len() != p.scores.len() {
            return Err(Error::Evaluation(format!(
                "{}: truth has {} scores, candidate has {}",
                t.id,
                t.scores.len(),
                p.scores.len()
            )));
        }
        let relevant = esd_outliers(&t.scores, esd)?.outliers;
        let ap = if relevant.is_empty() { None } else { Some(average_precision(&p.scores, &relevant)?) };
        examples.push(ExampleReport {
            id: t.id.clone(),
            sources: t.scores.len(),
            ap,
            truth_flops: t.counted_flops,
            pred_flops: p.counted_flops,
            speedup: (p.counted_flops > 0.0).then(|| t.counted_flops / p.counted_flops),
            relevant,
        });
    }
    if examples.is_empty() {
        return Err(Error::Evaluation("truth and candidate results share no example ids".into()));
    }

    let summary = mean_ap(examples.iter().zip(truth.iter().filter(|t| by_id.contains_key(t.id.as_str()))).map(
        |(e, t)| (by_id[t.id.as_str()].scores.as_slice(), e.relevant.as_slice()),
    ))?;
    let speedups: Vec<f64> = examples.iter().filter_map(|e| e.speedup).collect();
    let mean_speedup = (!speedups.is_empty()).then(|| speedups.iter().sum::<f64>() / speedups.len() as f64);
    Ok(EvaluationReport {
        truth_method: method_of(truth),
        pred_method: method_of(pred),
        esd: *esd,
        summary,
        mean_speedup,
        unmatched,
        examples,
    })
}
