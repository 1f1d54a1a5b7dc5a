use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::CostRecord;
use crate::error::{Error, Result};
use crate::eval::FlopsEstimate;

/// Attribution output for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub id: String,
    pub method: String,
    pub params: serde_json::Value,
    pub scores: Vec<f64>,
    pub response: String,
    pub response_tokens: Vec<u32>,
    /// `greedy` when generated by the target model, `given` when read from the dataset.
    pub decoding: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outliers: Option<Vec<usize>>,
    pub cost: CostRecord,
    pub counted_flops: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theoretical_flops: Option<FlopsEstimate>,
    pub seed: u64,
    pub target_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy_model: Option<String>,
}

pub fn write_results(path: impl AsRef<Path>, results: &[RunResult]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn parse_results(reader: impl BufRead) -> Result<Vec<RunResult>> {
    let mut results = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RunResult =
            serde_json::from_str(&line).map_err(|e| Error::Dataset { line: i + 1, message: e.to_string() })?;
        results.push(r);
    }
    Ok(results)
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<RunResult>> {
    parse_results(BufReader::new(File::open(path)?))
}

/// Where timings and failures of a run are written: `<out>.meta.json`.
pub fn meta_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{PassTokens, StageCost};

    fn sample() -> RunResult {
        let mut stage = StageCost::new("loo", "ref", 1234);
        stage.record_pass(PassTokens { uncached: 17, cached: 3, uncached_context: 9 });
        RunResult {
            id: "e1".into(),
            method: "loo".into(),
            params: serde_json::json!({"kv": false}),
            scores: vec![0.1, -2.5e-17, 1.0 / 3.0, f64::MAX],
            response: "ok".into(),
            response_tokens: vec![111, 107],
            decoding: "greedy".into(),
            outliers: Some(vec![3]),
            cost: CostRecord::single(stage),
            counted_flops: 41_956.0,
            theoretical_flops: Some(FlopsEstimate { flops: 0.7, speedup: 1.0 }),
            seed: 5,
            target_model: "ref".into(),
            proxy_model: None,
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut other = sample();
        other.id = "e2".into();
        other.outliers = None;
        other.proxy_model = Some("small".into());
        write_results(&path, &[sample(), other.clone()]).unwrap();
        assert_eq!(read_results(&path).unwrap(), vec![sample(), other]);
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(meta_path(Path::new("/tmp/out.jsonl")), PathBuf::from("/tmp/out.jsonl.meta.json"));
    }
}
