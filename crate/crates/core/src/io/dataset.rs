use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::{ContextPartition, Example};
use crate::error::{Error, Result};

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Groups of sources.
    pub context: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub warnings: Vec<String>,
}

fn to_example(record: DatasetRecord, line: usize, warnings: &mut Vec<String>) -> Result<Example> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, text) in record.context.iter().flatten().enumerate() {
        if let Some(first) = seen.insert(text.as_str(), i) {
            let message = format!("line {line} ({}): sources {first} and {i} are identical", record.id);
            log::warn!("{message}");
            warnings.push(message);
        }
    }
    let partition = ContextPartition::new(record.context.clone())
        .map_err(|e| Error::Dataset { line, message: e.to_string() })?;
    Ok(Example { id: record.id, query: record.query, partition, response: record.response })
}

/// Parses JSON lines; blank lines are ignored.
pub fn parse_dataset(reader: impl BufRead) -> Result<Dataset> {
    let mut dataset = Dataset::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| Error::Dataset { line: line_no, message: e.to_string() })?;
        let example = to_example(record, line_no, &mut dataset.warnings)?;
        dataset.examples.push(example);
    }
    Ok(dataset)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_dataset(BufReader::new(File::open(path)?))
}
