//! Datasets, result streams, and the attribute and evaluate drivers.

mod dataset;
mod report;
mod results;
mod run;

pub use dataset::{load_dataset, parse_dataset, Dataset, DatasetRecord};
pub use report::{evaluate, EvaluationReport, ExampleReport};
pub use results::{meta_path, parse_results, read_results, write_results, RunResult};
pub use run::{attribute_example, run_attribute, worker_count, AttributeConfig, Failure, Method, RunSummary, WORKERS_ENV};
