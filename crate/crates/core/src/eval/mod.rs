//! Ground-truth outliers, ranking metrics, and FLOPs accounting.

mod esd;
mod flops;
mod metrics;
mod tdist;

pub use esd::{esd_outliers, grubbs_critical, EsdConfig, EsdIteration, EsdResult, EsdStop};
pub use flops::{counted_context_flops, counted_flops, theoretical_flops, FlopsEstimate, FlopsMethod, FlopsParams};
pub use metrics::{average_precision, mean_ap, pearson, MapSummary};
