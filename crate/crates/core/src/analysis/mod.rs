//! Cost model, effective receptive field probe and resolution sweep.

pub mod cost;
pub mod erf;
pub mod sweep;

pub use cost::{mac_count, param_count, CostReport, CostRow, CostTotals};
pub use erf::{erf, ErfConfig, ErfMap, ErfSummary, Window};
pub use sweep::{sweep, SweepReport, SweepRow};
