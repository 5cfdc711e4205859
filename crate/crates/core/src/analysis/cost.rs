//! Parameter and multiply-accumulate accounting.
//!
//! One MAC is one multiply-accumulate. Element-wise ops, softmax, norms and
//! activations are not counted. `flops_2x` is twice the MAC total.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub path: String,
    pub params: u64,
    pub macs: u64,
}

impl CostRow {
    pub fn new(path: &str, params: u64, macs: u64) -> Self {
        CostRow { path: path.to_string(), params, macs }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub params: u64,
    pub macs: u64,
    pub flops_2x: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub config_hash: String,
    pub resolution: [usize; 2],
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

impl CostReport {
    pub fn from_rows(config_hash: String, resolution: [usize; 2], rows: Vec<CostRow>) -> Self {
        let params = rows.iter().map(|r| r.params).sum();
        let macs: u64 = rows.iter().map(|r| r.macs).sum();
        CostReport { config_hash, resolution, rows, totals: CostTotals { params, macs, flops_2x: 2 * macs } }
    }

    /// Rows merged by their first `depth` dotted path components.
    pub fn grouped(&self, depth: usize) -> Vec<CostRow> {
        let mut out: Vec<CostRow> = Vec::new();
        for r in &self.rows {
            let key = r.path.split('.').take(depth).collect::<Vec<_>>().join(".");
            match out.last_mut() {
                Some(last) if last.path == key => {
                    last.params += r.params;
                    last.macs += r.macs;
                }
                _ => out.push(CostRow { path: key, params: r.params, macs: r.macs }),
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table; `depth` controls row grouping (0 for every row).
    pub fn to_text(&self, depth: usize) -> String {
        let rows = if depth == 0 { self.rows.clone() } else { self.grouped(depth) };
        let width = rows.iter().map(|r| r.path.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "config {}  resolution {}x{}  (MAC = multiply-accumulate; FLOP = 2 MAC)",
            self.config_hash, self.resolution[0], self.resolution[1]
        );
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", "path", "params", "macs");
        for r in &rows {
            let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", r.path, r.params, r.macs);
        }
        let t = &self.totals;
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", "total", t.params, t.macs);
        let _ = writeln!(
            s,
            "params {:.3}M  MACs {:.3}G  FLOPs(2x) {:.3}G",
            t.params as f64 / 1e6,
            t.macs as f64 / 1e9,
            t.flops_2x as f64 / 1e9
        );
        s
    }
}

/// Parameter rows; MACs are reported at the smallest legal input (16x16).
pub fn param_count(model: &Model) -> Result<CostReport> {
    mac_count(model, 16, 16)
}

pub fn mac_count(model: &Model, h: usize, w: usize) -> Result<CostReport> {
    Ok(CostReport::from_rows(model.config.hash(), [h, w], model.cost_rows(h, w)?))
}
