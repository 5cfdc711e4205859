//! Cost and wall-clock time across input resolutions.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub resolution: usize,
    pub params: u64,
    pub macs: u64,
    /// Seconds for one single-image forward pass, when timed.
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub rows: Vec<SweepRow>,
    /// MAC growth from the first to the last resolution.
    pub growth: f64,
    /// Pixel-count growth over the same span.
    pub pixel_growth: f64,
    pub monotone: bool,
}

impl SweepReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config {}", self.config_hash);
        let _ = writeln!(s, "{:>10}  {:>16}  {:>10}  {:>10}", "resolution", "macs", "gmacs", "seconds");
        for r in &self.rows {
            let secs = r.seconds.map_or("-".to_string(), |t| format!("{t:.3}"));
            let _ = writeln!(s, "{:>10}  {:>16}  {:>10.3}  {:>10}", r.resolution, r.macs, r.macs as f64 / 1e9, secs);
        }
        let _ = writeln!(
            s,
            "MAC growth {:.3}x over pixel growth {:.3}x, monotone: {}",
            self.growth, self.pixel_growth, self.monotone
        );
        s
    }

    pub fn macs_at(&self, resolution: usize) -> Option<u64> {
        self.rows.iter().find(|r| r.resolution == resolution).map(|r| r.macs)
    }
}

/// Square-input sweep. With `params`, each resolution is also timed with one
/// forward pass on a random image.
pub fn sweep(model: &Model, params: Option<&ParamStore<f32>>, resolutions: &[usize]) -> Result<SweepReport> {
    if resolutions.is_empty() {
        return Err(Error::config("sweep needs at least one resolution"));
    }
    let mut rows = Vec::with_capacity(resolutions.len());
    for &r in resolutions {
        let cost = super::mac_count(model, r, r)?;
        let seconds = match params {
            Some(p) => {
                let x: Tensor<f32> = Rng::new(r as u64).split("sweep").uniform_tensor(Shape::new(1, 3, r, r), 0.0, 1.0);
                let start = Instant::now();
                model.infer(p, &x)?;
                Some(start.elapsed().as_secs_f64())
            }
            None => None,
        };
        rows.push(SweepRow { resolution: r, params: cost.totals.params, macs: cost.totals.macs, seconds });
    }
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    let growth = last.macs as f64 / first.macs as f64;
    let pixel_growth = (last.resolution as f64 / first.resolution as f64).powi(2);
    let mut sorted = rows.clone();
    sorted.sort_by_key(|r| r.resolution);
    let monotone = sorted.windows(2).all(|w| w[0].resolution == w[1].resolution || w[0].macs < w[1].macs);
    Ok(SweepReport { config_hash: model.config.hash(), rows, growth, pixel_growth, monotone })
}
