//! Effective receptive field probe.
//!
//! For a stage tag and a location in that stage's feature map, the probe
//! differentiates the channel sum of the feature at that location with
//! respect to the input image and averages `sum_c |grad|` over random inputs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{Model, Stage};
use crate::params::{Ctx, ParamStore, ParamVars};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub struct ErfConfig {
    pub probes: usize,
    pub seed: u64,
    /// Treat globally pooled gate statistics (channel attention, gating
    /// branches) as constants, so the map shows the convolutional path only.
    pub detach_global_gates: bool,
}

impl Default for ErfConfig {
    fn default() -> Self {
        ErfConfig { probes: 100, seed: 0, detach_global_gates: true }
    }
}

/// Window of input pixels a stage location can see through convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    /// Side length of the square window.
    pub side: usize,
    /// Input-space centre of the window, `(row, col)`.
    pub center: (usize, usize),
}

impl Window {
    pub fn contains(&self, h: usize, w: usize) -> bool {
        let r = (self.side / 2) as isize;
        let (ch, cw) = (self.center.0 as isize, self.center.1 as isize);
        (h as isize - ch).abs() <= r && (w as isize - cw).abs() <= r
    }
}

#[derive(Clone, Debug)]
pub struct ErfMap {
    pub stage: Stage,
    pub location: (usize, usize),
    /// `(1, 1, H, W)` mean absolute input gradient.
    pub grad_magnitude: Tensor<f64>,
    /// `None` when the stage has global (attention) support.
    pub analytic: Option<Window>,
    pub probes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErfSummary {
    pub stage: String,
    pub location: [usize; 2],
    pub resolution: [usize; 2],
    pub probes: usize,
    pub support_fraction: f64,
    pub support_pixels: usize,
    /// Side of the analytic window, absent for global stages.
    pub analytic_bound: Option<usize>,
    pub within_bound: Option<bool>,
}

impl ErfMap {
    pub fn support(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.grad_magnitude.shape().w();
        self.grad_magnitude.data().iter().enumerate().filter(|(_, &v)| v > 0.0).map(move |(i, _)| (i / w, i % w))
    }

    pub fn support_pixels(&self) -> usize {
        self.support().count()
    }

    pub fn support_fraction(&self) -> f64 {
        self.support_pixels() as f64 / self.grad_magnitude.numel() as f64
    }

    /// Whether every pixel with nonzero gradient lies inside the analytic window.
    pub fn within_bound(&self) -> Option<bool> {
        self.analytic.map(|win| self.support().all(|(h, w)| win.contains(h, w)))
    }

    pub fn summary(&self) -> ErfSummary {
        let s = self.grad_magnitude.shape();
        ErfSummary {
            stage: self.stage.to_string(),
            location: [self.location.0, self.location.1],
            resolution: [s.h(), s.w()],
            probes: self.probes,
            support_fraction: self.support_fraction(),
            support_pixels: self.support_pixels(),
            analytic_bound: self.analytic.map(|w| w.side),
            within_bound: self.within_bound(),
        }
    }
}

/// Receptive-field side and input stride at the output of `stage`, or `None`
/// once the latent attention has been applied.
pub fn conv_receptive_field(model: &Model, stage: Stage) -> Option<(usize, usize)> {
    let c = &model.config;
    // stem 3x3
    let (mut rf, mut jump) = (3usize, 1usize);
    if stage == Stage::Stem {
        return Some((rf, jump));
    }
    for i in 0..4 {
        // two depthwise 3x3 per LFE; all other layers are pointwise
        rf += 4 * jump * c.encoder_depths[i];
        if stage == Stage::Encoder(i) {
            return Some((rf, jump));
        }
        // 3x3 stride 2
        rf += 2 * jump;
        jump *= 2;
    }
    match stage {
        Stage::LatentIn => Some((rf, jump)),
        _ => None,
    }
}

/// Analytic window for `location` of `stage`, in input coordinates.
pub fn analytic_window(model: &Model, stage: Stage, location: (usize, usize)) -> Option<Window> {
    conv_receptive_field(model, stage)
        .map(|(side, jump)| Window { side, center: (location.0 * jump, location.1 * jump) })
}

pub fn erf<T: Scalar>(
    model: &Model,
    params: &ParamStore<T>,
    stage: Stage,
    location: (usize, usize),
    resolution: (usize, usize),
    cfg: &ErfConfig,
) -> Result<ErfMap> {
    if cfg.probes == 0 {
        return Err(Error::config("erf needs at least one probe"));
    }
    let shape = Shape::new(1, 3, resolution.0, resolution.1);
    Model::check_input(shape)?;
    let pv = ParamVars::constants(params);
    let root = Rng::new(cfg.seed).split("erf");
    let maps: Vec<Vec<f64>> = (0..cfg.probes)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let x: Tensor<T> = root.split_index("probe", i as u64).uniform_tensor(shape, 0.0, 1.0);
            let tape = Tape::new();
            let mut cx = Ctx::new(&tape, &pv);
            cx.detach_global_gates = cfg.detach_global_gates;
            let xv = tape.leaf(x);
            let feat = model.forward_to(&cx, &xv, stage, &mut Vec::new())?;
            let target = tape.pick_location(&feat, location.0, location.1)?;
            let g = tape.backward(&target)?.get(&xv)?;
            let plane = shape.plane();
            Ok((0..plane).map(|p| (0..3).map(|c| g.data()[c * plane + p].as_f64().abs()).sum()).collect())
        })
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; shape.plane()];
    for m in &maps {
        for (a, v) in mean.iter_mut().zip(m) {
            *a += v;
        }
    }
    for a in &mut mean {
        *a /= cfg.probes as f64;
    }
    Ok(ErfMap {
        stage,
        location,
        grad_magnitude: Tensor::from_vec(Shape::new(1, 1, resolution.0, resolution.1), mean)?,
        analytic: analytic_window(model, stage, location),
        probes: cfg.probes,
    })
}

/// Centre location of `stage`'s feature map for an input of `resolution`.
pub fn stage_center(stage: Stage, resolution: (usize, usize)) -> (usize, usize) {
    let stride = match stage {
        Stage::Stem | Stage::Output => 1,
        Stage::Encoder(i) | Stage::Decoder(i) => 1 << i,
        Stage::LatentIn | Stage::LatentAfter(_) => crate::model::LATENT_STRIDE,
    };
    (resolution.0 / stride / 2, resolution.1 / stride / 2)
}
